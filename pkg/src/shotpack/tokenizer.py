"""Byte-level BPE tokenizer with a small learned merge table.

Ids 0..255 are raw bytes, so every string round-trips exactly. Merges never
cross a pre-token boundary (a run of spaces followed by a run of letters, or
any single other character), which keeps punctuation and digits byte-level.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from functools import lru_cache

_PRETOKEN = re.compile(r" ?[a-z]+| +|[^ a-z]", re.ASCII)


class ByteBPETokenizer:
    def __init__(self, merges: list[tuple[int, int]] | None = None):
        self.merges = [tuple(m) for m in (merges or [])]
        self.ranks = {m: i for i, m in enumerate(self.merges)}
        self.pieces: list[bytes] = [bytes([i]) for i in range(256)]
        for a, b in self.merges:
            self.pieces.append(self.pieces[a] + self.pieces[b])
        self._encode_chunk = lru_cache(maxsize=65536)(self._encode_chunk_uncached)

    @property
    def vocab_size(self) -> int:
        return 256 + len(self.merges)

    @classmethod
    def train(cls, texts, vocab_size: int = 512) -> ByteBPETokenizer:
        """Greedy BPE; ties on pair frequency break toward the smaller pair ids."""
        if vocab_size < 256:
            raise ValueError("vocab_size must cover the 256 byte tokens")
        words = Counter()
        for text in texts:
            for chunk in _PRETOKEN.findall(text):
                words[tuple(chunk.encode())] += 1
        words = {w: c for w, c in words.items() if len(w) > 1}
        merges = []
        next_id = 256
        while next_id < vocab_size:
            pairs = Counter()
            for w, c in words.items():
                for pair in zip(w, w[1:]):
                    pairs[pair] += c
            if not pairs:
                break
            best = min(pairs, key=lambda p: (-pairs[p], p))
            if pairs[best] < 2:
                break
            merges.append(best)
            merged = {}
            for w, c in words.items():
                out, i = [], 0
                while i < len(w):
                    if i + 1 < len(w) and (w[i], w[i + 1]) == best:
                        out.append(next_id)
                        i += 2
                    else:
                        out.append(w[i])
                        i += 1
                if len(out) > 1:
                    merged[tuple(out)] = merged.get(tuple(out), 0) + c
            words = merged
            next_id += 1
        return cls(merges)

    def _encode_chunk_uncached(self, chunk: str) -> tuple[int, ...]:
        ids = list(chunk.encode())
        while len(ids) > 1:
            best, best_rank = None, None
            for i in range(len(ids) - 1):
                r = self.ranks.get((ids[i], ids[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            ids[best:best + 2] = [256 + best_rank]
        return tuple(ids)

    def encode(self, text: str) -> list[int]:
        out: list[int] = []
        for chunk in _PRETOKEN.findall(text):
            out.extend(self._encode_chunk(chunk))
        return out

    def decode_bytes(self, ids) -> bytes:
        return b"".join(self.pieces[int(i)] for i in ids)

    def decode(self, ids) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def to_json(self) -> str:
        return json.dumps({"merges": [list(m) for m in self.merges]})

    @classmethod
    def from_json(cls, s: str) -> ByteBPETokenizer:
        return cls([tuple(m) for m in json.loads(s)["merges"]])
