"""Many-shot prompted inference with a reusable key/value prompt cache."""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .model import ContextLengthError, ForwardCounter, LoraAdapter, ModelParams, forward
from .packing import Example, PromptTemplate, pack_examples, render_example


def prompt_key(tokens) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype=np.int32).tobytes()).hexdigest()[:24]


@dataclass
class KvCache:
    """Per-layer keys/values for a prompt prefix of ``length`` tokens."""

    layers: list[tuple[np.ndarray, np.ndarray]]
    prompt: tuple[int, ...]
    key: str
    fingerprint: str

    @property
    def length(self) -> int:
        return len(self.prompt)


@dataclass
class Generation:
    tokens: list[int]
    logprobs: list[float]
    n2: int  # positions processed after the cached prompt: query + emitted tokens
    truncated: bool = False
    stopped: bool = False


@dataclass
class LabelScore:
    label: str
    index: int
    score: float | None
    error: str | None = None


@dataclass
class Prediction:
    text: str
    ranked: list[LabelScore] | None = None
    generation: Generation | None = None


class CacheStore:
    """Prompt-cache map keyed by (prompt hash, model fingerprint).

    Concurrent readers are allowed; a prefill for a missing key runs once and
    duplicate requests wait for it. With ``max_entries`` set, least recently
    used entries are evicted.
    """

    def __init__(self, max_entries: int | None = None):
        self.max_entries = max_entries
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._inflight: dict = {}
        self.hits = 0
        self.misses = 0

    def __len__(self) -> int:
        return len(self._data)

    def get_or_create(self, key, factory: Callable[[], KvCache]) -> KvCache:
        while True:
            with self._lock:
                if key in self._data:
                    self._data.move_to_end(key)
                    self.hits += 1
                    return self._data[key]
                ev = self._inflight.get(key)
                if ev is None:
                    ev = self._inflight[key] = threading.Event()
                    self.misses += 1
                    owner = True
                else:
                    owner = False
            if not owner:
                ev.wait()
                continue
            try:
                value = factory()
                with self._lock:
                    self._data[key] = value
                    if self.max_entries is not None:
                        while len(self._data) > self.max_entries:
                            self._data.popitem(last=False)
                return value
            finally:
                with self._lock:
                    del self._inflight[key]
                ev.set()


class InferenceEngine:
    def __init__(self, params: ModelParams, adapter: LoraAdapter | None = None,
                 store: CacheStore | None = None):
        self.params = params
        self.adapter = adapter
        self.store = store if store is not None else CacheStore()
        self.counter = ForwardCounter()
        fp = params.fingerprint()
        self.fingerprint = fp + ":" + (adapter.fingerprint() if adapter is not None else "none")

    @property
    def n_ctx(self) -> int:
        return self.params.config.n_ctx

    def _run(self, tokens, past, counter=None):
        with tn.no_grad():
            logits, kv = forward(self.params, np.asarray(tokens, dtype=np.int64)[None, :],
                                 self.adapter, past=past or None,
                                 counter=counter or self.counter, return_kv=True)
        return logits.data[0], kv

    # -------------------------------------------------------------- cache

    def prefill_cache(self, prompt) -> KvCache:
        """Process ``prompt`` once; later calls with the same prompt are cache hits."""
        prompt = tuple(int(t) for t in prompt)
        if len(prompt) > self.n_ctx:
            raise ContextLengthError(f"prompt of {len(prompt)} tokens exceeds the {self.n_ctx}-token window")
        key = prompt_key(prompt)

        def build():
            if not prompt:
                return KvCache([], prompt, key, self.fingerprint)
            _, kv = self._run(prompt, None)
            return KvCache(kv, prompt, key, self.fingerprint)

        return self.store.get_or_create((key, self.fingerprint), build)

    def _check(self, cache: KvCache) -> None:
        if cache.fingerprint != self.fingerprint:
            raise ValueError("cache was built for a different model or adapter")

    def continuation_logits(self, cache: KvCache, tokens) -> np.ndarray:
        """Logits for ``tokens`` placed after the cached prompt, shape (len(tokens), V)."""
        self._check(cache)
        if cache.length + len(tokens) > self.n_ctx:
            raise ContextLengthError("continuation overflows the context window")
        logits, _ = self._run(tokens, cache.layers)
        return logits

    # -------------------------------------------------------------- decoding

    def decode_greedy(self, cache: KvCache, query, max_new: int, stop: Sequence[int] = ()) -> Generation:
        """Argmax decoding after ``cache`` + ``query``.

        Every emitted token is fed back, so exactly ``len(query) + len(tokens)``
        positions are processed. Stops after emitting a token in ``stop``, after
        ``max_new`` tokens, or when the window is full (``truncated``).
        """
        self._check(cache)
        query = [int(t) for t in query]
        if max_new <= 0:
            return Generation([], [], 0)
        if not query and cache.length == 0:
            raise ValueError("nothing to condition on: empty prompt and query")
        if cache.length + len(query) > self.n_ctx:
            raise ContextLengthError("prompt and query overflow the context window")
        logits, kv = self._run(query, cache.layers) if query else (None, cache.layers)
        last = logits[-1] if logits is not None else None
        if last is None:
            raise ValueError("an empty query needs a non-empty prompt ending in logits")
        out, lps = [], []
        stop = set(stop)
        n2 = len(query)
        truncated = stopped = False
        while True:
            lp = last - last.max()
            lp = lp - np.log(np.exp(lp).sum())
            tok = int(np.argmax(last))
            out.append(tok)
            lps.append(float(lp[tok]))
            if cache.length + n2 + 1 > self.n_ctx:
                truncated = True
                break
            logits, kv = self._run([tok], kv)
            n2 += 1
            last = logits[-1]
            if tok in stop:
                stopped = True
                break
            if len(out) >= max_new:
                break
        return Generation(out, lps, n2, truncated, stopped)

    def decode_greedy_uncached(self, tokens, max_new: int, stop: Sequence[int] = (),
                               counter: ForwardCounter | None = None) -> list[int]:
        """Reference decoder: re-runs the full sequence for every emitted token."""
        seq = [int(t) for t in tokens]
        out = []
        stop = set(stop)
        for _ in range(max_new):
            if len(seq) > self.n_ctx:
                break
            logits, _ = self._run(seq, None, counter or ForwardCounter())
            tok = int(np.argmax(logits[-1]))
            out.append(tok)
            seq.append(tok)
            if tok in stop:
                break
        return out

    # -------------------------------------------------------------- scoring

    def score_labels(self, cache: KvCache, query, label_tokens: Sequence[Sequence[int]],
                     labels: Sequence[str] | None = None) -> list[LabelScore]:
        """Rank labels by mean log-probability of their tokens after prompt + query.

        Ties go to the lower label index. Labels that do not fit in the window
        get an error entry and rank last.
        """
        self._check(cache)
        if not label_tokens:
            raise ValueError("empty label set")
        labels = list(labels) if labels is not None else [str(i) for i in range(len(label_tokens))]
        query = [int(t) for t in query]
        if not query:
            raise ValueError("score_labels needs a non-empty query")
        if cache.length + len(query) > self.n_ctx:
            raise ContextLengthError("prompt and query overflow the context window")
        q_logits, kv = self._run(query, cache.layers)
        first = q_logits[-1] - q_logits[-1].max()
        first = first - np.log(np.exp(first).sum())
        scores: list[LabelScore | None] = [None] * len(labels)
        groups: dict[int, list[int]] = {}
        label_tokens = [[int(t) for t in toks] for toks in label_tokens]
        for i, toks in enumerate(label_tokens):
            if not toks:
                scores[i] = LabelScore(labels[i], i, None, "label renders to no tokens")
            elif cache.length + len(query) + len(toks) - 1 > self.n_ctx:
                scores[i] = LabelScore(labels[i], i, None, "label does not fit in the window")
            elif len(toks) == 1:
                scores[i] = LabelScore(labels[i], i, float(first[toks[0]]))
            else:
                groups.setdefault(len(toks), []).append(i)
        # labels of equal length are scored together in one batched continuation
        for length, idx in sorted(groups.items()):
            arr = np.asarray([label_tokens[i] for i in idx], dtype=np.int64)
            with tn.no_grad():
                lg = forward(self.params, arr[:, :-1], self.adapter, past=kv,
                             counter=self.counter).data
            lg = lg - lg.max(axis=-1, keepdims=True)
            lg = lg - np.log(np.exp(lg).sum(axis=-1, keepdims=True))
            picked = np.take_along_axis(lg, arr[:, 1:, None], axis=-1)[..., 0].sum(axis=1)
            for row, i in enumerate(idx):
                total = float(first[arr[row, 0]]) + float(picked[row])
                scores[i] = LabelScore(labels[i], i, total / length)
        return sorted(scores, key=lambda s: (s.score is None, -(s.score or 0.0), s.index))

    # -------------------------------------------------------------- end to end

    def generate_with_prompt(self, context: Sequence[Example], query: Example,
                             template: PromptTemplate, tokenizer, *, mode: str = "likelihood",
                             label_set: Sequence[str] | None = None, max_new: int = 32) -> Prediction:
        """Predict the target of ``query`` given ``context`` demonstrations.

        Classification (a label set is known) uses likelihood ranking unless
        ``mode="decode"``; otherwise the target is generated greedily up to the
        end-of-target delimiter.
        """
        prompt = build_prompt(context, template, tokenizer)
        if len(prompt) > self.n_ctx:
            raise ContextLengthError(f"{len(context)}-shot prompt needs {len(prompt)} tokens, "
                                     f"window is {self.n_ctx}; reduce the shot count")
        cache = self.prefill_cache(prompt)
        q_tokens, _ = render_example(Example(query.input, "?", query.task), template, tokenizer)
        labels = label_set if label_set is not None else query.labels
        if labels is not None and mode == "likelihood":
            delim = tokenizer.encode(template.target_suffix)[:1]
            ranked = self.score_labels(cache, q_tokens,
                                       [tokenizer.encode(lab) + delim for lab in labels], labels)
            return Prediction(ranked[0].label, ranked=ranked)
        stop = tokenizer.encode(template.target_suffix)[:1]
        gen = self.decode_greedy(cache, q_tokens, max_new, stop)
        toks = gen.tokens[:-1] if gen.stopped else gen.tokens
        return Prediction(normalize_prediction(tokenizer.decode(toks)), generation=gen)


def build_prompt(context: Sequence[Example], template: PromptTemplate, tokenizer) -> list[int]:
    """Preamble plus fully rendered context examples (no query)."""
    if not context:
        return tokenizer.encode(template.preamble) if template.preamble else []
    inst = pack_examples(list(context), template, tokenizer, 1 << 30)
    return inst.token_ids.tolist()


def normalize_prediction(text: str) -> str:
    return " ".join(text.split())
