"""Prompt rendering, maximum-context packing and per-strategy loss masks."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .container import read_container, write_container

FEW_SHOT_CONTEXT = 5
MANY_SHOT_THRESHOLD = 20


class RenderError(ValueError):
    pass


class PackingError(ValueError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Example:
    input: str
    target: str
    task: str
    labels: tuple[str, ...] | None = None

    def to_json(self) -> dict:
        d = {"input": self.input, "target": self.target, "task": self.task}
        if self.labels is not None:
            d["labels"] = list(self.labels)
        return d


@dataclass(frozen=True)
class PromptTemplate:
    preamble: str = ""
    input_prefix: str = ""
    input_suffix: str = ""
    target_prefix: str = ""
    target_suffix: str = "\n"

    def render_text(self, ex: Example) -> str:
        return (self.input_prefix + ex.input + self.input_suffix
                + self.target_prefix + ex.target + self.target_suffix)


# The intent-classification layout: "Text: ...\nIntent: ...\n\n"
INTENT_TEMPLATE = PromptTemplate(input_prefix="Text: ", input_suffix="\n",
                                 target_prefix="Intent: ", target_suffix="\n\n")


class MaskStrategy(str, enum.Enum):
    MASK_LAST = "last"
    MASK_ALL = "all"
    AUTOREGRESSIVE = "autoregressive"


def shot_regime(n: int) -> str:
    """Regime of an n-shot prompt: zero (n=0), few (1..20) or many (>20)."""
    if n < 0:
        raise ValueError("shot count must be non-negative")
    if n == 0:
        return "zero"
    return "few" if n <= MANY_SHOT_THRESHOLD else "many"


def render_example(ex: Example, tpl: PromptTemplate, tokenizer) -> tuple[list[int], list[int]]:
    """Tokens of the prompt side and of the target side of one example.

    The prompt side ends with the target prefix; the target side is the target
    text followed by the target suffix. Each template piece is tokenised on its
    own so segment boundaries never merge.
    """
    if not ex.input or not ex.target:
        raise RenderError(f"example of task {ex.task!r} has an empty input or target")
    enc = tokenizer.encode
    inp = enc(tpl.input_prefix) + enc(ex.input) + enc(tpl.input_suffix) + enc(tpl.target_prefix)
    tgt = enc(ex.target) + enc(tpl.target_suffix)
    return inp, tgt


@dataclass(frozen=True)
class Boundary:
    start: int
    target_start: int
    target_end: int  # exclusive end of the loss span: target tokens + one delimiter token
    end: int
    shot_index: int


@dataclass
class PackedInstance:
    token_ids: np.ndarray
    loss_mask: np.ndarray
    boundaries: list[Boundary]
    task: str = ""
    strategy: MaskStrategy = MaskStrategy.MASK_ALL
    labels: tuple[str, ...] | None = None

    @property
    def shot_count(self) -> int:
        return len(self.boundaries) - 1

    def __len__(self) -> int:
        return int(self.token_ids.shape[0])

    def with_strategy(self, strategy: MaskStrategy) -> PackedInstance:
        inst = PackedInstance(self.token_ids, self.loss_mask, self.boundaries, self.task,
                              MaskStrategy(strategy), self.labels)
        inst.loss_mask = build_loss_mask(inst, strategy)
        return inst


def build_loss_mask(inst: PackedInstance, strategy: MaskStrategy) -> np.ndarray:
    """Positions whose token is a prediction target under ``strategy``.

    Position 0 is never a target (nothing precedes it).
    """
    strategy = MaskStrategy(strategy)
    mask = np.zeros(len(inst), dtype=bool)
    if not inst.boundaries:
        return mask
    if strategy is MaskStrategy.AUTOREGRESSIVE:
        mask[1:inst.boundaries[-1].end] = True
    elif strategy is MaskStrategy.MASK_ALL:
        for b in inst.boundaries:
            mask[b.target_start:b.target_end] = True
    else:
        b = inst.boundaries[-1]
        mask[b.target_start:b.target_end] = True
    return mask


def _assemble(rendered, tpl: PromptTemplate, tokenizer, strategy, task, labels) -> PackedInstance:
    pre = tokenizer.encode(tpl.preamble) if tpl.preamble else []
    delim_len = len(tokenizer.encode(tpl.target_suffix)) if tpl.target_suffix else 0
    toks = list(pre)
    bounds = []
    for k, (inp, tgt) in enumerate(rendered):
        start = 0 if k == 0 else len(toks)
        tstart = len(toks) + len(inp)
        toks += inp
        toks += tgt
        # loss covers the target text plus the first delimiter token
        tend = tstart + len(tgt) - max(delim_len - 1, 0)
        bounds.append(Boundary(start, tstart, tend, len(toks), k))
    inst = PackedInstance(np.asarray(toks, dtype=np.int32), np.zeros(len(toks), dtype=bool),
                          bounds, task, MaskStrategy(strategy), labels)
    inst.loss_mask = build_loss_mask(inst, strategy)
    return inst


def preamble_length(tpl: PromptTemplate, tokenizer) -> int:
    return len(tokenizer.encode(tpl.preamble)) if tpl.preamble else 0


def pack_examples(examples: Sequence[Example], tpl: PromptTemplate, tokenizer, n_w: int,
                  strategy: MaskStrategy = MaskStrategy.MASK_ALL) -> PackedInstance:
    """Pack exactly these examples (the last is the query); error if they overflow."""
    if not examples:
        raise PackingError("cannot pack zero examples")
    rendered = [render_example(e, tpl, tokenizer) for e in examples]
    total = preamble_length(tpl, tokenizer) + sum(len(a) + len(b) for a, b in rendered)
    if total > n_w:
        raise PackingError(f"{len(examples)} examples need {total} tokens, window is {n_w}")
    return _assemble(rendered, tpl, tokenizer, strategy, examples[0].task, examples[0].labels)


@dataclass
class PackResult:
    instance: PackedInstance | None
    consumed: int
    skipped: list[dict] = field(default_factory=list)


def pack_max_context(examples: Sequence[Example], tpl: PromptTemplate, tokenizer, n_w: int,
                     strategy: MaskStrategy = MaskStrategy.MASK_ALL) -> PackResult:
    """Greedily fill one window from the head of ``examples``.

    Whole examples only: packing stops at the first example that would overflow
    the window, which is left unconsumed. An example too long to fit even in an
    empty window is skipped and reported. All packed examples share the task of
    the first one; a task change also ends the instance.
    """
    budget = n_w - preamble_length(tpl, tokenizer)
    rendered, skipped, used, i = [], [], 0, 0
    task = None
    while i < len(examples):
        ex = examples[i]
        if task is not None and ex.task != task:
            break
        inp, tgt = render_example(ex, tpl, tokenizer)
        size = len(inp) + len(tgt)
        if size > budget:
            skipped.append({"index": i, "task": ex.task, "tokens": size,
                            "reason": f"example needs {size} tokens, window allows {budget}"})
            i += 1
            continue
        if used + size > budget:
            break
        task = ex.task
        rendered.append((inp, tgt))
        used += size
        i += 1
    if not rendered:
        return PackResult(None, i, skipped)
    first = next(e for e in examples[:i] if e.task == task)
    return PackResult(_assemble(rendered, tpl, tokenizer, strategy, task, first.labels), i, skipped)


def pack_corpus(examples: Sequence[Example], tpl: PromptTemplate, tokenizer, n_w: int,
                strategy: MaskStrategy = MaskStrategy.MASK_ALL):
    """Pack a whole corpus into single-task instances. Returns (instances, report)."""
    by_task: dict[str, list[Example]] = {}
    for ex in examples:
        by_task.setdefault(ex.task, []).append(ex)
    instances, skipped = [], []
    for task in sorted(by_task):
        stream = by_task[task]
        pos = 0
        while pos < len(stream):
            res = pack_max_context(stream[pos:], tpl, tokenizer, n_w, strategy)
            for s in res.skipped:
                skipped.append({**s, "index": pos + s["index"]})
            if res.instance is not None:
                instances.append(res.instance)
            pos += res.consumed
    shots = [inst.shot_count for inst in instances]
    report = {"instances": len(instances), "examples_packed": sum(s + 1 for s in shots),
              "mean_shots": float(np.mean(shots)) if shots else 0.0,
              "skipped_examples": len(skipped), "skipped": skipped, "n_w": n_w,
              "strategy": MaskStrategy(strategy).value}
    return instances, report


def prefix_instance(inst: PackedInstance, k: int, strategy: MaskStrategy | None = None) -> PackedInstance:
    """The instance truncated after example ``k`` (so example k is the query)."""
    b = inst.boundaries[k]
    out = PackedInstance(inst.token_ids[:b.end].copy(), np.zeros(b.end, dtype=bool),
                         list(inst.boundaries[:k + 1]), inst.task,
                         MaskStrategy(strategy or inst.strategy), inst.labels)
    out.loss_mask = build_loss_mask(out, out.strategy)
    return out


# ---------------------------------------------------------------- in-context example selection


def _label_of(ex: Example) -> str:
    return ex.target


def stratified_sample(pool: Sequence[Example], count: int, rng: np.random.Generator,
                      classes: Sequence[str] | None = None) -> list[Example]:
    """Class-balanced draw: per-class counts differ by at most one, order shuffled.

    When ``count`` is not a multiple of the class count, the extra slots go to
    classes chosen by ``rng``. Draws are without replacement while a class has
    examples left.
    """
    if count == 0:
        return []
    by_class: dict[str, list[Example]] = {}
    for ex in pool:
        by_class.setdefault(_label_of(ex), []).append(ex)
    if classes is None:
        classes = sorted(by_class)
    empty = [c for c in classes if not by_class.get(c)]
    if empty:
        raise PackingError(f"class {empty[0]!r} has no examples in the pool")
    base, extra = divmod(count, len(classes))
    bonus = set(rng.permutation(len(classes))[:extra].tolist())
    chosen: list[Example] = []
    for ci, c in enumerate(classes):
        members = by_class[c]
        need = base + (1 if ci in bonus else 0)
        if need <= len(members):
            idx = rng.permutation(len(members))[:need]
        else:
            idx = rng.integers(0, len(members), need)
        chosen.extend(members[i] for i in idx)
    order = rng.permutation(len(chosen))
    return [chosen[i] for i in order]


def stratified_stream(pool: Sequence[Example], rng: np.random.Generator,
                      classes: Sequence[str] | None = None) -> Iterator[Example]:
    """Endless class-balanced stream: every prefix has per-class counts within one.

    Emits shuffled rounds that each hold one example per class.
    """
    by_class: dict[str, list[Example]] = {}
    for ex in pool:
        by_class.setdefault(_label_of(ex), []).append(ex)
    if classes is None:
        classes = sorted(by_class)
    empty = [c for c in classes if not by_class.get(c)]
    if empty:
        raise PackingError(f"class {empty[0]!r} has no examples in the pool")
    while True:
        for ci in rng.permutation(len(classes)):
            members = by_class[classes[ci]]
            yield members[int(rng.integers(len(members)))]


def uniform_stream(pool: Sequence[Example], rng: np.random.Generator) -> Iterator[Example]:
    while True:
        yield pool[int(rng.integers(len(pool)))]


# ---------------------------------------------------------------- corpus and shard IO


def read_corpus(path) -> list[Example]:
    """Load a JSON-lines corpus: one {input, target, task, labels?} object per line."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            missing = [k for k in ("input", "target", "task") if k not in obj]
            if missing:
                raise CorpusError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            labels = obj.get("labels")
            out.append(Example(str(obj["input"]), str(obj["target"]), str(obj["task"]),
                               tuple(labels) if labels is not None else None))
    return out


def write_corpus(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def write_shard(path, instances: Sequence[PackedInstance], n_w: int) -> None:
    """Binary shard: container of kind "shard" with meta {version, n_w, count, instances}.

    Instance i stores ``i/tokens`` (int32), ``i/mask`` (uint8) and
    ``i/bounds`` (int32, rows of start, target_start, target_end, end, shot_index).
    """
    arrays = {}
    meta_rows = []
    for i, inst in enumerate(instances):
        arrays[f"{i}/tokens"] = inst.token_ids.astype(np.int32)
        arrays[f"{i}/mask"] = inst.loss_mask.astype(np.uint8)
        arrays[f"{i}/bounds"] = np.asarray(
            [[b.start, b.target_start, b.target_end, b.end, b.shot_index] for b in inst.boundaries],
            dtype=np.int32).reshape(-1, 5)
        meta_rows.append({"task": inst.task, "strategy": inst.strategy.value,
                          "labels": list(inst.labels) if inst.labels else None})
    write_container(path, "shard", {"version": 1, "n_w": n_w, "count": len(instances),
                                    "instances": meta_rows}, arrays)


def read_shard(path) -> tuple[dict, list[PackedInstance]]:
    meta, arrays = read_container(path, kind="shard")
    out = []
    for i, row in enumerate(meta["instances"]):
        bounds = [Boundary(*map(int, r)) for r in arrays[f"{i}/bounds"]]
        out.append(PackedInstance(arrays[f"{i}/tokens"], arrays[f"{i}/mask"].astype(bool), bounds,
                                  row["task"], MaskStrategy(row["strategy"]),
                                  tuple(row["labels"]) if row["labels"] else None))
    return {k: meta[k] for k in ("version", "n_w", "count")}, out
