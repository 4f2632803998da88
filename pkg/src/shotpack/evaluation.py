"""Metrics and experiment protocols: accuracy, ROUGE-L, perplexity, shot scaling, ablation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as tn
from .model import ContextLengthError, LoraAdapter, ModelParams, forward
from .packing import Example, preamble_length, render_example, stratified_sample
from .trainer import TrainConfig, run_meta_training

CSV_COLUMNS = ("task", "category", "strategy", "shots", "metric", "value", "seed")


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalResult:
    task: str
    category: str
    strategy: str
    shots: int
    metric: str
    value: float
    count: int
    seed: int

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def write_results_csv(path_or_buf, results: Sequence[EvalResult]) -> None:
    own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
    f = open(path_or_buf, "w", newline="") if own else path_or_buf
    try:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in results:
            row = r.row()
            row["value"] = f"{r.value:.6f}"
            w.writerow(row)
    finally:
        if own:
            f.close()


def results_csv_text(results: Sequence[EvalResult]) -> str:
    buf = io.StringIO()
    write_results_csv(buf, results)
    return buf.getvalue()


# ---------------------------------------------------------------- ROUGE-L


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, reference: str) -> float:
    """LCS F-measure over whitespace tokens; 0 when either side is empty."""
    p, r = prediction.split(), reference.split()
    lcs = lcs_length(p, r)
    if lcs == 0:
        return 0.0
    # 2PR / (P + R) with P = lcs/|p| and R = lcs/|r| reduces to this single division
    return 2 * lcs / (len(p) + len(r))


# ---------------------------------------------------------------- accuracy


def max_shots(task, tokenizer, n_w: int, pool_size: int = 512) -> int:
    """Largest shot count whose worst-case prompt plus query and answer fits in ``n_w``."""
    sizes = [sum(map(len, render_example(e, task.template, tokenizer))) for e in task.pool(pool_size)]
    per = max(sizes)
    room = n_w - preamble_length(task.template, tokenizer) - per
    return max(room // per, 0)


def select_context(task, n: int, rng: np.random.Generator) -> list[Example]:
    if n == 0:
        return []
    pool = task.pool()
    if task.label_set is not None:
        return stratified_sample(pool, n, rng, task.label_set)
    return [pool[int(i)] for i in rng.integers(len(pool), size=n)]


def accuracy_eval(predictor, task, n_shots: int, eval_count: int, seed: int, tokenizer, *,
                  strategy: str = "", mode: str = "likelihood", n_w: int | None = None) -> EvalResult:
    """Mean score of ``predictor`` on fresh queries, each with freshly drawn context.

    Classification tasks score exact label match; generation tasks score ROUGE-L.
    ``predictor`` needs ``generate_with_prompt(context, query, template, tokenizer, ...)``.
    """
    if eval_count <= 0:
        raise EvalError("eval_count must be positive")
    if n_w is not None:
        cap = max_shots(task, tokenizer, n_w)
        if n_shots > cap:
            raise EvalError(f"{n_shots} shots do not fit a {n_w}-token window for task "
                            f"{task.task_id}; reduce n to at most {cap}")
    rng = np.random.default_rng([seed, 3, n_shots])
    queries = task.stream(50_000 + seed)
    metric = "accuracy" if task.is_classification else "rouge_l"
    total = 0.0
    for _ in range(eval_count):
        q = next(queries)
        ctx = select_context(task, n_shots, rng)
        try:
            pred = predictor.generate_with_prompt(ctx, q, task.template, tokenizer, mode=mode,
                                                  label_set=q.labels)
        except ContextLengthError as e:
            raise EvalError(f"{e}; reduce the shot count") from None
        if metric == "accuracy":
            total += float(pred.text == q.target)
        else:
            total += rouge_l(pred.text, q.target)
    return EvalResult(task.task_id, task.category, strategy, n_shots, metric,
                      total / eval_count, eval_count, seed)


# ---------------------------------------------------------------- perplexity


def model_logits_fn(params: ModelParams, adapter: LoraAdapter | None = None) -> Callable:
    def fn(tokens: np.ndarray) -> np.ndarray:
        with tn.no_grad():
            return forward(params, tokens, adapter).data

    return fn


def perplexity_eval(logits_fn: Callable[[np.ndarray], np.ndarray], docs: Sequence[np.ndarray],
                    context_lengths: Sequence[int], window: int = 16, report: list | None = None,
                    batch: int = 16) -> dict[int, float]:
    """Perplexity of the last ``window`` positions of each document's first L tokens.

    Documents shorter than the longest requested length are skipped and noted
    in ``report``.
    """
    if not context_lengths:
        return {}
    longest = max(context_lengths)
    usable = []
    for i, d in enumerate(docs):
        if len(d) < longest:
            if report is not None:
                report.append({"doc": i, "tokens": len(d), "reason": f"shorter than {longest}"})
            continue
        usable.append(np.asarray(d[:longest], dtype=np.int64))
    if not usable:
        raise EvalError("no document reaches the longest context length")
    out = {}
    stack = np.stack(usable)
    for length in context_lengths:
        lo = max(1, length - window)
        nll, count = 0.0, 0
        for s in range(0, len(stack), batch):
            toks = stack[s:s + batch, :length]
            lg = np.asarray(logits_fn(toks), dtype=np.float64)
            lg = lg - lg.max(axis=-1, keepdims=True)
            lse = np.log(np.exp(lg).sum(axis=-1))
            tgt = toks[:, lo:length]
            picked = np.take_along_axis(lg[:, lo - 1:length - 1], tgt[..., None], axis=-1)[..., 0]
            nll += float((lse[:, lo - 1:length - 1] - picked).sum())
            count += tgt.size
        out[int(length)] = float(np.exp(nll / count))
    return out


# ---------------------------------------------------------------- shot scaling


@dataclass
class ScalingCurve:
    results: list[EvalResult]
    best: float
    at_max: float

    def summary(self) -> dict:
        return {"best": self.best, "at_max_context": self.at_max,
                "points": [{"shots": r.shots, "value": r.value} for r in self.results]}


def shot_scaling_curve(predictor, task, grid: Sequence[int], eval_count: int, seed: int,
                       tokenizer, *, strategy: str = "", mode: str = "likelihood",
                       n_w: int | None = None) -> ScalingCurve:
    """Evaluate at every grid point; also report best-over-grid and the largest-shot value."""
    grid = list(grid)
    if not grid:
        raise EvalError("empty shot grid")
    if grid != sorted(grid):
        raise EvalError("shot grid must be sorted ascending")
    results = [accuracy_eval(predictor, task, n, eval_count, seed, tokenizer,
                             strategy=strategy, mode=mode, n_w=n_w) for n in grid]
    return ScalingCurve(results, max(r.value for r in results), results[-1].value)


# ---------------------------------------------------------------- ablation


@dataclass
class AblationReport:
    excluded_category: str
    trained_tasks: list[str]
    adapter: LoraAdapter
    train_report: dict
    results: list[EvalResult] = field(default_factory=list)

    def summary(self) -> dict:
        return {"excluded_category": self.excluded_category, "trained_tasks": self.trained_tasks,
                "results": [asdict(r) for r in self.results]}


def ablation_run(params: ModelParams, suite, excluded_category: str, cfg: TrainConfig, tokenizer,
                 *, eval_shots: Sequence[int] = (), eval_count: int = 50, seed: int = 0,
                 reference_adapters: dict[str, LoraAdapter | None] | None = None,
                 make_predictor=None) -> AblationReport:
    """Meta-train without one task category, then evaluate on that category's held-out tasks.

    ``reference_adapters`` maps a strategy label (e.g. "base", "full") to an
    adapter to compare against; ``None`` means the bare base model.
    """
    categories = {t.category for t in suite.held_in}
    if excluded_category not in categories:
        raise EvalError(f"category {excluded_category!r} is not in the training corpus")
    kept = [t for t in suite.held_in if t.category != excluded_category]
    if not kept:
        raise EvalError(f"excluding {excluded_category!r} leaves no training tasks")
    adapter, rep = run_meta_training(params, kept, tokenizer, cfg, held_out_ids=suite.held_out_ids)
    trained = sorted(rep.per_task_instances)
    leaked = [t for t in trained if suite.by_id(t).category == excluded_category]
    if leaked:
        raise EvalError(f"excluded category leaked into training: {leaked}")
    report = AblationReport(excluded_category, trained, adapter, rep.to_dict())
    if make_predictor is None:
        from .inference import InferenceEngine

        def make_predictor(a):
            return InferenceEngine(params, a)
    targets = [t for t in suite.held_out if t.category == excluded_category]
    variants = {"ablated": adapter}
    variants.update(reference_adapters or {})
    for name, ad in variants.items():
        pred = make_predictor(ad)
        for task in targets:
            for n in eval_shots:
                report.results.append(accuracy_eval(pred, task, n, eval_count, seed, tokenizer,
                                                    strategy=name, n_w=params.config.n_ctx))
    return report


def summary_json(results: Sequence[EvalResult]) -> str:
    return json.dumps([asdict(r) for r in results], indent=2, sort_keys=True)
