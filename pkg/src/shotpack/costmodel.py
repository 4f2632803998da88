"""Closed-form training-token and inference-complexity accounting.

Everything here is a pure function of :class:`CostParams`. Counts are plain
token products; "K" is 1000 unless ``binary_k`` is set.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

STRATEGIES = ("mask_all", "mask_last", "autoregressive")
MASK_LAST_MODES = ("full_window", "exact")
INFERENCE_MODES = ("few", "many_no_cache", "many_cache")

# measured elsewhere and quoted for reference only; nothing here derives them
CITED_CONSTANTS = {
    "relative_inference_time_many_shot_cached": 0.51,
    "relative_inference_time_few_shot": 0.11,
    "cache_load_cost_relative": 0.1,
}
WORKFLOW_RELATIVE_INFERENCE_TIME = {"task_level_sft": 1.0, "many_shot_meta_sft": 0.8}


class CostError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    n_meta: float = 70.0          # meta-training instances, in K
    n_w: float = 32.0             # window tokens, in K
    n: float | None = 106         # shots per window
    n_mean: float | None = None   # mean shots, used by exact mask_last when set
    n_inference: float | None = 100  # shots assumed by the inference comparison, defaults to n
    k: float = 5                  # few-shot count
    n_x: float = 0.0              # mean input tokens per shot
    n_y: float = 0.0              # mean target tokens per shot
    n_tasks: float = 1.0          # tasks, in K
    m: float = 8.0                # instances per task-level fine-tune, in K
    n_t: float = 4.0              # task-level context length, in K
    n1: float = 0.0               # inference prompt length
    n2: float = 0.0               # inference output length
    t_sft_hours: float = 1.0      # development time per task-level fine-tune
    t_meta_hours: float = 70.0    # development time of the single meta fine-tune
    binary_k: bool = False
    scale_k: tuple[str, ...] = ("n_meta", "n_w", "n_tasks", "m", "n_t")

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise CostError(f"{f.name} must be nonnegative")

    @property
    def unit(self) -> int:
        return 1024 if self.binary_k else 1000

    def value(self, name: str) -> float:
        v = getattr(self, name)
        if v is None:
            raise CostError(f"parameter {name} is required")
        return float(v) * (self.unit if name in self.scale_k else 1)

    def regime_warnings(self) -> list[str]:
        out = []
        if self.k > 20:
            out.append(f"k={self.k} is outside the few-shot range (1..20)")
        if self.n is not None and self.n <= 20:
            out.append(f"n={self.n} is not many-shot (needs n > 20)")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_k"] = list(self.scale_k)
        return d


def training_tokens(strategy: str, p: CostParams, mode: str = "full_window") -> float:
    """Tokens processed by one pass of meta-training.

    ``mask_last`` in ``full_window`` mode bills every prefix at the full window
    (N·n_w·n); ``exact`` mode bills each prefix at its own length, which for
    uniform example lengths is N·n_w·(n+1)/2.
    """
    if strategy not in STRATEGIES:
        raise CostError(f"unknown strategy {strategy!r}")
    base = p.value("n_meta") * p.value("n_w")
    if strategy != "mask_last":
        return base
    if mode not in MASK_LAST_MODES:
        raise CostError(f"unknown mask_last mode {mode!r}")
    if mode == "full_window":
        return base * p.value("n")
    n = p.value("n_mean") if p.n_mean is not None else p.value("n")
    return base * (n + 1) / 2


def task_level_tokens(p: CostParams) -> float:
    return p.value("n_tasks") * p.value("n_t") * p.value("m")


def inference_complexity(mode: str, p: CostParams) -> dict:
    """Attention-cost expression and its value relative to many-shot without a cache."""
    if mode not in INFERENCE_MODES:
        raise CostError(f"unknown inference mode {mode!r}")
    k = p.value("k")
    n = p.value("n_inference") if p.n_inference is not None else p.value("n")
    ell = (p.n_x + p.n_y) ** 2
    values = {"few": k * k * ell, "many_no_cache": n * n * ell, "many_cache": n * ell}
    exprs = {"few": "O(k^2 (n_x+n_y)^2)", "many_no_cache": "O(n^2 (n_x+n_y)^2)",
             "many_cache": "O(n (n_x+n_y)^2)"}
    rel = {"few": (k * k) / (n * n) if n else 0.0, "many_no_cache": 1.0 if n else 0.0,
           "many_cache": 1.0 / n if n else 0.0}
    return {"mode": mode, "expression": exprs[mode], "value": values[mode], "relative": rel[mode]}


def attention_pairs(n1: int, n2: int, cached: bool) -> int:
    """Query-key pairs scored when producing ``n2`` positions after an ``n1``-token prompt."""
    if cached:
        return n1 * n2 + n2 * (n2 + 1) // 2
    total = n1 + n2
    return total * (total + 1) // 2


def humanize(x: float) -> str:
    """Short form: one decimal below 10 units, whole units above (2.2B, 32B, 237B)."""
    for div, suf in ((1e12, "T"), (1e9, "B"), (1e6, "M"), (1e3, "K")):
        if abs(x) >= div:
            v = x / div
            return f"{v:.1f}{suf}" if abs(v) < 10 else f"{v:.0f}{suf}"
    return f"{x:g}"


def _ratio(a: float, b: float) -> float:
    return a / b if b else 0.0


def cost_report(p: CostParams) -> dict:
    """Every derived number for one parameter set, as a JSON-ready dict."""
    has_n = p.n is not None
    mask_all = training_tokens("mask_all", p)
    tokens = {"mask_all": mask_all, "autoregressive": training_tokens("autoregressive", p)}
    if has_n:
        tokens["mask_last_full_window"] = training_tokens("mask_last", p, "full_window")
        tokens["mask_last_exact"] = training_tokens("mask_last", p, "exact")
    task_level = task_level_tokens(p)
    reductions = {"task_level_over_mask_all": _ratio(task_level, mask_all)}
    if has_n:
        reductions["mask_last_full_window_over_mask_all"] = _ratio(tokens["mask_last_full_window"], mask_all)
        reductions["mask_last_exact_over_mask_all"] = _ratio(tokens["mask_last_exact"], mask_all)
    has_inf = p.n_inference is not None or has_n
    inference = {m: inference_complexity(m, p) for m in INFERENCE_MODES} if has_inf else {}
    dev_task = p.value("n_tasks") * p.t_sft_hours
    dev_meta = p.t_meta_hours
    notes = []
    if has_n and p.n != 100:
        notes.append(f"mask_last token count uses n={p.n:g}; a round n=100 is the usual "
                     "shorthand for this reduction")
    notes.append("development-time ratio is computed exactly; it is commonly rounded down to 13x")
    report = {
        "params": p.to_dict(),
        "k_unit": p.unit,
        "training_tokens": tokens,
        "training_tokens_human": {k: humanize(v) for k, v in tokens.items()},
        "task_level_tokens": task_level,
        "task_level_tokens_human": humanize(task_level),
        "reduction_factors": reductions,
        "inference": inference,
        "adapters": {"task_level_sft": p.value("n_tasks"), "many_shot_meta_sft": 1},
        "development_hours": {"task_level_sft": dev_task, "many_shot_meta_sft": dev_meta,
                              "ratio": _ratio(dev_task, dev_meta)},
        "relative_inference_time": dict(WORKFLOW_RELATIVE_INFERENCE_TIME),
        "cited_constants": dict(CITED_CONSTANTS),
        "warnings": p.regime_warnings(),
        "notes": notes,
    }
    return report


def format_table(report: dict) -> str:
    """Plain-text rendering of the main report numbers."""
    rows = [("quantity", "value", "approx")]
    for k, v in report["training_tokens"].items():
        rows.append((f"training tokens: {k}", f"{v:.6g}", humanize(v)))
    rows.append(("task-level tokens", f"{report['task_level_tokens']:.6g}",
                 humanize(report["task_level_tokens"])))
    for k, v in report["reduction_factors"].items():
        rows.append((f"ratio: {k}", f"{v:.4g}", f"{v:.3g}x"))
    for m, d in report["inference"].items():
        rows.append((f"inference {m} {d['expression']}", f"{d['relative']:.4g}", f"{d['relative']:.4g}x"))
    dev = report["development_hours"]
    rows.append(("dev hours task-level / meta", f"{dev['task_level_sft']:g} / {dev['many_shot_meta_sft']:g}",
                 f"{dev['ratio']:.3g}x"))
    rows.append(("adapters task-level / meta",
                 f"{report['adapters']['task_level_sft']:g} / {report['adapters']['many_shot_meta_sft']:g}", ""))
    for k, v in report["cited_constants"].items():
        rows.append((f"cited: {k}", f"{v:g}", ""))
    w0 = max(len(r[0]) for r in rows)
    w1 = max(len(r[1]) for r in rows)
    lines = [f"{a:<{w0}}  {b:>{w1}}  {c}".rstrip() for a, b, c in rows]
    lines += [f"note: {n}" for n in report["notes"]]
    lines += [f"warning: {w}" for w in report["warnings"]]
    return "\n".join(lines)


TYPICAL = CostParams()
