"""Command-line pipelines: pack, train, eval, scaling, ablate, cost, perplexity.

Every run writes into one output directory: the resolved configuration
(``config.json``), the command's result files, and nothing time-dependent,
so identical (config, seed) pairs give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import costmodel
from .evaluation import (EvalError, ablation_run, accuracy_eval, max_shots, model_logits_fn,
                         perplexity_eval, shot_scaling_curve, write_results_csv)
from .experiment import BenchConfig, build_base, build_tokenizer, default_cache_path, probe_docs
from .inference import InferenceEngine
from .model import load_checkpoint, save_checkpoint
from .packing import INTENT_TEMPLATE, MaskStrategy, pack_corpus, read_corpus, write_shard
from .tasks import CATEGORIES, TASK_TEMPLATE, make_suite
from .tokenizer import ByteBPETokenizer
from .trainer import TrainConfig, run_meta_training

OUT_ENV = "SHOTPACK_OUT"
COMMANDS = ("pack", "train", "eval", "scaling", "ablate", "cost", "perplexity")


class ConfigError(ValueError):
    pass


def _bench_defaults() -> dict:
    return BenchConfig().to_dict()


def _train_defaults() -> dict:
    d = TrainConfig().to_dict()
    d.pop("seed")
    return d


def _suite_defaults() -> dict:
    return {"train_per_family": 3, "test_per_family": 1}


def _cost_defaults() -> dict:
    d = costmodel.CostParams().to_dict()
    d.pop("scale_k")
    return d


DEFAULTS = {
    "pack": lambda: {"bench": _bench_defaults(), "corpus": None, "n_w": None, "strategy": "all",
                     "template": "task", "tokenizer": None, "shard_size": 256},
    "train": lambda: {"bench": _bench_defaults(), "base_checkpoint": None, "suite": _suite_defaults(),
                      "train": _train_defaults()},
    "eval": lambda: {"bench": _bench_defaults(), "checkpoint": None, "suite": _suite_defaults(),
                     "task": "keyed_lookup-test-0", "shots": None, "eval_count": 100,
                     "mode": "likelihood", "label": "model"},
    "scaling": lambda: {"bench": _bench_defaults(), "checkpoint": None, "suite": _suite_defaults(),
                        "task": "keyed_lookup-test-0", "grid": None, "eval_count": 100,
                        "mode": "likelihood", "label": "model"},
    "ablate": lambda: {"bench": _bench_defaults(), "base_checkpoint": None, "suite": _suite_defaults(),
                       "train": _train_defaults(), "exclude": "classification", "shots": None,
                       "eval_count": 100},
    "cost": lambda: {"params": _cost_defaults()},
    "perplexity": lambda: {"bench": _bench_defaults(), "checkpoint": None, "lengths": None,
                           "window": 16},
}


# ---------------------------------------------------------------- config resolution


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = f"{where}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = merge(out[k], v, key + ".")
        elif isinstance(out[k], dict):
            raise ConfigError(f"config key {key!r} is a section, not a value")
        else:
            out[k] = v
    return out


def dotted(key: str, value) -> dict:
    d = value
    for part in reversed(key.split(".")):
        d = {part: d}
    return d


def resolve_config(command: str, config_path=None, overrides=(), seed: int = 0) -> dict:
    cfg = DEFAULTS[command]()
    if config_path:
        try:
            with open(config_path) as f:
                loaded = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}:{e.lineno}: {e.msg}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be an object")
        cfg = merge(cfg, loaded)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg = merge(cfg, dotted(k.strip(), parse_value(v)))
    cfg["seed"] = seed
    cfg["command"] = command
    return cfg


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- shared pieces


def bench_of(cfg: dict) -> BenchConfig:
    b = dict(cfg["bench"])
    b["probe_lengths"] = tuple(b["probe_lengths"])
    return BenchConfig(**b)


def base_model(cfg: dict):
    bench = bench_of(cfg)
    path = cfg.get("base_checkpoint")
    if path:
        params, _, _ = load_checkpoint(path)
        return params, build_tokenizer(bench), bench
    params, tok = build_base(bench, default_cache_path() if bench.pretrain_steps else None)
    return params, tok, bench


def trained_model(cfg: dict):
    """Base + adapter from ``checkpoint``, or the bare base model when unset."""
    bench = bench_of(cfg)
    if cfg.get("checkpoint"):
        params, adapter, _ = load_checkpoint(cfg["checkpoint"])
        return params, adapter, build_tokenizer(bench), bench
    params, tok, bench = base_model({**cfg, "base_checkpoint": None})
    return params, None, tok, bench


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["train"])
    t["lora_kinds"] = tuple(t["lora_kinds"])
    return TrainConfig(**t, seed=seed)


def suite_of(cfg: dict, seed: int):
    return make_suite(seed=seed, **cfg["suite"])


# ---------------------------------------------------------------- commands


def cmd_pack(cfg: dict, out: Path) -> dict:
    if not cfg["corpus"]:
        raise ConfigError("pack needs corpus=<path to JSONL examples>")
    if not Path(cfg["corpus"]).exists():
        raise FileNotFoundError(f"corpus not found: {cfg['corpus']}")
    bench = bench_of(cfg)
    if cfg["tokenizer"]:
        tok = ByteBPETokenizer.from_json(Path(cfg["tokenizer"]).read_text())
    else:
        tok = build_tokenizer(bench)
    tpl = {"task": TASK_TEMPLATE, "intent": INTENT_TEMPLATE}.get(cfg["template"])
    if tpl is None:
        raise ConfigError(f"unknown template {cfg['template']!r}")
    n_w = int(cfg["n_w"] or bench.n_ctx)
    examples = read_corpus(cfg["corpus"])
    instances, report = pack_corpus(examples, tpl, tok, n_w, MaskStrategy(cfg["strategy"]))
    size = int(cfg["shard_size"])
    shards = []
    for i in range(0, len(instances), size):
        name = f"shard-{i // size:05d}.shpk"
        write_shard(out / name, instances[i:i + size], n_w)
        shards.append(name)
    report["shards"] = shards
    write_json(out / "pack_report.json", report)
    return {"instances": report["instances"], "shards": len(shards)}


def cmd_train(cfg: dict, out: Path) -> dict:
    params, tok, _ = base_model(cfg)
    tc = train_config(cfg, cfg["seed"])
    suite = suite_of(cfg, cfg["seed"])
    adapter, report = run_meta_training(params, suite.held_in, tok, tc,
                                        held_out_ids=suite.held_out_ids)
    save_checkpoint(out / "model.ckpt", params, adapter, meta={"train": tc.to_dict()})
    write_json(out / "train_report.json", report.to_dict())
    return {"steps": len(report.losses), "final_loss": report.losses[-1] if report.losses else None}


def _target_task(cfg: dict, seed: int):
    """The evaluation task, plus warnings (a held-in task id is flagged, not refused)."""
    suite = suite_of(cfg, seed)
    try:
        task = suite.by_id(cfg["task"])
    except KeyError:
        raise ConfigError(f"unknown task {cfg['task']!r}") from None
    warnings = []
    if task.task_id not in suite.held_out_ids:
        warnings.append(f"task {task.task_id} is held-in: it is part of the training set")
    return task, warnings


def cmd_eval(cfg: dict, out: Path) -> dict:
    params, adapter, tok, bench = trained_model(cfg)
    task, warnings = _target_task(cfg, cfg["seed"])
    shots = cfg["shots"] if cfg["shots"] is not None else max_shots(task, tok, bench.n_ctx)
    res = accuracy_eval(InferenceEngine(params, adapter), task, int(shots), int(cfg["eval_count"]),
                        cfg["seed"], tok, strategy=cfg["label"], mode=cfg["mode"], n_w=bench.n_ctx)
    write_results_csv(out / "results.csv", [res])
    write_json(out / "results.json", {**dataclasses.asdict(res), "mode": cfg["mode"],
                                          "warnings": warnings})
    return {"metric": res.metric, "value": res.value, "shots": res.shots, "warnings": warnings}


def cmd_scaling(cfg: dict, out: Path) -> dict:
    params, adapter, tok, bench = trained_model(cfg)
    task, warnings = _target_task(cfg, cfg["seed"])
    grid = cfg["grid"]
    if grid is None:
        top = max_shots(task, tok, bench.n_ctx)
        grid = sorted({g for g in (0, 1, 5, 10, 20, top // 2, top) if g <= top})
    curve = shot_scaling_curve(InferenceEngine(params, adapter), task, grid, int(cfg["eval_count"]),
                               cfg["seed"], tok, strategy=cfg["label"], mode=cfg["mode"],
                               n_w=bench.n_ctx)
    write_results_csv(out / "scaling.csv", curve.results)
    write_json(out / "scaling.json", {**curve.summary(), "mode": cfg["mode"],
                                          "warnings": warnings})
    return {"best": curve.best, "at_max_context": curve.at_max, "warnings": warnings}


def cmd_ablate(cfg: dict, out: Path) -> dict:
    params, tok, bench = base_model(cfg)
    if cfg["exclude"] not in CATEGORIES:
        raise ConfigError(f"unknown category {cfg['exclude']!r}; choose from {list(CATEGORIES)}")
    suite = suite_of(cfg, cfg["seed"])
    shots = cfg["shots"]
    if shots is None:
        shots = sorted({max_shots(t, tok, bench.n_ctx) for t in suite.held_out
                        if t.category == cfg["exclude"]})
    rep = ablation_run(params, suite, cfg["exclude"], train_config(cfg, cfg["seed"]), tok,
                       eval_shots=list(shots), eval_count=int(cfg["eval_count"]), seed=cfg["seed"],
                       reference_adapters={"base": None})
    save_checkpoint(out / "model.ckpt", params, rep.adapter, meta={"excluded": cfg["exclude"]})
    write_results_csv(out / "results.csv", rep.results)
    write_json(out / "ablation.json", {**rep.summary(), "train_report": rep.train_report})
    return {r.strategy + f"@{r.shots}": r.value for r in rep.results}


def cmd_cost(cfg: dict, out: Path) -> dict:
    p = costmodel.CostParams(**cfg["params"])
    report = costmodel.cost_report(p)
    write_json(out / "cost.json", report)
    (out / "cost.txt").write_text(costmodel.format_table(report) + "\n")
    return {"mask_all": report["training_tokens_human"]["mask_all"],
            "task_level": report["task_level_tokens_human"]}


def cmd_perplexity(cfg: dict, out: Path) -> dict:
    params, adapter, tok, bench = trained_model(cfg)
    lengths = cfg["lengths"] or list(bench.probe_lengths)
    skipped: list = []
    ppl = perplexity_eval(model_logits_fn(params, adapter), probe_docs(bench, tok), lengths,
                          int(cfg["window"]), report=skipped)
    write_json(out / "perplexity.json", {"perplexity": {str(k): v for k, v in ppl.items()},
                                         "skipped": skipped})
    return {str(k): v for k, v in ppl.items()}


HANDLERS = {"pack": cmd_pack, "train": cmd_train, "eval": cmd_eval, "scaling": cmd_scaling,
            "ablate": cmd_ablate, "cost": cmd_cost, "perplexity": cmd_perplexity}


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shotpack", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with config overrides")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command> or runs/<command>)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key override, e.g. train.steps=0")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, "runs")) / args.command
    try:
        cfg = resolve_config(args.command, args.config, args.set, args.seed)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg)
        summary = HANDLERS[args.command](cfg, out)
    except (ConfigError, EvalError, ValueError, TypeError, KeyError, OSError, RuntimeError) as e:
        err = {"error": type(e).__name__, "message": str(e), "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        if out.is_dir():
            write_json(out / "error.json", err)
        return 2
    print(json.dumps({"command": args.command, "out": str(out), **summary},
                     sort_keys=True, default=_json_default))
    return 0


if __name__ == "__main__":
    sys.exit(main())
