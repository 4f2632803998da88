import csv
import json

import pytest

from shotpack.cli import main, resolve_config, ConfigError
from shotpack.packing import Example, read_shard, write_corpus

TINY = ["bench.d_model=16", "bench.n_heads=2", "bench.d_ff=32", "bench.n_ctx=64",
        "bench.vocab_size=300", "bench.tokenizer_docs=10", "bench.doc_sentences=20",
        "bench.pretrain_steps=0", "bench.probe_docs=4", "bench.probe_lengths=[16,32,64]"]
TRAIN = ["train.steps=1", "train.global_batch=2", "train.grad_accum=1"]


def run(tmp_path, name, command, *sets, seed=0, expect=0):
    out = tmp_path / name
    argv = [command, "--out", str(out), "--seed", str(seed)]
    for s in sets:
        argv += ["--set", s]
    assert main(argv) == expect
    return out


def files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


def test_cost_outputs_and_determinism(tmp_path, capsys):
    a = run(tmp_path, "a", "cost")
    b = run(tmp_path, "b", "cost")
    assert files(a) == files(b)
    report = json.loads((a / "cost.json").read_text())
    assert report["training_tokens_human"]["mask_all"] == "2.2B"
    summary = json.loads(capsys.readouterr().out.splitlines()[-1])
    assert summary["task_level"] == "32B"


def test_cost_override(tmp_path):
    out = run(tmp_path, "c", "cost", "params.n=10")
    assert json.loads((out / "cost.json").read_text())["warnings"]


def test_unknown_key_reports_error_json(tmp_path, capsys):
    out = run(tmp_path, "e", "cost", "params.bogus=1", expect=2)
    err = json.loads(capsys.readouterr().err.strip())
    assert err["error"] == "ConfigError" and "params.bogus" in err["message"]
    assert not out.exists()  # config errors are caught before the output directory exists


def test_runtime_error_writes_error_file(tmp_path, capsys):
    out = run(tmp_path, "p", "pack", "corpus=\"/nonexistent.jsonl\"", *TINY, expect=2)
    err = json.loads((out / "error.json").read_text())
    assert "corpus not found" in err["message"]


def test_config_file_and_dotted_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"params": {"k": 10}}))
    cfg = resolve_config("cost", path, ["params.n=50"], seed=3)
    assert cfg["params"]["k"] == 10 and cfg["params"]["n"] == 50 and cfg["seed"] == 3
    with pytest.raises(ConfigError):
        resolve_config("cost", None, ["params=3"])
    with pytest.raises(ConfigError):
        resolve_config("cost", None, ["novalue"])
    path.write_text("{bad")
    with pytest.raises(ConfigError):
        resolve_config("cost", path)


def test_pack(tmp_path):
    corpus = tmp_path / "c.jsonl"
    write_corpus(corpus, [Example("ab", "C", "t1"), Example("de", "F", "t2")] * 20)
    out = run(tmp_path, "pack", "pack", f"corpus=\"{corpus}\"", "shard_size=2", *TINY)
    rep = json.loads((out / "pack_report.json").read_text())
    assert rep["examples_packed"] == 40 and len(rep["shards"]) >= 1
    meta, insts = read_shard(out / rep["shards"][0])
    assert meta["n_w"] == 64 and all(len(i) <= 64 for i in insts)


def test_train_zero_steps(tmp_path):
    out = run(tmp_path, "t0", "train", *TINY, "train.steps=0")
    assert (out / "model.ckpt").exists()
    assert json.loads((out / "train_report.json").read_text())["losses"] == []


def test_train_eval_scaling_are_deterministic(tmp_path):
    for tag in ("a", "b"):
        t = run(tmp_path, f"train_{tag}", "train", *TINY, *TRAIN, seed=1)
        ckpt = t / "model.ckpt"
        run(tmp_path, f"eval_{tag}", "eval", *TINY, f"checkpoint=\"{ckpt}\"", "eval_count=4",
            seed=1)
        run(tmp_path, f"scal_{tag}", "scaling", *TINY, f"checkpoint=\"{ckpt}\"", "eval_count=3",
            seed=1)
    assert files(tmp_path / "train_a") == files(tmp_path / "train_b")
    assert files(tmp_path / "eval_a")["results.csv"] == files(tmp_path / "eval_b")["results.csv"]
    assert files(tmp_path / "scal_a")["scaling.csv"] == files(tmp_path / "scal_b")["scaling.csv"]
    rows = list(csv.DictReader(open(tmp_path / "scal_a" / "scaling.csv")))
    shots = [int(r["shots"]) for r in rows]
    assert shots == sorted(shots) and shots[0] == 0 and shots[-1] == (64 - 3) // 3


def test_eval_rejects_too_many_shots(tmp_path, capsys):
    run(tmp_path, "ev", "eval", *TINY, "shots=500", "eval_count=2", expect=2)
    assert "reduce n" in json.loads(capsys.readouterr().err)["message"]


def test_eval_unknown_task(tmp_path):
    run(tmp_path, "ev", "eval", *TINY, "task=\"nope\"", expect=2)


def test_eval_flags_held_in_task(tmp_path):
    out = run(tmp_path, "ev", "eval", *TINY, "task=\"keyed_lookup-train-0\"", "shots=2",
              "eval_count=2")
    assert "held-in" in json.loads((out / "results.json").read_text())["warnings"][0]


def test_ablate_and_perplexity(tmp_path):
    out = run(tmp_path, "ab", "ablate", *TINY, *TRAIN, "eval_count=2", "shots=[2]")
    data = json.loads((out / "ablation.json").read_text())
    assert data["excluded_category"] == "classification"
    run(tmp_path, "ab2", "ablate", *TINY, *TRAIN, "exclude=\"poetry\"", expect=2)
    out = run(tmp_path, "ppl", "perplexity", *TINY)
    ppl = json.loads((out / "perplexity.json").read_text())["perplexity"]
    assert set(ppl) == {"16", "32", "64"}


def test_pack_mean_shots_on_uniform_corpus(tmp_path):
    # digits and capitals are single tokens: "12" + "A" + "\n" is 4 tokens per example
    corpus = tmp_path / "u.jsonl"
    write_corpus(corpus, [Example("12", "A", "t")] * 160)
    out = run(tmp_path, "u", "pack", f"corpus=\"{corpus}\"", *TINY)
    rep = json.loads((out / "pack_report.json").read_text())
    assert rep["mean_shots"] == 64 // 4 - 1
    assert rep["instances"] == 10


def test_pack_empty_corpus(tmp_path):
    corpus = tmp_path / "empty.jsonl"
    corpus.write_text("")
    out = run(tmp_path, "e", "pack", f"corpus=\"{corpus}\"", *TINY)
    rep = json.loads((out / "pack_report.json").read_text())
    assert rep["instances"] == 0 and rep["shards"] == []
