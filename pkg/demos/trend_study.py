"""One seed of the trend study: base vs meta-trained adapters on a held-out task.

Pretrains (or reuses) the base model, trains the adapter variants on the
held-in suite, then prints accuracy at the largest shot count that fits the
window and held-out perplexity by context length.

Run: python demos/trend_study.py [seed]
"""

import sys
import time

from shotpack.experiment import BenchConfig, TrendConfig, build_base, default_cache_path, trend_seed

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
t0 = time.time()


def log(msg):
    print(f"[{time.time() - t0:6.0f}s] {msg}", flush=True)


bench = BenchConfig()
params, tok = build_base(bench, default_cache_path(), log=log)
res = trend_seed(params, tok, bench, TrendConfig(), seed, log=log)

print(f"\naccuracy with {res.max_shots} shots")
for name, acc in sorted(res.accuracy.items(), key=lambda kv: -kv[1]):
    print(f"  {name:<20} {acc:.3f}")
print("\nperplexity by context length")
lengths = sorted(next(iter(res.perplexity.values())))
print("  " + " " * 20 + "".join(f"{n:>9}" for n in lengths))
for name, ppl in res.perplexity.items():
    print(f"  {name:<20}" + "".join(f"{ppl[n]:9.3f}" for n in lengths))
print("\nchecks:", res.checks)
