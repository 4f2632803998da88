"""Pack a handful of demonstrations into one window and show the loss masks.

Run: python demos/packing_walkthrough.py
"""

from shotpack.experiment import BenchConfig, build_tokenizer
from shotpack.packing import Example, MaskStrategy, build_loss_mask, pack_max_context
from shotpack.tasks import TASK_TEMPLATE

tok = build_tokenizer(BenchConfig(tokenizer_docs=20))
examples = [Example(k, v, "demo") for k, v in
            [("3", "Q"), ("7", "B"), ("3", "Q"), ("#", "Z"), ("7", "B"), ("5", "K"), ("#", "Z")]]

# a 16-token window holds five 3-token examples; the rest stay for the next window
res = pack_max_context(examples, TASK_TEMPLATE, tok, n_w=16)
inst = res.instance
print(f"packed {len(inst.boundaries)} of {len(examples)} examples "
      f"({inst.shot_count} shots + 1 query) into {len(inst)} tokens")

pieces = [repr(tok.decode([t])) for t in inst.token_ids]
width = max(len(p) for p in pieces)
print("\n" + " " * 16 + " ".join(p.rjust(width) for p in pieces))
for strategy in MaskStrategy:
    mask = build_loss_mask(inst, strategy)
    row = " ".join(("x" if m else ".").rjust(width) for m in mask)
    print(f"{strategy.value:>15} {row}")

print("\nmask_last trains only the query target; mask_all trains every target in the")
print("same forward pass; autoregressive also trains the inputs.")
