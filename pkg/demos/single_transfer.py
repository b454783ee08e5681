"""Walk one dissimilar source -> target pair through the three target-side methods.

    python3 demos/single_transfer.py [seed]

Tunes a prompt on S0 (theta = 0), then trains T2 (theta = pi/2) three ways:
from scratch, from the S0 prompt, and with distillation from a
target-like teacher. Prints per-epoch dev accuracy for each.
"""

import sys

from pandalab.harness import Lab, default_config, prepare_backbone
from pandalab.train import make_teacher, panda_train, vanilla_pot

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = default_config(seeds=(seed,))
bb = prepare_backbone(cfg)
lab = Lab(cfg, bb, seed)

src, _, src_curve = lab.tuned("S0")
print(f"S0 prompt-tuned: best dev {src_curve.best_dev_accuracy:.3f}")

sim = lab.metric("ours", "S0", "T2")
print(f"similarity(S0, T2) = {sim:.3f}  (E_avg {lab.metric('eavg', 'S0', 'T2'):.3f})")

tcfg = lab.train_config("T2")
ds = lab.dataset("T2")
curves = {"prompt_tune": lab.tuned("T2")[2],
          "vanilla_pot": vanilla_pot(bb, src, ds, tcfg)[2],
          "panda": panda_train(bb, make_teacher(tcfg.teacher_kind, bb, src, ds, tcfg), ds, sim, tcfg)[2]}

print("epoch " + " ".join(f"{k:>12}" for k in curves))
for e in range(tcfg.epochs):
    print(f"{e + 1:5d} " + " ".join(f"{c.dev_accuracy[e]:12.3f}" for c in curves.values()))
print("best  " + " ".join(f"{c.best_dev_accuracy:12.3f}" for c in curves.values()))
