"""Do the metrics tell twin tasks apart from unrelated ones?

    python3 demos/metric_discrimination.py [n_seeds]

Six tasks in two groups: three copies of theta = 0 and three of
theta = pi/2, each with its own data draw and prompt init. For every
metric, prints mean within-group minus mean across-group similarity
per seed.
"""

import math
import sys

import numpy as np

from pandalab.harness import ExperimentConfig, FamilyTask, Lab, METRICS, prepare_backbone
from pandalab.metric import SimilarityMatrix, same_vs_differ
from pandalab.train import TrainConfig

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 3
tasks = ([FamilyTask(f"A{i}", 0.0, "A", 200) for i in range(3)]
         + [FamilyTask(f"B{i}", math.pi / 2, "B", 200) for i in range(3)])
cfg = ExperimentConfig(tasks=tasks, train=TrainConfig(), n_dev=200, seeds=tuple(range(n_seeds)),
                       pretrain_steps=1000)
bb = prepare_backbone(cfg)

print("seed " + " ".join(f"{m:>8}" for m in METRICS))
for s in cfg.seeds:
    lab = Lab(cfg, bb, s)
    gaps = []
    for m in METRICS:
        vals = np.array([[lab.metric(m, a, b) for b in cfg.task_ids] for a in cfg.task_ids])
        same, differ = same_vs_differ(SimilarityMatrix(cfg.task_ids, vals), cfg.groups)
        gaps.append(same - differ)
    print(f"{s:4d} " + " ".join(f"{g:8.3f}" for g in gaps))
