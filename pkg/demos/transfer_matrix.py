"""Full source x target matrix on the default family, then rank correlations.

    python3 demos/transfer_matrix.py OUT_DIR [n_seeds]

Writes reports.csv, matrix_*.csv, heatmap_*.csv, curves/ and a manifest
to OUT_DIR, then prints how well each metric ranks sources by
first-epoch transfer accuracy. Five seeds take several minutes.
"""

import sys

from pandalab.harness import default_config, evaluate_correlation, run_matrix

out = sys.argv[1]
n_seeds = int(sys.argv[2]) if len(sys.argv) > 2 else 2
cfg = default_config(seeds=tuple(range(n_seeds)), out_dir=out)
reports, matrices = run_matrix(cfg)

for name, mat in matrices.items():
    print(f"\n{name}")
    print(mat.to_csv(), end="")

print("\nSpearman vs first-epoch vanilla transfer accuracy")
for m in cfg.metrics:
    per_target, mean = evaluate_correlation(reports, m)
    cells = " ".join(f"{t}={v:+.2f}" for t, v in sorted(per_target.items()))
    print(f"  {m:5s} mean {mean:+.3f}  ({cells})")
