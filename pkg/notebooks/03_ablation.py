"""
Ablation on one seed
====================

Runs the six variants (source only, translation without and with the
segmentor term, then three self-training rounds) on the benchmark phantoms
and prints the table the acceptance suite averages over three seeds.
Roughly twenty minutes on one core; re-running reuses finished stages.

    python3 notebooks/03_ablation.py [seed]
"""

import sys
from pathlib import Path

import torch

from cosmos.config import load_run_config
from cosmos.pipeline import run_ablation

ROOT = Path(__file__).resolve().parents[1]
torch.set_num_threads(1)

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = load_run_config(ROOT / "configs" / "benchmark.yaml").with_overrides(seed=seed)
run_dir = Path(__file__).parent / "out" / f"ablation_seed{seed}"
reports = run_ablation(cfg, run_dir)

print(f"{'method':12s} {'VS':>6s} {'cochlea':>8s} {'mean':>6s}")
for r in reports:
    d = {row.cls: row.dice_mean for row in r.rows}
    print(f"{r.method:12s} {d['VS']:6.3f} {d['cochlea']:8.3f} {r.mean_dice:6.3f}")
print("report, plots and timings under", run_dir)
