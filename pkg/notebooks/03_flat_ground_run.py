"""A short flat-ground run end to end, then its report and a resume check.

Takes a few minutes at the default horizon; pass a smaller horizon as the
first argument for a quicker look, e.g. ``python3 notebooks/03_flat_ground_run.py 100``.
"""
import sys
from pathlib import Path

import numpy as np

from ecomoe.harness.analytics import build_bundle
from ecomoe.harness.config import load_config
from ecomoe.harness.experiment import load_records, run_experiment, strip_volatile

ROOT = Path(__file__).resolve().parent.parent
OUT = Path(__file__).parent / "out"
cfg = load_config(ROOT / "configs" / "flat_ecomoe.ini")
if len(sys.argv) > 1:
    cfg = cfg.with_overrides(horizon=int(sys.argv[1]))

full = run_experiment(cfg, OUT / "flat_full")
recs = load_records(full / "seed_0")
for r in recs:
    fit = [f for f in r["fitness"] if f is not None]
    print(f"gen {r['gen']}: mean fitness {np.mean(fit):+.4f}  best {max(fit):+.4f}  "
          f"sigma {r['sigma_summary']['mean']:.3f}  epochs {r['ppo_epochs']}")

b = build_bundle(full)
print("cumulative max of mean fitness:", np.round(b.fitness_mean, 4))
print("explained variance of the 2-D latent basis:", round(b.pca["pca"].explained, 3))

# interrupt after three generations, then pick the run up again
part = run_experiment(cfg, OUT / "flat_resumed", stop_after=3, report=False)
run_experiment(cfg, part)
same = [strip_volatile(r) for r in load_records(part / "seed_0")] == \
    [strip_volatile(r) for r in recs]
print("resumed run identical to uninterrupted run:", same)
print("report in", full / "report")
