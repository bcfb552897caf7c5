"""Decoded bodies and the two morphology metrics.

Run with ``python3 notebooks/01_bodies_and_metrics.py``; writes into
``notebooks/out/``.
"""
from pathlib import Path

import numpy as np

from ecomoe.demo import list_demos, load_demo
from ecomoe.morphogen import decode, morph_metrics

OUT = Path(__file__).parent / "out"
OUT.mkdir(exist_ok=True)

# The shipped demos: the radial body sits at N_eff = 4 with no mass bias,
# the bilateral ones are slightly front-heavy.
for name in list_demos():
    m = morph_metrics(load_demo(name).morphology)
    print(f"{name:28s} bones={load_demo(name).morphology.n_bones:2d} "
          f"n_eff={m.n_eff:.3f} bias={m.mass_bias_magnitude:.4f}")

# How the metrics spread over random latents around the origin.
rng = np.random.default_rng(0)
rows = []
for scale in (0.5, 1.0, 2.0):
    for _ in range(500):
        body = decode(rng.normal(scale=scale, size=16))
        mm = morph_metrics(body)
        rows.append((scale, body.n_bones, mm.n_eff, mm.mass_bias_magnitude))
rows = np.array(rows)
for scale in (0.5, 1.0, 2.0):
    r = rows[rows[:, 0] == scale]
    print(f"sigma={scale}: bones {r[:, 1].mean():.1f}, n_eff {r[:, 2].mean():.2f} "
          f"(min {r[:, 2].min():.2f}), bias {r[:, 3].mean():.3f}")
np.savetxt(OUT / "latent_metrics.csv", rows, delimiter=",",
           header="sigma,n_bones,n_eff,mass_bias", comments="")

import matplotlib  # noqa: E402
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

fig, ax = plt.subplots(figsize=(5, 4))
for scale, c in zip((0.5, 1.0, 2.0), ("tab:blue", "tab:orange", "tab:red")):
    r = rows[rows[:, 0] == scale]
    ax.scatter(r[:, 2], r[:, 3], s=4, color=c, label=f"sigma {scale}")
ax.set_xlabel("effective limb count")
ax.set_ylabel("mass-bias magnitude (m)")
ax.legend()
fig.tight_layout()
fig.savefig(OUT / "latent_metrics.svg")
print("wrote", OUT / "latent_metrics.svg")
