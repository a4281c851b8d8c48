"""
Train HRF2 with and without data coupling, then look at one velocity law
=======================================================================

Both models learn an acceleration field over a velocity time tau. Integrating
that field from a Gaussian v0 gives samples of the velocity at a location.
Without coupling the learned law at (x_t, t) = (-1, 0) keeps both modes;
with mini-batch OT pairs it collapses to one.

This takes a few minutes per model on one core.
Run:  python3 demos/train_and_probe.py [iters] [output_dir]
"""
import sys
import time
from pathlib import Path

import numpy as np

from hrflow import SpaceTimePoint, TrainConfig, integrate_velocity, preset, train, velocity_law
from hrflow.metrics import dip_bimodality, w1_1d
from hrflow.svg import histogram_overlay, line_chart

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
out = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_out")
out.mkdir(exist_ok=True)
source, target = preset("1d-2n")

runs = {}
for method in ("hrf2", "hrf2-d"):
    t0 = time.perf_counter()
    runs[method] = train(source, target, TrainConfig(method, iters=iters, checkpoint_every=iters // 5))
    print(f"{method}: {time.perf_counter() - t0:.0f}s, best checkpoint {runs[method].best_iteration}")

(out / "loss.svg").write_text(line_chart(
    {m: (np.arange(1, iters + 1)[::50], r.losses[::50]) for m, r in runs.items()},
    "training loss", "iteration", "mse", log_x=True))

# %% probe: 10k Gaussian v0 pushed through 100 Euler steps in tau
anchor = SpaceTimePoint([-1.0], 0.0)
v0 = np.random.default_rng(1).standard_normal((10_000, 1))
oracle = velocity_law(source, target, anchor).sample(10_000, seed=2)
edges = np.linspace(-1.5, 3.5, 81)
hists = {"closed form": (edges, np.histogram(oracle, bins=edges, density=True)[0])}
for method, r in runs.items():
    v1 = integrate_velocity(r.model, anchor, v0, 100)
    print(f"{method}: W1 to closed form {w1_1d(v1, oracle):.3f}, dip {dip_bimodality(v1):.4f}")
    hists[method] = (edges, np.histogram(v1, bins=edges, density=True)[0])
(out / "probe.svg").write_text(histogram_overlay(hists, "velocity at x_t=-1, t=0", "v"))
print("wrote", out / "probe.svg", "and", out / "loss.svg")
