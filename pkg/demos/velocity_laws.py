"""
Velocity laws at a fixed space-time point
=========================================

Pick a location x_t and a time t. Every pair (x0, x1) whose straight line
passes through x_t at time t contributes one velocity x1 - x0. For Gaussian
mixtures that conditional law has a closed form; here we compare it with a
brute-force estimate that keeps only sampled lines landing near x_t.

Run:  python3 demos/velocity_laws.py [output_dir]
"""
import sys
from pathlib import Path

import numpy as np

from hrflow import SpaceTimePoint, preset, velocity_law
from hrflow.metrics import dip_bimodality, w1_1d
from hrflow.oracle import empirical_velocity_law, independent_sampler, ot_coupled_sampler
from hrflow.svg import histogram_overlay

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# standard normal source, two narrow modes at -1 and +1 as target
source, target = preset("1d-2n")

# %% closed form at x_t = -1, t = 0: the velocity is x1 + 1, so two modes at 0 and 2
anchor = SpaceTimePoint([-1.0], 0.0)
law = velocity_law(source, target, anchor)
print("component weights", law.weights, "means", law.means.ravel(), "stdevs", law.stdevs)

exact = law.sample(20_000, seed=0)

# %% the same law by rejection: keep independent pairs whose x_t lands within 0.05
brute = empirical_velocity_law(independent_sampler(source, target), anchor, 0.05, 20_000, seed=1)
print("W1(closed form, rejection) =", round(w1_1d(exact, brute), 4))

# %% mini-batch OT pairs instead of independent ones: near x0 = -1 the plan sends
# almost everything to the nearer mode, so one peak survives
coupled = empirical_velocity_law(ot_coupled_sampler(source, target, 100), anchor, 0.05, 5_000, seed=2)
for name, v in (("independent", exact), ("OT-coupled", coupled)):
    print(f"{name:12s} dip = {dip_bimodality(v):.4f}")

edges = np.linspace(-1.5, 3.5, 81)
hists = {}
for name, v in (("closed form", exact), ("rejection", brute), ("OT-coupled", coupled)):
    h, _ = np.histogram(v[:, 0], bins=edges)
    hists[name] = (edges, h / (len(v) * np.diff(edges)))
(out / "velocity_laws.svg").write_text(histogram_overlay(hists, "velocity at x_t=-1, t=0", "v"))
print("wrote", out / "velocity_laws.svg")
