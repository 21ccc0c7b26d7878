"""Rectified flow away from the transformer: normal noise to a ring.

The velocity MLP learns E[x1 - x0 | x_t, t] on straight interpolations.
Because the learned paths are nearly straight, 8 Euler steps land close to
where 64 steps do.  Run with a number argument to change training steps.
"""

import sys

import numpy as np

from scriptmot.flow import ToyConfig, energy_distance, relative_endpoint_gap, ring_sample, train_toy_flow, velocity_fn
from scriptmot.training import euler_sample

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
cfg = ToyConfig(steps=steps)
params = train_toy_flow(cfg, reflow=False)

rng = np.random.default_rng(1)
x0 = rng.standard_normal((2000, 2))
target = ring_sample(rng, 2000)
v = velocity_fn(params, cfg.time_dim)
print("energy distance of noise itself:", round(energy_distance(x0, target), 4))
for k in (1, 2, 8, 64):
    print(f"{k:3d} Euler steps: energy distance {energy_distance(euler_sample(v, x0, k), target):.4f}")
print(f"8 vs 64 step endpoint gap: {relative_endpoint_gap(params, x0, 8, 64, cfg.time_dim):.2%}")

# A coarse text histogram of the 8-step samples.
xs = euler_sample(v, x0, 8)
grid = np.zeros((21, 41), int)
for px, py in xs:
    r, c = int(round(10 - py * 4)), int(round(20 + px * 8))
    if 0 <= r < 21 and 0 <= c < 41:
        grid[r, c] += 1
for row in grid:
    print("".join(" .:*#"[min(4, v_ // 8)] for v_ in row))
