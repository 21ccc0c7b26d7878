"""Rectified flow on a 2-D toy problem: standard normal to a ring of Gaussians.

Used to exercise the flow objective and the Euler sampler away from the
transformer.  ``reflow`` retrains on (noise, endpoint) couplings produced by
a first model, which straightens trajectories so few-step sampling agrees
with many-step sampling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .training import AdamState, adam_step, euler_sample


def ring_sample(rng: np.random.Generator, n: int, modes: int = 8, radius: float = 2.0,
                std: float = 0.1) -> np.ndarray:
    k = rng.integers(0, modes, size=n)
    angle = 2 * np.pi * k / modes
    centres = radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    return centres + std * rng.standard_normal((n, 2))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Brute-force ``2E|A-B| - E|A-A'| - E|B-B'|`` over all sample pairs."""
    def mean_dist(x, y):
        d = x[:, None, :] - y[None, :, :]
        return float(np.sqrt((d * d).sum(-1)).mean())
    return 2 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)


def _time_features(t: np.ndarray, dim: int = 16) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, np.log(100.0), dim // 2))
    ang = np.asarray(t)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass(frozen=True)
class ToyConfig:
    hidden: int = 128
    time_dim: int = 16
    steps: int = 3000
    batch: int = 512
    lr: float = 2e-3
    reflow_steps: int = 2000
    reflow_pairs: int = 8192
    reflow_ode_steps: int = 64
    seed: int = 0


def init_mlp(cfg: ToyConfig, seed: int) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    shapes = {"w1": (2 + cfg.time_dim, cfg.hidden), "b1": (cfg.hidden,), "w2": (cfg.hidden, cfg.hidden),
              "b2": (cfg.hidden,), "w3": (cfg.hidden, 2), "b3": (2,)}
    out = {}
    for name, shape in shapes.items():
        data = np.zeros(shape) if name.startswith("b") else rng.standard_normal(shape) / np.sqrt(shape[0])
        out[name] = Tensor(data, requires_grad=True, name=name)
    return out


def mlp_velocity(params, x, t, time_dim: int = 16) -> Tensor:
    """``x``: (n, 2) array or tensor; ``t``: (n,) times."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = ag.concat([x, Tensor(_time_features(t, time_dim))], axis=1)
    h = ag.gelu(h @ params["w1"] + params["b1"])
    h = ag.gelu(h @ params["w2"] + params["b2"])
    return h @ params["w3"] + params["b3"]


def velocity_fn(params, time_dim: int = 16):
    def v(x: np.ndarray, t: float) -> np.ndarray:
        return mlp_velocity(params, x, np.full(len(x), t), time_dim).data
    return v


def fit_flow(params, cfg: ToyConfig, draw_pairs, steps: int, seed: int) -> list[float]:
    """Minimise the flow loss on couplings from ``draw_pairs(rng, n)``."""
    rng = np.random.default_rng(seed)
    state = AdamState()
    losses = []
    for _ in range(steps):
        x0, x1 = draw_pairs(rng, cfg.batch)
        t = rng.uniform(size=cfg.batch)
        xt = (1 - t)[:, None] * x0 + t[:, None] * x1
        with Tape():
            pred = mlp_velocity(params, xt, t, cfg.time_dim)
            loss = ag.mean(ag.square(pred - Tensor(x1 - x0)))
            for p in params.values():
                p.grad = None
            ag.backward(loss)
        adam_step(params, list(params), state, cfg.lr)
        losses.append(float(loss.data))
    return losses


def train_toy_flow(cfg: ToyConfig = ToyConfig(), reflow: bool = True):
    """Independent-coupling rectified flow, optionally followed by one reflow
    pass.  Returns the final velocity parameters."""
    params = init_mlp(cfg, cfg.seed)
    fit_flow(params, cfg, lambda r, n: (r.standard_normal((n, 2)), ring_sample(r, n)), cfg.steps, cfg.seed + 1)
    if not reflow:
        return params
    rng = np.random.default_rng(cfg.seed + 2)
    z0 = rng.standard_normal((cfg.reflow_pairs, 2))
    z1 = euler_sample(velocity_fn(params, cfg.time_dim), z0, cfg.reflow_ode_steps)

    def coupled(r, n):
        idx = r.integers(0, len(z0), size=n)
        return z0[idx], z1[idx]

    fit_flow(params, cfg, coupled, cfg.reflow_steps, cfg.seed + 3)
    return params


def relative_endpoint_gap(params, x0: np.ndarray, few: int = 8, many: int = 64, time_dim: int = 16) -> float:
    """||X_few - X_many|| / ||X_many|| over a batch of shared starting points."""
    v = velocity_fn(params, time_dim)
    a = euler_sample(v, x0, few)
    b = euler_sample(v, x0, many)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))
