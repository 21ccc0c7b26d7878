"""Losses, Adam, the two training stages and the Euler ODE sampler.

Stage 1 optimises every parameter on ``ntp + lam * rf``.  Stage 2 alternates
step types round-robin: text steps update the understanding expert with the
token embedding and text head; interleaved and image-pair steps update the
generation expert with the latent-side embeddings and velocity head, while
every understanding-routed hidden state is computed off the tape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .data import Corpus, ImagePair, InterleavedSample
from .layout import (
    Keyframe,
    SequenceLayout,
    Vocabulary,
    layout_interleaved,
    layout_pair,
    layout_text,
)
from .encoders import patchify, unpatchify
from .model import MoTConfig, build_input, forward, init_model
from .script import Script, serialize_script


class EmptyTargets(ValueError):
    pass


class MissingVelocityTargets(ValueError):
    pass


# ---------------------------------------------------------------- losses

def ntp_loss(logits: Tensor, targets) -> Tensor:
    """Negative mean log-probability of ``targets[i]`` under row ``i``."""
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) == 0:
        raise EmptyTargets("no next-token targets")
    if logits is None or logits.shape[0] != len(targets):
        raise ag.ShapeMismatch("one logit row per target is required")
    lp = ag.log_softmax(logits)
    return -ag.mean(ag.pick(lp, np.arange(len(targets)), targets))


def rf_loss(velocity: Tensor | None, target: np.ndarray) -> Tensor:
    """Mean squared error between predicted and target velocity."""
    if velocity is None or target is None or np.size(target) == 0:
        raise MissingVelocityTargets("no VAE_GEN velocity to supervise")
    target = np.asarray(target, dtype=np.float64)
    if velocity.shape != target.shape:
        raise ag.ShapeMismatch(f"velocity {velocity.shape} vs target {target.shape}")
    return ag.mean(ag.square(velocity - Tensor(target)))


@dataclass(frozen=True)
class RFExample:
    x0: np.ndarray
    x1: np.ndarray
    t: float

    @property
    def xt(self) -> np.ndarray:
        return (1.0 - self.t) * self.x0 + self.t * self.x1

    @property
    def target(self) -> np.ndarray:
        return self.x1 - self.x0

    @classmethod
    def sample(cls, rng: np.random.Generator, x1: np.ndarray) -> "RFExample":
        return cls(rng.standard_normal(x1.shape), np.asarray(x1, dtype=np.float64), float(rng.uniform()))


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], names: Iterable[str], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam on ``names`` only; other parameters are not
    touched.  A parameter with no gradient is skipped entirely."""
    for n in names:
        p = params[n]
        g = p.grad
        if g is None:
            continue
        m = state.m.get(n, np.zeros_like(g))
        v = state.v.get(n, np.zeros_like(g))
        k = state.t.get(n, 0) + 1
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**k)
        vhat = v / (1 - beta2**k)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
        state.m[n], state.v[n], state.t[n] = m, v, k


# ---------------------------------------------------------------- routing

def _text_side(name: str) -> bool:
    return name.startswith("und.") or name in ("shared.tok_embed", "shared.text_head")


def _gen_side(name: str) -> bool:
    return (name.startswith(("gen.", "patch_embed.", "time_embed."))
            or name in ("shared.vel_head", "shared.vel_bias"))


@dataclass(frozen=True)
class GradRoute:
    """Which parameters a step may change, and whether understanding-routed
    hidden states are detached from the backward pass."""

    update: frozenset
    detach_understanding: bool = False

    def frozen(self, params) -> list[str]:
        return [n for n in params if n not in self.update]

    @classmethod
    def joint(cls, params) -> "GradRoute":
        return cls(frozenset(params))

    @classmethod
    def text(cls, params) -> "GradRoute":
        return cls(frozenset(n for n in params if _text_side(n)))

    @classmethod
    def diffusion(cls, params) -> "GradRoute":
        return cls(frozenset(n for n in params if _gen_side(n)), True)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    steps: int = 100
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lam: float = 1.0
    seed: int = 0
    ratio_text: int = 1
    ratio_interleaved: int = 1
    ratio_pairs: int = 1
    id_prompting: bool = True
    cosine: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("learning rate, steps and batch size must be positive")
        if min(self.ratio_text, self.ratio_interleaved, self.ratio_pairs) < 0:
            raise ValueError("stage-2 ratios must be >= 0")

    def lr_at(self, step: int) -> float:
        """Constant, or cosine-decayed to zero over ``steps`` when ``cosine``."""
        if not self.cosine:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * step / self.steps))


def parse_config(text: str) -> dict[str, str]:
    """Line-oriented ``key=value`` text; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce_dataclass(cls, kv: dict[str, str]):
    """Build ``cls`` from the string values in ``kv`` whose keys are fields."""
    kw = {}
    for f in fields(cls):
        if f.name not in kv:
            continue
        raw = kv[f.name]
        default = f.default
        if isinstance(default, bool):
            kw[f.name] = raw.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            kw[f.name] = int(raw)
        elif isinstance(default, float):
            kw[f.name] = float(raw)
        elif isinstance(default, tuple):
            kw[f.name] = tuple(int(x) for x in raw.split(","))
        else:
            kw[f.name] = raw
    return cls(**kw)


# ---------------------------------------------------------------- examples

def corpus_vocab(corpus: Corpus, max_entities: int = 8, max_shots: int = 16) -> Vocabulary:
    texts = [serialize_script(s.script) for s in corpus.interleaved]
    texts += [serialize_script(s) for s in corpus.text_scripts]
    texts += [p.caption + "\n" for p in corpus.pairs]
    return Vocabulary.from_texts(texts, max_entities=max_entities, max_shots=max_shots)


def keyframes(sample: InterleavedSample) -> dict[int, Keyframe]:
    return {i + 1: Keyframe(i + 1, img.astype(np.float64) / 255.0) for i, img in enumerate(sample.keyframes)}


def text_loss(params, cfg: MoTConfig, layout: SequenceLayout, detach: bool = False) -> Tensor:
    rows, targets = layout.text_targets()
    out = forward(params, cfg, build_input(layout, {}, cfg), text_positions=rows,
                  detach_understanding=detach)
    return ntp_loss(out.text_logits, targets)


def flow_loss(params, cfg: MoTConfig, layout: SequenceLayout, frames: dict, ex: RFExample,
              detach: bool = False, with_text: bool = False):
    """rf_loss on the VAE_GEN split of ``layout``; with ``with_text`` also
    returns the NTP loss over the layout's own text targets."""
    rows, targets = layout.text_targets()
    inp = build_input(layout, frames, cfg, ex.xt, ex.t)
    out = forward(params, cfg, inp, detach_understanding=detach,
                  text_positions=rows if with_text else np.zeros(0, dtype=np.int64))
    loss = rf_loss(out.velocity, patchify(ex.target, cfg.patch))
    if with_text:
        return loss, ntp_loss(out.text_logits, targets)
    return loss


@dataclass
class StepRecord:
    step: int
    loss_ntp: float
    loss_rf: float
    subset: str

    def line(self) -> str:
        return f"{self.step},{self.loss_ntp!r},{self.loss_rf!r},{self.subset}"


def write_trace(records: list[StepRecord], path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.line() + "\n")


def read_trace(path) -> list[StepRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        s, a, b, sub = line.split(",")
        out.append(StepRecord(int(s), float(a), float(b), sub))
    return out


def _apply(params, loss: Tensor, route: GradRoute, state: AdamState, tc: TrainConfig, step: int) -> None:
    for p in params.values():
        p.grad = None
    ag.backward(loss)
    adam_step(params, sorted(route.update), state, tc.lr_at(step), tc.beta1, tc.beta2, tc.eps)
    for p in params.values():
        p.grad = None


# ---------------------------------------------------------------- stage 1

@dataclass
class Stage1Item:
    text_layout: SequenceLayout
    script: Script
    frames: dict


def stage1_items(corpus: Corpus, vocab: Vocabulary) -> list[Stage1Item]:
    return [Stage1Item(layout_text(s.script, vocab), s.script, keyframes(s)) for s in corpus.interleaved]


def stage1_loss(params, cfg: MoTConfig, vocab: Vocabulary, item: Stage1Item, gen_shot: int, ex: RFExample,
                lam: float, id_prompting: bool = True) -> tuple[Tensor, float, float]:
    lt = text_loss(params, cfg, item.text_layout)
    layout = layout_interleaved(item.script, item.frames, vocab, gen_shot, cfg.layout, id_prompting)
    lr_ = flow_loss(params, cfg, layout, item.frames, ex)
    return lt + lr_ * lam, float(lt.data), float(lr_.data)


def _stage1_draw(rng, item: Stage1Item):
    gen_shot = int(rng.integers(1, len(item.script.shots) + 1))
    x1 = item.frames[gen_shot].vae_latents
    return gen_shot, RFExample.sample(rng, x1)


def train_stage1(corpus: Corpus, cfg: MoTConfig, tc: TrainConfig, vocab: Vocabulary | None = None,
                 params=None, callback: Callable | None = None, trace_path=None):
    """Joint optimisation of all parameters.  Returns (params, trace, vocab)."""
    if not corpus.interleaved:
        raise ValueError("stage 1 needs interleaved samples")
    vocab = vocab or corpus_vocab(corpus)
    if params is None:
        params = init_model(cfg, tc.seed)
    items = stage1_items(corpus, vocab)
    rng = np.random.default_rng([tc.seed, 1])
    state = AdamState()
    route = GradRoute.joint(params)
    trace = []
    for step in range(tc.steps):
        with Tape():
            total = None
            ntp_sum = rf_sum = 0.0
            for b in range(tc.batch_size):
                item = items[(step * tc.batch_size + b) % len(items)]
                gen_shot, ex = _stage1_draw(rng, item)
                loss, a, c = stage1_loss(params, cfg, vocab, item, gen_shot, ex, tc.lam, tc.id_prompting)
                total = loss if total is None else total + loss
                ntp_sum += a
                rf_sum += c
            total = total * (1.0 / tc.batch_size)
            _apply(params, total, route, state, tc, step)
        rec = StepRecord(step, ntp_sum / tc.batch_size, rf_sum / tc.batch_size, "joint")
        trace.append(rec)
        if trace_path is not None:
            write_trace([rec], trace_path)
        if callback is not None:
            callback(rec, params)
    return params, trace, vocab


def stage1_eval(params, cfg: MoTConfig, vocab: Vocabulary, corpus: Corpus, lam: float = 1.0,
                seed: int = 1234, draws: int = 4) -> float:
    """Combined Stage-1 loss averaged over fixed (gen_shot, t, x0) draws, so
    values are comparable across checkpoints."""
    items = stage1_items(corpus, vocab)
    total = 0.0
    for i, item in enumerate(items):
        rng = np.random.default_rng([seed, i])
        for _ in range(draws):
            gen_shot, ex = _stage1_draw(rng, item)
            total += float(stage1_loss(params, cfg, vocab, item, gen_shot, ex, lam)[0].data)
    return total / (len(items) * draws)


# ---------------------------------------------------------------- stage 2

def stage2_schedule(tc: TrainConfig, have: dict[str, bool]) -> list[str]:
    """One round-robin cycle of step kinds, skipping empty subsets."""
    cycle = []
    counts = {"text": tc.ratio_text, "interleaved": tc.ratio_interleaved, "pair": tc.ratio_pairs}
    for r in range(max(counts.values())):
        for kind in ("text", "interleaved", "pair"):
            if r < counts[kind] and have[kind]:
                cycle.append(kind)
    if not cycle:
        raise ValueError("stage 2 has no data to train on")
    return cycle


def train_stage2(corpus: Corpus, cfg: MoTConfig, tc: TrainConfig, vocab: Vocabulary | None = None,
                 params=None, callback: Callable | None = None, trace_path=None):
    """Disentangled expert learning.  Text steps: ``GradRoute.text`` on
    pure-text scripts.  Interleaved and pair steps: ``GradRoute.diffusion``
    with understanding hidden states detached."""
    vocab = vocab or corpus_vocab(corpus)
    if params is None:
        params = init_model(cfg, tc.seed)
    text_layouts = [layout_text(s, vocab) for s in corpus.text_scripts]
    inter = [(s.script, keyframes(s)) for s in corpus.interleaved]
    pairs = [(layout_pair(p.caption, p.characters, p.environments, vocab, cfg.layout, tc.id_prompting),
              {1: Keyframe(1, p.image.astype(np.float64) / 255.0)}) for p in corpus.pairs]
    cycle = stage2_schedule(tc, {"text": bool(text_layouts), "interleaved": bool(inter), "pair": bool(pairs)})
    rng = np.random.default_rng([tc.seed, 2])
    state = AdamState()
    routes = {"text": GradRoute.text(params), "interleaved": GradRoute.diffusion(params),
              "pair": GradRoute.diffusion(params)}
    cursor = {"text": 0, "interleaved": 0, "pair": 0}
    trace = []
    kinds = itertools.cycle(cycle)
    for step in range(tc.steps):
        kind = next(kinds)
        route = routes[kind]
        with Tape():
            total = None
            for _ in range(tc.batch_size):
                i = cursor[kind]
                cursor[kind] += 1
                if kind == "text":
                    loss = text_loss(params, cfg, text_layouts[i % len(text_layouts)])
                elif kind == "interleaved":
                    script, frames = inter[i % len(inter)]
                    g = int(rng.integers(1, len(script.shots) + 1))
                    layout = layout_interleaved(script, frames, vocab, g, cfg.layout, tc.id_prompting)
                    loss = flow_loss(params, cfg, layout, frames, RFExample.sample(rng, frames[g].vae_latents),
                                     detach=True)
                else:
                    layout, frames = pairs[i % len(pairs)]
                    loss = flow_loss(params, cfg, layout, frames, RFExample.sample(rng, frames[1].vae_latents),
                                     detach=True)
                total = loss if total is None else total + loss
            total = total * (1.0 / tc.batch_size)
            _apply(params, total, route, state, tc, step)
        value = float(total.data)
        rec = StepRecord(step, value if kind == "text" else 0.0, 0.0 if kind == "text" else value, kind)
        trace.append(rec)
        if trace_path is not None:
            write_trace([rec], trace_path)
        if callback is not None:
            callback(rec, params)
    return params, trace, vocab


# ---------------------------------------------------------------- sampling

def euler_sample(velocity: Callable[[np.ndarray, float], np.ndarray], x0: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dx/dt = velocity(x, t) from t=0 to 1 with ``steps`` Euler steps."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity(x, k * dt)
    return x


def model_velocity(params, cfg: MoTConfig, layout: SequenceLayout, frames) -> Callable:
    """Velocity field of the VAE_GEN split of ``layout`` as a function of the
    (C, h, w) latent and t."""
    def v(x: np.ndarray, t: float) -> np.ndarray:
        out = forward(params, cfg, build_input(layout, frames, cfg, x, t), text_positions=np.zeros(0, dtype=np.int64))
        return unpatchify(out.velocity.data, cfg.latent_channels, cfg.latent_size, cfg.latent_size, cfg.patch)
    return v


def sample_ode(params, cfg: MoTConfig, layout: SequenceLayout, frames, steps: int = 16,
               seed: int = 0, x0: np.ndarray | None = None) -> np.ndarray:
    """Latent endpoint of the learned flow from standard-normal noise."""
    if x0 is None:
        x0 = np.random.default_rng(seed).standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    return euler_sample(model_velocity(params, cfg, layout, frames), x0, steps)


def model_grad_check(seed: int = 0, max_entries: int | None = 16, tolerance: float = 1e-4,
                     step: float = 1e-5, detach: bool = False):
    """Finite-difference check of the whole MoT on one interleaved sample.

    The loss is ``ntp + rf`` on a two-shot layout with gen_shot 2, so it
    passes through both experts, masked QK-normed attention, the connector
    (shot-1 ViT split) and the latent patch embedding."""
    from .data import CorpusConfig, make_synthetic_corpus

    corpus = make_synthetic_corpus(CorpusConfig(interleaved=1, text_only=0, pairs=0, shots=(2, 2),
                                                words=(2, 3), vocab_size=8, image_size=32, seed=seed))
    vocab = corpus_vocab(corpus)
    cfg = MoTConfig(n_layers=2, width=16, n_heads=2, vocab_size=len(vocab), image_size=32, time_dim=8)
    params = init_model(cfg, seed)
    item = stage1_items(corpus, vocab)[0]
    ex = RFExample.sample(np.random.default_rng(seed), item.frames[2].vae_latents)
    layout = layout_interleaved(item.script, item.frames, vocab, 2, cfg.layout)

    def f():
        a, b = flow_loss(params, cfg, layout, item.frames, ex, detach=detach, with_text=True)
        return a + b

    return ag.grad_check(f, params, tolerance, step, max_entries, seed)
