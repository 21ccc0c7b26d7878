"""Tiny Mixture-of-Transformers with modality-routed experts.

Two experts share every self-attention layer.  Text, ID-prompt and ViT
positions take their projections, norms and feed-forward weights from the
understanding expert (``und.*``); VAE latent positions take theirs from the
generation expert (``gen.*``).  Queries and keys are L2-normalised per head
before scoring.  Everything else (embeddings, heads, connector, latent patch
embedding, time embedding) sits in the ``shared`` subset.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_record
from .encoders import patchify, unpatchify
from .layout import Keyframe, LayoutConfig, Role, SequenceLayout, Vocabulary
from .mask import compile_mask


class MissingTimeInput(ValueError):
    pass


class OutOfRange(ValueError):
    pass


@dataclass(frozen=True)
class MoTConfig:
    n_layers: int = 2
    width: int = 32
    n_heads: int = 4
    vocab_size: int = 512
    image_size: int = 64
    latent_channels: int = 16
    downsample: int = 8
    patch: int = 2
    time_dim: int = 16
    vit_patch: int = 8
    vit_dim: int = 32
    ffn_mult: int = 2
    max_len: int = 1024
    qk_gain_init: float = 4.0

    def __post_init__(self):
        if self.width % self.n_heads:
            raise ValueError("width must be divisible by n_heads")
        if self.image_size % (self.downsample * self.patch) or self.image_size % self.vit_patch:
            raise ValueError("image_size must be divisible by downsample*patch and vit_patch")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.latent_channels

    @property
    def layout(self) -> LayoutConfig:
        return LayoutConfig(self.image_size, self.vit_patch, self.vit_dim, self.downsample, self.patch)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "MoTConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or "=" not in line:
                continue
            k, v = line.split("=", 1)
            if k in types:
                kw[k] = float(v) if types[k] in (float, "float") else int(v)
        return cls(**kw)


# ---------------------------------------------------------------- parameters

SUBSETS = ("understanding", "generation", "shared")


def subset_of(name: str) -> str:
    if name.startswith("und."):
        return "understanding"
    if name.startswith("gen."):
        return "generation"
    return "shared"


def param_shapes(cfg: MoTConfig) -> dict[str, tuple[int, ...]]:
    d, V, P, f = cfg.width, cfg.vocab_size, cfg.patch_dim, cfg.width * cfg.ffn_mult
    shapes = {
        "shared.tok_embed": (V, d),
        "shared.pos_embed": (cfg.max_len, d),
        "shared.text_head": (d, V),
        "shared.vel_head": (d, P),
        "shared.vel_bias": (P,),
        "connector.w1": (cfg.vit_dim, d),
        "connector.b1": (d,),
        "connector.w2": (d, d),
        "connector.b2": (d,),
        "patch_embed.w": (P, d),
        "patch_embed.b": (d,),
        "time_embed.w": (cfg.time_dim, d),
        "time_embed.b": (d,),
    }
    for ex in ("und", "gen"):
        for l in range(cfg.n_layers):
            p = f"{ex}.{l}."
            shapes.update({
                p + "attn_norm": (d,),
                p + "wq": (d, d),
                p + "wk": (d, d),
                p + "wv": (d, d),
                p + "q_gain": (cfg.head_dim,),
                p + "wo": (d, d),
                p + "ffn_norm": (d,),
                p + "w1": (d, f),
                p + "w2": (f, d),
            })
        shapes[f"{ex}.final_norm"] = (d,)
    return shapes


def _init_value(name: str, shape, rng, cfg: MoTConfig) -> np.ndarray:
    leaf = name.rsplit(".", 1)[1]
    if leaf in ("attn_norm", "ffn_norm", "final_norm"):
        return np.ones(shape)
    if leaf == "q_gain":
        return np.full(shape, cfg.qk_gain_init)
    if leaf.startswith("b") or leaf == "vel_bias":
        return np.zeros(shape)
    if leaf in ("tok_embed",):
        return rng.standard_normal(shape)
    if leaf == "pos_embed":
        return 0.5 * rng.standard_normal(shape)
    std = 1.0 / np.sqrt(shape[0])
    if leaf in ("wo", "w2") and name.split(".")[0] in ("und", "gen"):
        std /= np.sqrt(2 * cfg.n_layers)
    if leaf == "vel_head":
        std *= 0.1
    return std * rng.standard_normal(shape)


def init_model(cfg: MoTConfig, seed: int = 0) -> dict[str, Tensor]:
    """Scaled-normal initialisation; each subset draws from its own sub-seed."""
    rngs = {s: np.random.default_rng(np.random.SeedSequence([seed, i])) for i, s in enumerate(SUBSETS)}
    params = {}
    for name, shape in param_shapes(cfg).items():
        params[name] = Tensor(_init_value(name, shape, rngs[subset_of(name)], cfg), requires_grad=True, name=name)
    return params


def param_count(params: dict[str, Tensor]) -> int:
    return sum(p.size for p in params.values())


def subset_names(params, subset: str) -> list[str]:
    return [n for n in params if subset_of(n) == subset]


def snapshot(params, names=None) -> dict[str, bytes]:
    names = params.keys() if names is None else names
    return {n: params[n].data.tobytes() for n in names}


# ---------------------------------------------------------------- inputs

_TIME_MAX_FREQ = 100.0


def time_features(t: float, dim: int) -> np.ndarray:
    """Sinusoidal features ``[sin(w t), cos(w t)]`` with w spaced
    geometrically in [1, 100]."""
    if not 0.0 <= t <= 1.0:
        raise OutOfRange(f"t={t} outside [0, 1]")
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(_TIME_MAX_FREQ), half))
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)])


def time_lipschitz_bound(dim: int) -> float:
    freqs = np.exp(np.linspace(0.0, np.log(_TIME_MAX_FREQ), dim // 2))
    return float(np.sqrt((freqs**2).sum()))


def time_embed(params, cfg: MoTConfig, t: float) -> Tensor:
    feats = Tensor(time_features(t, cfg.time_dim)[None, :])
    return (feats @ params["time_embed.w"]).reshape(cfg.width) + params["time_embed.b"]


@dataclass
class ModelInput:
    layout: SequenceLayout
    vit: np.ndarray
    vae_cond: np.ndarray
    vae_gen: np.ndarray
    t: float | None = None


def build_input(layout: SequenceLayout, frames, cfg: MoTConfig, x_t: np.ndarray | None = None,
                t: float | None = None) -> ModelInput:
    """Encode keyframes for every image split of ``layout``; ``x_t`` is the
    (C, h, w) noised latent placed at the VAE_GEN split."""
    if not isinstance(frames, dict):
        frames = {f.shot: f for f in frames}
    vit, cond, gen = [], [], []
    for sp in layout.splits:
        if sp.role is Role.VIT:
            vit.append(frames[sp.shot].vit_tokens(cfg.vit_patch, cfg.vit_dim))
        elif sp.role is Role.VAE_COND:
            cond.append(patchify(frames[sp.shot].vae_latents, cfg.patch))
        elif sp.role is Role.VAE_GEN:
            if x_t is None or t is None:
                raise MissingTimeInput("VAE_GEN split needs x_t and t")
            gen.append(patchify(np.asarray(x_t, dtype=np.float64), cfg.patch))
    empty = lambda w: np.zeros((0, w))  # noqa: E731
    return ModelInput(
        layout,
        np.concatenate(vit) if vit else empty(cfg.vit_dim),
        np.concatenate(cond) if cond else empty(cfg.patch_dim),
        np.concatenate(gen) if gen else empty(cfg.patch_dim),
        t,
    )


# ---------------------------------------------------------------- forward

@dataclass
class ForwardOutput:
    text_logits: Tensor | None
    text_positions: np.ndarray
    velocity: Tensor | None
    gen_positions: np.ndarray
    hidden: Tensor


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = x @ w
    return y + b if b is not None else y


def _expert_qkv(x: Tensor, params, prefix: str, cfg: MoTConfig):
    m = x.shape[0]
    h = ag.rmsnorm(x, params[prefix + "attn_norm"])
    H, dh = cfg.n_heads, cfg.head_dim
    q = ag.l2_normalize((h @ params[prefix + "wq"]).reshape(m, H, dh))
    k = ag.l2_normalize((h @ params[prefix + "wk"]).reshape(m, H, dh))
    v = (h @ params[prefix + "wv"]).reshape(m, H, dh)
    return ag.mul(q, params[prefix + "q_gain"]), k, v


def _expert_out(x: Tensor, attn: Tensor, params, prefix: str) -> Tensor:
    x = x + attn @ params[prefix + "wo"]
    h = ag.rmsnorm(x, params[prefix + "ffn_norm"])
    return x + ag.gelu(h @ params[prefix + "w1"]) @ params[prefix + "w2"]


def forward(params, cfg: MoTConfig, inp: ModelInput, mask: np.ndarray | None = None,
            detach_understanding: bool = False, text_positions: np.ndarray | None = None,
            probe: dict | None = None) -> ForwardOutput:
    """Run the MoT over one sequence.

    ``detach_understanding`` computes every understanding-routed hidden
    state outside the tape, so losses on generation positions send no
    gradient into understanding weights or text embeddings.  ``probe`` may
    map a position to an additive perturbation of its input embedding.
    """
    layout = inp.layout
    n = layout.total
    if n > cfg.max_len:
        raise ag.ShapeMismatch(f"sequence length {n} exceeds max_len {cfg.max_len}")
    if mask is None:
        mask = compile_mask(layout).bits
    tags = layout.tags
    tok_pos = np.flatnonzero((tags == Role.TEXT) | (tags == Role.ID_PROMPT))
    vit_pos = np.flatnonzero(tags == Role.VIT)
    cond_pos = np.flatnonzero(tags == Role.VAE_COND)
    gen_pos = np.flatnonzero(tags == Role.VAE_GEN)
    und_idx = np.flatnonzero(np.isin(tags, [Role.TEXT, Role.ID_PROMPT, Role.VIT]))
    gen_idx = np.flatnonzero(np.isin(tags, [Role.VAE_COND, Role.VAE_GEN]))
    if len(vit_pos) != len(inp.vit) or len(cond_pos) != len(inp.vae_cond) or len(gen_pos) != len(inp.vae_gen):
        raise ag.ShapeMismatch("model input does not match the layout's image splits")
    if len(gen_pos) and inp.t is None:
        raise MissingTimeInput("VAE_GEN positions need a time value")

    def embed_understanding():
        parts, idx = [], []
        if len(tok_pos):
            parts.append(ag.take_rows(params["shared.tok_embed"], layout.token_ids[tok_pos]))
            idx.append(tok_pos)
        if len(vit_pos):
            h = ag.gelu(_linear(Tensor(inp.vit), params["connector.w1"], params["connector.b1"]))
            parts.append(_linear(h, params["connector.w2"], params["connector.b2"]))
            idx.append(vit_pos)
        return parts, idx

    if detach_understanding:
        with no_record():
            parts, idx = embed_understanding()
    else:
        parts, idx = embed_understanding()
    if len(cond_pos):
        parts.append(_linear(Tensor(inp.vae_cond), params["patch_embed.w"], params["patch_embed.b"]))
        idx.append(cond_pos)
    if len(gen_pos):
        g = _linear(Tensor(inp.vae_gen), params["patch_embed.w"], params["patch_embed.b"])
        parts.append(g + time_embed(params, cfg, inp.t))
        idx.append(gen_pos)
    x = ag.merge_rows(parts, idx, n)
    pos = ag.take_rows(params["shared.pos_embed"], np.arange(n))
    if detach_understanding:
        with no_record():
            pos_und = ag.take_rows(params["shared.pos_embed"], und_idx)
        pos = ag.merge_rows([pos_und, ag.take_rows(params["shared.pos_embed"], gen_idx)], [und_idx, gen_idx], n) \
            if len(gen_idx) else pos_und
    x = x + pos
    if probe:
        delta = np.zeros((n, cfg.width))
        for p_, vec in probe.items():
            delta[p_] = vec
        x = x + Tensor(delta)

    experts = [(e, ix) for e, ix in (("und", und_idx), ("gen", gen_idx)) if len(ix)]
    H, dh = cfg.n_heads, cfg.head_dim
    for l in range(cfg.n_layers):
        rows, qs, ks, vs = {}, [], [], []
        for e, ix in experts:
            frozen = detach_understanding and e == "und"
            if frozen:
                with no_record():
                    xe = ag.detach(ag.take_rows(x, ix))
                    q, k, v = _expert_qkv(xe, params, f"{e}.{l}.", cfg)
            else:
                xe = ag.take_rows(x, ix)
                q, k, v = _expert_qkv(xe, params, f"{e}.{l}.", cfg)
            rows[e] = xe
            qs.append(q)
            ks.append(k)
            vs.append(v)
        ixs = [ix for _, ix in experts]
        Q = ag.merge_rows(qs, ixs, n).transpose(1, 0, 2)
        K = ag.merge_rows(ks, ixs, n).transpose(1, 2, 0)
        V = ag.merge_rows(vs, ixs, n).transpose(1, 0, 2)
        A = ag.masked_softmax(Q @ K, mask)
        O = (A @ V).transpose(1, 0, 2).reshape(n, cfg.width)
        outs = []
        for e, ix in experts:
            frozen = detach_understanding and e == "und"
            if frozen:
                with no_record():
                    outs.append(_expert_out(rows[e], ag.detach(ag.take_rows(O, ix)), params, f"{e}.{l}."))
            else:
                outs.append(_expert_out(rows[e], ag.take_rows(O, ix), params, f"{e}.{l}."))
        x = ag.merge_rows(outs, ixs, n)

    if text_positions is None:
        text_positions = np.flatnonzero(tags == Role.TEXT)
    text_positions = np.asarray(text_positions, dtype=np.int64)
    logits = None
    if len(text_positions):
        if not np.all(np.isin(tags[text_positions], [Role.TEXT, Role.ID_PROMPT])):
            raise ag.ShapeMismatch("text logits requested at non-text positions")
        ht = ag.rmsnorm(ag.take_rows(x, text_positions), params["und.final_norm"])
        logits = ht @ params["shared.text_head"]
    velocity = None
    if len(gen_pos):
        hg = ag.rmsnorm(ag.take_rows(x, gen_pos), params["gen.final_norm"])
        velocity = _linear(hg, params["shared.vel_head"], params["shared.vel_bias"])
    return ForwardOutput(logits, text_positions, velocity, gen_pos, x)


def velocity_grid(out: ForwardOutput, cfg: MoTConfig) -> np.ndarray:
    """Predicted velocity at the VAE_GEN split as a (C, h, w) latent grid."""
    return unpatchify(out.velocity.data, cfg.latent_channels, cfg.latent_size, cfg.latent_size, cfg.patch)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"SMOTCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: dict[str, Tensor], cfg: MoTConfig, vocab: Vocabulary | None = None) -> None:
    """Header: magic, u32 version, u32-length config text; then u32 count and
    per parameter: u32 name length, name, u32 ndim, u32 dims, float64 LE."""
    conf = cfg.to_text()
    if vocab is not None:
        conf += "vocab=" + vocab.to_json() + "\n"
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    conf_b = conf.encode("utf-8")
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(conf_b)))
    buf.write(conf_b)
    buf.write(struct.pack("<I", len(params)))
    for name, p in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", p.data.ndim))
        buf.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], MoTConfig, Vocabulary | None]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    off = 8
    version, clen = struct.unpack_from("<II", data, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    conf = data[off:off + clen].decode("utf-8")
    off += clen
    vocab = None
    cfg_lines = []
    for line in conf.splitlines():
        if line.startswith("vocab="):
            vocab = Vocabulary.from_json(line[len("vocab="):])
        else:
            cfg_lines.append(line)
    cfg = MoTConfig.from_text("\n".join(cfg_lines))
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
        off += 8 * size
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params, cfg, vocab
