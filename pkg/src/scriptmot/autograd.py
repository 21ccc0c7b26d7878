"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Every value is a float64 numpy array.  Operations executed while a :class:`Tape`
is active, and touching at least one tensor that requires gradients, are
recorded in execution order; :func:`backward` replays that record in reverse.
Outside a tape nothing is recorded, which is how inference runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class AllMaskedRow(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Execution-ordered record of differentiable operations.

    Use as a context manager; one tape per training step.
    """

    nodes: list[_Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)


_ACTIVE: list[Tape] = []


class no_record:
    """Suspend recording; results computed inside are constants."""

    def __enter__(self):
        self._saved = list(_ACTIVE)
        _ACTIVE.clear()

    def __exit__(self, *exc):
        _ACTIVE.extend(self._saved)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(p.requires_grad for p in parents):
        tape = _ACTIVE[-1]
        out.requires_grad = True
        out._tape = tape
        out._index = len(tape.nodes)
        tape.nodes.append(_Node(out, parents, backward))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes[: loss._index + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_trailing(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, sb) if sb != sa else g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_trailing(a.data, b.data, "sub")
    sb = b.shape
    return _result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < b.data.ndim:
        a, b = b, a
    _check_trailing(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return g * bd, _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return _result(a.data * c, (a,), lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * ad * g,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th**2) * dinner),)

    return _result(out, (x,), bw)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path back to ``x``."""
    return Tensor(x.data)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeMismatch(f"matmul: shapes {ad.shape} and {bd.shape} are incompatible")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _result(ad @ bd, (a, b), bw)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _result(out, (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if axes else tuple(reversed(range(a.data.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _result(np.array(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _result(np.array(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),))


# ---------------------------------------------------------------- normalisation

def rmsnorm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    xd, gd = x.data, gain.data
    if gd.shape != xd.shape[-1:]:
        raise ShapeMismatch(f"rmsnorm: gain {gd.shape} vs input {xd.shape}")
    d = xd.shape[-1]
    inv = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + eps)
    xhat = xd * inv

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * xhat, gd.shape)

    return _result(xhat * gd, (x, gain), bw)


def l2_normalize(x: Tensor) -> Tensor:
    """Scale every slice along the last axis to unit Euclidean norm."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, 1e-300)
    y = xd / norm

    def bw(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _result(y, (x,), bw)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis restricted to keys where ``mask`` is True.

    Forbidden keys get exactly zero weight.
    """
    sd = scores.data
    mask = np.asarray(mask, dtype=bool)
    if sd.shape[sd.ndim - mask.ndim:] != mask.shape:
        raise ShapeMismatch(f"masked_softmax: mask {mask.shape} vs scores {sd.shape}")
    if not mask.any(axis=-1).all():
        raise AllMaskedRow("every query row needs at least one admissible key")
    masked = np.where(mask, sd, -np.inf)
    e = np.exp(masked - masked.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _result(y, (scores,), bw)


def log_softmax(x: Tensor) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _result(y, (x,), bw)


# ---------------------------------------------------------------- indexing

def take_rows(x: Tensor, idx) -> Tensor:
    """Gather ``x[idx]`` along the first axis (embedding lookup)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result(x.data[idx], (x,), bw)


def merge_rows(parts: Sequence[Tensor], indices: Sequence, n: int) -> Tensor:
    """Assemble an ``n``-row tensor with ``out[indices[i]] = parts[i]``.

    The index sets must partition ``range(n)``.
    """
    parts = [p for p, ix in zip(parts, indices) if len(ix)]
    indices = [np.asarray(ix, dtype=np.int64) for ix in indices if len(ix)]
    if not parts:
        raise ShapeMismatch("merge_rows: nothing to merge")
    tail = parts[0].shape[1:]
    out = np.empty((n,) + tail)
    covered = 0
    for p, ix in zip(parts, indices):
        if p.shape != (len(ix),) + tail:
            raise ShapeMismatch(f"merge_rows: part {p.shape} vs {len(ix)} rows")
        out[ix] = p.data
        covered += len(ix)
    if covered != n:
        raise ShapeMismatch("merge_rows: index sets do not cover the output")
    return _result(out, tuple(parts), lambda g: tuple(g[ix] for ix in indices))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    return _result(
        np.concatenate([p.data for p in parts], axis=axis),
        tuple(parts),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def pick(x: Tensor, rows, cols) -> Tensor:
    """``x[rows, cols]`` for a 2-D tensor, as a 1-D tensor."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, (rows, cols), g)
        return (out,)

    return _result(x.data[rows, cols], (x,), bw)


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckEntry:
    name: str
    analytic_norm: float
    max_abs_error: float
    relative_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry]
    tolerance: float
    step: float

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)

    def format(self) -> str:
        lines = [f"{'parameter':<40} {'rel.err':>10} {'|grad|max':>12}  status"]
        for e in self.entries:
            status = "ok" if e.passed else "FAIL"
            lines.append(f"{e.name:<40} {e.relative_error:10.3e} {e.analytic_norm:12.4e}  {status}")
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: max relative error {self.max_relative_error:.3e} "
                     f"(tolerance {self.tolerance:g}, step {self.step:g})")
        return "\n".join(lines)


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f()`` with central finite differences.

    ``f`` must read ``params`` afresh on every call.  The relative error of a
    parameter is max|analytic - numeric| / max(max|analytic|, max|numeric|).
    With ``max_entries`` set, larger tensors are probed at that many random
    coordinates, half of them drawn from entries with a nonzero gradient.
    """
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape():
        loss = f()
        backward(loss)
    entries = []
    for name, p in params.items():
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            # Half the probes go to coordinates with a nonzero gradient, so
            # sparse tables (embeddings) are not checked only where both are 0.
            live = np.flatnonzero(analytic.reshape(-1))
            k = min(len(live), max_entries // 2)
            picked = rng.choice(live, size=k, replace=False) if k else np.zeros(0, dtype=np.int64)
            rest = np.setdiff1d(np.arange(flat.size), picked)
            coords = np.concatenate([picked, rng.choice(rest, size=max_entries - k, replace=False)])
        numeric = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            flat[c] = orig + step
            up = float(f().data)
            flat[c] = orig - step
            down = float(f().data)
            flat[c] = orig
            numeric[j] = (up - down) / (2 * step)
        a = analytic.reshape(-1)[coords]
        err = float(np.max(np.abs(a - numeric))) if len(coords) else 0.0
        denom = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
        rel = err / denom if denom > 1e-12 else err
        entries.append(GradCheckEntry(name, float(np.max(np.abs(a), initial=0.0)), err, rel, rel < tolerance))
        p.grad = None
    return GradCheckReport(entries, tolerance, step)
