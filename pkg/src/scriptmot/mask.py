"""Generalized causal attention masks over split layouts.

``bits[q, k]`` is True when query position ``q`` may attend to key ``k``:

* ``k`` lies in a strictly earlier split, or
* both lie in the same TEXT split and ``k <= q``, or
* both lie in the same vision group: an image split (VIT / VAE_COND /
  VAE_GEN) together with the ID_PROMPT split directly before it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layout import VISION_ROLES, InvalidLayout, Role, SequenceLayout
from .netpbm import format_pbm, parse_pbm


@dataclass(frozen=True)
class AttentionMask:
    bits: np.ndarray

    @property
    def n(self) -> int:
        return self.bits.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


def compile_mask(layout: SequenceLayout) -> AttentionMask:
    layout.validate()
    n = layout.total
    split_of = np.empty(n, dtype=np.int64)
    group_of = np.empty(n, dtype=np.int64)
    is_text = np.zeros(n, dtype=bool)
    for k, sp in enumerate(layout.splits):
        split_of[sp.start:sp.stop] = k
        # An ID prompt shares the group id of the image split it precedes.
        group_of[sp.start:sp.stop] = k + 1 if sp.role is Role.ID_PROMPT else k
        is_text[sp.start:sp.stop] = sp.role is Role.TEXT
    pos = np.arange(n)
    earlier = split_of[None, :] < split_of[:, None]
    same_split = split_of[None, :] == split_of[:, None]
    causal_text = same_split & is_text[:, None] & (pos[None, :] <= pos[:, None])
    same_group = (group_of[None, :] == group_of[:, None]) & ~is_text[:, None] & ~is_text[None, :]
    bits = earlier | causal_text | same_group
    bits.setflags(write=False)
    return AttentionMask(bits)


def oracle_mask(layout: SequenceLayout) -> AttentionMask:
    """Direct per-pair evaluation of the attention rules, written without any
    of the vectorised machinery used by :func:`compile_mask`."""
    splits = list(layout.splits)
    n = sum(sp.length for sp in splits)
    cursor = 0
    owner = []
    for k, sp in enumerate(splits):
        if sp.start != cursor or sp.length < 1:
            raise InvalidLayout("splits do not partition the sequence")
        if sp.role == Role.ID_PROMPT:
            if k + 1 >= len(splits) or splits[k + 1].role not in VISION_ROLES or splits[k + 1].shot != sp.shot:
                raise InvalidLayout("dangling ID prompt")
        for _ in range(sp.length):
            owner.append(k)
        cursor += sp.length

    def in_one_vision_group(a: int, b: int) -> bool:
        if a == b:
            return splits[a].role != Role.TEXT
        lo, hi = min(a, b), max(a, b)
        return hi == lo + 1 and splits[lo].role == Role.ID_PROMPT and splits[hi].role in VISION_ROLES

    bits = np.zeros((n, n), dtype=bool)
    for q in range(n):
        for k in range(n):
            sq, sk = owner[q], owner[k]
            if sk < sq:
                allowed = True
            elif sk == sq and splits[sq].role == Role.TEXT:
                allowed = k <= q
            else:
                allowed = in_one_vision_group(sq, sk)
            bits[q, k] = allowed
    return AttentionMask(bits)


def render_mask(m: AttentionMask) -> str:
    """Plain PBM (P1) text, row = query, 1 = may attend."""
    return format_pbm(m.bits)


def parse_mask(text: str) -> AttentionMask:
    bits = parse_pbm(text)
    if bits.shape[0] != bits.shape[1]:
        raise ValueError("attention mask bitmap must be square")
    return AttentionMask(bits)
