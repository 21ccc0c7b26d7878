"""Tokenizer, vocabulary and modality-tagged sequence layouts.

A layout is an ordered list of splits (TEXT, ID_PROMPT, VIT, VAE_COND,
VAE_GEN) that partitions the token positions of one training or inference
sequence.  Interleaved layouts put each shot's text before its keyframe and
wrap every image block in an ID prompt naming the frame and the entities the
frame description references.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoders import DOWNSAMPLE, vae_stub_encode, vit_stub_encode
from .script import Script, Shot, canonical_lines, frame_entities, serialize_script


class UnknownToken(KeyError):
    pass


class MissingKeyframe(KeyError):
    pass


class BadShotIndex(IndexError):
    pass


class InvalidLayout(ValueError):
    pass


class Role(IntEnum):
    TEXT = 0
    ID_PROMPT = 1
    VIT = 2
    VAE_COND = 3
    VAE_GEN = 4


VISION_ROLES = (Role.VIT, Role.VAE_COND, Role.VAE_GEN)
UNDERSTANDING_ROLES = (Role.TEXT, Role.ID_PROMPT, Role.VIT)

END_TOKEN = "<End>"
_FIXED_SPECIALS = ("<User>", "<Extension>", "<Continuation>", "<-", "->", END_TOKEN)
_SPECIAL_RE = re.compile(r"<-|->|<(?:User|Character|Environment|Frame|Video|Extension|Continuation|End)\d*>")
_PIECE_RE = re.compile(r" ?[A-Za-z]+| ?[0-9]+| ?[^\sA-Za-z0-9]|\s")
_BYTE_FMT = "<0x{:02X}>"


# ---------------------------------------------------------------- vocabulary

@dataclass(frozen=True)
class Vocabulary:
    """Special tokens, then 256 byte-fallback tokens, then text pieces."""

    tokens: tuple[str, ...]
    n_special: int
    max_entities: int
    max_shots: int
    _index: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        index = {t: i for i, t in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("duplicate token strings in vocabulary")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, pieces: Iterable[str] = (), max_entities: int = 8, max_shots: int = 16) -> "Vocabulary":
        specials = list(_FIXED_SPECIALS)
        for kind in ("Character", "Environment"):
            specials += [f"<{kind}{i}>" for i in range(1, max_entities + 1)]
        for kind in ("Frame", "Video"):
            specials += [f"<{kind}{i}>" for i in range(1, max_shots + 1)]
        byte_tokens = [_BYTE_FMT.format(b) for b in range(256)]
        seen = set(specials) | set(byte_tokens)
        words = []
        for p in pieces:
            if p in seen or _SPECIAL_RE.fullmatch(p):
                continue
            seen.add(p)
            words.append(p)
        return cls(tuple(specials + byte_tokens + words), len(specials), max_entities, max_shots)

    @classmethod
    def from_texts(cls, texts: Iterable[str], max_pieces: int = 2000, min_count: int = 1,
                   max_entities: int = 8, max_shots: int = 16) -> "Vocabulary":
        counts: Counter = Counter()
        for text in texts:
            for chunk in _SPECIAL_RE.split(text):
                counts.update(_PIECE_RE.findall(chunk))
        ranked = sorted((p for p, c in counts.items() if c >= min_count), key=lambda p: (-counts[p], p))
        return cls.build(ranked[:max_pieces], max_entities, max_shots)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise UnknownToken(token) from None

    def string(self, token_id: int) -> str:
        return self.tokens[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id < self.n_special

    @property
    def end_id(self) -> int:
        return self._index[END_TOKEN]

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens), "n_special": self.n_special,
                           "max_entities": self.max_entities, "max_shots": self.max_shots})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        return cls(tuple(d["tokens"]), d["n_special"], d["max_entities"], d["max_shots"])


def tokenize_text(text: str, v: Vocabulary) -> list[int]:
    ids: list[int] = []
    pos = 0
    for m in _SPECIAL_RE.finditer(text):
        ids.extend(_pieces(text[pos:m.start()], v))
        ids.append(v.id(m.group(0)))
        pos = m.end()
    ids.extend(_pieces(text[pos:], v))
    return ids


def _pieces(chunk: str, v: Vocabulary) -> list[int]:
    out = []
    for piece in _PIECE_RE.findall(chunk):
        if piece in v:
            out.append(v.id(piece))
        else:
            out.extend(v.id(_BYTE_FMT.format(b)) for b in piece.encode("utf-8"))
    return out


def detokenize(ids: Sequence[int], v: Vocabulary) -> str:
    out: list[str] = []
    pending = bytearray()
    for i in ids:
        tok = v.string(int(i))
        if len(tok) == 6 and tok.startswith("<0x") and v.n_special <= i < v.n_special + 256:
            pending.append(int(tok[3:5], 16))
            continue
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
            pending.clear()
        out.append(tok)
    if pending:
        out.append(pending.decode("utf-8", errors="replace"))
    return "".join(out)


@dataclass(frozen=True)
class TokenizedScript:
    ids: np.ndarray
    global_span: tuple[int, int]
    shot_spans: tuple[tuple[int, int], ...]


_FRAME_HEADER_RE = re.compile(r"^<Frame(\d+)>")


def tokenize(s: Script, v: Vocabulary) -> TokenizedScript:
    """Token ids of the canonical text, with the global section and each
    shot's section (Frame, Video and any marker after it) located."""
    serialize_script(s)
    ids: list[int] = []
    starts: list[int] = []
    for text, owner in canonical_lines(s):
        if owner is None and _FRAME_HEADER_RE.match(text):
            starts.append(len(ids))
        ids.extend(tokenize_text(text + "\n", v))
    bounds = starts + [len(ids)]
    g_end = starts[0] if starts else len(ids)
    return TokenizedScript(
        np.asarray(ids, dtype=np.int64),
        (0, g_end),
        tuple((bounds[i], bounds[i + 1]) for i in range(len(starts))),
    )


def id_prompt_tokens(shot: Shot) -> list[str]:
    """``<FrameN>`` then referenced characters, then environments, ascending."""
    chars, envs = frame_entities(shot)
    return ([f"<Frame{shot.index}>"] + [f"<Character{c}>" for c in chars]
            + [f"<Environment{e}>" for e in envs])


def insert_id_prompts(s: Script, v: Vocabulary) -> dict[int, list[int]]:
    """ID prompt token ids for every shot of ``s``."""
    return {sh.index: [v.id(t) for t in id_prompt_tokens(sh)] for sh in s.shots}


# ---------------------------------------------------------------- layouts

@dataclass(frozen=True)
class LayoutConfig:
    image_size: int = 64
    vit_patch: int = 8
    vit_dim: int = 32
    downsample: int = DOWNSAMPLE
    patch: int = 2

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def vit_tokens(self) -> int:
        return (self.image_size // self.vit_patch) ** 2

    @property
    def vae_tokens(self) -> int:
        return (self.latent_size // self.patch) ** 2


@dataclass
class Keyframe:
    shot: int
    pixels: np.ndarray
    _vae: np.ndarray | None = field(default=None, repr=False, compare=False)
    _vit: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def vae_latents(self) -> np.ndarray:
        if self._vae is None:
            self._vae = vae_stub_encode(self.pixels)
        return self._vae

    def vit_tokens(self, patch: int = 8, dim: int = 32) -> np.ndarray:
        key = (patch, dim)
        if key not in self._vit:
            self._vit[key] = vit_stub_encode(self.pixels, patch, dim)
        return self._vit[key]


@dataclass(frozen=True)
class Split:
    role: Role
    start: int
    length: int
    shot: int = 0
    entities: tuple[str, ...] = ()

    @property
    def stop(self) -> int:
        return self.start + self.length


@dataclass
class SequenceLayout:
    splits: list[Split]
    token_ids: np.ndarray
    vocab: Vocabulary | None = None
    id_prompting: bool = True
    gen_shot: int | None = None

    @property
    def total(self) -> int:
        return sum(s.length for s in self.splits)

    def __len__(self) -> int:
        return self.total

    @property
    def tags(self) -> np.ndarray:
        out = np.empty(self.total, dtype=np.int64)
        for sp in self.splits:
            out[sp.start:sp.stop] = int(sp.role)
        return out

    def positions(self, *roles: Role) -> np.ndarray:
        return np.flatnonzero(np.isin(self.tags, [int(r) for r in roles]))

    def validate(self) -> None:
        pos = 0
        for k, sp in enumerate(self.splits):
            if sp.start != pos or sp.length <= 0:
                raise InvalidLayout(f"split {k} span [{sp.start},{sp.length}] breaks the partition at {pos}")
            pos = sp.stop
            if sp.role is Role.ID_PROMPT:
                nxt = self.splits[k + 1] if k + 1 < len(self.splits) else None
                if nxt is None or nxt.role not in VISION_ROLES or nxt.shot != sp.shot:
                    raise InvalidLayout(f"ID prompt split {k} is not followed by an image split of shot {sp.shot}")
            if sp.role in VISION_ROLES and self.id_prompting:
                prev = self.splits[k - 1] if k else None
                if prev is None or prev.role is not Role.ID_PROMPT or prev.shot != sp.shot:
                    raise InvalidLayout(f"image split {k} lacks its ID prompt")
        if len(self.token_ids) != pos:
            raise InvalidLayout("token id array length differs from the split total")

    def text_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """(predicting position, target id) pairs for next-token prediction:
        every TEXT position except the first whose predecessor is TEXT."""
        tags = self.tags
        j = np.flatnonzero((tags[1:] == Role.TEXT) & (tags[:-1] == Role.TEXT)) + 1
        return j - 1, self.token_ids[j]

    def dump(self) -> str:
        lines = []
        for k, sp in enumerate(self.splits):
            lines.append(f"{k}: {sp.role.name} shot=[{sp.shot}] span=[{sp.start},{sp.length}] "
                         f"entities=[{','.join(sp.entities)}]")
        return "\n".join(lines) + "\n"


class _Builder:
    def __init__(self, vocab):
        self.splits: list[Split] = []
        self.ids: list[int] = []
        self.vocab = vocab

    def add(self, role: Role, ids_or_len, shot: int = 0, entities=()):
        if isinstance(ids_or_len, int):
            n, ids = ids_or_len, [-1] * ids_or_len
        else:
            ids = list(ids_or_len)
            n = len(ids)
        if n == 0:
            return
        if role is Role.TEXT and self.splits and self.splits[-1].role is Role.TEXT and self.splits[-1].shot == shot:
            last = self.splits[-1]
            self.splits[-1] = Split(role, last.start, last.length + n, shot)
        else:
            self.splits.append(Split(role, len(self.ids), n, shot, tuple(entities)))
        self.ids.extend(ids)

    def image(self, role: Role, shot: int, id_tokens: list[str], length: int, id_prompting: bool):
        if id_prompting:
            self.add(Role.ID_PROMPT, [self.vocab.id(t) for t in id_tokens], shot, id_tokens)
        self.add(role, length, shot)

    def build(self, id_prompting: bool, gen_shot=None) -> SequenceLayout:
        layout = SequenceLayout(self.splits, np.asarray(self.ids, dtype=np.int64), self.vocab,
                                id_prompting, gen_shot)
        layout.validate()
        return layout


def layout_text(s: Script, v: Vocabulary, end: bool = True) -> SequenceLayout:
    """Text-only view: global TEXT split, one TEXT split per shot, optional
    trailing ``<End>``."""
    tok = tokenize(s, v)
    b = _Builder(v)
    b.add(Role.TEXT, tok.ids[slice(*tok.global_span)], 0)
    for i, span in enumerate(tok.shot_spans, start=1):
        b.add(Role.TEXT, tok.ids[slice(*span)], i)
    if end:
        b.add(Role.TEXT, [v.end_id], len(tok.shot_spans))
    return b.build(True)


def layout_tokens(ids: Sequence[int], v: Vocabulary | None = None) -> SequenceLayout:
    """A single TEXT split over raw token ids (decoding prefixes)."""
    b = _Builder(v)
    b.add(Role.TEXT, list(ids), 0)
    return b.build(True)


def layout_interleaved(
    s: Script,
    frames: Mapping[int, Keyframe] | Sequence[Keyframe],
    v: Vocabulary,
    gen_shot: int,
    cfg: LayoutConfig = LayoutConfig(),
    id_prompting: bool = True,
    gen_vit: bool = False,
    require_target: bool = True,
) -> SequenceLayout:
    """Global text, then for each shot up to ``gen_shot``: its text and its
    keyframe block.  Earlier keyframes appear as ID+VIT and ID+VAE_COND;
    shot ``gen_shot`` ends the sequence with ID+VAE_GEN (preceded by ID+VIT
    only when ``gen_vit`` is set)."""
    if not isinstance(frames, Mapping):
        frames = {f.shot: f for f in frames}
    n = len(s.shots)
    if not 1 <= gen_shot <= n:
        raise BadShotIndex(f"gen_shot {gen_shot} outside [1, {n}]")
    for i in range(1, gen_shot + 1):
        if i not in frames and (i < gen_shot or require_target or gen_vit):
            raise MissingKeyframe(f"no keyframe for shot {i}")
    tok = tokenize(s, v)
    b = _Builder(v)
    b.add(Role.TEXT, tok.ids[slice(*tok.global_span)], 0)
    for i in range(1, gen_shot + 1):
        b.add(Role.TEXT, tok.ids[slice(*tok.shot_spans[i - 1])], i)
        ids = id_prompt_tokens(s.shot(i))
        if i < gen_shot or gen_vit:
            b.image(Role.VIT, i, ids, cfg.vit_tokens, id_prompting)
        if i < gen_shot:
            b.image(Role.VAE_COND, i, ids, cfg.vae_tokens, id_prompting)
        else:
            b.image(Role.VAE_GEN, i, ids, cfg.vae_tokens, id_prompting)
    return b.build(id_prompting, gen_shot)


def layout_pair(caption: str, characters: Sequence[int], environments: Sequence[int], v: Vocabulary,
                cfg: LayoutConfig = LayoutConfig(), id_prompting: bool = True) -> SequenceLayout:
    """Single image-text pair: caption TEXT, then ID+VAE_GEN for frame 1."""
    b = _Builder(v)
    b.add(Role.TEXT, tokenize_text(caption + "\n", v), 1)
    ids = (["<Frame1>"] + [f"<Character{c}>" for c in sorted(characters)]
           + [f"<Environment{e}>" for e in sorted(environments)])
    b.image(Role.VAE_GEN, 1, ids, cfg.vae_tokens, id_prompting)
    return b.build(id_prompting, 1)


def parse_dump(text: str) -> list[Split]:
    """Inverse of :meth:`SequenceLayout.dump`."""
    pat = re.compile(r"^(\d+): (\w+) shot=\[(\d+)\] span=\[(\d+),(\d+)\] entities=\[(.*)\]$")
    out = []
    for line in text.strip().splitlines():
        m = pat.match(line)
        if not m:
            raise InvalidLayout(f"bad dump line {line!r}")
        ents = tuple(e for e in m.group(6).split(",") if e)
        out.append(Split(Role[m.group(2)], int(m.group(4)), int(m.group(5)), int(m.group(3)), ents))
    return out
