"""Script splitting, prompt styles and a deterministic synthetic corpus.

Synthetic keyframes are block images: every 8x8 pixel cell has one colour,
so they sit exactly inside the VAE stand-in's basis.  The top cell row marks
the shot index, the background shows the environment, and each character is
drawn as a small coloured glyph at a slot fixed by its index.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .netpbm import read_ppm, write_ppm
from .script import (
    AnnotatedText,
    DialogueSpan,
    EntityDef,
    EntityKind,
    EntityRef,
    MarkerKind,
    ModeMarker,
    Script,
    Shot,
    SpanCategory,
    UserPrompt,
    frame_entities,
    parse_script,
    serialize_script,
    validate_refs,
)

CONTINUATION_PROMPT = "continue the story with the next shot"
SUMMARY_MAX_WORDS = 40


class IndexOutOfRange(IndexError):
    pass


class TooFewShots(ValueError):
    pass


class EmptyInput(ValueError):
    pass


# ---------------------------------------------------------------- splitting

def split_for_extension(s: Script, k: int, prompt: str) -> Script:
    """Insert ``<Extension>`` and a new user prompt between shots k and k+1."""
    n = len(s.shots)
    if not 1 <= k < n:
        raise IndexOutOfRange(f"extension point {k} outside [1, {n - 1}]")
    return dataclasses.replace(s, mode_marker=ModeMarker(MarkerKind.EXTENSION, k, prompt))


def split_for_continuation(s: Script, system_prompt: str = CONTINUATION_PROMPT, at: int | None = None) -> Script:
    """Insert ``<Continuation>`` and a system prompt before shot ``at``
    (default: the last shot)."""
    n = len(s.shots)
    if n < 2:
        raise TooFewShots(f"continuation needs at least 2 shots, got {n}")
    at = n if at is None else at
    if not 2 <= at <= n:
        raise IndexOutOfRange(f"continuation point {at} outside [2, {n}]")
    return dataclasses.replace(s, mode_marker=ModeMarker(MarkerKind.CONTINUATION, at, system_prompt))


def strip_marker(s: Script) -> Script:
    return dataclasses.replace(s, mode_marker=None)


def _plain_words(text: AnnotatedText) -> str:
    parts = [r for r in text.runs if isinstance(r, str)]
    return " ".join(" ".join(parts).split())


def _first_sentence(text: str) -> str:
    for i, ch in enumerate(text):
        if ch in ".!?":
            return text[: i + 1]
    return text


def extractive_summary(shots) -> str:
    """First sentence of each video description (entity tokens and dialogue
    dropped), in shot order, cut to at most 40 words."""
    shots = list(shots)
    if not shots:
        raise EmptyInput("extractive_summary needs at least one shot")
    sentences = [_first_sentence(_plain_words(sh.video_description)) for sh in shots]
    words = " ".join(s for s in sentences if s).split()
    return " ".join(words[:SUMMARY_MAX_WORDS])


def sample_prompt_style(rng: np.random.Generator) -> int:
    return int(rng.integers(1, 5))


# ---------------------------------------------------------------- corpus types

@dataclass(frozen=True)
class CorpusConfig:
    interleaved: int = 8
    text_only: int = 8
    pairs: int = 8
    shots: tuple[int, int] = (1, 4)
    characters: tuple[int, int] = (1, 3)
    environments: tuple[int, int] = (1, 2)
    words: tuple[int, int] = (3, 8)
    vocab_size: int = 64
    image_size: int = 64
    dialogue_rate: float = 0.5
    # Chance that an entity absent from a keyframe is still named in the
    # shot's video description.
    cameo_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("interleaved", "text_only", "pairs", "vocab_size"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("shots", "characters", "environments", "words"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"{name} range {lo}..{hi} is empty")
        if self.characters[0] < 0 or self.environments[0] < 1:
            raise ValueError("scripts need at least one environment")
        if not 0.0 <= self.cameo_rate <= 1.0:
            raise ValueError("cameo_rate must lie in [0, 1]")
        if self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")


@dataclass
class InterleavedSample:
    script: Script
    keyframes: list[np.ndarray]  # uint8 HxWx3, one per shot


@dataclass
class ImagePair:
    caption: str
    characters: tuple[int, ...]
    environments: tuple[int, ...]
    image: np.ndarray


@dataclass
class Corpus:
    interleaved: list[InterleavedSample] = field(default_factory=list)
    text_scripts: list[Script] = field(default_factory=list)
    pairs: list[ImagePair] = field(default_factory=list)


# ---------------------------------------------------------------- generators

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"]
_VOWELS = ["a", "e", "i", "o", "u"]


def word_list(size: int) -> list[str]:
    """Deterministic pseudo-words: ``ba, be, ..., zu, bab, ...``."""
    syll = [o + v for o in _ONSETS for v in _VOWELS]
    words = list(syll)
    for a in syll:
        for b in _ONSETS:
            words.append(a + b)
            if len(words) >= size:
                break
        if len(words) >= size:
            break
    return words[:size]


def _sub_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *key]))


def _words(rng, vocab, lo, hi) -> list[str]:
    return [vocab[i] for i in rng.integers(0, len(vocab), size=int(rng.integers(lo, hi + 1)))]


def _sentence(rng, vocab, cfg, refs=()) -> list:
    words = _words(rng, vocab, *cfg.words)
    runs: list = []
    slots = sorted(rng.choice(len(words) + 1, size=len(refs), replace=True)) if refs else []
    pending = list(zip(slots, refs))
    for i, w in enumerate(words):
        while pending and pending[0][0] == i:
            runs.append(pending.pop(0)[1])
        runs.append(w)
    runs.extend(r for _, r in pending)
    return runs


def _assemble(items: list, end: str = ".") -> AnnotatedText:
    """Join words and refs with single spaces into canonical runs."""
    runs: list = []
    buf = ""
    for i, it in enumerate(items):
        sep = "" if i == 0 else " "
        if isinstance(it, str):
            buf += sep + it
        else:
            buf += sep
            if buf:
                runs.append(buf)
            buf = ""
            runs.append(it)
    buf += end
    if buf:
        runs.append(buf)
    return AnnotatedText(tuple(runs))


def random_script(rng: np.random.Generator, cfg: CorpusConfig, vocab: list[str] | None = None,
                  ) -> tuple[Script, list[tuple[int, DialogueSpan]]]:
    """A valid random script and the dialogue spans planted in it."""
    vocab = vocab or word_list(cfg.vocab_size)
    n_chars = int(rng.integers(cfg.characters[0], cfg.characters[1] + 1))
    n_envs = int(rng.integers(cfg.environments[0], cfg.environments[1] + 1))
    n_shots = int(rng.integers(cfg.shots[0], cfg.shots[1] + 1))
    style = sample_prompt_style(rng)
    user = UserPrompt(" ".join(_words(rng, vocab, *cfg.words)), style)
    chars = tuple(
        EntityDef(EntityKind.CHARACTER, i, " ".join(_words(rng, vocab, *cfg.words)),
                  " ".join(_words(rng, vocab, 1, 3)))
        for i in range(1, n_chars + 1)
    )
    envs = tuple(
        EntityDef(EntityKind.ENVIRONMENT, i, " ".join(_words(rng, vocab, *cfg.words)),
                  " ".join(_words(rng, vocab, 1, 3)))
        for i in range(1, n_envs + 1)
    )
    planted = []
    shots = []
    for si in range(1, n_shots + 1):
        env = EntityRef(EntityKind.ENVIRONMENT, int(rng.integers(1, n_envs + 1)))
        k = int(rng.integers(0, n_chars + 1))
        present = sorted(rng.choice(np.arange(1, n_chars + 1), size=k, replace=False)) if k else []
        refs = [EntityRef(EntityKind.CHARACTER, int(c)) for c in present] + [env]
        frame = _assemble(_sentence(rng, vocab, cfg, refs))
        cameos = [EntityRef(EntityKind.CHARACTER, c) for c in range(1, n_chars + 1)
                  if c not in present and cfg.cameo_rate and rng.random() < cfg.cameo_rate]
        cameos += [EntityRef(EntityKind.ENVIRONMENT, e) for e in range(1, n_envs + 1)
                   if e != env.index and cfg.cameo_rate and rng.random() < cfg.cameo_rate]
        items = _sentence(rng, vocab, cfg, refs[:1] + cameos)
        video_runs = list(_assemble(items).runs)
        for _ in range(2):
            if rng.random() < cfg.dialogue_rate:
                category = SpanCategory.SOUND_EFFECT if rng.random() < 0.3 else SpanCategory.DIALOGUE
                span = DialogueSpan(" ".join(_words(rng, vocab, 1, 4)) + ".", category)
                planted.append((si, span))
                if isinstance(video_runs[-1], str):
                    video_runs[-1] += " "
                else:
                    video_runs.append(" ")
                video_runs.append(span)
        shots.append(Shot(si, frame, AnnotatedText(tuple(video_runs))))
    return Script(user, chars, envs, tuple(shots)), planted


def _palette(seed: int, key: int, n: int) -> np.ndarray:
    rng = _sub_rng(seed, 900, key)
    return rng.integers(24, 232, size=(n, 3)).astype(np.uint8)


# Glyph shapes in cell units, anchored at a character's slot.
_GLYPHS = [
    [(0, 0), (1, 0), (0, 1), (1, 1)],
    [(0, 0), (1, 0), (2, 0)],
    [(0, 0), (0, 1), (0, 2)],
    [(0, 0), (1, 1), (2, 0)],
    [(1, 0), (0, 1), (1, 1), (2, 1)],
    [(0, 0), (2, 0), (1, 1)],
]


def render_keyframe(characters, environments, shot: int, seed: int = 0, size: int = 64,
                    cell: int = 8) -> np.ndarray:
    """Block image determined by (characters, environments, shot, seed)."""
    g = size // cell
    grid = np.zeros((g, g, 3), dtype=np.uint8)
    env_colors = _palette(seed, 1, 16)
    char_colors = _palette(seed, 2, 16)
    shot_colors = _palette(seed, 3, 32)
    envs = sorted(environments)
    base = env_colors[(envs[0] - 1) % 16] if envs else np.array([128, 128, 128], np.uint8)
    grid[:] = base
    for e in envs[1:]:
        grid[g - 1, :] = env_colors[(e - 1) % 16]
    grid[0, :] = shot_colors[(shot - 1) % 32]
    grid[0, (shot - 1) % g] = 255 - shot_colors[(shot - 1) % 32]
    for c in sorted(characters):
        slot = c - 1
        row0 = 1 + 3 * ((slot // max(g // 3, 1)) % max((g - 2) // 3, 1))
        col0 = (3 * slot) % max(g - 2, 1)
        for dr, dc in _GLYPHS[slot % len(_GLYPHS)]:
            r, cc = row0 + dr, col0 + dc
            if 0 <= r < g and 0 <= cc < g:
                grid[r, cc] = char_colors[slot % 16]
    return np.kron(grid, np.ones((cell, cell, 1), dtype=np.uint8))


def keyframes_for(s: Script, seed: int, size: int = 64) -> list[np.ndarray]:
    out = []
    for sh in s.shots:
        chars, envs = frame_entities(sh)
        out.append(render_keyframe(chars, envs, sh.index, seed, size))
    return out


def make_synthetic_corpus(cfg: CorpusConfig) -> Corpus:
    vocab = word_list(cfg.vocab_size)
    corpus = Corpus()
    for i in range(cfg.interleaved):
        s, _ = random_script(_sub_rng(cfg.seed, 1, i), cfg, vocab)
        corpus.interleaved.append(InterleavedSample(s, keyframes_for(s, cfg.seed, cfg.image_size)))
    for i in range(cfg.text_only):
        rng = _sub_rng(cfg.seed, 2, i)
        s, _ = random_script(rng, cfg, vocab)
        choice = rng.integers(0, 3)
        if choice == 1 and len(s.shots) >= 2:
            k = int(rng.integers(1, len(s.shots)))
            s = split_for_extension(s, k, extractive_summary(s.shots[k:]))
        elif choice == 2 and len(s.shots) >= 2:
            s = split_for_continuation(s)
        corpus.text_scripts.append(s)
    for i in range(cfg.pairs):
        rng = _sub_rng(cfg.seed, 3, i)
        n_chars = int(rng.integers(cfg.characters[0], cfg.characters[1] + 1))
        n_envs = int(rng.integers(cfg.environments[0], cfg.environments[1] + 1))
        k = int(rng.integers(0, n_chars + 1))
        chars = tuple(sorted(int(c) for c in rng.choice(np.arange(1, n_chars + 1), size=k, replace=False))) if k else ()
        envs = (int(rng.integers(1, n_envs + 1)),)
        caption = " ".join(_words(rng, vocab, *cfg.words))
        corpus.pairs.append(ImagePair(caption, chars, envs, render_keyframe(chars, envs, 1, cfg.seed, cfg.image_size)))
    return corpus


# ---------------------------------------------------------------- manifest

MANIFEST = "manifest.txt"


def write_corpus(corpus: Corpus, root) -> Path:
    """One directory per subset plus ``manifest.txt``::

        interleaved <id> <script path> <keyframe path> ...
        text <id> <script path>
        pair <id> <caption path> <image path> C=1,2 E=1
    """
    root = Path(root)
    lines = []
    for sub in ("interleaved", "text", "pairs"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, smp in enumerate(corpus.interleaved):
        sid = f"il{i:05d}"
        rel = f"interleaved/{sid}.script"
        (root / rel).write_text(serialize_script(smp.script), encoding="utf-8")
        frames = []
        for j, img in enumerate(smp.keyframes, start=1):
            fr = f"interleaved/{sid}_f{j}.ppm"
            write_ppm(root / fr, img)
            frames.append(fr)
        lines.append(" ".join(["interleaved", sid, rel, *frames]))
    for i, s in enumerate(corpus.text_scripts):
        sid = f"tx{i:05d}"
        rel = f"text/{sid}.script"
        (root / rel).write_text(serialize_script(s), encoding="utf-8")
        lines.append(f"text {sid} {rel}")
    for i, p in enumerate(corpus.pairs):
        sid = f"pr{i:05d}"
        cap, img = f"pairs/{sid}.txt", f"pairs/{sid}.ppm"
        (root / cap).write_text(p.caption + "\n", encoding="utf-8")
        write_ppm(root / img, p.image)
        lines.append(f"pair {sid} {cap} {img} C={','.join(map(str, p.characters))} "
                     f"E={','.join(map(str, p.environments))}")
    path = root / MANIFEST
    path.write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    return path


def read_corpus(root) -> Corpus:
    root = Path(root)
    corpus = Corpus()

    def ints(field_: str) -> tuple[int, ...]:
        body = field_.split("=", 1)[1]
        return tuple(int(x) for x in body.split(",") if x)

    for line in (root / MANIFEST).read_text(encoding="utf-8").splitlines():
        parts = line.split()
        if not parts:
            continue
        kind = parts[0]
        if kind == "interleaved":
            s = parse_script((root / parts[2]).read_text(encoding="utf-8"))
            corpus.interleaved.append(InterleavedSample(s, [read_ppm(root / p) for p in parts[3:]]))
        elif kind == "text":
            corpus.text_scripts.append(parse_script((root / parts[2]).read_text(encoding="utf-8")))
        elif kind == "pair":
            caption = (root / parts[2]).read_text(encoding="utf-8").rstrip("\n")
            corpus.pairs.append(ImagePair(caption, ints(parts[4]), ints(parts[5]), read_ppm(root / parts[3])))
        else:
            raise ValueError(f"unknown manifest entry {kind!r}")
    return corpus


def corpus_fingerprint(root) -> bytes:
    """Concatenated bytes of every file under ``root`` in sorted order."""
    root = Path(root)
    out = bytearray()
    for dirpath, _, files in sorted(os.walk(root)):
        for name in sorted(files):
            p = Path(dirpath) / name
            out += str(p.relative_to(root)).encode() + b"\0" + p.read_bytes()
    return bytes(out)


def check_corpus(corpus: Corpus) -> int:
    """Number of scripts failing :func:`validate_refs`."""
    scripts = [s.script for s in corpus.interleaved] + corpus.text_scripts
    return sum(1 for s in scripts if validate_refs(s))
