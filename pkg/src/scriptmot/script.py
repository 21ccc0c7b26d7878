"""Structured multimodal script: AST, parser, canonical serializer, checks.

Concrete grammar (one line per header, one line per body)::

    <User> style=2
    a lonely knight crosses the frozen sea
    <Character1>
    a tall knight in silver armor
    short: tall silver knight
    <Environment1>
    a frozen sea under a pale sky
    short: frozen sea
    <Frame1>
    wide shot, <Character1> stands on <Environment1>
    <Video1>
    <Character1> whispers <-Now close your eyes. Go on.-> as <-SFX: wind howls->
    <Extension>
    the knight finds a ship

Bodies spanning several source lines are joined with single spaces.  Inline
``<CharacterN>`` / ``<EnvironmentN>`` tokens are entity references;
``<-`` ... ``->`` encloses a dialogue span, and a span whose content starts
with ``SFX: `` is a sound effect.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Union


class EntityKind(str, Enum):
    CHARACTER = "Character"
    ENVIRONMENT = "Environment"


class SpanCategory(str, Enum):
    DIALOGUE = "Dialogue"
    SOUND_EFFECT = "SoundEffect"


class MarkerKind(str, Enum):
    EXTENSION = "Extension"
    CONTINUATION = "Continuation"


DIALOGUE_OPEN = "<-"
DIALOGUE_CLOSE = "->"
SFX_PREFIX = "SFX: "
SHORT_PREFIX = "short: "
MAX_SHORT_CAPTION_WORDS = 10


@dataclass(frozen=True)
class EntityRef:
    kind: EntityKind
    index: int

    @property
    def token(self) -> str:
        return f"<{self.kind.value}{self.index}>"


@dataclass(frozen=True)
class DialogueSpan:
    content: str
    category: SpanCategory = SpanCategory.DIALOGUE

    def render(self) -> str:
        body = SFX_PREFIX + self.content if self.category is SpanCategory.SOUND_EFFECT else self.content
        return DIALOGUE_OPEN + body + DIALOGUE_CLOSE


Run = Union[str, EntityRef, DialogueSpan]


@dataclass(frozen=True)
class AnnotatedText:
    runs: tuple[Run, ...] = ()

    def render(self) -> str:
        out = []
        for r in self.runs:
            if isinstance(r, str):
                out.append(r)
            elif isinstance(r, EntityRef):
                out.append(r.token)
            else:
                out.append(r.render())
        return "".join(out)

    def refs(self) -> list[EntityRef]:
        return [r for r in self.runs if isinstance(r, EntityRef)]

    def spans(self) -> list[DialogueSpan]:
        return [r for r in self.runs if isinstance(r, DialogueSpan)]

    def plain(self) -> str:
        """Text with references spelled out and dialogue kept verbatim."""
        return self.render()

    def __str__(self) -> str:
        return self.render()


@dataclass(frozen=True)
class EntityDef:
    kind: EntityKind
    index: int
    caption: str
    short_caption: str = ""

    @property
    def token(self) -> str:
        return f"<{self.kind.value}{self.index}>"


@dataclass(frozen=True)
class Shot:
    index: int
    frame_description: AnnotatedText
    video_description: AnnotatedText
    keyframe_ref: str | None = None


@dataclass(frozen=True)
class UserPrompt:
    text: str
    style: int = 1


@dataclass(frozen=True)
class ModeMarker:
    """``<Extension>`` sits after shot ``position``; ``<Continuation>`` sits
    before shot ``position``."""

    kind: MarkerKind
    position: int
    prompt: str

    @property
    def after_shot(self) -> int:
        return self.position if self.kind is MarkerKind.EXTENSION else self.position - 1


@dataclass(frozen=True)
class Script:
    user_prompt: UserPrompt
    characters: tuple[EntityDef, ...] = ()
    environments: tuple[EntityDef, ...] = ()
    shots: tuple[Shot, ...] = ()
    mode_marker: ModeMarker | None = None

    def entities(self) -> tuple[EntityDef, ...]:
        return self.characters + self.environments

    def shot(self, index: int) -> Shot:
        for s in self.shots:
            if s.index == index:
                return s
        raise KeyError(index)


# ---------------------------------------------------------------- diagnostics

@dataclass(frozen=True, order=True)
class Diagnostic:
    line: int
    col: int
    code: str = field(compare=False)
    message: str = field(compare=False)

    def format(self, path: str = "<script>") -> str:
        return f"{path}:{self.line}:{self.col}: {self.code} {self.message}"


class ScriptError(ValueError):
    def __init__(self, diagnostics: list[Diagnostic]):
        self.diagnostics = sorted(diagnostics)
        super().__init__("\n".join(d.format() for d in self.diagnostics))


class InvariantViolation(ScriptError):
    pass


# ---------------------------------------------------------------- lexing

_TOKEN_RE = re.compile(r"<[A-Za-z]+\d*>")
_INLINE_RE = re.compile(r"<-|->|<[A-Za-z]+\d*>")
_HEADER_RE = re.compile(r"^<(User|Character|Environment|Frame|Video|Extension|Continuation)(\d*)>(.*)$")
_STYLE_RE = re.compile(r"^ style=([1-4])$")
_KEYFRAME_RE = re.compile(r"^ @([A-Za-z0-9_.\-/]+)$")
_ENTITY_TOKEN_RE = re.compile(r"^<(Character|Environment)([1-9]\d*)>$")

HEADER_KINDS = ("User", "Character", "Environment", "Frame", "Video", "Extension", "Continuation")
_INDEXED = {"Character", "Environment", "Frame", "Video"}


def parse_annotated(text: str, line: int = 1, col: int = 1, diags: list | None = None,
                    positions: dict | None = None) -> AnnotatedText:
    """Split a body line into plain text, entity refs and dialogue spans.

    ``col`` is the source column of ``text[0]``.  Problems are appended to
    ``diags``; ``positions`` (if given) receives ``(run_index) -> (line, col)``
    for every reference.
    """
    diags = [] if diags is None else diags
    runs: list[Run] = []
    buf = []
    pos = 0
    open_at = -1

    def flush():
        joined = "".join(buf)
        if joined:
            runs.append(joined)
        buf.clear()

    for m in _INLINE_RE.finditer(text):
        tok = m.group(0)
        if open_at >= 0:
            if tok == DIALOGUE_CLOSE:
                content = text[open_at + 2:m.start()]
                if content.startswith(SFX_PREFIX):
                    runs.append(DialogueSpan(content[len(SFX_PREFIX):], SpanCategory.SOUND_EFFECT))
                else:
                    runs.append(DialogueSpan(content, SpanCategory.DIALOGUE))
                open_at = -1
                pos = m.end()
            elif tok == DIALOGUE_OPEN:
                diags.append(Diagnostic(line, col + m.start(), "UnclosedDialogue",
                                        "dialogue opened before the previous one closed"))
                open_at = m.start()
            continue
        buf.append(text[pos:m.start()])
        pos = m.end()
        if tok == DIALOGUE_OPEN:
            flush()
            open_at = m.start()
        elif tok == DIALOGUE_CLOSE:
            diags.append(Diagnostic(line, col + m.start(), "StrayDialogueClose", "'->' without matching '<-'"))
            buf.append(tok)
        else:
            em = _ENTITY_TOKEN_RE.match(tok)
            if em:
                flush()
                if positions is not None:
                    positions[len(runs)] = (line, col + m.start())
                runs.append(EntityRef(EntityKind(em.group(1)), int(em.group(2))))
            else:
                diags.append(Diagnostic(line, col + m.start(), "UnknownSpecialToken",
                                        f"{tok} is not allowed inside a description"))
                buf.append(tok)
    if open_at >= 0:
        diags.append(Diagnostic(line, col + open_at, "UnclosedDialogue", "'<-' is never closed"))
        buf.append(text[open_at:])
    else:
        buf.append(text[pos:])
    flush()
    return AnnotatedText(tuple(runs))


@dataclass
class _Section:
    kind: str
    index: int | None
    line: int
    extra: str
    body: list[tuple[int, str]] = field(default_factory=list)


def _split_sections(source: str, diags: list[Diagnostic]) -> list[_Section]:
    sections: list[_Section] = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        line = raw.rstrip()
        m = _HEADER_RE.match(line)
        if m and (m.group(1) in _INDEXED) == bool(m.group(2)):
            kind, num, extra = m.group(1), m.group(2), m.group(3)
            if kind not in ("User", "Frame") and extra.strip():
                m = None
            elif kind == "Frame" and extra and not _KEYFRAME_RE.match(extra):
                m = None
            else:
                sections.append(_Section(kind, int(num) if num else None, lineno, extra))
                continue
        stripped = line.strip()
        if not stripped:
            continue
        tm = _TOKEN_RE.fullmatch(stripped)
        if tm and not _ENTITY_TOKEN_RE.match(stripped):
            diags.append(Diagnostic(lineno, line.index(stripped) + 1, "UnknownSpecialToken",
                                    f"{stripped} is not a section token"))
            continue
        if not sections:
            diags.append(Diagnostic(lineno, 1, "MisplacedText", "text before the first section header"))
            continue
        sections[-1].body.append((lineno, line))
    return sections


def _join_body(body: list[tuple[int, str]]) -> tuple[str, int, int]:
    """Join body lines; returns (text, line, col) of the first character."""
    if not body:
        return "", 0, 0
    lineno, first = body[0]
    col = len(first) - len(first.lstrip()) + 1
    return " ".join(l.strip() for _, l in body), lineno, col


def parse_script(source: str) -> Script:
    """Parse script text into a :class:`Script`.

    Raises :class:`ScriptError` carrying positioned diagnostics.
    """
    diags: list[Diagnostic] = []
    sections = _split_sections(source, diags)
    user: UserPrompt | None = None
    chars: dict[int, EntityDef] = {}
    envs: dict[int, EntityDef] = {}
    frames: dict[int, tuple[AnnotatedText, _Section]] = {}
    videos: dict[int, AnnotatedText] = {}
    marker: tuple[MarkerKind, int, str, _Section] | None = None
    ref_positions: list[tuple[EntityRef, int, int]] = []
    decl_line: dict[tuple[str, int], int] = {}
    shot_order: list[int] = []
    keyframes: dict[int, str] = {}

    def body_text(sec: _Section, what: str) -> str:
        text, _, _ = _join_body(sec.body)
        if not text:
            diags.append(Diagnostic(sec.line, 1, "EmptySection", f"{what} has no content"))
        return text

    def annotated(sec: _Section) -> AnnotatedText:
        text, lineno, col = _join_body(sec.body)
        if not text:
            return AnnotatedText()
        pos: dict[int, tuple[int, int]] = {}
        at = parse_annotated(text, lineno, col, diags, pos)
        for i, (l, c) in pos.items():
            ref_positions.append((at.runs[i], l, c))
        return at

    for sec in sections:
        kind = sec.kind
        if kind == "User":
            if user is not None:
                diags.append(Diagnostic(sec.line, 1, "DuplicateSection", "second <User> section"))
                continue
            style = 1
            if sec.extra:
                sm = _STYLE_RE.match(sec.extra)
                if sm:
                    style = int(sm.group(1))
                else:
                    diags.append(Diagnostic(sec.line, 7, "MalformedHeader", f"bad user header suffix {sec.extra!r}"))
            user = UserPrompt(body_text(sec, "<User>"), style)
        elif kind in ("Character", "Environment"):
            table = chars if kind == "Character" else envs
            if sec.index in table:
                diags.append(Diagnostic(sec.line, 1, "DuplicateEntityIndex", f"<{kind}{sec.index}> declared twice"))
                continue
            if shot_order:
                diags.append(Diagnostic(sec.line, 1, "MisplacedSection", f"<{kind}{sec.index}> after shot content"))
            lines = [l.strip() for _, l in sec.body]
            short = ""
            if lines and lines[-1].startswith(SHORT_PREFIX) and len(lines) > 1:
                short = lines.pop()[len(SHORT_PREFIX):]
            caption = " ".join(lines)
            if not caption:
                diags.append(Diagnostic(sec.line, 1, "EmptySection", f"<{kind}{sec.index}> has no caption"))
            ek = EntityKind(kind)
            for tok in _TOKEN_RE.findall(caption + " " + short):
                diags.append(Diagnostic(sec.line + 1, 1, "UnknownSpecialToken", f"{tok} inside an entity caption"))
            if len(short.split()) > MAX_SHORT_CAPTION_WORDS:
                diags.append(Diagnostic(sec.body[-1][0], 1, "LongShortCaption",
                                        f"short caption of <{kind}{sec.index}> exceeds {MAX_SHORT_CAPTION_WORDS} words"))
            table[sec.index] = EntityDef(ek, sec.index, caption, short)
            decl_line[(kind, sec.index)] = sec.line
        elif kind == "Frame":
            if sec.index in frames:
                diags.append(Diagnostic(sec.line, 1, "DuplicateSection", f"<Frame{sec.index}> declared twice"))
                continue
            if not sec.body:
                diags.append(Diagnostic(sec.line, 1, "EmptySection", f"<Frame{sec.index}> has no content"))
            frames[sec.index] = (annotated(sec), sec)
            if sec.extra:
                keyframes[sec.index] = _KEYFRAME_RE.match(sec.extra).group(1)
            shot_order.append(sec.index)
        elif kind == "Video":
            if sec.index in videos:
                diags.append(Diagnostic(sec.line, 1, "DuplicateSection", f"<Video{sec.index}> declared twice"))
                continue
            if not shot_order or shot_order[-1] != sec.index:
                diags.append(Diagnostic(sec.line, 1, "MisplacedSection",
                                        f"<Video{sec.index}> must directly follow <Frame{sec.index}>"))
            if not sec.body:
                diags.append(Diagnostic(sec.line, 1, "EmptySection", f"<Video{sec.index}> has no content"))
            videos[sec.index] = annotated(sec)
        else:
            if marker is not None:
                diags.append(Diagnostic(sec.line, 1, "DuplicateSection", "more than one mode marker"))
                continue
            mk = MarkerKind(kind)
            after = len(shot_order)
            position = after if mk is MarkerKind.EXTENSION else after + 1
            marker = (mk, position, body_text(sec, f"<{kind}>"), sec)

    if user is None:
        diags.append(Diagnostic(1, 1, "EmptySection", "missing <User> section"))
        user = UserPrompt("", 1)

    for kind, table in (("Character", chars), ("Environment", envs)):
        for i, idx in enumerate(sorted(table), start=1):
            if idx != i:
                diags.append(Diagnostic(decl_line[(kind, idx)], 1, "NonContiguousIndex",
                                        f"<{kind}{idx}> declared but <{kind}{i}> is missing"))
                break
    for i, idx in enumerate(shot_order, start=1):
        if idx != i:
            diags.append(Diagnostic(frames[idx][1].line, 1, "NonContiguousIndex",
                                    f"expected <Frame{i}>, found <Frame{idx}>"))
            break
    for idx in frames:
        if idx not in videos:
            diags.append(Diagnostic(frames[idx][1].line, 1, "EmptySection", f"<Frame{idx}> has no <Video{idx}>"))
    for idx in videos:
        if idx not in frames:
            diags.append(Diagnostic(1, 1, "MisplacedSection", f"<Video{idx}> without <Frame{idx}>"))

    for ref, l, c in ref_positions:
        table = chars if ref.kind is EntityKind.CHARACTER else envs
        if ref.index not in table:
            diags.append(Diagnostic(l, c, "UnresolvedReference", f"{ref.token} is not declared"))

    mode_marker = None
    if marker is not None:
        mk, position, prompt, sec = marker
        n = len(shot_order)
        if not 1 <= position <= max(n, 0):
            diags.append(Diagnostic(sec.line, 1, "MisplacedSection",
                                    f"<{mk.value}> at shot position {position} outside [1, {n}]"))
        mode_marker = ModeMarker(mk, position, prompt)

    if diags:
        raise ScriptError(diags)

    shots = tuple(
        Shot(i, frames[i][0], videos[i], keyframes.get(i)) for i in sorted(frames)
    )
    return Script(
        user,
        tuple(chars[i] for i in sorted(chars)),
        tuple(envs[i] for i in sorted(envs)),
        shots,
        mode_marker,
    )


# ---------------------------------------------------------------- serialization

def canonical_lines(s: Script) -> Iterator[tuple[str, object]]:
    """Canonical lines, each paired with the AST object that produced it."""
    header = "<User>" if s.user_prompt.style == 1 else f"<User> style={s.user_prompt.style}"
    yield header, None
    yield s.user_prompt.text, s.user_prompt
    for e in sorted(s.characters, key=lambda e: e.index) + sorted(s.environments, key=lambda e: e.index):
        yield e.token, None
        yield e.caption, e
        if e.short_caption:
            yield SHORT_PREFIX + e.short_caption, e
    marker = s.mode_marker
    shots = sorted(s.shots, key=lambda sh: sh.index)
    if marker is not None and marker.after_shot == 0:
        yield from _marker_lines(marker)
    for sh in shots:
        yield f"<Frame{sh.index}>" + (f" @{sh.keyframe_ref}" if sh.keyframe_ref else ""), None
        yield sh.frame_description.render(), sh.frame_description
        yield f"<Video{sh.index}>", None
        yield sh.video_description.render(), sh.video_description
        if marker is not None and marker.after_shot == sh.index:
            yield from _marker_lines(marker)


def _marker_lines(marker: ModeMarker):
    yield f"<{marker.kind.value}>", None
    yield marker.prompt, marker


def _invariant_problems(s: Script) -> list[Diagnostic]:
    probs = []

    def bad(msg, code="InvariantViolation"):
        probs.append(Diagnostic(0, 0, code, msg))

    for text, owner in canonical_lines(s):
        if owner is None:
            continue
        if "\n" in text or "\r" in text:
            bad("text fields must be single-line")
        if not text.strip():
            bad(f"empty text in {type(owner).__name__}", "EmptySection")
        elif text != text.strip():
            bad(f"text field {text!r} has surrounding whitespace")
    if not 1 <= s.user_prompt.style <= 4:
        bad(f"user prompt style {s.user_prompt.style} not in 1..4")
    for e in s.entities():
        if _TOKEN_RE.search(e.caption + " " + e.short_caption) or "<-" in e.caption:
            bad(f"{e.token} caption contains a special token")
        if e.short_caption.startswith(SHORT_PREFIX) or e.caption.startswith(SHORT_PREFIX):
            bad(f"{e.token} caption starts with the short-caption prefix")
        if len(e.short_caption.split()) > MAX_SHORT_CAPTION_WORDS:
            bad(f"{e.token} short caption exceeds {MAX_SHORT_CAPTION_WORDS} words")
    if s.mode_marker is not None and _TOKEN_RE.search(s.mode_marker.prompt):
        bad("mode marker prompt contains a special token")
    if _TOKEN_RE.search(s.user_prompt.text) or "<-" in s.user_prompt.text or "->" in s.user_prompt.text:
        bad("user prompt contains a special token")
    if _TOKEN_RE.fullmatch(s.user_prompt.text.strip() or "x"):
        bad("user prompt looks like a header")
    for sh in s.shots:
        for at in (sh.frame_description, sh.video_description):
            for a, b in zip(at.runs, at.runs[1:]):
                if isinstance(a, str) and isinstance(b, str):
                    bad("adjacent plain-text runs are not canonical")
            for r in at.runs:
                if isinstance(r, str):
                    if _INLINE_RE.search(r):
                        bad(f"plain text {r!r} contains a special token or indicator")
                    if r == "":
                        bad("empty plain-text run")
                elif isinstance(r, DialogueSpan):
                    if DIALOGUE_OPEN in r.content or DIALOGUE_CLOSE in r.content or r.content.endswith("<"):
                        bad(f"dialogue content {r.content!r} contains an indicator")
                    if r.category is SpanCategory.DIALOGUE and r.content.startswith(SFX_PREFIX):
                        bad("dialogue content starts with the sound-effect prefix")
            if _ENTITY_TOKEN_RE.match(at.render()):
                bad(f"shot {sh.index} description is a bare entity token")
    for kind, ents in (("Character", s.characters), ("Environment", s.environments)):
        if sorted(e.index for e in ents) != list(range(1, len(ents) + 1)):
            bad(f"{kind} indices are not 1..{len(ents)}", "NonContiguousIndex")
    if sorted(sh.index for sh in s.shots) != list(range(1, len(s.shots) + 1)):
        bad("shot indices are not contiguous from 1", "NonContiguousIndex")
    for sh in s.shots:
        if sh.keyframe_ref is not None and not _KEYFRAME_RE.match(" @" + sh.keyframe_ref):
            bad(f"shot {sh.index} keyframe reference {sh.keyframe_ref!r} is not a plain identifier")
    m = s.mode_marker
    if m is not None and not 1 <= m.position <= len(s.shots):
        bad(f"mode marker position {m.position} outside [1, {len(s.shots)}]")
    return probs


def serialize_script(s: Script) -> str:
    """Deterministic canonical text; raises :class:`InvariantViolation`."""
    probs = _invariant_problems(s) + validate_refs(s)
    if probs:
        raise InvariantViolation(probs)
    return "\n".join(text for text, _ in canonical_lines(s)) + "\n"


# ---------------------------------------------------------------- checks

def _ref_locations(s: Script) -> Iterator[tuple[EntityRef, int, int]]:
    """Every entity reference with its (line, col) in the canonical text."""
    for lineno, (text, owner) in enumerate(canonical_lines(s), start=1):
        if not isinstance(owner, AnnotatedText):
            continue
        col = 1
        for r in owner.runs:
            if isinstance(r, EntityRef):
                yield r, lineno, col
                col += len(r.token)
            elif isinstance(r, DialogueSpan):
                col += len(r.render())
            else:
                col += len(r)


def validate_refs(s: Script) -> list[Diagnostic]:
    """Diagnostics for unresolved references and non-contiguous entity
    indices, ordered by position in the canonical text."""
    out = []
    declared = {(e.kind, e.index) for e in s.entities()}
    for kind, ents in ((EntityKind.CHARACTER, s.characters), (EntityKind.ENVIRONMENT, s.environments)):
        present = sorted(e.index for e in ents)
        for i, idx in enumerate(present, start=1):
            if idx != i:
                out.append(Diagnostic(0, 0, "NonContiguousIndex",
                                      f"<{kind.value}{idx}> declared but <{kind.value}{i}> is missing"))
                break
    for ref, line, col in _ref_locations(s):
        if (ref.kind, ref.index) not in declared:
            out.append(Diagnostic(line, col, "UnresolvedReference", f"{ref.token} is not declared"))
    return sorted(out)


def extract_dialogue(s: Script) -> list[tuple[int, DialogueSpan]]:
    out = []
    for sh in sorted(s.shots, key=lambda sh: sh.index):
        for at in (sh.frame_description, sh.video_description):
            out.extend((sh.index, span) for span in at.spans())
    return out


def frame_entities(shot: Shot) -> tuple[list[int], list[int]]:
    """Sorted distinct character and environment indices referenced in the
    shot's frame description."""
    refs = shot.frame_description.refs()
    chars = sorted({r.index for r in refs if r.kind is EntityKind.CHARACTER})
    envs = sorted({r.index for r in refs if r.kind is EntityKind.ENVIRONMENT})
    return chars, envs
