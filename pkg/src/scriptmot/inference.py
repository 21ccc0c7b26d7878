"""Script-then-keyframes inference.

The text script is decoded token by token from the user prompt (and any
partial script), parsed, and then each shot's keyframe is sampled with the
Euler ODE conditioned on every earlier shot's text and generated frame.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .data import CONTINUATION_PROMPT
from .encoders import vae_stub_decode
from .layout import Keyframe, Vocabulary, detokenize, layout_interleaved, layout_tokens, tokenize_text
from .model import MoTConfig, build_input, forward
from .script import (
    MarkerKind,
    ModeMarker,
    Script,
    ScriptError,
    canonical_lines,
    parse_script,
    serialize_script,
)
from .training import sample_ode


class MalformedGeneration(ValueError):
    """Decoded text did not parse (or broke a mode postcondition)."""

    def __init__(self, message: str, text: str, diagnostics=()):
        super().__init__(message)
        self.text = text
        self.diagnostics = list(diagnostics)


class Mode(str, Enum):
    DRAFT = "draft"
    EXTENSION = "extension"
    CONTINUATION = "continuation"


@dataclass
class GeneratedStory:
    script: Script
    text: str
    keyframes: list[Keyframe]

    @property
    def latents(self) -> list[np.ndarray]:
        return [k.vae_latents for k in self.keyframes]


def _line_ids(lines, vocab: Vocabulary) -> list[int]:
    ids = []
    for line in lines:
        ids.extend(tokenize_text(line + "\n", vocab))
    return ids


def prompt_ids(vocab: Vocabulary, prompt: str, style: int = 1, partial: Script | None = None,
               mode: Mode | str = Mode.DRAFT, continuation_prompt: str = CONTINUATION_PROMPT) -> list[int]:
    """Token ids that the decoder continues from."""
    mode = Mode(mode)
    if mode is Mode.DRAFT:
        header = "<User>" if style == 1 else f"<User> style={style}"
        return _line_ids([header, prompt], vocab)
    if partial is None or not partial.shots:
        raise ValueError(f"{mode.value} mode needs a partial script with at least one shot")
    base = replace(partial, mode_marker=None)
    if mode is Mode.EXTENSION:
        marked = replace(base, mode_marker=ModeMarker(MarkerKind.EXTENSION, len(base.shots), prompt))
        serialize_script(marked)
        return _line_ids([t for t, _ in canonical_lines(marked)], vocab)
    serialize_script(base)
    lines = [t for t, _ in canonical_lines(base)] + ["<Continuation>", prompt or continuation_prompt]
    return _line_ids(lines, vocab)


def greedy_decode(params, cfg: MoTConfig, vocab: Vocabulary, prefix: list[int], max_new: int = 512,
                  temperature: float = 0.0, seed: int = 0) -> list[int]:
    """Extend ``prefix`` until ``<End>`` (included) or ``max_new`` tokens.
    ``temperature`` 0 is argmax; otherwise softmax sampling."""
    ids = list(prefix)
    end = vocab.end_id
    rng = np.random.default_rng(seed)
    for _ in range(max_new):
        if len(ids) >= cfg.max_len:
            break
        layout = layout_tokens(ids, vocab)
        out = forward(params, cfg, build_input(layout, {}, cfg), text_positions=np.array([len(ids) - 1]))
        logits = out.text_logits.data[0]
        if temperature <= 0:
            nxt = int(np.argmax(logits))
        else:
            z = logits / temperature
            p = np.exp(z - z.max())
            nxt = int(rng.choice(len(p), p=p / p.sum()))
        ids.append(nxt)
        if nxt == end:
            break
    return ids


def generate_keyframes(params, cfg: MoTConfig, vocab: Vocabulary, script: Script, frames=None,
                       ode_steps: int = 16, seed: int = 0, id_prompting: bool = True) -> list[Keyframe]:
    """Sample a keyframe for every shot lacking one in ``frames``, in shot
    order, each conditioned on all earlier shots and frames."""
    frames = dict(frames or {})
    for sh in sorted(script.shots, key=lambda s: s.index):
        if sh.index in frames:
            continue
        layout = layout_interleaved(script, frames, vocab, sh.index, cfg.layout, id_prompting, require_target=False)
        latent = sample_ode(params, cfg, layout, frames, ode_steps, seed=seed * 1000 + sh.index)
        frames[sh.index] = Keyframe(sh.index, vae_stub_decode(latent), _vae=latent)
    return [frames[i] for i in sorted(frames)]


def infer_script_pipeline(params, cfg: MoTConfig, vocab: Vocabulary, prompt: str, style: int = 1,
                          partial: Script | None = None, mode: Mode | str = Mode.DRAFT,
                          frames=None, max_new: int = 512, ode_steps: int = 16, seed: int = 0,
                          temperature: float = 0.0, id_prompting: bool = True) -> GeneratedStory:
    """Decode a script for ``prompt`` and sample one keyframe per shot.

    Raises :class:`MalformedGeneration` when the decoded text does not parse,
    or when an extension or continuation adds no shot.
    """
    mode = Mode(mode)
    ids = greedy_decode(params, cfg, vocab, prompt_ids(vocab, prompt, style, partial, mode),
                        max_new, temperature, seed)
    if ids[-1] == vocab.end_id:
        ids = ids[:-1]
    text = detokenize(ids, vocab)
    try:
        script = parse_script(text)
    except ScriptError as exc:
        raise MalformedGeneration(f"generated script does not parse: {exc}", text, exc.diagnostics) from None
    if partial is not None and mode is not Mode.DRAFT and len(script.shots) <= len(partial.shots):
        raise MalformedGeneration("generation added no new shot", text)
    return GeneratedStory(script, text, generate_keyframes(params, cfg, vocab, script, frames, ode_steps, seed,
                                                           id_prompting))


def keyframe_errors(params, cfg: MoTConfig, vocab: Vocabulary, script: Script, frames: dict,
                    ode_steps: int = 16, seed: int = 0, id_prompting: bool = True) -> list[float]:
    """Per-shot latent MSE of ODE samples against the reference keyframes,
    each shot conditioned on the reference text and earlier reference frames."""
    errs = []
    for sh in sorted(script.shots, key=lambda s: s.index):
        layout = layout_interleaved(script, frames, vocab, sh.index, cfg.layout, id_prompting)
        latent = sample_ode(params, cfg, layout, frames, ode_steps, seed=seed * 1000 + sh.index)
        errs.append(float(np.mean((latent - frames[sh.index].vae_latents) ** 2)))
    return errs
