"""Command-line entry point.

Exit codes: 0 success, 1 diagnostics or a failed check, 2 usage error.
Config files are line-oriented ``key=value`` text.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .data import (
    CorpusConfig,
    IndexOutOfRange,
    TooFewShots,
    extractive_summary,
    make_synthetic_corpus,
    read_corpus,
    split_for_continuation,
    split_for_extension,
    write_corpus,
)
from .flow import ToyConfig, energy_distance, relative_endpoint_gap, ring_sample, train_toy_flow, velocity_fn
from .inference import MalformedGeneration, infer_script_pipeline
from .layout import Keyframe, Vocabulary, layout_interleaved
from .mask import compile_mask, render_mask
from .model import MoTConfig, init_model, load_checkpoint, save_checkpoint
from .netpbm import write_ppm
from .script import ScriptError, parse_script, serialize_script
from .training import (
    TrainConfig,
    coerce_dataclass,
    corpus_vocab,
    euler_sample,
    model_grad_check,
    parse_config,
    train_stage1,
    train_stage2,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    p = _Parser(prog="scriptmot", description="Structured scripts, layouts, masks and a tiny MoT.")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("validate", parents=[common], help="check a script, print diagnostics")
    s.add_argument("script")
    s = sub.add_parser("canonicalize", parents=[common], help="print the canonical form of a script")
    s.add_argument("script")
    s = sub.add_parser("split", parents=[common], help="insert an extension or continuation marker")
    s.add_argument("--mode", choices=["ext", "cont"], required=True)
    s.add_argument("--at", type=int, required=True)
    s.add_argument("script")
    s = sub.add_parser("mask", parents=[common], help="attention mask of an interleaved layout as PBM")
    s.add_argument("script")
    s.add_argument("--gen-shot", type=int, required=True)
    s.add_argument("--no-id-prompt", action="store_true")
    s.add_argument("--dump", action="store_true", help="print the split table instead of the bitmap")
    s.add_argument("--out", help="write PREFIX.pbm and PREFIX.layout.txt side by side")
    s = sub.add_parser("corpus", parents=[common], help="synthetic corpus tools")
    s.add_argument("action", choices=["gen"])
    s.add_argument("config")
    s = sub.add_parser("train", parents=[common], help="run training stage 1 or 2")
    s.add_argument("--stage", type=int, choices=[1, 2], required=True)
    s.add_argument("config")
    s = sub.add_parser("sample", parents=[common], help="generate a script and keyframes")
    s.add_argument("checkpoint")
    s.add_argument("--prompt-file", required=True)
    s.add_argument("--style", type=int, default=1)
    s.add_argument("--ode-steps", type=int, default=16)
    s.add_argument("--out", help="directory for the script and keyframe PPMs")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the tiny MoT")
    s.add_argument("--entries", type=int, default=16, help="coordinates probed per tensor")
    s = sub.add_parser("demo-rf", parents=[common], help="2-D rectified-flow toy")
    s.add_argument("--steps", type=int, default=3000)
    return p


def _read_script(path: str):
    text = Path(path).read_text(encoding="utf-8")
    return parse_script(text)


def _cmd_validate(a, out) -> int:
    _read_script(a.script)
    return 0


def _cmd_canonicalize(a, out) -> int:
    out.write(serialize_script(_read_script(a.script)))
    return 0


def _cmd_split(a, out) -> int:
    s = _read_script(a.script)
    if a.mode == "ext":
        if not 1 <= a.at < len(s.shots):
            raise UsageError(f"--at {a.at} outside [1, {len(s.shots) - 1}]")
        s = split_for_extension(s, a.at, extractive_summary(s.shots[a.at:]))
    else:
        s = split_for_continuation(s, at=a.at)
    out.write(serialize_script(s))
    return 0


def _cmd_mask(a, out) -> int:
    s = _read_script(a.script)
    if not 1 <= a.gen_shot <= len(s.shots):
        raise UsageError(f"--gen-shot {a.gen_shot} outside [1, {len(s.shots)}]")
    # Only the layout's shape is needed, so blank frames stand in for pixels.
    frames = {sh.index: Keyframe(sh.index, np.zeros((64, 64, 3))) for sh in s.shots}
    vocab = Vocabulary.from_texts([serialize_script(s)])
    layout = layout_interleaved(s, frames, vocab, a.gen_shot, id_prompting=not a.no_id_prompt)
    bitmap = render_mask(compile_mask(layout))
    if a.out:
        Path(a.out + ".pbm").write_text(bitmap, encoding="ascii")
        Path(a.out + ".layout.txt").write_text(layout.dump(), encoding="utf-8")
    out.write(layout.dump() if a.dump else bitmap)
    return 0


def _load_config(path: str) -> dict[str, str]:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def _cmd_corpus(a, out) -> int:
    kv = _load_config(a.config)
    kv.setdefault("seed", str(a.seed))
    cfg = coerce_dataclass(CorpusConfig, kv)
    root = Path(kv.get("out", "corpus"))
    write_corpus(make_synthetic_corpus(cfg), root)
    out.write(f"wrote corpus to {root}\n")
    return 0


def _cmd_train(a, out) -> int:
    kv = _load_config(a.config)
    kv.setdefault("seed", str(a.seed))
    if "corpus" not in kv:
        raise UsageError("config needs corpus=<directory>")
    corpus = read_corpus(kv["corpus"])
    tc = coerce_dataclass(TrainConfig, kv)
    trace = kv.get("trace")
    if "init" in kv:
        params, cfg, vocab = load_checkpoint(kv["init"])
    else:
        vocab = corpus_vocab(corpus)
        cfg = coerce_dataclass(MoTConfig, {**kv, "vocab_size": str(len(vocab))})
        params = init_model(cfg, tc.seed)
    run = train_stage1 if a.stage == 1 else train_stage2
    params, records, vocab = run(corpus, cfg, tc, vocab, params, trace_path=trace)
    ckpt = kv.get("out", f"stage{a.stage}.ckpt")
    save_checkpoint(ckpt, params, cfg, vocab)
    last = records[-1]
    out.write(f"stage {a.stage}: {len(records)} steps, last loss_ntp={last.loss_ntp:.6f} "
              f"loss_rf={last.loss_rf:.6f}; checkpoint {ckpt}\n")
    return 0


def _cmd_sample(a, out) -> int:
    params, cfg, vocab = load_checkpoint(a.checkpoint)
    if vocab is None:
        raise UsageError("checkpoint carries no vocabulary")
    prompt = Path(a.prompt_file).read_text(encoding="utf-8").strip()
    try:
        story = infer_script_pipeline(params, cfg, vocab, prompt, a.style, ode_steps=a.ode_steps, seed=a.seed)
    except MalformedGeneration as exc:
        sys.stderr.write(f"{exc}\n")
        for d in exc.diagnostics:
            sys.stderr.write(d.format("<generated>") + "\n")
        return 1
    text = serialize_script(story.script)
    out.write(text)
    if a.out:
        root = Path(a.out)
        root.mkdir(parents=True, exist_ok=True)
        (root / "script.txt").write_text(text, encoding="utf-8")
        for k in story.keyframes:
            img = np.clip(np.rint(k.pixels * 255), 0, 255).astype(np.uint8)
            write_ppm(root / f"frame{k.shot}.ppm", img)
    return 0


def _cmd_gradcheck(a, out) -> int:
    report = model_grad_check(a.seed, max_entries=a.entries)
    out.write(report.format() + "\n")
    return 0 if report.passed else 1


def _cmd_demo_rf(a, out) -> int:
    cfg = ToyConfig(steps=a.steps, seed=a.seed)
    params = train_toy_flow(cfg, reflow=False)
    rng = np.random.default_rng(a.seed + 100)
    x0 = rng.standard_normal((2000, 2))
    samples = euler_sample(velocity_fn(params, cfg.time_dim), x0, 64)
    ed = energy_distance(samples, ring_sample(rng, 2000))
    gap = relative_endpoint_gap(params, x0, time_dim=cfg.time_dim)
    out.write(f"energy distance {ed:.5f}\n8-step vs 64-step relative gap {gap:.4f}\n")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "canonicalize": _cmd_canonicalize,
    "split": _cmd_split,
    "mask": _cmd_mask,
    "corpus": _cmd_corpus,
    "train": _cmd_train,
    "sample": _cmd_sample,
    "gradcheck": _cmd_gradcheck,
    "demo-rf": _cmd_demo_rf,
}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    try:
        a = _build_parser().parse_args(argv)
        return _COMMANDS[a.cmd](a, out)
    except UsageError as exc:
        sys.stderr.write(str(exc) if str(exc).endswith("\n") else f"{exc}\n")
        return 2
    except ScriptError as exc:
        path = getattr(a, "script", "<script>")
        for d in exc.diagnostics:
            out.write(d.format(path) + "\n")
        return 1
    except (IndexOutOfRange, TooFewShots, OSError, ValueError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
