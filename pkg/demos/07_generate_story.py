"""Script-then-keyframes inference after memorising one sample.

A model overfit on a single two-shot story decodes the same script from
its user prompt and samples each keyframe with the Euler ODE, conditioned
on the story so far.  Takes a couple of minutes on one CPU core.
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from scriptmot.data import CorpusConfig, make_synthetic_corpus
from scriptmot.inference import infer_script_pipeline
from scriptmot.model import MoTConfig
from scriptmot.netpbm import write_ppm
from scriptmot.script import serialize_script
from scriptmot.training import TrainConfig, corpus_vocab, keyframes, train_stage1

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1000
corpus = make_synthetic_corpus(CorpusConfig(interleaved=1, text_only=0, pairs=0, shots=(2, 2), words=(2, 4),
                                            vocab_size=16, seed=8))
sample = corpus.interleaved[0]
vocab = corpus_vocab(corpus)
cfg = MoTConfig(width=96, n_heads=4, vocab_size=len(vocab))
params, trace, _ = train_stage1(corpus, cfg, TrainConfig(lr=3e-3, steps=steps), vocab)
print(f"final step losses: ntp {trace[-1].loss_ntp:.4f}, rf {trace[-1].loss_rf:.4f}")

up = sample.script.user_prompt
story = infer_script_pipeline(params, cfg, vocab, up.text, up.style)
print(story.text)
print("matches training script:", serialize_script(story.script) == serialize_script(sample.script))

ref = keyframes(sample)
out = Path(tempfile.mkdtemp(prefix="story_"))
for k in story.keyframes:
    err = float(np.mean((k.vae_latents - ref[k.shot].vae_latents) ** 2))
    write_ppm(out / f"frame{k.shot}.ppm", np.clip(np.rint(k.pixels * 255), 0, 255).astype(np.uint8))
    print(f"shot {k.shot}: latent MSE {err:.4f}")
print(f"keyframes written to {out}")
