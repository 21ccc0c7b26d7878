"""The two-expert transformer: parameters, routing and checkpoints.

Text, ID-prompt and ViT positions use the understanding expert; VAE latent
positions use the generation expert.  Both meet only in shared attention.
"""

import tempfile
from pathlib import Path

import numpy as np

from scriptmot.data import CorpusConfig, make_synthetic_corpus
from scriptmot.layout import layout_interleaved
from scriptmot.model import (
    MoTConfig,
    build_input,
    forward,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
    snapshot,
    subset_names,
    velocity_grid,
)
from scriptmot.training import corpus_vocab, keyframes

corpus = make_synthetic_corpus(CorpusConfig(interleaved=1, text_only=0, pairs=0, shots=(2, 2), seed=1))
vocab = corpus_vocab(corpus)
cfg = MoTConfig(vocab_size=len(vocab))
params = init_model(cfg, seed=0)
print(f"{param_count(params)} parameters")
for subset in ("understanding", "generation", "shared"):
    names = subset_names(params, subset)
    print(f"  {subset:13s} {len(names):3d} tensors, {sum(params[n].size for n in names)} values")

sample = corpus.interleaved[0]
frames = keyframes(sample)
layout = layout_interleaved(sample.script, frames, vocab, gen_shot=2, cfg=cfg.layout)
x_t = np.random.default_rng(0).standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
out = forward(params, cfg, build_input(layout, frames, cfg, x_t, t=0.5))
print(f"sequence of {layout.total} positions: {out.text_logits.shape[0]} text logits rows, "
      f"velocity grid {velocity_grid(out, cfg).shape}")

# Changing the generation expert leaves every row whose receptive field
# holds no latent position untouched; the shot-2 velocity changes.
before = out.hidden.data.copy()
for n in subset_names(params, "generation"):
    params[n].data += 0.1
after = forward(params, cfg, build_input(layout, frames, cfg, x_t, t=0.5)).hidden.data
print("first 10 rows unchanged:", np.array_equal(before[:10], after[:10]),
      "| last row unchanged:", np.array_equal(before[-1], after[-1]))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.ckpt"
    save_checkpoint(path, params, cfg, vocab)
    p2, cfg2, v2 = load_checkpoint(path)
    print(f"checkpoint {path.stat().st_size} bytes, round trip exact:",
          snapshot(p2) == snapshot(params) and cfg2 == cfg and v2 == vocab)
