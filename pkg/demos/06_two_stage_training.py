"""Stage 1 trains everything on text + flow loss; stage 2 alternates text
steps (understanding side only) with image steps (generation side only,
understanding hidden states detached)."""

import numpy as np

from scriptmot.data import CorpusConfig, make_synthetic_corpus
from scriptmot.model import MoTConfig, snapshot, subset_names
from scriptmot.training import TrainConfig, corpus_vocab, stage1_eval, train_stage1, train_stage2

corpus = make_synthetic_corpus(CorpusConfig(interleaved=4, text_only=4, pairs=4, shots=(1, 2), words=(2, 3),
                                            vocab_size=8, image_size=32, seed=3))
vocab = corpus_vocab(corpus)
cfg = MoTConfig(width=32, n_heads=4, image_size=32, time_dim=8, vocab_size=len(vocab))


def log(rec, params):
    if rec.step % 50 == 0:
        print(f"  step {rec.step:3d} ntp {rec.loss_ntp:.3f} rf {rec.loss_rf:.3f}")


print("stage 1")
params, trace, _ = train_stage1(corpus, cfg, TrainConfig(lr=3e-3, steps=200), vocab, callback=log)
print(f"combined loss on fixed draws: {stage1_eval(params, cfg, vocab, corpus):.3f}")

print("stage 2")
und, gen = subset_names(params, "understanding"), subset_names(params, "generation")
last = [snapshot(params)]
changed = {"text": set(), "interleaved": set(), "pair": set()}


def watch(rec, p):
    now = snapshot(p)
    changed[rec.subset] |= {n for n in now if now[n] != last[0][n]}
    last[0] = now


train_stage2(corpus, cfg, TrainConfig(lr=1e-3, steps=60), vocab, params, callback=watch)
for kind, names in changed.items():
    print(f"  {kind:11s} steps changed {len(names & set(und)):2d} understanding and "
          f"{len(names & set(gen)):2d} generation tensors")
