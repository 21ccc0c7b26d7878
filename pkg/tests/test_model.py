import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptmot import autograd as ag
from scriptmot.autograd import Tensor
from scriptmot.layout import Role, Split, SequenceLayout, Vocabulary, layout_interleaved, layout_tokens
from scriptmot.mask import compile_mask
from scriptmot.model import (
    MissingTimeInput,
    MoTConfig,
    OutOfRange,
    build_input,
    forward,
    init_model,
    load_checkpoint,
    param_count,
    param_shapes,
    save_checkpoint,
    snapshot,
    subset_names,
    time_embed,
    time_features,
    time_lipschitz_bound,
)
from scriptmot.training import corpus_vocab, keyframes
from scriptmot.data import CorpusConfig, make_synthetic_corpus

SMALL = dict(width=16, n_heads=2, image_size=32, time_dim=8)


@pytest.fixture(scope="module")
def setup():
    corpus = make_synthetic_corpus(CorpusConfig(interleaved=1, text_only=0, pairs=0, shots=(2, 2), words=(2, 3),
                                                vocab_size=8, image_size=32, seed=3))
    vocab = corpus_vocab(corpus)
    cfg = MoTConfig(vocab_size=len(vocab), **SMALL)
    sample = corpus.interleaved[0]
    frames = keyframes(sample)
    layout = layout_interleaved(sample.script, frames, vocab, 2, cfg.layout)
    return cfg, vocab, sample.script, frames, layout


def _gen_input(cfg, layout, frames, seed=0, t=0.3):
    x = np.random.default_rng(seed).standard_normal((cfg.latent_channels, cfg.latent_size, cfg.latent_size))
    return build_input(layout, frames, cfg, x, t)


def expected_count(cfg):
    d, V, P, f, L = cfg.width, cfg.vocab_size, cfg.patch_dim, cfg.width * cfg.ffn_mult, cfg.n_layers
    per_layer = 4 * d * d + 2 * d + cfg.head_dim + 2 * d * f
    shared = 2 * V * d + cfg.max_len * d + d * P + P
    return shared + cfg.vit_dim * d + d + d * d + d + P * d + d + cfg.time_dim * d + d + 2 * (L * per_layer + d)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.sampled_from([(8, 2), (16, 4), (24, 3)]), st.integers(20, 60))
def test_param_count_formula(layers, wh, vocab):
    cfg = MoTConfig(n_layers=layers, width=wh[0], n_heads=wh[1], vocab_size=vocab, image_size=32, time_dim=8)
    assert param_count(init_model(cfg)) == expected_count(cfg)


def test_init_deterministic_and_subsets_independent():
    cfg = MoTConfig(**SMALL, vocab_size=40)
    a, b = init_model(cfg, 5), init_model(cfg, 5)
    assert snapshot(a) == snapshot(b)
    # Deeper model: understanding and generation draws are unaffected by the
    # shared subset because each subset has its own seed stream.
    c = init_model(MoTConfig(**SMALL, vocab_size=80), 5)
    for n in subset_names(a, "understanding") + subset_names(a, "generation"):
        assert a[n].data.tobytes() == c[n].data.tobytes()
    assert set(subset_names(a, "understanding")) | set(subset_names(a, "generation")) | \
        set(subset_names(a, "shared")) == set(param_shapes(cfg))


def test_text_rows_ignore_generation_weights(setup):
    cfg, _, _, frames, layout = setup
    params = init_model(cfg, 0)
    inp = _gen_input(cfg, layout, frames)
    mask = compile_mask(layout).bits.astype(int)
    reach = ((mask @ mask) > 0)
    gen_rows = layout.positions(Role.VAE_COND, Role.VAE_GEN)
    und_rows = np.flatnonzero(~reach[:, gen_rows].any(axis=1))
    assert len(und_rows) > 10
    base = forward(params, cfg, inp).hidden.data
    for n in subset_names(params, "generation"):
        params[n].data = params[n].data + 0.5
    after = forward(params, cfg, inp).hidden.data
    # Rows before the first latent split never attend to generation-routed rows.
    assert np.array_equal(base[und_rows], after[und_rows])
    assert not np.array_equal(base, after)


def _reference_text_forward(params, cfg, ids):
    """Plain numpy forward of a text-only sequence (causal mask)."""
    def rms(x, g):
        return x / np.sqrt((x * x).mean(-1, keepdims=True) + 1e-6) * g

    def gelu(x):
        return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))

    P = {k: v.data for k, v in params.items()}
    n, H, dh = len(ids), cfg.n_heads, cfg.head_dim
    x = P["shared.tok_embed"][ids] + P["shared.pos_embed"][:n]
    for l in range(cfg.n_layers):
        p = f"und.{l}."
        h = rms(x, P[p + "attn_norm"])
        q = (h @ P[p + "wq"]).reshape(n, H, dh)
        k = (h @ P[p + "wk"]).reshape(n, H, dh)
        v = (h @ P[p + "wv"]).reshape(n, H, dh)
        q = q / np.linalg.norm(q, axis=-1, keepdims=True) * P[p + "q_gain"]
        k = k / np.linalg.norm(k, axis=-1, keepdims=True)
        s = np.einsum("ihd,jhd->hij", q, k)
        s = np.where(np.tril(np.ones((n, n), bool)), s, -np.inf)
        a = np.exp(s - s.max(-1, keepdims=True))
        a /= a.sum(-1, keepdims=True)
        o = np.einsum("hij,jhd->ihd", a, v).reshape(n, cfg.width)
        x = x + o @ P[p + "wo"]
        x = x + gelu(rms(x, P[p + "ffn_norm"]) @ P[p + "w1"]) @ P[p + "w2"]
    return rms(x, P["und.final_norm"]) @ P["shared.text_head"]


def test_matches_hand_computed_one_layer_one_head():
    cfg = MoTConfig(n_layers=1, width=4, n_heads=1, vocab_size=300, image_size=32, time_dim=8, max_len=8)
    params = init_model(cfg, 11)
    ids = [280, 3, 290]
    logits = forward(params, cfg, build_input(layout_tokens(ids), {}, cfg)).text_logits.data
    ref = _reference_text_forward(params, cfg, ids)
    assert np.max(np.abs(logits - ref)) < 1e-12


def test_hand_set_weights_three_tokens():
    # Zero output projections make both sublayers vanish, so the logits are
    # rmsnorm(token embedding) times the head.  By hand, with eps = 1e-6:
    # [2,0,0,0] has mean square 1, [0,-1,0,0] has 0.25, [1,1,1,1] has 1.
    cfg = MoTConfig(n_layers=1, width=4, n_heads=1, vocab_size=300, image_size=32, time_dim=8, max_len=8)
    params = init_model(cfg, 0)
    params["und.0.wo"].data[:] = 0
    params["und.0.w2"].data[:] = 0
    params["shared.pos_embed"].data[:] = 0
    params["shared.tok_embed"].data[:3] = [[2, 0, 0, 0], [0, -1, 0, 0], [1, 1, 1, 1]]
    head = np.zeros((4, 300))
    head[:, :4] = np.eye(4)
    head[:, 4] = 1.0
    params["shared.text_head"].data[:] = head
    logits = forward(params, cfg, build_input(layout_tokens([0, 1, 2]), {}, cfg)).text_logits.data
    a, b = 1 / np.sqrt(1 + 1e-6), 1 / np.sqrt(0.25 + 1e-6)
    expected = np.array([[2 * a, 0, 0, 0, 2 * a],
                         [0, -b, 0, 0, -b],
                         [a, a, a, a, 4 * a]])
    assert np.max(np.abs(logits[:, :5] - expected)) < 1e-14
    assert not logits[:, 5:].any()


def test_matches_reference_two_layers():
    cfg = MoTConfig(n_layers=2, width=16, n_heads=4, vocab_size=300, image_size=32, time_dim=8, max_len=32)
    params = init_model(cfg, 2)
    ids = list(np.random.default_rng(0).integers(0, 300, size=12))
    logits = forward(params, cfg, build_input(layout_tokens(ids), {}, cfg)).text_logits.data
    assert np.max(np.abs(logits - _reference_text_forward(params, cfg, ids))) < 1e-12


def test_masked_positions_cannot_influence_query(setup):
    cfg, _, _, frames, layout = setup
    params = init_model(cfg, 1)
    inp = _gen_input(cfg, layout, frames)
    mask = compile_mask(layout).bits
    base = forward(params, cfg, inp, mask=mask).hidden.data
    n = layout.total
    rng = np.random.default_rng(0)
    for i in rng.choice(n, size=6, replace=False):
        hidden_from = np.flatnonzero(~mask[i])
        if not len(hidden_from):
            continue
        # The row stays fixed under perturbations at every position that is
        # outside its receptive field (masked at every layer).
        reach = mask.copy().astype(int)
        for _ in range(cfg.n_layers - 1):
            reach = ((reach @ mask.astype(int)) > 0).astype(int)
        outside = np.flatnonzero(reach[i] == 0)
        if not len(outside):
            continue
        probe = {int(j): rng.standard_normal(cfg.width) for j in outside}
        after = forward(params, cfg, inp, mask=mask, probe=probe).hidden.data
        assert np.array_equal(base[i], after[i])


def test_qk_unit_norm():
    x = Tensor(np.random.default_rng(0).standard_normal((7, 2, 8)) * 50)
    assert np.all(np.abs(np.linalg.norm(ag.l2_normalize(x).data, axis=-1) - 1) < 1e-12)


def test_time_embedding_properties():
    cfg = MoTConfig(**SMALL, vocab_size=40)
    params = init_model(cfg, 0)
    f0 = time_features(0.0, cfg.time_dim)
    assert np.array_equal(f0, np.r_[np.zeros(4), np.ones(4)])
    ts = np.linspace(0, 1, 101)
    feats = np.stack([time_features(t, cfg.time_dim) for t in ts])
    assert len({r.tobytes() for r in np.round(feats, 12)}) == len(ts)
    L = time_lipschitz_bound(cfg.time_dim)
    diffs = np.linalg.norm(np.diff(feats, axis=0), axis=1) / np.diff(ts)
    assert np.all(diffs <= L + 1e-9)
    e0 = time_embed(params, cfg, 0.0).data
    assert np.allclose(e0, f0 @ params["time_embed.w"].data + params["time_embed.b"].data, atol=1e-14)
    with pytest.raises(OutOfRange):
        time_features(1.5, 8)


def test_missing_time_input(setup):
    cfg, _, _, frames, layout = setup
    with pytest.raises(MissingTimeInput):
        build_input(layout, frames, cfg)


def test_checkpoint_round_trip(tmp_path, setup):
    cfg, vocab, _, frames, layout = setup
    params = init_model(cfg, 4)
    save_checkpoint(tmp_path / "a.ckpt", params, cfg, vocab)
    p2, cfg2, v2 = load_checkpoint(tmp_path / "a.ckpt")
    assert cfg2 == cfg and v2 == vocab
    assert snapshot(p2) == snapshot(params)
    save_checkpoint(tmp_path / "b.ckpt", p2, cfg2, v2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    inp = _gen_input(cfg, layout, frames)
    assert forward(params, cfg, inp).hidden.data.tobytes() == forward(p2, cfg2, inp).hidden.data.tobytes()


def test_bad_checkpoint(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_forward_deterministic(setup):
    cfg, _, _, frames, layout = setup
    params = init_model(cfg, 0)
    a = forward(params, cfg, _gen_input(cfg, layout, frames)).velocity.data
    b = forward(params, cfg, _gen_input(cfg, layout, frames)).velocity.data
    assert a.tobytes() == b.tobytes()


def test_detach_forward_values_unchanged(setup):
    cfg, _, _, frames, layout = setup
    params = init_model(cfg, 0)
    inp = _gen_input(cfg, layout, frames)
    assert np.array_equal(forward(params, cfg, inp).velocity.data,
                          forward(params, cfg, inp, detach_understanding=True).velocity.data)


def test_config_text_round_trip():
    cfg = MoTConfig(**SMALL, vocab_size=77, qk_gain_init=2.5)
    assert MoTConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        MoTConfig(width=10, n_heads=4)
