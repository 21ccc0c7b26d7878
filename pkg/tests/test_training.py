import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptmot import autograd as ag
from scriptmot.autograd import Tape, Tensor
from scriptmot.data import Corpus, CorpusConfig, make_synthetic_corpus
from scriptmot.layout import layout_interleaved
from scriptmot.model import MoTConfig, build_input, forward, init_model, snapshot, subset_names
from scriptmot.training import (
    AdamState,
    EmptyTargets,
    GradRoute,
    MissingVelocityTargets,
    RFExample,
    StepRecord,
    TrainConfig,
    adam_step,
    coerce_dataclass,
    corpus_vocab,
    euler_sample,
    flow_loss,
    keyframes,
    model_grad_check,
    ntp_loss,
    parse_config,
    read_trace,
    rf_loss,
    stage2_schedule,
    train_stage1,
    train_stage2,
)

SMALL = dict(width=16, n_heads=2, image_size=32, time_dim=8)


@pytest.fixture(scope="module")
def corpus():
    return make_synthetic_corpus(CorpusConfig(interleaved=2, text_only=2, pairs=2, shots=(1, 2), words=(2, 3),
                                              vocab_size=8, image_size=32, seed=1))


def test_uniform_logits_give_log_v():
    assert abs(float(ntp_loss(Tensor(np.zeros((5, 17))), [0, 3, 16, 2, 2]).data) - math.log(17)) < 1e-12


def test_one_hot_logits_near_zero():
    logits = np.full((3, 10), -50.0)
    logits[np.arange(3), [1, 4, 7]] = 50.0
    assert float(ntp_loss(Tensor(logits), [1, 4, 7]).data) < 1e-40 + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_ntp_matches_reference_loop(seed):
    rng = np.random.default_rng(seed)
    n, V = rng.integers(1, 8), rng.integers(2, 30)
    logits = rng.standard_normal((n, V)) * 4
    y = rng.integers(0, V, size=n)
    ref = 0.0
    for i in range(n):
        m = logits[i].max()
        ref -= logits[i, y[i]] - m - math.log(sum(math.exp(z - m) for z in logits[i]))
    assert abs(float(ntp_loss(Tensor(logits), y).data) - ref / n) < 1e-12


def test_ntp_errors():
    with pytest.raises(EmptyTargets):
        ntp_loss(Tensor(np.zeros((0, 3))), [])
    with pytest.raises(ag.ShapeMismatch):
        ntp_loss(Tensor(np.zeros((2, 3))), [1])


def test_rf_loss_cases():
    x1 = np.random.default_rng(0).standard_normal((4, 6))
    x0 = np.random.default_rng(1).standard_normal((4, 6))
    ex = RFExample(x0, x1, 0.3)
    assert float(rf_loss(Tensor(x1 - x0), ex.target).data) == 0.0
    assert float(rf_loss(Tensor(np.zeros_like(x1)), ex.target).data) == pytest.approx(np.mean((x1 - x0) ** 2))
    with pytest.raises(MissingVelocityTargets):
        rf_loss(None, ex.target)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_rf_example_consistency(t, seed):
    rng = np.random.default_rng(seed)
    ex = RFExample(rng.standard_normal(5), rng.standard_normal(5), t)
    assert np.allclose(ex.xt + (1 - t) * ex.target, ex.x1, atol=1e-12)
    assert np.allclose(ex.xt - t * ex.target, ex.x0, atol=1e-12)


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal(3)
    p = {"w": Tensor(w0.copy(), True), "u": Tensor(np.ones(2), True)}
    state = AdamState()
    m = v = np.zeros(3)
    w = w0.copy()
    for k in range(1, 6):
        g = rng.standard_normal(3)
        p["w"].grad = g
        p["u"].grad = np.ones(2)
        adam_step(p, ["w"], state, 0.1)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    assert np.allclose(p["w"].data, w, atol=1e-15)
    assert np.array_equal(p["u"].data, np.ones(2))


def test_routes_partition():
    params = init_model(MoTConfig(**SMALL, vocab_size=40))
    text, diff = GradRoute.text(params), GradRoute.diffusion(params)
    assert not text.update & diff.update
    assert all(n.startswith("und.") or n in ("shared.tok_embed", "shared.text_head") for n in text.update)
    assert set(subset_names(params, "generation")) <= diff.update
    assert diff.detach_understanding and not text.detach_understanding
    assert set(GradRoute.joint(params).update) == set(params)
    assert "shared.pos_embed" in text.frozen(params) and "shared.pos_embed" in diff.frozen(params)


def test_config_parsing():
    kv = parse_config("lr = 0.01  # step size\n\nsteps=3\nid_prompting=false\n")
    tc = coerce_dataclass(TrainConfig, kv)
    assert (tc.lr, tc.steps, tc.id_prompting) == (0.01, 3, False)
    with pytest.raises(ValueError):
        parse_config("oops")
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)


def test_stage1_deterministic_and_touches_everything(tmp_path):
    corpus = make_synthetic_corpus(CorpusConfig(interleaved=2, text_only=0, pairs=0, shots=(2, 2), words=(2, 3),
                                                vocab_size=8, image_size=32, seed=1))
    vocab = corpus_vocab(corpus)
    cfg = MoTConfig(**SMALL, vocab_size=len(vocab))
    tc = TrainConfig(lr=1e-3, steps=6, seed=4)
    init = snapshot(init_model(cfg, 4))
    a, tr_a, _ = train_stage1(corpus, cfg, tc, vocab, trace_path=tmp_path / "t.csv")
    b, tr_b, _ = train_stage1(corpus, cfg, tc, vocab)
    assert snapshot(a) == snapshot(b)
    assert [r.line() for r in tr_a] == [r.line() for r in tr_b]
    assert [r.line() for r in read_trace(tmp_path / "t.csv")] == [r.line() for r in tr_a]
    after = snapshot(a)
    assert all(init[n] != after[n] for n in init)


def test_stage2_freezes_the_other_side(corpus):
    vocab = corpus_vocab(corpus)
    cfg = MoTConfig(**SMALL, vocab_size=len(vocab))
    params = init_model(cfg, 0)
    routes = {"text": GradRoute.text(params), "interleaved": GradRoute.diffusion(params),
              "pair": GradRoute.diffusion(params)}
    prev = [snapshot(params)]
    seen = []

    def cb(rec, p):
        now = snapshot(p)
        for n in routes[rec.subset].frozen(p):
            assert now[n] == prev[0][n], (rec.subset, n)
        seen.append(rec.subset)
        prev[0] = now

    train_stage2(corpus, cfg, TrainConfig(lr=1e-3, steps=6), vocab, params, callback=cb)
    assert seen == ["text", "interleaved", "pair"] * 2


def test_stage2_schedule_ratios():
    tc = TrainConfig(ratio_text=2, ratio_interleaved=1, ratio_pairs=0)
    assert stage2_schedule(tc, {"text": True, "interleaved": True, "pair": True}) == ["text", "interleaved", "text"]
    with pytest.raises(ValueError):
        stage2_schedule(tc, {"text": False, "interleaved": False, "pair": True})


def test_detach_probe(corpus):
    vocab = corpus_vocab(corpus)
    cfg = MoTConfig(**SMALL, vocab_size=len(vocab))
    params = init_model(cfg, 0)
    s = next(x for x in corpus.interleaved if len(x.script.shots) == 2)
    frames = keyframes(s)
    layout = layout_interleaved(s.script, frames, vocab, 2, cfg.layout)
    ex = RFExample.sample(np.random.default_rng(0), frames[2].vae_latents)
    grads = {}
    for detach in (True, False):
        for p in params.values():
            p.grad = None
        with Tape():
            ag.backward(flow_loss(params, cfg, layout, frames, ex, detach=detach))
        grads[detach] = {n: (None if p.grad is None else p.grad.copy()) for n, p in params.items()}
    tok = grads[True]["shared.tok_embed"]
    assert tok is None or np.all(tok == 0)
    for n in subset_names(params, "understanding"):
        g = grads[True][n]
        assert g is None or np.all(g == 0)
    assert np.abs(grads[False]["shared.tok_embed"]).sum() > 0
    assert np.abs(grads[True]["gen.0.wq"]).sum() > 0


def test_euler_exact_on_constant_field():
    x0 = np.random.default_rng(0).standard_normal((3, 2))
    c = np.array([0.5, -2.0])
    for steps in (1, 4, 64):
        assert np.allclose(euler_sample(lambda x, t: np.broadcast_to(c, x.shape), x0, steps), x0 + c, atol=1e-14)
    # Linear in t: Euler's left Riemann sum is exact only in the limit.
    x = euler_sample(lambda x, t: np.full(x.shape, t), np.zeros(1), 1000)
    assert abs(x[0] - 0.5) < 1e-3


def test_trace_line_format():
    assert StepRecord(3, 1.5, 0.25, "joint").line() == "3,1.5,0.25,joint"


def test_model_grad_check_small():
    rep = model_grad_check(seed=1, max_entries=3)
    assert rep.passed, rep.format()


def test_stage1_needs_interleaved():
    with pytest.raises(ValueError):
        train_stage1(Corpus(), MoTConfig(**SMALL, vocab_size=400), TrainConfig())


def test_adam_zero_gradient_and_first_step_sign():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), True)}
    state = AdamState()
    p["w"].grad = np.zeros(3)
    adam_step(p, ["w"], state, 0.1)
    assert np.array_equal(p["w"].data, [1.0, -2.0, 3.0])
    q = {"w": Tensor(np.zeros(3), True)}
    q["w"].grad = np.array([0.5, -4.0, 2e-3])
    adam_step(q, ["w"], AdamState(), 0.01)
    # First bias-corrected step is -lr * g / (|g| + eps).
    assert np.allclose(q["w"].data, -0.01 * np.sign(q["w"].grad), rtol=1e-5, atol=0)


def test_cosine_schedule():
    tc = TrainConfig(lr=1.0, steps=4, cosine=True)
    assert [round(tc.lr_at(k), 12) for k in range(5)] == [1.0, round(0.5 + 0.5 * np.cos(np.pi / 4), 12), 0.5,
                                                          round(0.5 - 0.5 * np.cos(np.pi / 4), 12), 0.0]
    assert TrainConfig(lr=0.3).lr_at(99) == 0.3
