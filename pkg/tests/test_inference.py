import numpy as np
import pytest

from scriptmot import inference
from scriptmot.data import CONTINUATION_PROMPT, CorpusConfig, make_synthetic_corpus
from scriptmot.inference import (
    GeneratedStory,
    MalformedGeneration,
    Mode,
    greedy_decode,
    infer_script_pipeline,
    keyframe_errors,
    prompt_ids,
)
from scriptmot.layout import Vocabulary, layout_text, tokenize_text
from scriptmot.model import MoTConfig, init_model
from scriptmot.script import parse_script, serialize_script
from scriptmot.training import keyframes

from conftest import SAMPLE

SMALL = dict(width=16, n_heads=2, image_size=32, time_dim=8)


@pytest.fixture(scope="module")
def world():
    corpus = make_synthetic_corpus(CorpusConfig(interleaved=1, text_only=0, pairs=0, shots=(2, 2), words=(2, 3),
                                                vocab_size=8, image_size=32, seed=2))
    texts = [serialize_script(corpus.interleaved[0].script), SAMPLE]
    vocab = Vocabulary.from_texts(texts)
    cfg = MoTConfig(**SMALL, vocab_size=len(vocab))
    return corpus.interleaved[0], vocab, cfg, init_model(cfg, 0)


def test_draft_prompt_is_prefix_of_training_text(world):
    sample, vocab, _, _ = world
    s = sample.script
    ids = layout_text(s, vocab).token_ids.tolist()
    p = prompt_ids(vocab, s.user_prompt.text, s.user_prompt.style)
    assert ids[:len(p)] == p


def test_continuation_prefix(world):
    _, vocab, _, _ = world
    s = parse_script(SAMPLE)
    ids = prompt_ids(vocab, "", partial=s, mode=Mode.CONTINUATION)
    tail = tokenize_text("<Continuation>\n" + CONTINUATION_PROMPT + "\n", vocab)
    assert ids[-len(tail):] == tail
    with pytest.raises(ValueError):
        prompt_ids(vocab, "x", mode="extension")


def test_greedy_decode_deterministic_and_bounded(world):
    _, vocab, cfg, params = world
    p = prompt_ids(vocab, "a b", 1)
    a = greedy_decode(params, cfg, vocab, p, max_new=5)
    assert a == greedy_decode(params, cfg, vocab, p, max_new=5)
    assert a[:len(p)] == p and len(p) < len(a) <= len(p) + 5


def _fake_decoder(text):
    def fake(params, cfg, vocab, prefix, max_new=512, temperature=0.0, seed=0):
        return tokenize_text(text, vocab) + [vocab.end_id]
    return fake


def test_pipeline_with_scripted_decoder(world, monkeypatch):
    sample, vocab, cfg, params = world
    text = serialize_script(sample.script)
    monkeypatch.setattr(inference, "greedy_decode", _fake_decoder(text))
    story = infer_script_pipeline(params, cfg, vocab, "ignored", ode_steps=2)
    assert isinstance(story, GeneratedStory)
    assert serialize_script(story.script) == text
    assert [k.shot for k in story.keyframes] == [1, 2]
    assert all(k.pixels.shape == (32, 32, 3) for k in story.keyframes)
    assert all(z.shape == (16, 4, 4) for z in story.latents)


def test_malformed_generation(world, monkeypatch):
    _, vocab, cfg, params = world
    monkeypatch.setattr(inference, "greedy_decode", _fake_decoder("<User>\nhi\n<Frame1>\n<Character3> x\n"))
    with pytest.raises(MalformedGeneration) as err:
        infer_script_pipeline(params, cfg, vocab, "hi")
    assert err.value.diagnostics


def test_continuation_must_add_a_shot(world, monkeypatch):
    _, vocab, cfg, params = world
    s = parse_script(SAMPLE)
    monkeypatch.setattr(inference, "greedy_decode", _fake_decoder(SAMPLE))
    with pytest.raises(MalformedGeneration, match="no new shot"):
        infer_script_pipeline(params, cfg, vocab, "", partial=s, mode=Mode.CONTINUATION)


def test_keyframe_errors_shape(world):
    sample, vocab, cfg, params = world
    errs = keyframe_errors(params, cfg, vocab, sample.script, keyframes(sample), ode_steps=2)
    assert len(errs) == 2 and all(np.isfinite(errs))
