import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import SAMPLE, seeded_script
from scriptmot.data import keyframes_for
from scriptmot.layout import (
    END_TOKEN,
    BadShotIndex,
    Keyframe,
    LayoutConfig,
    MissingKeyframe,
    Role,
    UnknownToken,
    Vocabulary,
    detokenize,
    id_prompt_tokens,
    insert_id_prompts,
    layout_interleaved,
    layout_pair,
    layout_text,
    parse_dump,
    tokenize,
    tokenize_text,
)
from scriptmot.script import frame_entities, parse_script, serialize_script

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def vocab_for(*scripts):
    return Vocabulary.from_texts([serialize_script(s) for s in scripts])


def frames(s):
    return {i + 1: Keyframe(i + 1, img / 255.0) for i, img in enumerate(keyframes_for(s, 0))}


def roles(layout):
    return [sp.role for sp in layout.splits]


def test_vocabulary_order_and_bijection():
    v = Vocabulary.build(["hello", " world"], max_entities=2, max_shots=2)
    assert v.tokens[:6] == ("<User>", "<Extension>", "<Continuation>", "<-", "->", END_TOKEN)
    assert v.tokens[6:14] == ("<Character1>", "<Character2>", "<Environment1>", "<Environment2>",
                              "<Frame1>", "<Frame2>", "<Video1>", "<Video2>")
    assert v.tokens[14] == "<0x00>" and v.tokens[14 + 255] == "<0xFF>"
    assert v.tokens[-2:] == ("hello", " world")
    assert all(v.id(v.string(i)) == i for i in range(len(v)))
    assert Vocabulary.from_json(v.to_json()) == v


def test_special_tokens_are_single_ids():
    v = Vocabulary.build()
    assert tokenize_text("<Character1>", v) == [v.id("<Character1>")]
    assert tokenize_text("<-hi->", v)[0] == v.id("<-")


def test_missing_special_token():
    v = Vocabulary.build(max_entities=1)
    with pytest.raises(UnknownToken):
        tokenize_text("x <Character2>", v)


def test_byte_fallback_round_trip():
    v = Vocabulary.build(["cat"])
    text = "cat naïve 猫\ttab"
    assert detokenize(tokenize_text(text, v), v) == text


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=60))
def test_detokenize_inverts_tokenize_on_any_text(text):
    v = Vocabulary.from_texts([SAMPLE])
    assert detokenize(tokenize_text(text, v), v) == text


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_script_tokenization_round_trip(seed):
    s, _ = seeded_script(seed)
    v = vocab_for(s)
    tok = tokenize(s, v)
    assert detokenize(tok.ids, v) == serialize_script(s)
    assert tok.global_span[0] == 0
    spans = [tok.global_span, *tok.shot_spans]
    assert all(a[1] == b[0] for a, b in zip(spans, spans[1:])) and spans[-1][1] == len(tok.ids)


def test_structural_tokens_only_for_minimal_script():
    from scriptmot.script import Script, UserPrompt

    s = Script(UserPrompt("x"))
    v = Vocabulary.build(["x"])
    assert [v.string(i) for i in tokenize(s, v).ids] == ["<User>", "<0x0A>", "x", "<0x0A>"]


def test_id_prompt_contents():
    s = parse_script(SAMPLE)
    assert id_prompt_tokens(s.shot(2)) == ["<Frame2>", "<Character1>", "<Character2>", "<Environment1>"]
    text = SAMPLE.replace("wide shot, <Character1> stands on <Environment1>", "wide shot of nothing")
    assert id_prompt_tokens(parse_script(text).shot(1)) == ["<Frame1>"]
    v = vocab_for(s)
    assert insert_id_prompts(s, v)[2] == [v.id(t) for t in id_prompt_tokens(s.shot(2))]


def test_one_shot_layout_order():
    s, _ = seeded_script(0, shots=(1, 1))
    v = vocab_for(s)
    lay = layout_interleaved(s, frames(s), v, 1)
    assert roles(lay) == [Role.TEXT, Role.TEXT, Role.ID_PROMPT, Role.VAE_GEN]
    lay = layout_interleaved(s, frames(s), v, 1, gen_vit=True)
    assert roles(lay) == [Role.TEXT, Role.TEXT, Role.ID_PROMPT, Role.VIT, Role.ID_PROMPT, Role.VAE_GEN]


def test_three_shot_layout():
    s, _ = seeded_script(1, shots=(3, 3))
    v = vocab_for(s)
    lay = layout_interleaved(s, frames(s), v, 3)
    cond = [sp.shot for sp in lay.splits if sp.role is Role.VAE_COND]
    gen = [sp.shot for sp in lay.splits if sp.role is Role.VAE_GEN]
    assert cond == [1, 2] and gen == [3]
    cfg = LayoutConfig()
    assert all(sp.length == cfg.vit_tokens == 64 for sp in lay.splits if sp.role is Role.VIT)
    assert all(sp.length == cfg.vae_tokens == 16 for sp in lay.splits if sp.role in (Role.VAE_COND, Role.VAE_GEN))
    for k, sp in enumerate(lay.splits):
        if sp.role in (Role.VIT, Role.VAE_COND, Role.VAE_GEN):
            prev = lay.splits[k - 1]
            assert prev.role is Role.ID_PROMPT and prev.shot == sp.shot
            assert list(prev.entities) == id_prompt_tokens(s.shot(sp.shot))


def test_layout_errors():
    s, _ = seeded_script(1, shots=(3, 3))
    v = vocab_for(s)
    f = frames(s)
    with pytest.raises(BadShotIndex):
        layout_interleaved(s, f, v, 4)
    del f[1]
    with pytest.raises(MissingKeyframe):
        layout_interleaved(s, f, v, 2)


def test_ablation_layout_has_no_id_prompts():
    s, _ = seeded_script(1, shots=(2, 2))
    lay = layout_interleaved(s, frames(s), vocab_for(s), 2, id_prompting=False)
    assert Role.ID_PROMPT not in roles(lay)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.data())
def test_splits_partition_positions(seed, data):
    s, _ = seeded_script(seed)
    g = data.draw(st.integers(1, len(s.shots)))
    idp = data.draw(st.booleans())
    lay = layout_interleaved(s, frames(s), vocab_for(s), g, id_prompting=idp)
    pos = 0
    for sp in lay.splits:
        assert sp.start == pos and sp.length > 0
        pos = sp.stop
    assert pos == lay.total == len(lay.token_ids)
    tags = lay.tags
    for sp in lay.splits:
        assert np.all(tags[sp.start:sp.stop] == sp.role)
    # ID prompts agree with the references a validator sees in the frame text.
    for sp in lay.splits:
        if sp.role is Role.ID_PROMPT:
            chars, envs = frame_entities(s.shot(sp.shot))
            assert len(sp.entities) == 1 + len(chars) + len(envs)


def test_text_view_targets_and_end_token():
    s = parse_script(SAMPLE)
    v = vocab_for(s)
    lay = layout_text(s, v)
    assert lay.token_ids[-1] == v.end_id
    rows, targets = lay.text_targets()
    assert np.array_equal(rows, np.arange(lay.total - 1))
    assert np.array_equal(targets, lay.token_ids[1:])


def test_interleaved_targets_skip_id_prompts_and_images():
    s = parse_script(SAMPLE)
    v = vocab_for(s)
    lay = layout_interleaved(s, frames(s), v, 2)
    rows, targets = lay.text_targets()
    tags = lay.tags
    assert np.all(tags[rows + 1] == Role.TEXT) and np.all(tags[rows] == Role.TEXT)
    assert np.array_equal(lay.token_ids[rows + 1], targets)


def test_pair_layout():
    v = Vocabulary.build(["a", " cat"])
    lay = layout_pair("a cat", [2, 1], [1], v)
    assert roles(lay) == [Role.TEXT, Role.ID_PROMPT, Role.VAE_GEN]
    assert lay.splits[1].entities == ("<Frame1>", "<Character1>", "<Character2>", "<Environment1>")


def test_dump_golden_and_parse_back():
    s = parse_script(SAMPLE)
    lay = layout_interleaved(s, frames(s), vocab_for(s), 2)
    dump = lay.dump()
    assert dump == (GOLDEN / "sample_layout.txt").read_text()
    assert parse_dump(dump) == lay.splits
