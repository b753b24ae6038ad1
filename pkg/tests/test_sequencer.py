import numpy as np
import pytest

from laytext.corpus import BBox, Document, OcrWord, QaPair, synth_kv_documents
from laytext.errors import ContractError
from laytext.sequencer import (
    SftOptions,
    build_coord_token_sample,
    build_plain_sample,
    build_pretrain_sample,
    build_sample,
    build_sft_sample,
    grounded_answer,
    parse_box_text,
)
from laytext.tokenizer import Vocab, corpus_texts, train_bpe


@pytest.fixture(scope="module")
def setup():
    docs = synth_kv_documents(7, 60)
    return train_bpe(corpus_texts(docs), 800), docs


def test_pretrain_layout(setup):
    v, docs = setup
    doc = docs[0]
    s = build_pretrain_sample(doc, v, 512)
    s.check(v, 512)
    assert s.ids[0] == v.BOS
    assert sum(s.modality_mask) == len(doc.words)
    assert [b for _, b in s.box_values] == [w.box for w in doc.words]
    # loss on every non-box position except BOS
    assert [l for l, m in zip(s.loss_mask[1:], s.modality_mask[1:])] == [1 - m for m in s.modality_mask[1:]]


def test_pretrain_truncates_at_word_boundary(setup):
    v, docs = setup
    doc = docs[0]
    s = build_pretrain_sample(doc, v, 12)
    s.check(v, 12)
    assert s.ids[-1] != v.BOX
    kept = s.meta["words"]
    assert sum(s.modality_mask) == kept < len(doc.words)


def test_pretrain_empty_document(setup):
    v, _ = setup
    with pytest.raises(ContractError):
        build_pretrain_sample(Document("e", []), v, 64)


def test_sft_loss_on_response_only(setup):
    v, docs = setup
    doc = docs[1]
    qa = doc.qa[0]
    s = build_sft_sample(doc, qa, v)
    s.check(v)
    assert s.loss_mask == [0] * s.answer_start + [1] * (len(s) - s.answer_start)
    assert s.ids[-1] == v.EOS
    assert v.decode(s.response_ids()) == qa.answer


def test_sft_grounded_response(setup):
    v, docs = setup
    qa = docs[1].qa[0]
    s = build_sft_sample(docs[1], qa, v, SftOptions(grounded_output=True))
    text = v.decode(s.response_ids())
    assert text == grounded_answer(qa)
    assert parse_box_text(text[len(qa.answer):]) is not None


def test_shuffle_preserves_word_box_pairs(setup):
    v, docs = setup
    doc = docs[2]
    qa = doc.qa[0]
    a = build_sft_sample(doc, qa, v, SftOptions(shuffled=False))
    b = build_sft_sample(doc, qa, v, SftOptions(shuffled=True, seed=3))
    assert sorted(map(tuple, (x.as_list() for _, x in a.box_values))) == sorted(
        map(tuple, (x.as_list() for _, x in b.box_values))
    )
    assert a.ids != b.ids
    assert b.ids == build_sft_sample(doc, qa, v, SftOptions(shuffled=True, seed=3)).ids


def test_plain_has_no_box_tokens(setup):
    v, docs = setup
    s = build_plain_sample(docs[3], docs[3].qa[0], v)
    s.check(v)
    assert v.BOX not in s.ids and not s.box_values


def test_coord_sample_is_text(setup):
    v, docs = setup
    doc = docs[3]
    s = build_coord_token_sample(doc, doc.qa[0], v)
    s.check(v)
    ctx = v.decode(s.ids[: s.answer_start])
    assert "[" in ctx and v.BOX not in s.ids


def test_scheme_lengths_ordered(setup):
    v, docs = setup
    for doc in docs[:20]:
        qa = doc.qa[0]
        lens = [len(build_sample(s, doc, qa, v)) for s in ("plain", "interleaved", "coord_tokens")]
        assert lens[0] <= lens[1] + 1 and lens[1] < lens[2]


def test_unknown_scheme(setup):
    v, docs = setup
    with pytest.raises(ContractError):
        build_sample("pixels", docs[0], docs[0].qa[0], v)


def test_prompt_clears_loss(setup):
    v, docs = setup
    s = build_sft_sample(docs[0], docs[0].qa[0], v)
    p = s.prompt()
    assert len(p) == s.answer_start and not any(p.loss_mask)
    assert all(pos < len(p) for pos, _ in p.box_values)


def test_too_long_question():
    v = Vocab([])
    doc = Document("d", [OcrWord("x", BBox(0, 0, 0.1, 0.1))], [QaPair("q" * 50, "a")])
    with pytest.raises(ContractError):
        build_sft_sample(doc, doc.qa[0], v, max_len=20)


def test_grounded_without_boxes():
    with pytest.raises(ContractError):
        grounded_answer(QaPair("q", "a"))
