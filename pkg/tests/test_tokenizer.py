import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laytext.corpus import Document, synth_kv_documents
from laytext.errors import ContractError
from laytext.tokenizer import BASE_SIZE, SCHEMES, Vocab, corpus_texts, seqlen_report, train_bpe


@pytest.fixture(scope="module")
def desk_vocab():
    docs = synth_kv_documents(0, 300)
    return train_bpe(corpus_texts(docs), 1024), docs


def test_zero_merges_at_base_size():
    v = train_bpe(["hello world"] * 5, BASE_SIZE)
    assert v.merges == [] and v.size == BASE_SIZE


def test_first_merge_frequency_oracle():
    texts = ["aaab"] * 100
    # count adjacent pairs by hand to decide the expected winner
    counts = {}
    for t in texts:
        for a, b in zip(t, t[1:]):
            counts[(a, b)] = counts.get((a, b), 0) + 1
    top = max(counts, key=counts.get)
    assert top == ("a", "a")
    v = train_bpe(texts, BASE_SIZE + 1)
    assert v.merges[0] == (ord("a"), ord("a"))


def test_empty_corpus_error():
    with pytest.raises(ContractError):
        train_bpe([], BASE_SIZE + 10)


def test_vocab_too_small():
    with pytest.raises(ContractError):
        train_bpe(["abc"], BASE_SIZE - 1)


def test_stops_when_no_pair_repeats():
    v = train_bpe(["abcdef"], 4096)
    assert v.size == BASE_SIZE


def test_encode_word_empty(desk_vocab):
    v, _ = desk_vocab
    assert v.encode_word("") == []


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=40))
def test_round_trip_random_unicode(s):
    v = _shared_vocab()
    assert v.decode(v.encode_text(s)) == s
    assert v.BOX not in v.encode_text(s)


_CACHE = {}


def _shared_vocab():
    if "v" not in _CACHE:
        _CACHE["v"] = train_bpe(corpus_texts(synth_kv_documents(1, 100)) + ["héllo wörld ✓"] * 3, 700)
    return _CACHE["v"]


def test_word_splits_inside_running_text():
    # "International" alone is frequent, but ",International" dominates the running text
    texts = ["International"] * 30 + ["CPC,International,Inc"] * 60
    v = train_bpe(texts, BASE_SIZE + 40)
    alone = v.encode_word("International")
    ctx = "CPC,International,Inc"
    ids = v.encode_text(ctx)
    # tokens whose bytes fall inside the word's span
    spans, pos = [], 0
    for t in ids:
        b = v.token_bytes(t)
        spans.append((pos, pos + len(b)))
        pos += len(b)
    start, end = ctx.index("International"), ctx.index("International") + len("International")
    inside = [s for s in spans if s[0] < end and s[1] > start]
    assert len(alone) == 1
    assert len(alone) <= len(inside)


def test_vocab_json_round_trip(tmp_path, desk_vocab):
    v, _ = desk_vocab
    path = tmp_path / "vocab.json"
    v.save(path)
    w = Vocab.load(path)
    assert w.merges == v.merges and w.special_ids == v.special_ids
    assert w.encode_text("Total 18.70") == v.encode_text("Total 18.70")


def test_seqlen_empty_document(desk_vocab):
    v, _ = desk_vocab
    empty = Document("e", [])
    assert [seqlen_report(empty, v, s) for s in SCHEMES] == [0, 0, 0]


def test_seqlen_scheme_relations(desk_vocab):
    v, docs = desk_vocab
    for d in docs[:100]:
        plain = seqlen_report(d, v, "plain")
        inter = seqlen_report(d, v, "interleaved")
        coord = seqlen_report(d, v, "coord_tokens")
        assert inter - plain == len(d.words)
        assert coord >= inter >= plain


def test_seqlen_unknown_scheme(desk_vocab):
    v, docs = desk_vocab
    with pytest.raises(ContractError):
        seqlen_report(docs[0], v, "pixels")


def test_training_deterministic():
    texts = corpus_texts(synth_kv_documents(2, 50))
    assert train_bpe(texts, 600).merges == train_bpe(texts, 600).merges
