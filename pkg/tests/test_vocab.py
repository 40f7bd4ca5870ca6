import pytest
from hypothesis import given, strategies as st

from vptoken.errors import InvalidConfigError, OutOfRangeError
from vptoken.vocab import (
    Kind,
    MalformedGroup,
    ReEncodeTrigger,
    RegionTrigger,
    Vocabulary,
    classify,
    extend_vocabulary,
    scan_for_group,
)


def test_total_size_k8(vocab):
    assert vocab.total_size == 256 + 16 + 2 + 3 + 3


def test_k4_has_eight_coordinate_tokens():
    v = extend_vocabulary(256, 4)
    kinds = [classify(v, t).kind for t in range(v.total_size)]
    assert kinds.count(Kind.COORD_X) + kinds.count(Kind.COORD_Y) == 8


def test_coordinate_boundary_k32():
    v = extend_vocabulary(100, 32)
    c = classify(v, v.x(31))
    assert (c.kind, c.index) == (Kind.COORD_X, 31)
    with pytest.raises(OutOfRangeError):
        v.x(32)


@pytest.mark.parametrize("base,k", [(256, 1), (0, 8)])
def test_invalid_config(base, k):
    with pytest.raises(InvalidConfigError):
        extend_vocabulary(base, k)


def test_classify_specials(vocab):
    assert classify(vocab, vocab.region_start).kind is Kind.REGION_START
    assert classify(vocab, 0).kind is Kind.TEXT
    assert classify(vocab, vocab.reenc_control).kind is Kind.REENC_CONTROL
    with pytest.raises(OutOfRangeError):
        classify(vocab, vocab.total_size)


def test_text_roundtrip(vocab):
    ids = vocab.encode_text("what symbol is on the red tile ?")
    assert vocab.decode(ids) == "what symbol is on the red tile ?"


def test_unknown_word_rejected(vocab):
    with pytest.raises(Exception):
        vocab.encode_text("zebra")


def test_dict_roundtrip(vocab):
    assert Vocabulary.from_dict(vocab.to_dict()) == vocab


def test_scan_region(vocab):
    s = [7, vocab.region_start, vocab.x(1), vocab.y(2), vocab.x(4), vocab.y(5), vocab.region_end]
    found = scan_for_group(vocab, s)
    assert isinstance(found, RegionTrigger)
    assert found.cells.as_tuple() == (1, 2, 4, 5)


def test_scan_reencode(vocab):
    s = [3, vocab.reenc_start, vocab.reenc_control, vocab.reenc_end]
    found = scan_for_group(vocab, s)
    assert isinstance(found, ReEncodeTrigger)
    assert found.control_position == 2


def test_scan_interior_order_violation(vocab):
    s = [vocab.region_start, vocab.x(1), vocab.x(2), vocab.y(4), vocab.y(5), vocab.region_end]
    found = scan_for_group(vocab, s)
    assert isinstance(found, MalformedGroup) and found.kind == "region-malformed"


def test_scan_inverted(vocab):
    s = [vocab.region_start, vocab.x(4), vocab.y(2), vocab.x(1), vocab.y(5), vocab.region_end]
    assert scan_for_group(vocab, s).kind == "region-inverted"


def test_scan_reencode_arity(vocab):
    s = [vocab.reenc_start, vocab.reenc_control, vocab.reenc_end]
    assert isinstance(scan_for_group(vocab, s, n_control=2), MalformedGroup)
    s2 = [vocab.reenc_start, vocab.reenc_control, vocab.reenc_control, vocab.reenc_end]
    assert scan_for_group(vocab, s2, n_control=2).control_positions == (1, 2)


def test_scan_needs_closing_token(vocab):
    assert scan_for_group(vocab, [vocab.region_start, vocab.x(1)]) is None
    assert scan_for_group(vocab, []) is None


@given(st.lists(st.integers(0, 279), max_size=20))
def test_classify_total(stream):
    v = extend_vocabulary(256, 8)
    for t in stream:
        classify(v, t)
    scan_for_group(v, stream)
