"""Columnar batch encoding: bit-exact round-trips and digests."""
import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from walpipe import (
    Batch,
    BatchFormatError,
    batch_digest,
    concat_batches,
    decode_batch,
    empty_batch,
    encode_batch,
    multiset_digest,
)

SCHEMA = (("k", "int64"), ("x", "float64"), ("s", "utf8"))


def _batch(rows):
    return Batch.from_rows(SCHEMA, rows)


def test_round_trip_exact():
    b = _batch([(1, 0.5, "a"), (-(2**63), -0.0, ""), (2**63 - 1, 1e308, "héllo ✓")])
    out = decode_batch(encode_batch(b))
    assert out == b
    assert encode_batch(out) == encode_batch(b)


def test_round_trip_nan_bit_exact():
    b = _batch([(0, math.nan, "n")])
    assert encode_batch(decode_batch(encode_batch(b))) == encode_batch(b)


def test_empty_batch_round_trip():
    b = empty_batch(SCHEMA)
    assert b.is_empty
    assert decode_batch(encode_batch(b)) == b


def test_decode_rejects_bad_magic():
    with pytest.raises(BatchFormatError):
        decode_batch(b"XXXX" + encode_batch(_batch([(1, 1.0, "a")]))[4:])


def test_decode_rejects_trailing_bytes():
    with pytest.raises(BatchFormatError):
        decode_batch(encode_batch(_batch([(1, 1.0, "a")])) + b"\x00")


def test_decode_rejects_truncation():
    blob = encode_batch(_batch([(1, 1.0, "abc")]))
    with pytest.raises(BatchFormatError):
        decode_batch(blob[: len(blob) - 2])


def test_unequal_columns_rejected():
    with pytest.raises(ValueError):
        Batch(schema=(("a", "int64"), ("b", "int64")), columns=((1, 2), (3,)))


def test_unknown_type_rejected():
    with pytest.raises(ValueError):
        Batch(schema=(("a", "bool"),), columns=((True,),))


def test_column_access():
    b = _batch([(1, 2.0, "x"), (3, 4.0, "y")])
    assert b.column("k") == (1, 3)
    assert b.column_type("x") == "float64"
    with pytest.raises(KeyError):
        b.column("missing")


def test_concat_batches():
    a = _batch([(1, 1.0, "a")])
    b = _batch([(2, 2.0, "b")])
    both = concat_batches(SCHEMA, [a, b])
    assert list(both.rows()) == [(1, 1.0, "a"), (2, 2.0, "b")]


def test_batch_digest_distinguishes_payloads():
    assert batch_digest(_batch([(1, 1.0, "a")])) != batch_digest(_batch([(2, 1.0, "a")]))


def test_multiset_digest_order_insensitive():
    rows = [(1, 1.0, "a"), (2, 2.0, "b"), (2, 2.0, "b")]
    fwd = multiset_digest((SCHEMA, r) for r in rows)
    rev = multiset_digest((SCHEMA, r) for r in reversed(rows))
    assert fwd == rev
    # ... but sensitive to multiplicity
    assert fwd != multiset_digest((SCHEMA, r) for r in rows[:2])


@given(
    st.lists(
        st.tuples(
            st.integers(min_value=-(2**63), max_value=2**63 - 1),
            st.floats(allow_nan=False, width=64),
            st.text(max_size=20),
        ),
        max_size=30,
    )
)
def test_round_trip_property(rows):
    b = _batch(rows)
    assert decode_batch(encode_batch(b)) == b
