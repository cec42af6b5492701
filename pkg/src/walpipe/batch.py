"""Columnar batches with a bit-exact, self-describing binary encoding.

The encoding must round-trip exactly: replayed backups and rewound task
outputs are compared by digest, so any byte of slop would show up as a
false recovery divergence.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

INT64 = "int64"
FLOAT64 = "float64"
UTF8 = "utf8"

_TYPE_CODES = {INT64: 0, FLOAT64: 1, UTF8: 2}
_CODE_TYPES = {v: k for k, v in _TYPE_CODES.items()}
_MAGIC = b"WPB1"

Schema = tuple  # tuple[tuple[str, str], ...]
Row = tuple


class BatchFormatError(ValueError):
    """Raised when decoding malformed batch bytes."""


@dataclass(frozen=True)
class Batch:
    """Equal-length columns over a (name, type) schema."""

    schema: tuple
    columns: tuple

    def __post_init__(self):
        if len(self.schema) != len(self.columns):
            raise ValueError("schema/column count mismatch")
        if not self.schema:
            raise ValueError("batch needs at least one column")
        lengths = {len(col) for col in self.columns}
        if len(lengths) > 1:
            raise ValueError("columns have unequal lengths")
        for _, typ in self.schema:
            if typ not in _TYPE_CODES:
                raise ValueError(f"unknown column type {typ!r}")

    @property
    def row_count(self) -> int:
        return len(self.columns[0])

    @property
    def is_empty(self) -> bool:
        return self.row_count == 0

    def column(self, name: str) -> tuple:
        for (col_name, _), col in zip(self.schema, self.columns):
            if col_name == name:
                return col
        raise KeyError(name)

    def column_type(self, name: str) -> str:
        for col_name, typ in self.schema:
            if col_name == name:
                return typ
        raise KeyError(name)

    def rows(self) -> Iterator[Row]:
        return iter(zip(*self.columns)) if self.row_count else iter(())

    @classmethod
    def from_rows(cls, schema: Sequence, rows: Iterable[Row]) -> "Batch":
        schema = tuple((str(n), str(t)) for n, t in schema)
        rows = list(rows)
        if rows:
            columns = tuple(tuple(r[i] for r in rows) for i in range(len(schema)))
        else:
            columns = tuple(() for _ in schema)
        return cls(schema, columns)


def empty_batch(schema: Sequence) -> Batch:
    return Batch.from_rows(schema, [])


def concat_batches(schema: Sequence, batches: Iterable[Batch]) -> Batch:
    rows: list = []
    for b in batches:
        rows.extend(b.rows())
    return Batch.from_rows(schema, rows)


def encode_batch(batch: Batch) -> bytes:
    out = [_MAGIC, struct.pack("<IQ", len(batch.schema), batch.row_count)]
    for (name, typ), col in zip(batch.schema, batch.columns):
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<B", _TYPE_CODES[typ]))
        if typ == INT64:
            out.append(struct.pack(f"<{len(col)}q", *col))
        elif typ == FLOAT64:
            out.append(struct.pack(f"<{len(col)}d", *col))
        else:
            for v in col:
                v_b = v.encode("utf-8")
                out.append(struct.pack("<I", len(v_b)))
                out.append(v_b)
    return b"".join(out)


def decode_batch(data: bytes) -> Batch:
    if data[:4] != _MAGIC:
        raise BatchFormatError("bad magic")
    try:
        n_cols, n_rows = struct.unpack_from("<IQ", data, 4)
        off = 16
        schema = []
        columns = []
        for _ in range(n_cols):
            (name_len,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off : off + name_len].decode("utf-8")
            off += name_len
            (code,) = struct.unpack_from("<B", data, off)
            off += 1
            typ = _CODE_TYPES[code]
            if typ == INT64:
                col = struct.unpack_from(f"<{n_rows}q", data, off)
                off += 8 * n_rows
            elif typ == FLOAT64:
                col = struct.unpack_from(f"<{n_rows}d", data, off)
                off += 8 * n_rows
            else:
                vals = []
                for _ in range(n_rows):
                    (v_len,) = struct.unpack_from("<I", data, off)
                    off += 4
                    vals.append(data[off : off + v_len].decode("utf-8"))
                    off += v_len
                col = tuple(vals)
            schema.append((name, typ))
            columns.append(tuple(col))
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise BatchFormatError(str(exc)) from exc
    if off != len(data):
        raise BatchFormatError("trailing bytes")
    return Batch(tuple(schema), tuple(columns))


def encode_row(schema: Sequence, row: Row) -> bytes:
    """Canonical row bytes; used for multiset result digests."""
    out = []
    for (name, typ), value in zip(schema, row):
        tag = name.encode("utf-8")
        out.append(struct.pack("<H", len(tag)))
        out.append(tag)
        if typ == INT64:
            out.append(b"i" + struct.pack("<q", value))
        elif typ == FLOAT64:
            out.append(b"f" + struct.pack("<d", value))
        else:
            v_b = value.encode("utf-8")
            out.append(b"s" + struct.pack("<I", len(v_b)) + v_b)
    return b"".join(out)


def batch_digest(batch: Batch) -> str:
    return hashlib.sha256(encode_batch(batch)).hexdigest()


def multiset_digest(items: Iterable) -> str:
    """Order-insensitive digest over (schema, row) pairs.

    Invariant to task batching and scheduling; two runs that produce the
    same multiset of result rows get the same digest.
    """
    h = hashlib.sha256()
    for blob in sorted(encode_row(schema, row) for schema, row in items):
        h.update(struct.pack("<I", len(blob)))
        h.update(blob)
    return h.hexdigest()
