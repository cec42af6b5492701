"""Deterministic operator kernels over columnar batches.

All kernels are pure: the same (state, inputs) always yields bit-identical
outputs and new state. Channel state is treated as immutable; consuming a
batch returns a fresh state object.
"""
from __future__ import annotations

import operator as _pyop
import struct
from typing import Optional

from .batch import Batch, empty_batch
from .plan import (
    Aggregate,
    Filter,
    HashJoinBuild,
    HashJoinProbe,
    InputReader,
    MapCol,
    OperatorKind,
    PlanError,
    StageSpec,
    ValidatedPlan,
)


class SchemaMismatch(PlanError):
    pass


_MASK64 = (1 << 64) - 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def _splitmix64(x: int) -> int:
    # Fixed-constant 64-bit mix; reproducible across platforms.
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash64(value) -> int:
    if isinstance(value, bool):
        value = int(value)
    if isinstance(value, int):
        return _splitmix64(value & _MASK64)
    if isinstance(value, float):
        (bits,) = struct.unpack("<Q", struct.pack("<d", value))
        return _splitmix64(bits)
    if isinstance(value, str):
        h = _FNV_OFFSET
        for b in value.encode("utf-8"):
            h = ((h ^ b) * _FNV_PRIME) & _MASK64
        return _splitmix64(h)
    raise TypeError(f"unhashable partition value {value!r}")


def partition_channel(value, channels: int) -> int:
    """Consumer channel for a key value; depends only on value and count."""
    return hash64(value) % channels


def partition_batch(batch: Batch, key: str, channels: int) -> dict:
    """Split a batch into per-consumer-channel batches by key hash."""
    if channels == 1:
        return {0: batch}
    key_col = batch.column(key)
    buckets: dict = {c: [] for c in range(channels)}
    for row, kv in zip(batch.rows(), key_col):
        buckets[partition_channel(kv, channels)].append(row)
    return {c: Batch.from_rows(batch.schema, rows) for c, rows in buckets.items()}


_CMP = {">": _pyop.gt, ">=": _pyop.ge, "<": _pyop.lt, "<=": _pyop.le, "==": _pyop.eq, "!=": _pyop.ne}
_ARITH = {"add": _pyop.add, "sub": _pyop.sub, "mul": _pyop.mul}


def init_state(op: OperatorKind):
    """Initial channel state S0; None for stateless operators."""
    if isinstance(op, (HashJoinBuild, HashJoinProbe, Aggregate)):
        return {}
    return None


def _require_columns(batch: Batch, names) -> None:
    have = {n for n, _ in batch.schema}
    missing = [n for n in names if n not in have]
    if missing:
        raise SchemaMismatch(f"missing columns {missing} in schema {batch.schema}")


def _join_schema(probe_schema, build_schema):
    probe_names = {n for n, _ in probe_schema}
    return tuple(probe_schema) + tuple(c for c in build_schema if c[0] not in probe_names)


def execute_kernel(op: OperatorKind, state, inputs, source_stage: Optional[int] = None):
    """Consume input batches, returning (new_state, output Batch or None).

    `source_stage` identifies which upstream stage the inputs came from; it
    only matters for HashJoinProbe, which treats build-side and probe-side
    partitions differently.
    """
    if isinstance(op, InputReader):
        out = [r for b in inputs for r in b.rows()]
        schema = inputs[0].schema if inputs else None
        return None, (Batch.from_rows(schema, out) if schema else None)

    if isinstance(op, Filter):
        cmp = _CMP[op.op]
        rows = []
        for b in inputs:
            _require_columns(b, [op.column])
            idx = [n for n, _ in b.schema].index(op.column)
            rows.extend(r for r in b.rows() if cmp(r[idx], op.value))
        schema = inputs[0].schema if inputs else None
        return None, (Batch.from_rows(schema, rows) if schema else None)

    if isinstance(op, MapCol):
        fn = _ARITH[op.op]
        rows = []
        schema = None
        for b in inputs:
            _require_columns(b, [op.column])
            names = [n for n, _ in b.schema]
            idx = names.index(op.column)
            if op.out in names:
                raise SchemaMismatch(f"map output column {op.out!r} already exists")
            schema = tuple(b.schema) + ((op.out, b.schema[idx][1]),)
            rows.extend(r + (fn(r[idx], op.value),) for r in b.rows())
        return None, (Batch.from_rows(schema, rows) if schema else None)

    if isinstance(op, HashJoinBuild):
        new_state = dict(state)
        for b in inputs:
            _require_columns(b, [op.key])
            idx = [n for n, _ in b.schema].index(op.key)
            for r in b.rows():
                new_state[r[idx]] = new_state.get(r[idx], ()) + ((b.schema, r),)
        return new_state, None

    if isinstance(op, HashJoinProbe):
        if source_stage == op.build_stage:
            new_state = dict(state)
            for b in inputs:
                _require_columns(b, [op.key])
                idx = [n for n, _ in b.schema].index(op.key)
                for r in b.rows():
                    new_state[r[idx]] = new_state.get(r[idx], ()) + ((b.schema, r),)
            return new_state, None
        if source_stage != op.probe_stage:
            raise SchemaMismatch(f"probe stage fed from unexpected stage {source_stage}")
        rows = []
        out_schema = None
        for b in inputs:
            _require_columns(b, [op.key])
            names = [n for n, _ in b.schema]
            idx = names.index(op.key)
            for r in b.rows():
                for build_schema, build_row in state.get(r[idx], ()):
                    if out_schema is None:
                        out_schema = _join_schema(b.schema, build_schema)
                    extra = tuple(
                        v for (n, _), v in zip(build_schema, build_row) if n not in names
                    )
                    rows.append(r + extra)
        return state, (Batch.from_rows(out_schema, rows) if out_schema else None)

    if isinstance(op, Aggregate):
        new_state = dict(state)
        for b in inputs:
            _require_columns(b, op.group_keys + tuple(c for _, c, _ in op.aggregates))
            names = [n for n, _ in b.schema]
            g_idx = [names.index(k) for k in op.group_keys]
            a_idx = [names.index(c) for _, c, _ in op.aggregates]
            for r in b.rows():
                group = tuple(r[i] for i in g_idx)
                accs = new_state.get(group)
                if accs is None:
                    accs = tuple(
                        (1 if f == "count" else r[i])
                        for (f, _, _), i in zip(op.aggregates, a_idx)
                    )
                else:
                    accs = tuple(
                        _step_acc(f, acc, r[i])
                        for (f, _, _), acc, i in zip(op.aggregates, accs, a_idx)
                    )
                new_state[group] = accs
        return new_state, None

    raise TypeError(f"unknown operator {op!r}")


def _step_acc(func, acc, value):
    if func == "sum":
        return acc + value
    if func == "count":
        return acc + 1
    if func == "min":
        return min(acc, value)
    if func == "max":
        return max(acc, value)
    raise PlanError(f"unknown aggregate function {func!r}")


def finalize_kernel(op: OperatorKind, state, out_schema) -> Batch:
    """Flush output at end-of-stream; empty for operators with nothing to emit."""
    if isinstance(op, HashJoinBuild):
        rows = [row for entries in state.values() for _, row in entries]
        return Batch.from_rows(out_schema, rows)
    if isinstance(op, Aggregate):
        rows = [group + accs for group, accs in state.items()]
        return Batch.from_rows(out_schema, rows)
    return empty_batch(out_schema)


_AGG_TYPES = {"count": "int64"}


def stage_schemas(vplan: ValidatedPlan, datasets: dict) -> dict:
    """Output schema of every stage, derived in topological order."""
    schemas: dict = {}
    for sid in vplan.topo_order:
        spec: StageSpec = vplan.stage_map[sid]
        op = spec.operator
        if isinstance(op, InputReader):
            if op.dataset not in datasets:
                raise PlanError(f"stage {sid}: unknown dataset {op.dataset!r}")
            schemas[sid] = datasets[op.dataset].schema
            continue
        in_schemas = [schemas[p] for p in vplan.producers[sid]]
        if isinstance(op, (Filter, HashJoinBuild)):
            first = in_schemas[0]
            if any(s != first for s in in_schemas):
                raise SchemaMismatch(f"stage {sid}: producer schemas differ")
            schemas[sid] = first
        elif isinstance(op, MapCol):
            first = in_schemas[0]
            typ = dict(first).get(op.column)
            if typ is None:
                raise SchemaMismatch(f"stage {sid}: no column {op.column!r}")
            schemas[sid] = tuple(first) + ((op.out, typ),)
        elif isinstance(op, HashJoinProbe):
            schemas[sid] = _join_schema(schemas[op.probe_stage], schemas[op.build_stage])
        elif isinstance(op, Aggregate):
            first = in_schemas[0]
            by_name = dict(first)
            cols = [(k, by_name[k]) for k in op.group_keys]
            cols += [(out, _AGG_TYPES.get(f, by_name[c])) for f, c, out in op.aggregates]
            schemas[sid] = tuple(cols)
    return schemas
