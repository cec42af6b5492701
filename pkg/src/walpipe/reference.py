"""Single-threaded reference evaluation of a plan.

Ignores channels, partitioning, batching and scheduling entirely: every
stage is evaluated once over its producers' full output. Serves as the
independent oracle for the distributed runs (any schedule consistent with
per-channel sequence order must match this result).
"""
from __future__ import annotations

from .batch import multiset_digest
from .plan import (
    Aggregate,
    Filter,
    HashJoinBuild,
    HashJoinProbe,
    InputReader,
    MapCol,
    ValidatedPlan,
)
from .kernels import _CMP, _ARITH, _join_schema, _step_acc, stage_schemas


def evaluate(vplan: ValidatedPlan, datasets: dict):
    """Returns {stage_id: (schema, rows)} for the plan's sink stages."""
    schemas = stage_schemas(vplan, datasets)
    rows_by_stage: dict = {}
    for sid in vplan.topo_order:
        op = vplan.stage_map[sid].operator
        if isinstance(op, InputReader):
            ds = datasets[op.dataset]
            rows_by_stage[sid] = [r for chunk in ds.chunks for r in chunk.rows()]
        elif isinstance(op, Filter):
            cmp = _CMP[op.op]
            idx = [n for n, _ in schemas[sid]].index(op.column)
            rows_by_stage[sid] = [
                r for p in vplan.producers[sid] for r in rows_by_stage[p] if cmp(r[idx], op.value)
            ]
        elif isinstance(op, MapCol):
            fn = _ARITH[op.op]
            src = vplan.producers[sid][0]
            idx = [n for n, _ in schemas[src]].index(op.column)
            rows_by_stage[sid] = [
                r + (fn(r[idx], op.value),) for p in vplan.producers[sid] for r in rows_by_stage[p]
            ]
        elif isinstance(op, HashJoinBuild):
            rows_by_stage[sid] = [r for p in vplan.producers[sid] for r in rows_by_stage[p]]
        elif isinstance(op, HashJoinProbe):
            build_schema = schemas[op.build_stage]
            probe_schema = schemas[op.probe_stage]
            b_idx = [n for n, _ in build_schema].index(op.key)
            p_idx = [n for n, _ in probe_schema].index(op.key)
            probe_names = [n for n, _ in probe_schema]
            table: dict = {}
            for r in rows_by_stage[op.build_stage]:
                table[r[b_idx]] = table.get(r[b_idx], ()) + (r,)
            out = []
            for r in rows_by_stage[op.probe_stage]:
                for build_row in table.get(r[p_idx], ()):
                    extra = tuple(
                        v for (n, _), v in zip(build_schema, build_row) if n not in probe_names
                    )
                    out.append(r + extra)
            assert _join_schema(probe_schema, build_schema) == schemas[sid]
            rows_by_stage[sid] = out
        elif isinstance(op, Aggregate):
            src_schema = schemas[vplan.producers[sid][0]]
            names = [n for n, _ in src_schema]
            g_idx = [names.index(k) for k in op.group_keys]
            a_idx = [names.index(c) for _, c, _ in op.aggregates]
            groups: dict = {}
            for p in vplan.producers[sid]:
                for r in rows_by_stage[p]:
                    group = tuple(r[i] for i in g_idx)
                    accs = groups.get(group)
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
                    groups[group] = accs
            rows_by_stage[sid] = [g + a for g, a in groups.items()]
    return {sid: (schemas[sid], rows_by_stage[sid]) for sid in vplan.sink_stages}


def result_digest(vplan: ValidatedPlan, datasets: dict) -> str:
    results = evaluate(vplan, datasets)
    return multiset_digest(
        (schema, row) for schema, rows in results.values() for row in rows
    )
