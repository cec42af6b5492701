"""Query plans: DAGs of stages with per-stage channel counts and operators.

A stage runs as `channels` data-parallel channels; every channel of a
consumer stage may consume from every channel of each producer stage.
Plans are described in a versioned JSON format (see `load_plan_file`).
"""
from __future__ import annotations

import heapq
import json
import pathlib
from dataclasses import dataclass, field
from typing import Optional, Union

from .batch import Batch

PLAN_FORMAT_VERSION = 1
DEFAULT_CHUNK_ROWS = 4


class PlanError(ValueError):
    pass


class CyclicPlan(PlanError):
    pass


class DanglingEdge(PlanError):
    pass


class MissingPartitioner(PlanError):
    pass


@dataclass(frozen=True)
class InputReader:
    dataset: str


@dataclass(frozen=True)
class Filter:
    column: str
    op: str  # one of > >= < <= == !=
    value: Union[int, float, str]


@dataclass(frozen=True)
class MapCol:
    out: str
    column: str
    op: str  # one of add sub mul
    value: Union[int, float]


@dataclass(frozen=True)
class HashJoinBuild:
    key: str


@dataclass(frozen=True)
class HashJoinProbe:
    key: str
    build_stage: int
    probe_stage: int


@dataclass(frozen=True)
class Aggregate:
    group_keys: tuple
    aggregates: tuple  # tuple of (func, column, out); func in sum/count/min/max


OperatorKind = Union[InputReader, Filter, MapCol, HashJoinBuild, HashJoinProbe, Aggregate]

_STATEFUL = (HashJoinBuild, HashJoinProbe, Aggregate)


@dataclass(frozen=True)
class StageSpec:
    stage_id: int
    channels: int
    operator: OperatorKind
    partition_key: Optional[str] = None

    @property
    def stateful(self) -> bool:
        return isinstance(self.operator, _STATEFUL)


@dataclass(frozen=True)
class QueryPlan:
    stages: tuple  # tuple[StageSpec, ...]
    edges: tuple  # tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class Dataset:
    name: str
    schema: tuple
    chunks: tuple  # tuple[Batch, ...]

    @property
    def total_rows(self) -> int:
        return sum(c.row_count for c in self.chunks)


@dataclass(frozen=True)
class ValidatedPlan:
    plan: QueryPlan
    topo_order: tuple
    stage_map: dict = field(hash=False)
    producers: dict = field(hash=False)  # stage -> tuple of producer ids (sorted)
    consumers: dict = field(hash=False)  # stage -> tuple of consumer ids (sorted)
    upstream_channels: dict = field(hash=False)  # stage -> tuple[(ustage, uchan)]
    source_stages: tuple = ()
    sink_stages: tuple = ()

    def stage(self, stage_id: int) -> StageSpec:
        return self.stage_map[stage_id]

    def all_channels(self):
        for sid in self.topo_order:
            for c in range(self.stage_map[sid].channels):
                yield (sid, c)


def _required_partition_key(op: OperatorKind) -> Optional[str]:
    if isinstance(op, (HashJoinBuild, HashJoinProbe)):
        return op.key
    if isinstance(op, Aggregate):
        return op.group_keys[0]
    return None


def validate_plan(plan: QueryPlan) -> ValidatedPlan:
    stage_map = {}
    for spec in plan.stages:
        if spec.stage_id in stage_map:
            raise PlanError(f"duplicate stage id {spec.stage_id}")
        if spec.channels < 1:
            raise PlanError(f"stage {spec.stage_id}: channel count must be >= 1")
        stage_map[spec.stage_id] = spec

    producers = {sid: [] for sid in stage_map}
    consumers = {sid: [] for sid in stage_map}
    for src, dst in plan.edges:
        for end in (src, dst):
            if end not in stage_map:
                raise DanglingEdge(f"edge ({src}->{dst}) references missing stage {end}")
        producers[dst].append(src)
        consumers[src].append(dst)
    producers = {s: tuple(sorted(set(p))) for s, p in producers.items()}
    consumers = {s: tuple(sorted(set(c))) for s, c in consumers.items()}

    for sid, spec in stage_map.items():
        if isinstance(spec.operator, InputReader):
            if producers[sid]:
                raise PlanError(f"source stage {sid} must not have producer edges")
        elif not producers[sid]:
            raise DanglingEdge(f"non-source stage {sid} has no producer edge")
        if consumers[sid] and spec.partition_key is None:
            raise MissingPartitioner(f"stage {sid} has consumers but no partition key")
        # Downstream key-based operators only see correct per-channel slices
        # if every producer partitions on the operator's key.
        for cid in consumers[sid]:
            need = _required_partition_key(stage_map[cid].operator)
            if need is not None and spec.partition_key != need:
                raise PlanError(
                    f"stage {sid} feeds stage {cid} and must partition on {need!r},"
                    f" not {spec.partition_key!r}"
                )
        if isinstance(spec.operator, HashJoinProbe):
            op = spec.operator
            if op.build_stage == op.probe_stage:
                raise PlanError(f"stage {sid}: build and probe sides must differ")
            for side in (op.build_stage, op.probe_stage):
                if side not in producers[sid]:
                    raise PlanError(f"stage {sid}: side stage {side} is not a producer")

    topo = _topo_order(stage_map, producers, consumers)

    upstream_channels = {}
    for sid in stage_map:
        ups = []
        for pid in producers[sid]:
            ups.extend((pid, c) for c in range(stage_map[pid].channels))
        upstream_channels[sid] = tuple(ups)

    return ValidatedPlan(
        plan=plan,
        topo_order=topo,
        stage_map=stage_map,
        producers=producers,
        consumers=consumers,
        upstream_channels=upstream_channels,
        source_stages=tuple(s for s in topo if isinstance(stage_map[s].operator, InputReader)),
        sink_stages=tuple(s for s in topo if not consumers[s]),
    )


def _topo_order(stage_map, producers, consumers):
    in_deg = {s: len(producers[s]) for s in stage_map}
    ready = [s for s, d in sorted(in_deg.items()) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        sid = heapq.heappop(ready)
        order.append(sid)
        for cid in consumers[sid]:
            in_deg[cid] -= 1
            if in_deg[cid] == 0:
                heapq.heappush(ready, cid)
    if len(order) != len(stage_map):
        stuck = min(s for s, d in in_deg.items() if d > 0)
        raise CyclicPlan(f"plan contains a cycle through stage {stuck}")
    return tuple(order)


def topological_stage_order(vplan: ValidatedPlan) -> tuple:
    """Producer-before-consumer stage order, ties broken by ascending id."""
    return vplan.topo_order


# ---------------------------------------------------------------------------
# JSON plan format
# ---------------------------------------------------------------------------

_OP_PARSERS = {
    "input_reader": lambda d: InputReader(dataset=d["dataset"]),
    "filter": lambda d: Filter(column=d["column"], op=d["op"], value=d["value"]),
    "map": lambda d: MapCol(out=d["out"], column=d["column"], op=d["op"], value=d["value"]),
    "hash_join_build": lambda d: HashJoinBuild(key=d["key"]),
    "hash_join_probe": lambda d: HashJoinProbe(
        key=d["key"], build_stage=d["build_stage"], probe_stage=d["probe_stage"]
    ),
    "aggregate": lambda d: Aggregate(
        group_keys=tuple(d["group_keys"]),
        aggregates=tuple((a["func"], a["column"], a["out"]) for a in d["aggregates"]),
    ),
}


def _operator_to_json(op: OperatorKind) -> dict:
    if isinstance(op, InputReader):
        return {"kind": "input_reader", "dataset": op.dataset}
    if isinstance(op, Filter):
        return {"kind": "filter", "column": op.column, "op": op.op, "value": op.value}
    if isinstance(op, MapCol):
        return {"kind": "map", "out": op.out, "column": op.column, "op": op.op, "value": op.value}
    if isinstance(op, HashJoinBuild):
        return {"kind": "hash_join_build", "key": op.key}
    if isinstance(op, HashJoinProbe):
        return {
            "kind": "hash_join_probe",
            "key": op.key,
            "build_stage": op.build_stage,
            "probe_stage": op.probe_stage,
        }
    return {
        "kind": "aggregate",
        "group_keys": list(op.group_keys),
        "aggregates": [{"func": f, "column": c, "out": o} for f, c, o in op.aggregates],
    }


def make_dataset(name: str, schema, rows, chunk_rows: int = DEFAULT_CHUNK_ROWS) -> Dataset:
    schema = tuple((str(n), str(t)) for n, t in schema)
    rows = [tuple(r) for r in rows]
    chunks = [
        Batch.from_rows(schema, rows[i : i + chunk_rows]) for i in range(0, len(rows), chunk_rows)
    ]
    return Dataset(name=name, schema=schema, chunks=tuple(chunks))


def parse_plan(obj: dict, base_dir: Optional[pathlib.Path] = None):
    """Parse a plan document into (QueryPlan, {name: Dataset})."""
    if obj.get("version") != PLAN_FORMAT_VERSION:
        raise PlanError(f"unsupported plan format version {obj.get('version')!r}")
    stages = []
    for s in obj["stages"]:
        op_doc = dict(s["operator"])
        kind = op_doc.pop("kind", None)
        if kind not in _OP_PARSERS:
            raise PlanError(f"unknown operator kind {kind!r}")
        stages.append(
            StageSpec(
                stage_id=int(s["id"]),
                channels=int(s["channels"]),
                operator=_OP_PARSERS[kind]({"kind": kind, **op_doc}),
                partition_key=s.get("partition_key"),
            )
        )
    edges = tuple((int(a), int(b)) for a, b in obj.get("edges", []))
    datasets = {}
    for name, d in obj.get("datasets", {}).items():
        if "path" in d:
            if base_dir is None:
                raise PlanError(f"dataset {name!r} references a file but no base dir is known")
            with open(base_dir / d["path"], encoding="utf-8") as fh:
                d = json.load(fh)
        datasets[name] = make_dataset(
            name,
            [tuple(c) for c in d["schema"]],
            [tuple(r) for r in d["rows"]],
            chunk_rows=int(d.get("chunk_rows", DEFAULT_CHUNK_ROWS)),
        )
    return QueryPlan(stages=tuple(stages), edges=edges), datasets


def load_plan_file(path):
    path = pathlib.Path(path)
    with open(path, encoding="utf-8") as fh:
        obj = json.load(fh)
    return parse_plan(obj, base_dir=path.parent)


def plan_to_json(plan: QueryPlan, datasets: dict) -> dict:
    return {
        "version": PLAN_FORMAT_VERSION,
        "stages": [
            {
                "id": s.stage_id,
                "channels": s.channels,
                "operator": _operator_to_json(s.operator),
                **({"partition_key": s.partition_key} if s.partition_key else {}),
            }
            for s in plan.stages
        ],
        "edges": [list(e) for e in plan.edges],
        "datasets": {
            name: {
                "schema": [list(c) for c in ds.schema],
                "chunk_rows": ds.chunks[0].row_count if ds.chunks else DEFAULT_CHUNK_ROWS,
                "rows": [list(r) for c in ds.chunks for r in c.rows()],
            }
            for name, ds in datasets.items()
        },
    }


def chunks_for_channel(dataset: Dataset, channel: int, channels: int) -> tuple:
    """Chunk indices owned by one reader channel (round-robin assignment)."""
    return tuple(i for i in range(len(dataset.chunks)) if i % channels == channel)
