"""TaskManager-side machinery: exchange buffer, local backup, input choice.

The pieces here are pure or single-owner state; the simulator harness owns
timing, pushes, and commits. Input selection implements the committed-
lineage gating: a task may only consume partitions whose producing task's
lineage is visible in the control store.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .batch import Batch, decode_batch, empty_batch, encode_batch
from .gcs import Gcs, TaskName
from .kernels import execute_kernel, finalize_kernel, init_state, partition_batch
from .plan import Dataset, HashJoinProbe, InputReader, StageSpec, ValidatedPlan, chunks_for_channel


@dataclass(frozen=True)
class BatchingPolicy:
    kind: str  # 'dynamic' | 'static'
    size: int = 0

    def __post_init__(self):
        if self.kind not in ("dynamic", "static"):
            raise ValueError(f"unknown batching policy {self.kind!r}")
        if self.kind == "static" and self.size < 1:
            raise ValueError("static batching needs a size >= 1")

    @classmethod
    def parse(cls, text: str) -> "BatchingPolicy":
        if text == "dynamic":
            return cls("dynamic")
        if text.startswith("static:"):
            return cls("static", int(text.split(":", 1)[1]))
        raise ValueError(f"bad batching policy {text!r} (dynamic | static:B)")

    @property
    def label(self) -> str:
        return "dynamic" if self.kind == "dynamic" else f"static:{self.size}"


@dataclass(frozen=True)
class FtStrategy:
    kind: str  # 'wal' | 'spool' | 'restart'
    batching: BatchingPolicy = BatchingPolicy("dynamic")

    def __post_init__(self):
        if self.kind not in ("wal", "spool", "restart"):
            raise ValueError(f"unknown strategy {self.kind!r}")

    @property
    def label(self) -> str:
        return f"{self.kind}/{self.batching.label}"


def choose_inputs(eligible, policy: BatchingPolicy, exhausted):
    """Pick one upstream channel and a count (i, K), or None.

    `eligible[i]` is the number of contiguous, committed, in-sequence
    partitions available past channel i's watermark; `exhausted[i]` says
    consuming all of them reaches that channel's sentinel.
    """
    if policy.kind == "dynamic":
        best = None
        for i, n in enumerate(eligible):
            if n > 0 and (best is None or n > eligible[best]):
                best = i
        return None if best is None else (best, eligible[best])
    for i, n in enumerate(eligible):
        if n >= policy.size:
            return (i, policy.size)
    for i, n in enumerate(eligible):
        if n > 0 and exhausted[i]:
            return (i, n)  # final short read at end-of-stream
    return None


class ExchangeBuffer:
    """Receive-side store of pushed partitions, deduplicated by name."""

    def __init__(self):
        self._parts: dict = {}  # (producer TaskName, cons_stage, cons_channel) -> Batch

    def insert(self, producer: TaskName, consumer, batch: Batch, watermark: int) -> bool:
        """Returns False when the partition is dropped (dup or already consumed)."""
        key = (producer, consumer[0], consumer[1])
        if producer.seq < watermark or key in self._parts:
            return False
        self._parts[key] = batch
        return True

    def get(self, producer: TaskName, consumer) -> Optional[Batch]:
        return self._parts.get((producer, consumer[0], consumer[1]))

    def discard_consumed(self, consumer, upstream, below_seq: int) -> None:
        us, uc = upstream
        for q in range(below_seq):
            self._parts.pop((TaskName(us, uc, q), consumer[0], consumer[1]), None)

    def __len__(self) -> int:
        return len(self._parts)


class LocalBackupStore:
    """Producer-side backup of task outputs, keyed by globally unique name.

    Volatile under the WAL strategy (lost with the worker); the spooling
    strategy points all workers at one shared durable instance.
    """

    def __init__(self):
        self._blobs: dict = {}  # (TaskName, cons_stage, cons_channel) -> bytes

    def put(self, name: TaskName, consumer, batch: Batch) -> int:
        blob = encode_batch(batch)
        self._blobs[(name, consumer[0], consumer[1])] = blob
        return len(blob)

    def get(self, name: TaskName, consumer) -> Optional[Batch]:
        blob = self._blobs.get((name, consumer[0], consumer[1]))
        return None if blob is None else decode_batch(blob)

    def slices(self, name: TaskName):
        out = {}
        for (n, cs, cc), blob in self._blobs.items():
            if n == name:
                out[(cs, cc)] = decode_batch(blob)
        return out

    def has(self, name: TaskName) -> bool:
        return any(n == name for (n, _, _) in self._blobs)

    def __len__(self) -> int:
        return len(self._blobs)


@dataclass
class ChannelRuntime:
    """Per-channel executor state owned by exactly one worker."""

    stage: int
    channel: int
    state: object = None
    watermarks: list = field(default_factory=list)
    finalized: bool = False


def new_runtime(vplan: ValidatedPlan, stage: int, channel: int) -> ChannelRuntime:
    spec = vplan.stage_map[stage]
    n_up = 1 if isinstance(spec.operator, InputReader) else len(vplan.upstream_channels[stage])
    return ChannelRuntime(
        stage=stage, channel=channel, state=init_state(spec.operator), watermarks=[0] * n_up
    )


@dataclass(frozen=True)
class Selection:
    kind: str  # 'consume' | 'flush'
    upstream: int = 0
    count: int = 0


def _upstream_gates(vplan, spec: StageSpec, runtime, gcs: Gcs, now, blocking: bool):
    """Per-upstream-index consumption permission."""
    ups = vplan.upstream_channels[spec.stage_id]
    allowed = [True] * len(ups)
    if blocking:
        # Stagewise execution: nothing is consumable until every upstream
        # stage has fully finished.
        for pid in vplan.producers[spec.stage_id]:
            for c in range(vplan.stage_map[pid].channels):
                if gcs.sentinel_visible((pid, c), now) is None:
                    return [False] * len(ups)
    if isinstance(spec.operator, HashJoinProbe):
        build = spec.operator.build_stage
        build_done = all(
            gcs.sentinel_visible(ups[i], now) is not None
            and runtime.watermarks[i] == gcs.sentinel_visible(ups[i], now)
            for i in range(len(ups))
            if ups[i][0] == build
        )
        if not build_done:
            for i in range(len(ups)):
                if ups[i][0] != build:
                    allowed[i] = False
    return allowed


def eligibility(
    vplan: ValidatedPlan,
    spec: StageSpec,
    runtime: ChannelRuntime,
    buffer: ExchangeBuffer,
    gcs: Gcs,
    datasets: dict,
    now: Optional[float],
    reader_window: int,
    blocking: bool = False,
):
    """(eligible counts, exhausted flags) per upstream channel index."""
    if isinstance(spec.operator, InputReader):
        total = len(chunks_for_channel(datasets[spec.operator.dataset], runtime.channel, spec.channels))
        remaining = total - runtime.watermarks[0]
        return [min(remaining, reader_window)], [remaining <= reader_window]

    ups = vplan.upstream_channels[spec.stage_id]
    allowed = _upstream_gates(vplan, spec, runtime, gcs, now, blocking)
    eligible, exhausted = [], []
    consumer = (spec.stage_id, runtime.channel)
    for i, (us, uc) in enumerate(ups):
        if not allowed[i]:
            eligible.append(0)
            exhausted.append(False)
            continue
        n = 0
        q = runtime.watermarks[i]
        while True:
            name = TaskName(us, uc, q)
            if buffer.get(name, consumer) is None or gcs.read_lineage(name, now) is None:
                break
            n += 1
            q += 1
        sentinel = gcs.sentinel_visible((us, uc), now)
        eligible.append(n)
        exhausted.append(sentinel is not None and runtime.watermarks[i] + n == sentinel)
    return eligible, exhausted


def plan_selection(
    vplan,
    spec,
    runtime,
    buffer,
    gcs,
    datasets,
    now,
    reader_window,
    policy,
    prescribed,
    blocking=False,
    max_inputs=0,
) -> Optional[Selection]:
    """Decide what the channel's next task consumes, if anything."""
    eligible, exhausted = eligibility(
        vplan, spec, runtime, buffer, gcs, datasets, now, reader_window, blocking
    )
    if prescribed:
        i, k = prescribed[0]
        if k == 0:
            return Selection("flush")
        # Retracing a logged lineage: the exact (i, K) must be available.
        if isinstance(spec.operator, InputReader):
            remaining = _reader_remaining(spec, runtime, datasets)
            return Selection("consume", i, k) if remaining >= k else None
        return Selection("consume", i, k) if _contiguous(vplan, spec, runtime, buffer, gcs, now, i) >= k else None
    if runtime.finalized:
        return None
    if isinstance(spec.operator, InputReader):
        # Source channels pull straight from the dataset; the read-ahead
        # window caps any batching policy, so static sizes larger than the
        # window degrade to window-sized reads instead of stalling.
        remaining = _reader_remaining(spec, runtime, datasets)
        if remaining == 0:
            return Selection("flush")
        cap = reader_window
        if policy.kind == "static":
            cap = min(cap, policy.size)
        return Selection("consume", 0, min(remaining, max(1, cap)))
    pick = choose_inputs(eligible, policy, exhausted)
    if pick is not None:
        count = pick[1]
        if policy.kind == "dynamic" and max_inputs > 0:
            count = min(count, max_inputs)  # morsel-style per-task input cap
        return Selection("consume", pick[0], count)
    if all(exhausted) and all(e == 0 for e in eligible):
        if isinstance(spec.operator, InputReader) or _all_consumed(vplan, spec, runtime, gcs, now):
            return Selection("flush")
    return None


def _reader_remaining(spec, runtime, datasets):
    total = len(chunks_for_channel(datasets[spec.operator.dataset], runtime.channel, spec.channels))
    return total - runtime.watermarks[0]


def _contiguous(vplan, spec, runtime, buffer, gcs, now, i) -> int:
    us, uc = vplan.upstream_channels[spec.stage_id][i]
    consumer = (spec.stage_id, runtime.channel)
    n, q = 0, runtime.watermarks[i]
    while buffer.get(TaskName(us, uc, q), consumer) is not None and gcs.read_lineage(
        TaskName(us, uc, q), now
    ) is not None:
        n += 1
        q += 1
    return n


def _all_consumed(vplan, spec, runtime, gcs, now) -> bool:
    ups = vplan.upstream_channels[spec.stage_id]
    for i, (us, uc) in enumerate(ups):
        sentinel = gcs.sentinel_visible((us, uc), now)
        if sentinel is None or runtime.watermarks[i] != sentinel:
            return False
    return True


@dataclass
class TaskOutputs:
    name: TaskName
    selection: Selection
    consumed: tuple  # producer TaskNames (empty for readers/flush)
    input_rows: int
    out_batch: Batch
    slices: dict  # (cons_stage, cons_channel) -> Batch
    new_state: object
    new_watermarks: list
    is_flush: bool


def run_channel_task(
    vplan: ValidatedPlan,
    spec: StageSpec,
    runtime: ChannelRuntime,
    buffer: ExchangeBuffer,
    datasets: dict,
    schemas: dict,
    name: TaskName,
    selection: Selection,
) -> TaskOutputs:
    """Execute one task's kernel over the selected inputs (pure compute)."""
    op = spec.operator
    out_schema = schemas[spec.stage_id]
    watermarks = list(runtime.watermarks)
    consumed: list = []
    if selection.kind == "flush":
        new_state = runtime.state
        out = finalize_kernel(op, runtime.state, out_schema)
        input_rows = 0
    elif isinstance(op, InputReader):
        ds: Dataset = datasets[op.dataset]
        owned = chunks_for_channel(ds, runtime.channel, spec.channels)
        take = owned[watermarks[0] : watermarks[0] + selection.count]
        inputs = [ds.chunks[i] for i in take]
        new_state, out = execute_kernel(op, runtime.state, inputs)
        watermarks[0] += selection.count
        input_rows = sum(b.row_count for b in inputs)
    else:
        i = selection.upstream
        us, uc = vplan.upstream_channels[spec.stage_id][i]
        consumer = (spec.stage_id, runtime.channel)
        inputs = []
        for q in range(watermarks[i], watermarks[i] + selection.count):
            part = buffer.get(TaskName(us, uc, q), consumer)
            assert part is not None, "selection must be backed by buffered partitions"
            inputs.append(part)
            consumed.append(TaskName(us, uc, q))
        new_state, out = execute_kernel(op, runtime.state, inputs, source_stage=us)
        watermarks[i] += selection.count
        input_rows = sum(b.row_count for b in inputs)
    if out is None:
        out = empty_batch(out_schema)
    slices = {}
    for cid in vplan.consumers[spec.stage_id]:
        parts = partition_batch(out, spec.partition_key, vplan.stage_map[cid].channels)
        for cc, part in parts.items():
            slices[(cid, cc)] = part
    return TaskOutputs(
        name=name,
        selection=selection,
        consumed=tuple(consumed),
        input_rows=input_rows,
        out_batch=out,
        slices=slices,
        new_state=new_state,
        new_watermarks=watermarks,
        is_flush=selection.kind == "flush",
    )
