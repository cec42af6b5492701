"""Deterministic discrete-event simulation of the cluster.

Single-threaded event loop owning workers, coordinator, control store and
exchange. Time advances through a declared cost model; identical
(plan, config, fault spec) inputs produce bit-identical event traces,
audit logs and metrics.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field, replace
from typing import Optional

from .batch import Batch, batch_digest, encode_batch, multiset_digest
from .coordinator import (
    ClusterView,
    RecoveryPlan,
    place_recovery,
    plan_recovery,
    prescribed_lineage_for,
)
from .gcs import DURABLE_OWNER, Gcs, LineageEntry, StaleEpoch, TaskEntry, TaskName
from .kernels import stage_schemas, execute_kernel, partition_batch
from .plan import Dataset, InputReader, QueryPlan, ValidatedPlan, chunks_for_channel, validate_plan
from .worker import (
    BatchingPolicy,
    ChannelRuntime,
    ExchangeBuffer,
    FtStrategy,
    LocalBackupStore,
    Selection,
    new_runtime,
    plan_selection,
    run_channel_task,
)


class Deadlock(Exception):
    """No eligible event while the job is incomplete; always a bug."""


@dataclass(frozen=True)
class SimConfig:
    workers: int = 3
    seed: int = 0
    strategy: FtStrategy = field(default_factory=lambda: FtStrategy("wal"))
    blocking: bool = False
    # cost model (all simulated time units / bytes)
    kernel_cost_per_row: float = 1.0
    task_fixed_cost: float = 1.0
    net_cost_per_byte: float = 0.01
    net_cost_per_partition: float = 0.5
    local_disk_cost_per_byte: float = 0.001
    durable_cost_per_byte: float = 0.05
    txn_cost: float = 0.1
    net_latency: float = 2.0
    detection_interval: float = 5.0
    idle_tick: float = 1.0
    recovery_latency: float = 1.0
    reader_window: int = 2
    max_task_inputs: int = 4  # cap on dynamically chosen inputs per task (0 = unbounded)
    read_lag: float = 0.0
    replace_failed: bool = True
    deadlock_window: float = 500.0
    max_events: int = 5_000_000

    def __post_init__(self):
        costs = (
            self.kernel_cost_per_row,
            self.task_fixed_cost,
            self.net_cost_per_byte,
            self.net_cost_per_partition,
            self.local_disk_cost_per_byte,
            self.durable_cost_per_byte,
            self.txn_cost,
            self.net_latency,
            self.read_lag,
        )
        if any(c < 0 for c in costs):
            raise ValueError("cost model values must be >= 0")
        if self.workers < 1:
            raise ValueError("need at least one worker")


@dataclass(frozen=True)
class Fault:
    worker: object  # worker id or "random"
    at_time: Optional[float] = None
    at_fraction: Optional[float] = None
    at_tasks: Optional[int] = None

    def __post_init__(self):
        triggers = [t for t in (self.at_time, self.at_fraction, self.at_tasks) if t is not None]
        if len(triggers) != 1:
            raise ValueError("a fault needs exactly one trigger")
        if self.at_fraction is not None and not 0.0 <= self.at_fraction <= 1.0:
            raise ValueError("progress fraction must be in [0, 1]")


@dataclass
class RunMetrics:
    makespan: float = 0.0
    result_digest: str = ""
    result_rows: int = 0
    committed_tasks: int = 0
    recommitted_tasks: int = 0
    recoveries: int = 0
    restarts: int = 0
    rewinds: int = 0
    replays: int = 0
    input_tasks: int = 0
    reconstructed_partitions: int = 0
    bytes_pushed: int = 0
    bytes_local: int = 0
    bytes_durable: int = 0
    lineage_bytes: int = 0
    txn_count: int = 0
    events: int = 0
    overhead: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}

    def lines(self) -> list:
        return [f"{k}={v}" for k, v in sorted(self.to_dict().items())]


@dataclass
class RunResult:
    metrics: RunMetrics
    trace: list
    results: dict  # sink stage -> (schema, rows)
    gcs: Gcs


@dataclass
class _Staged:
    attempt: int
    epoch: int
    kind: str  # 'channel' | 'replay' | 'input'
    entry: TaskEntry
    duration: float
    outputs: object = None  # TaskOutputs for channel/input kinds
    slices: dict = field(default_factory=dict)
    push_bytes: int = 0
    backup_bytes: int = 0


class _SimWorker:
    __slots__ = ("wid", "alive", "buffer", "backups", "channels", "pending", "step_at")

    def __init__(self, wid: int):
        self.wid = wid
        self.alive = True
        self.buffer = ExchangeBuffer()
        self.backups = LocalBackupStore()
        self.channels: dict = {}  # (stage, channel) -> ChannelRuntime
        self.pending: Optional[_Staged] = None
        self.step_at: Optional[float] = None


class Simulator:
    def __init__(self, vplan: ValidatedPlan, datasets: dict, config: SimConfig, faults=()):
        self.vplan = vplan
        self.datasets = datasets
        self.config = config
        self.schemas = stage_schemas(vplan, datasets)
        self.now = 0.0
        self.trace: list = []
        self._heap: list = []
        self._heap_seq = 0
        self._attempts = 0
        self.metrics = RunMetrics()
        self._lag_rng = random.Random(f"{config.seed}/read-lag")
        lag = config.read_lag
        self.gcs = Gcs(
            clock=lambda: self.now,
            trace=self.trace,
            lag_fn=(lambda: self._lag_rng.uniform(0.0, lag)) if lag > 0 else (lambda: 0.0),
        )
        self.durable = LocalBackupStore()
        self.workers: dict = {}
        self.sink_rows: dict = {}  # TaskName -> (schema, rows tuple)
        self._handled_failures: set = set()
        self._recovery_pending = False
        self._next_wid = config.workers
        self._last_progress = 0.0
        self._done = False

        fault_rng = random.Random(f"{config.seed}/faults")
        self.faults = []
        for f in faults:
            if f.at_fraction is not None:
                raise ValueError("progress fractions must be resolved before simulation")
            wid = f.worker
            if wid == "random":
                wid = fault_rng.randrange(config.workers)
            self.faults.append(Fault(worker=wid, at_time=f.at_time, at_tasks=f.at_tasks))
        self._pending_task_faults = [f for f in self.faults if f.at_tasks is not None]

        for wid in range(config.workers):
            self.workers[wid] = _SimWorker(wid)
        self._assign_initial(sorted(self.workers))

        for wid in sorted(self.workers):
            self._schedule_step(wid, 0.0)
        self._push_event(config.detection_interval, "detect", ())
        for f in self.faults:
            if f.at_time is not None:
                self._push_event(f.at_time, "fault", (f.worker,))

    # -- setup -------------------------------------------------------------

    def _assign_initial(self, live) -> None:
        mapping_ops = []
        queues: dict = {w: [] for w in live}
        idx = 0
        for sid in self.vplan.topo_order:
            spec = self.vplan.stage_map[sid]
            for c in range(spec.channels):
                wid = live[idx % len(live)]  # global round-robin over all channels
                idx += 1
                mapping_ops.append(("mapping_put", (sid, c), wid))
                queues[wid].append(TaskEntry(kind="channel", name=TaskName(sid, c, 0)))
                self.workers[wid].channels[(sid, c)] = new_runtime(self.vplan, sid, c)
        self.gcs.apply_transaction([("queues_replace", queues), *mapping_ops])

    # -- event plumbing ----------------------------------------------------

    def _push_event(self, t: float, kind: str, payload: tuple) -> None:
        self._heap_seq += 1
        heapq.heappush(self._heap, (t, self._heap_seq, kind, payload))

    def _schedule_step(self, wid: int, t: float) -> None:
        w = self.workers[wid]
        if not w.alive:
            return
        if w.step_at is not None and w.step_at <= t:
            return  # a step is already pending at or before this time
        w.step_at = t
        self._push_event(t, "step", (wid,))

    def run(self) -> RunResult:
        while self._heap:
            t, _, kind, payload = heapq.heappop(self._heap)
            self.now = max(self.now, t)
            self.metrics.events += 1
            if self.metrics.events > self.config.max_events:
                raise Deadlock("event budget exhausted; simulation is not converging")
            if self.now - self._last_progress > self.config.deadlock_window:
                # A pending "done" means a task is mid-flight: the clock is
                # advancing legitimately, however long the task runs.
                live_kinds = {kind, *(k for _, _, k, _ in self._heap)}
                if not live_kinds & {"fault", "reconcile", "done"}:
                    raise Deadlock(self._dump())
            getattr(self, f"_ev_{kind}")(*payload)
            if self._job_complete():
                self._done = True
                break
        if not self._done:
            raise Deadlock(self._dump())
        self.metrics.makespan = self.now
        self.metrics.txn_count = self.gcs._txn_counter
        rows = [
            (schema, row)
            for schema, rws in self.sink_rows.values()
            for row in rws
        ]
        self.metrics.result_digest = multiset_digest(rows)
        self.metrics.result_rows = len(rows)
        results: dict = {}
        for name, (schema, rws) in sorted(self.sink_rows.items()):
            sch, acc = results.get(name.stage, (schema, []))
            acc.extend(rws)
            results[name.stage] = (schema, acc)
        return RunResult(metrics=self.metrics, trace=self.trace, results=results, gcs=self.gcs)

    def _job_complete(self) -> bool:
        if any(q for q in self.gcs.queues.values()):
            return False
        for sid in self.vplan.topo_order:
            for c in range(self.vplan.stage_map[sid].channels):
                if (sid, c) not in self.gcs.sentinels:
                    return False
        return True

    def _dump(self) -> str:
        queued = {w: [list(e.name) for e in q] for w, q in sorted(self.gcs.queues.items()) if q}
        return (
            f"deadlock at t={self.now}: queues={queued} "
            f"sentinels={sorted(self.gcs.sentinels)} flag={self.gcs.control_flag} "
            f"epoch={self.gcs.epoch} live={[w for w, s in sorted(self.workers.items()) if s.alive]}"
        )

    def _progress(self) -> None:
        self._last_progress = self.now

    # -- worker loop ---------------------------------------------------------

    def _ev_step(self, wid: int) -> None:
        w = self.workers[wid]
        w.step_at = None
        if not w.alive or w.pending is not None or self._done:
            return
        queue, flag, epoch = self.gcs.poll_tasks(wid)
        if flag:
            self._schedule_step(wid, self.now + self.config.idle_tick)
            return
        for entry in queue:
            staged = self._stage_entry(w, entry, epoch)
            if staged is not None:
                w.pending = staged
                self._push_event(self.now + staged.duration, "done", (wid, staged.attempt))
                return
        if any(q for q in self.gcs.queues.values()):
            self._schedule_step(wid, self.now + self.config.idle_tick)

    def _push_cost(self, slices) -> float:
        cfg = self.config
        cost = 0.0
        for part in slices.values():
            cost += cfg.net_cost_per_partition + cfg.net_cost_per_byte * len(encode_batch(part))
        return cost

    def _stage_entry(self, w: _SimWorker, entry: TaskEntry, epoch: int) -> Optional[_Staged]:
        cfg = self.config
        self._attempts += 1
        if entry.kind == "channel":
            sc = (entry.name.stage, entry.name.channel)
            runtime = w.channels.get(sc)
            if runtime is None:
                runtime = new_runtime(self.vplan, *sc)
                w.channels[sc] = runtime
            spec = self.vplan.stage_map[entry.name.stage]
            sel = plan_selection(
                self.vplan,
                spec,
                runtime,
                w.buffer,
                self.gcs,
                self.datasets,
                self.now,
                cfg.reader_window,
                cfg.strategy.batching,
                entry.prescribed,
                blocking=cfg.blocking,
                max_inputs=cfg.max_task_inputs,
            )
            if sel is None:
                self._attempts -= 1
                return None
            outputs = run_channel_task(
                self.vplan, spec, runtime, w.buffer, self.datasets, self.schemas, entry.name, sel
            )
            # Sink deliveries go to the never-failing head node; they cost
            # network time but are not counted or backed up as pushes.
            push_bytes = sum(len(encode_batch(p)) for p in outputs.slices.values())
            sink_bytes = 0 if outputs.slices else len(encode_batch(outputs.out_batch))
            backup_bytes = push_bytes if cfg.strategy.kind != "restart" else 0
            disk_rate = (
                cfg.durable_cost_per_byte
                if cfg.strategy.kind == "spool"
                else cfg.local_disk_cost_per_byte
            )
            duration = (
                cfg.txn_cost  # poll
                + cfg.task_fixed_cost
                + cfg.kernel_cost_per_row * (outputs.input_rows + outputs.out_batch.row_count)
                + (
                    self._push_cost(outputs.slices)
                    if outputs.slices
                    else cfg.net_cost_per_partition + cfg.net_cost_per_byte * sink_bytes
                )
                + disk_rate * backup_bytes
                + cfg.txn_cost  # commit
            )
            return _Staged(
                attempt=self._attempts,
                epoch=epoch,
                kind="channel",
                entry=entry,
                duration=duration,
                outputs=outputs,
                slices=outputs.slices,
                push_bytes=push_bytes,
                backup_bytes=backup_bytes,
            )
        if entry.kind == "replay":
            store = self.durable if cfg.strategy.kind == "spool" else w.backups
            slices = store.slices(entry.name)
            if not slices:
                raise RuntimeError(
                    f"replay {entry.name} on worker {w.wid}: backup missing on a live owner"
                )
            push_bytes = sum(len(encode_batch(p)) for p in slices.values())
            duration = cfg.txn_cost + self._push_cost(slices) + cfg.txn_cost
            return _Staged(
                attempt=self._attempts,
                epoch=epoch,
                kind="replay",
                entry=entry,
                duration=duration,
                slices=slices,
                push_bytes=push_bytes,
            )
        # input regeneration: re-execute a source task from its logged lineage
        sid, channel, _ = entry.name
        spec = self.vplan.stage_map[sid]
        ds: Dataset = self.datasets[spec.operator.dataset]
        owned = chunks_for_channel(ds, channel, spec.channels)
        take = owned[entry.chunk_start : entry.chunk_start + entry.lineage[1]]
        inputs = [ds.chunks[i] for i in take]
        _, out = execute_kernel(spec.operator, None, inputs)
        if out is None:
            out = Batch.from_rows(self.schemas[sid], [])
        slices = {}
        for cid in self.vplan.consumers[sid]:
            for cc, part in partition_batch(
                out, spec.partition_key, self.vplan.stage_map[cid].channels
            ).items():
                slices[(cid, cc)] = part
        push_bytes = sum(len(encode_batch(p)) for p in slices.values())
        input_rows = sum(b.row_count for b in inputs)
        disk_rate = (
            cfg.durable_cost_per_byte if cfg.strategy.kind == "spool" else cfg.local_disk_cost_per_byte
        )
        duration = (
            cfg.txn_cost
            + cfg.task_fixed_cost
            + cfg.kernel_cost_per_row * (input_rows + out.row_count)
            + self._push_cost(slices)
            + disk_rate * push_bytes
            + cfg.txn_cost
        )
        staged = _Staged(
            attempt=self._attempts,
            epoch=epoch,
            kind="input",
            entry=entry,
            duration=duration,
            slices=slices,
            push_bytes=push_bytes,
            backup_bytes=push_bytes,
        )
        staged.outputs = out
        return staged

    def _ev_done(self, wid: int, attempt: int) -> None:
        w = self.workers[wid]
        staged = w.pending
        if staged is None or staged.attempt != attempt or not w.alive:
            return
        w.pending = None
        cfg = self.config
        name = staged.entry.name
        if self.gcs.control_flag or self.gcs.epoch != staged.epoch:
            self._trace_attempt(wid, staged, "aborted")
            self._schedule_step(wid, self.now)
            return
        if staged.kind == "channel":
            # Push targets must all be alive, or nothing is delivered and
            # nothing commits (Algorithm 1's single failure branch).
            for cs_cc in staged.slices:
                target = self.gcs.mapping.get(cs_cc)
                if target is None or not self.workers[target].alive:
                    self._trace_attempt(wid, staged, "push_failed")
                    self._schedule_step(wid, self.now + cfg.idle_tick)
                    return

        if staged.kind == "channel":
            self._finish_channel_task(w, staged)
        elif staged.kind == "replay":
            self._finish_replay(w, staged)
        else:
            self._finish_input(w, staged)
        self._progress()
        self._schedule_step(wid, self.now)
        self._check_task_faults()

    def _finish_channel_task(self, w: _SimWorker, staged: _Staged) -> None:
        cfg = self.config
        outputs = staged.outputs
        entry = staged.entry
        name = entry.name
        spec = self.vplan.stage_map[name.stage]
        sel: Selection = outputs.selection
        lineage = LineageEntry(
            task=name,
            upstream=0 if sel.kind == "flush" else sel.upstream,
            count=0 if sel.kind == "flush" else sel.count,
        )
        successor = None
        sentinel = None
        if outputs.is_flush:
            sentinel = name.seq + 1
        else:
            rest = entry.prescribed[1:] if entry.prescribed else None
            successor = TaskEntry(
                kind="channel",
                name=TaskName(name.stage, name.channel, name.seq + 1),
                prescribed=rest if rest else None,
            )
        owner = None
        if cfg.strategy.kind == "wal":
            owner = w.wid
        elif cfg.strategy.kind == "spool":
            owner = DURABLE_OWNER
        try:
            status = self.gcs.commit_task_completion(
                w.wid,
                lineage,
                successor,
                epoch=staged.epoch,
                sentinel=sentinel,
                partition_owner=owner,
                attempt=staged.attempt,
            )
        except StaleEpoch:
            self._trace_attempt(w.wid, staged, "aborted")
            return
        if status == "duplicate":
            self._trace_attempt(w.wid, staged, "duplicate")
            return
        self.metrics.committed_tasks += 1
        self.metrics.lineage_bytes += lineage.encoded_size()
        if status == "recommitted":
            self.metrics.recommitted_tasks += 1
        runtime = w.channels[(name.stage, name.channel)]
        runtime.state = outputs.new_state
        old_watermarks = list(runtime.watermarks)
        runtime.watermarks = outputs.new_watermarks
        if outputs.is_flush:
            runtime.finalized = True
        if sel.kind == "consume" and not isinstance(spec.operator, InputReader):
            ups = self.vplan.upstream_channels[name.stage][sel.upstream]
            w.buffer.discard_consumed(
                (name.stage, name.channel), ups, runtime.watermarks[sel.upstream]
            )
        del old_watermarks
        store = self.durable if cfg.strategy.kind == "spool" else w.backups
        for cs_cc, part in staged.slices.items():
            if cfg.strategy.kind != "restart":
                n = store.put(name, cs_cc, part)
                if cfg.strategy.kind == "spool":
                    self.metrics.bytes_durable += n
                else:
                    self.metrics.bytes_local += n
            self._push_event(
                self.now + cfg.net_latency,
                "arrival",
                (self.gcs.mapping[cs_cc], name, cs_cc, part),
            )
        self.metrics.bytes_pushed += staged.push_bytes
        if not staged.slices:
            self._deliver_to_sink(name, outputs.out_batch)
        self._trace_attempt(w.wid, staged, "executed")
        self.trace.append(
            {
                "type": "produce",
                "t": self.now,
                "task": list(name),
                "digest": batch_digest(outputs.out_batch),
                "bytes": staged.push_bytes,
                "recommit": status == "recommitted",
            }
        )

    def _deliverable(self, cs_cc) -> bool:
        """Replays and input regeneration may target channels that already
        finished on a now-dead worker; those slices are simply not delivered.
        Any consumer that still needs them gets remapped by a later recovery,
        which plans fresh replays from the surviving backups."""
        target = self.gcs.mapping.get(cs_cc)
        return target is not None and self.workers[target].alive

    def _finish_replay(self, w: _SimWorker, staged: _Staged) -> None:
        name = staged.entry.name
        self.gcs.apply_transaction(
            [("task_remove", w.wid, name, "replay")], epoch=staged.epoch, attempt=staged.attempt
        )
        pushed = 0
        for cs_cc, part in staged.slices.items():
            if not self._deliverable(cs_cc):
                continue
            pushed += len(encode_batch(part))
            self._push_event(
                self.now + self.config.net_latency,
                "arrival",
                (self.gcs.mapping[cs_cc], name, cs_cc, part),
            )
        self.metrics.bytes_pushed += pushed
        self._trace_attempt(w.wid, staged, "executed")

    def _finish_input(self, w: _SimWorker, staged: _Staged) -> None:
        cfg = self.config
        name = staged.entry.name
        owner = DURABLE_OWNER if cfg.strategy.kind == "spool" else w.wid
        self.gcs.apply_transaction(
            [("task_remove", w.wid, name, "input"), ("partition_put", name, owner)],
            epoch=staged.epoch,
            attempt=staged.attempt,
        )
        store = self.durable if cfg.strategy.kind == "spool" else w.backups
        pushed = 0
        for cs_cc, part in staged.slices.items():
            n = store.put(name, cs_cc, part)
            if cfg.strategy.kind == "spool":
                self.metrics.bytes_durable += n
            else:
                self.metrics.bytes_local += n
            if not self._deliverable(cs_cc):
                continue
            pushed += len(encode_batch(part))
            self._push_event(
                self.now + cfg.net_latency,
                "arrival",
                (self.gcs.mapping[cs_cc], name, cs_cc, part),
            )
        self.metrics.bytes_pushed += pushed
        self._trace_attempt(w.wid, staged, "executed")
        self.trace.append(
            {
                "type": "produce",
                "t": self.now,
                "task": list(name),
                "digest": batch_digest(staged.outputs),
                "bytes": pushed,
                "recommit": True,
            }
        )

    def _deliver_to_sink(self, name: TaskName, batch: Batch) -> None:
        accepted = name not in self.sink_rows
        if accepted:
            self.sink_rows[name] = (batch.schema, tuple(batch.rows()))
        self.trace.append(
            {"type": "result", "t": self.now, "task": list(name), "rows": batch.row_count, "accepted": accepted}
        )

    def _trace_attempt(self, wid: int, staged: _Staged, outcome: str) -> None:
        consumed = []
        if staged.kind == "channel" and outcome == "executed":
            consumed = [list(n) for n in staged.outputs.consumed]
        rec = {
            "type": "attempt",
            "t": self.now,
            "id": staged.attempt,
            "worker": wid,
            "kind": staged.kind,
            "task": list(staged.entry.name),
            "outcome": outcome,
        }
        if staged.kind == "channel":
            sel = staged.outputs.selection
            rec["selection"] = None if sel.kind == "flush" else [sel.upstream, sel.count]
            rec["flush"] = sel.kind == "flush"
            rec["consumed"] = consumed
        self.trace.append(rec)

    # -- exchange ------------------------------------------------------------

    def _ev_arrival(self, wid: int, producer: TaskName, cs_cc: tuple, part: Batch) -> None:
        w = self.workers.get(wid)
        if w is None or not w.alive:
            return
        runtime = w.channels.get(cs_cc)
        accepted = False
        if runtime is not None:
            ups = self.vplan.upstream_channels[cs_cc[0]]
            idx = ups.index((producer.stage, producer.channel))
            accepted = w.buffer.insert(producer, cs_cc, part, runtime.watermarks[idx])
        self.trace.append(
            {
                "type": "arrival",
                "t": self.now,
                "worker": wid,
                "producer": list(producer),
                "consumer": list(cs_cc),
                "accepted": accepted,
            }
        )
        if accepted:
            self._progress()
            self._schedule_step(wid, self.now)

    # -- failures and recovery -------------------------------------------------

    def _ev_fault(self, wid: int) -> None:
        w = self.workers.get(wid)
        if w is None or not w.alive:
            return
        w.alive = False
        w.buffer = ExchangeBuffer()
        w.backups = LocalBackupStore()
        w.channels = {}
        w.pending = None
        self.trace.append({"type": "fault", "t": self.now, "worker": wid})
        self._progress()

    def _check_task_faults(self) -> None:
        fired = []
        for f in self._pending_task_faults:
            if self.metrics.committed_tasks >= f.at_tasks:
                fired.append(f)
        for f in fired:
            self._pending_task_faults.remove(f)
            self._ev_fault(f.worker)

    def _unhandled_failures(self) -> set:
        return {
            wid
            for wid, w in self.workers.items()
            if not w.alive and wid not in self._handled_failures
        }

    def _ev_detect(self) -> None:
        if self._done:
            return
        failed = self._unhandled_failures()
        if failed and not self.gcs.control_flag and not self._recovery_pending:
            self.gcs.set_control_flag()
            self._recovery_pending = True
            self.trace.append(
                {"type": "detect", "t": self.now, "failed": sorted(failed)}
            )
            self._push_event(self.now + self.config.recovery_latency, "reconcile", ())
        self._push_event(self.now + self.config.detection_interval, "detect", ())

    def _live_workers(self) -> list:
        return sorted(w for w, s in self.workers.items() if s.alive)

    def _ev_reconcile(self) -> None:
        failed = self._unhandled_failures()
        if self.config.replace_failed:
            for _ in sorted(failed):
                wid = self._next_wid
                self._next_wid += 1
                self.workers[wid] = _SimWorker(wid)
                self._schedule_step(wid, self.now)
        if self.config.strategy.kind == "restart":
            self._restart_recovery(failed)
        else:
            self._wal_recovery(failed)
        self._handled_failures |= failed
        self._recovery_pending = False
        self._progress()
        for wid in self._live_workers():
            self._schedule_step(wid, self.now)

    def _wal_recovery(self, failed: set) -> None:
        live = self._live_workers()
        view = ClusterView(live=tuple(live), mapping=dict(self.gcs.mapping))
        snapshot = self.gcs.snapshot()
        snapshot["lineage"] = {t: v for t, v in snapshot["lineage"].items()}
        plan = plan_recovery(failed, snapshot, view, self.vplan)
        place_recovery(plan, view, self.vplan)

        # A channel can be rewound while a live worker still hosts it (its
        # registered partitions died with an earlier owner before the retrace
        # re-registered them). The live worker's stale entry and runtime must
        # go, or two incarnations of the channel would run concurrently.
        def stale(e: TaskEntry) -> bool:
            return (e.name.stage, e.name.channel) in plan.rewinds

        for sc in plan.rewinds:
            old = self.gcs.mapping.get(sc)
            if old is not None and old in self.workers:
                self.workers[old].channels.pop(sc, None)
        new_queues = {
            w: [e for e in self.gcs.queues.get(w, []) if not stale(e)] for w in live
        }
        rr_replay = 0
        front: dict = {w: [] for w in live}
        for pname, owner, _req in plan.replays:
            if owner == DURABLE_OWNER:
                owner = live[rr_replay % len(live)]
                rr_replay += 1
            front[owner].append(TaskEntry(kind="replay", name=pname))
        for entry, wid in zip(plan.input_tasks, plan.input_placements):
            front[wid].append(entry)
        mapping_ops = []
        rewound_names = []
        for sc in sorted(plan.rewinds):
            wid = plan.placements[sc]
            prescribed = prescribed_lineage_for(sc, {t: v for t, v in snapshot["lineage"].items()})
            entry = TaskEntry(
                kind="channel",
                name=TaskName(sc[0], sc[1], 0),
                prescribed=prescribed if prescribed else None,
            )
            new_queues[wid].append(entry)
            mapping_ops.append(("mapping_put", sc, wid))
            rewound_names.append(sc)
            target = self.workers[wid]
            target.channels[sc] = new_runtime(self.vplan, sc[0], sc[1])
        for w in live:
            new_queues[w] = front[w] + new_queues[w]

        new_epoch = self.gcs.epoch + 1
        self.metrics.recoveries += 1
        self.metrics.rewinds += len(plan.rewinds)
        self.metrics.replays += len(plan.replays)
        self.metrics.input_tasks += len(plan.input_tasks)
        self.metrics.reconstructed_partitions += plan.reconstructed_partitions
        self.trace.append(
            {
                "type": "recovery",
                "t": self.now,
                "strategy": self.config.strategy.kind,
                "epoch": new_epoch,
                "failed": sorted(failed),
                "rewinds": sorted(list(sc) for sc in plan.rewinds),
                "frontiers": {f"{s},{c}": plan.frontiers[(s, c)] for s, c in sorted(plan.frontiers)},
                "replays": sorted(list(n) for n, _, _ in plan.replays),
                "input_tasks": sorted(list(e.name) for e in plan.input_tasks),
                "placements": {f"{s},{c}": plan.placements[(s, c)] for s, c in sorted(plan.placements)},
                "closure": sorted(list(n) for n in plan.closure()),
                "reconstructed": plan.reconstructed_partitions,
                "live": live,
                "snapshot": _snapshot_to_json(snapshot),
            }
        )
        self.gcs.apply_transaction(
            [("queues_replace", new_queues), *mapping_ops, ("flag_clear", new_epoch)]
        )

    def _restart_recovery(self, failed: set) -> None:
        live = self._live_workers()
        for wid in live:
            w = self.workers[wid]
            w.buffer = ExchangeBuffer()
            w.backups = LocalBackupStore()
            w.channels = {}
            # in-flight attempts die on the epoch fence at their done event
        self.durable = LocalBackupStore()
        self.sink_rows = {}
        new_epoch = self.gcs.epoch + 1
        self.metrics.recoveries += 1
        self.metrics.restarts += 1
        self.trace.append(
            {
                "type": "recovery",
                "t": self.now,
                "strategy": "restart",
                "epoch": new_epoch,
                "failed": sorted(failed),
                "live": live,
            }
        )
        queues: dict = {w: [] for w in live}
        mapping_ops = []
        idx = 0
        for sid in self.vplan.topo_order:
            spec = self.vplan.stage_map[sid]
            for c in range(spec.channels):
                wid = live[idx % len(live)]
                idx += 1
                mapping_ops.append(("mapping_put", (sid, c), wid))
                queues[wid].append(TaskEntry(kind="channel", name=TaskName(sid, c, 0)))
                self.workers[wid].channels[(sid, c)] = new_runtime(self.vplan, sid, c)
        self.gcs.apply_transaction(
            [("wipe",), ("queues_replace", queues), *mapping_ops, ("flag_clear", new_epoch)]
        )


def _snapshot_to_json(snapshot: dict) -> dict:
    return {
        "lineage": sorted([list(t), v[0], v[1]] for t, v in snapshot["lineage"].items()),
        "queues": {
            str(w): [e.to_dict() for e in q] for w, q in sorted(snapshot["queues"].items())
        },
        "sentinels": {f"{s},{c}": n for (s, c), n in sorted(snapshot["sentinels"].items())},
        "partitions": sorted([list(t), str(o)] for t, o in snapshot["partitions"].items()),
        "mapping": {f"{s},{c}": w for (s, c), w in sorted(snapshot["mapping"].items())},
        "epoch": snapshot["epoch"],
    }


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def _as_vplan(plan) -> ValidatedPlan:
    return plan if isinstance(plan, ValidatedPlan) else validate_plan(plan)


def resolve_faults(plan, datasets, config: SimConfig, faults) -> tuple:
    """Resolve progress-fraction triggers against a failure-free calibration
    run with the same seed."""
    faults = tuple(faults)
    if not any(f.at_fraction is not None for f in faults):
        return faults
    base = Simulator(_as_vplan(plan), datasets, config, ()).run()
    makespan = base.metrics.makespan
    resolved = []
    for f in faults:
        if f.at_fraction is not None:
            resolved.append(Fault(worker=f.worker, at_time=f.at_fraction * makespan))
        else:
            resolved.append(f)
    return tuple(resolved)


def run(plan, datasets: dict, config: SimConfig, faults=()) -> RunResult:
    """Simulate a full query, driving workers, coordinator, GCS and exchange
    until every sentinel is committed and all queues drain."""
    vplan = _as_vplan(plan)
    faults = resolve_faults(vplan, datasets, config, faults)
    return Simulator(vplan, datasets, config, faults).run()


def run_blocking(plan, datasets: dict, config: SimConfig, faults=()) -> RunResult:
    """Stagewise execution: stage n+1 only starts after all of stage n."""
    return run(plan, datasets, replace(config, blocking=True), faults)


def compare_strategies(
    plan,
    datasets: dict,
    config: SimConfig,
    faults=(),
    batch_sizes=(8,),
) -> dict:
    """One run per (strategy, batching) cell under a shared seed.

    Overheads are relative to the no-fault-tolerance dynamic run (restart
    strategy, no faults).
    """
    vplan = _as_vplan(plan)
    policies = [BatchingPolicy("dynamic")] + [BatchingPolicy("static", b) for b in batch_sizes]
    base_cfg = replace(config, strategy=FtStrategy("restart", BatchingPolicy("dynamic")))
    baseline = run(vplan, datasets, base_cfg, ())
    baseline.metrics.overhead = 1.0
    table = {"baseline": baseline.metrics}
    for kind in ("wal", "spool", "restart"):
        for policy in policies:
            cfg = replace(config, strategy=FtStrategy(kind, policy))
            res = run(vplan, datasets, cfg, faults)
            res.metrics.overhead = res.metrics.makespan / baseline.metrics.makespan
            table[FtStrategy(kind, policy).label] = res.metrics
    return table
