"""The global control store: lineage table, task queues, sentinels, flags.

A single logical store on the never-failing head node. All mutations go
through `apply_transaction`, which stages every sub-write on copies and
swaps them in atomically; a crash injected between sub-writes leaves the
store untouched. Every applied transaction is appended to the audit trace
with pre/post state digests.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional

DURABLE_OWNER = "durable"  # partition registry owner under the spooling strategy
LINEAGE_ENTRY_BYTES = 40  # five little-endian int64 fields


class TaskName(NamedTuple):
    stage: int
    channel: int
    seq: int


@dataclass(frozen=True)
class LineageEntry:
    """Committed lineage: which upstream channel index and how many outputs.

    count == 0 marks a channel's end-of-stream flush task.
    """

    task: TaskName
    upstream: int
    count: int

    def encoded_size(self) -> int:
        return LINEAGE_ENTRY_BYTES

    def encode(self) -> bytes:
        return struct.pack("<5q", *self.task, self.upstream, self.count)


@dataclass(frozen=True)
class TaskEntry:
    """One outstanding unit of work in a worker's queue.

    kind 'channel': the next task of a channel; `prescribed` holds the
    remaining (upstream, count) selections a rewound channel must replicate.
    kind 'replay': re-push a backed-up partition. kind 'input': regenerate
    a lost source-stage partition from its logged lineage.
    """

    kind: str
    name: TaskName
    prescribed: Optional[tuple] = None
    lineage: Optional[tuple] = None  # input tasks: (upstream, count)
    chunk_start: int = 0  # input tasks: dataset-chunk watermark before this seq

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "name": list(self.name)}
        if self.prescribed is not None:
            d["prescribed"] = [list(p) for p in self.prescribed]
        if self.lineage is not None:
            d["lineage"] = list(self.lineage)
            d["chunk_start"] = self.chunk_start
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskEntry":
        return cls(
            kind=d["kind"],
            name=TaskName(*d["name"]),
            prescribed=tuple(tuple(p) for p in d["prescribed"]) if "prescribed" in d else None,
            lineage=tuple(d["lineage"]) if "lineage" in d else None,
            chunk_start=d.get("chunk_start", 0),
        )


class GcsError(Exception):
    pass


class DuplicateCommit(GcsError):
    pass


class StaleEpoch(GcsError):
    pass


class FlagAlreadySet(GcsError):
    pass


class InjectedCrash(Exception):
    """Test hook: simulated crash between transaction sub-writes."""


def _key(stage_channel) -> str:
    return f"{stage_channel[0]},{stage_channel[1]}"


def _unkey(s: str) -> tuple:
    a, b = s.split(",")
    return (int(a), int(b))


@dataclass
class Gcs:
    clock: Callable[[], float] = lambda: 0.0
    trace: list = field(default_factory=list)
    lag_fn: Callable[[], float] = lambda: 0.0

    lineage: dict = field(default_factory=dict)  # TaskName -> LineageEntry
    queues: dict = field(default_factory=dict)  # worker id -> list[TaskEntry]
    sentinels: dict = field(default_factory=dict)  # (stage, channel) -> final count
    partitions: dict = field(default_factory=dict)  # TaskName -> owner worker | DURABLE_OWNER
    mapping: dict = field(default_factory=dict)  # (stage, channel) -> worker id
    control_flag: bool = False
    epoch: int = 0

    _visible_at: dict = field(default_factory=dict)
    _txn_counter: int = 0
    crash_after_ops: Optional[int] = None  # test hook for the crash-point sweep

    # -- reads ------------------------------------------------------------

    def read_lineage(self, task: TaskName, now: Optional[float] = None) -> Optional[LineageEntry]:
        entry = self.lineage.get(task)
        if entry is None:
            return None
        if now is not None and self._visible_at.get(task, 0.0) > now:
            return None  # eventual consistency: commit applied but not yet visible
        return entry

    def committed_count(self, stage: int, channel: int) -> int:
        """Contiguous committed task count of a channel (commits are in order)."""
        n = 0
        while TaskName(stage, channel, n) in self.lineage:
            n += 1
        return n

    def sentinel_visible(self, stage_channel, now: Optional[float] = None) -> Optional[int]:
        n = self.sentinels.get(tuple(stage_channel))
        if n is None:
            return None
        flush = TaskName(stage_channel[0], stage_channel[1], n - 1)
        if now is not None and self._visible_at.get(flush, 0.0) > now:
            return None
        return n

    def poll_tasks(self, worker: int):
        """Snapshot of a worker's queue plus the control flag and epoch."""
        return tuple(self.queues.get(worker, ())), self.control_flag, self.epoch

    def snapshot(self) -> dict:
        return {
            "lineage": {t: (e.upstream, e.count) for t, e in self.lineage.items()},
            "queues": {w: tuple(q) for w, q in self.queues.items()},
            "sentinels": dict(self.sentinels),
            "partitions": dict(self.partitions),
            "mapping": dict(self.mapping),
            "epoch": self.epoch,
        }

    def state_digest(self) -> str:
        doc = {
            "lineage": sorted(
                (list(t), e.upstream, e.count) for t, e in self.lineage.items()
            ),
            "queues": {str(w): [e.to_dict() for e in q] for w, q in sorted(self.queues.items())},
            "sentinels": {_key(k): v for k, v in sorted(self.sentinels.items())},
            "partitions": sorted((list(t), str(o)) for t, o in self.partitions.items()),
            "mapping": {_key(k): v for k, v in sorted(self.mapping.items())},
            "flag": self.control_flag,
            "epoch": self.epoch,
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    # -- transactions ------------------------------------------------------

    def apply_transaction(self, ops, epoch: Optional[int] = None, attempt: Optional[int] = None):
        """Apply a list of sub-writes all-or-nothing.

        `epoch` fences worker-issued transactions: a mismatch with the
        current epoch, or a set control flag, rejects the whole transaction
        (the coordinator passes None and is exempt).
        """
        if epoch is not None:
            if epoch != self.epoch:
                raise StaleEpoch(f"transaction epoch {epoch} != store epoch {self.epoch}")
            if self.control_flag:
                raise StaleEpoch("control flag set; worker transactions are barred")

        staged = {
            "lineage": dict(self.lineage),
            "queues": {w: list(q) for w, q in self.queues.items()},
            "sentinels": dict(self.sentinels),
            "partitions": dict(self.partitions),
            "mapping": dict(self.mapping),
            "flag": self.control_flag,
            "epoch": self.epoch,
            "visible_at": dict(self._visible_at),
        }
        for i, op in enumerate(ops):
            if self.crash_after_ops is not None and i >= self.crash_after_ops:
                raise InjectedCrash(f"crash before sub-write {i}")
            self._stage_op(staged, op)

        pre = self.state_digest()
        self.lineage = staged["lineage"]
        self.queues = staged["queues"]
        self.sentinels = staged["sentinels"]
        self.partitions = staged["partitions"]
        self.mapping = staged["mapping"]
        self.control_flag = staged["flag"]
        self.epoch = staged["epoch"]
        self._visible_at = staged["visible_at"]
        self._txn_counter += 1
        self.trace.append(
            {
                "type": "txn",
                "t": self.clock(),
                "txid": self._txn_counter,
                "epoch": self.epoch,
                "attempt": attempt,
                "ops": [self._op_to_json(op) for op in ops],
                "pre": pre,
                "post": self.state_digest(),
            }
        )
        return self._txn_counter

    def _stage_op(self, staged: dict, op) -> None:
        tag = op[0]
        if tag == "lineage_put":
            entry: LineageEntry = op[1]
            prev = staged["lineage"].get(entry.task)
            if prev is not None and prev != entry:
                raise GcsError(f"lineage immutability violated for {entry.task}")
            staged["lineage"][entry.task] = entry
            staged["visible_at"][entry.task] = self.clock() + self.lag_fn()
        elif tag == "task_remove":
            _, worker, name, kind = op
            q = staged["queues"].setdefault(worker, [])
            for i, e in enumerate(q):
                if e.name == name and e.kind == kind:
                    del q[i]
                    break
            else:
                raise GcsError(f"{kind} task {name} not queued on worker {worker}")
        elif tag == "task_append":
            _, worker, entry = op
            staged["queues"].setdefault(worker, []).append(entry)
        elif tag == "sentinel_put":
            _, sc, n = op
            prev = staged["sentinels"].get(tuple(sc))
            if prev is not None and prev != n:
                raise GcsError(f"sentinel for {sc} rewritten: {prev} -> {n}")
            staged["sentinels"][tuple(sc)] = n
        elif tag == "partition_put":
            _, name, owner = op
            staged["partitions"][name] = owner
        elif tag == "flag_set":
            if staged["flag"]:
                raise FlagAlreadySet("control flag already set")
            staged["flag"] = True
        elif tag == "flag_clear":
            _, new_epoch = op
            if not staged["flag"]:
                raise GcsError("control flag not set")
            if new_epoch != staged["epoch"] + 1:
                raise GcsError(f"epoch must advance by 1 ({staged['epoch']} -> {new_epoch})")
            staged["flag"] = False
            staged["epoch"] = new_epoch
        elif tag == "queues_replace":
            staged["queues"] = {w: list(q) for w, q in op[1].items()}
        elif tag == "mapping_put":
            _, sc, worker = op
            staged["mapping"][tuple(sc)] = worker
        elif tag == "wipe":
            staged["lineage"] = {}
            staged["sentinels"] = {}
            staged["partitions"] = {}
            staged["queues"] = {}
            staged["visible_at"] = {}
        else:
            raise GcsError(f"unknown transaction op {tag!r}")

    @staticmethod
    def _op_to_json(op):
        tag = op[0]
        if tag == "lineage_put":
            e: LineageEntry = op[1]
            return [tag, list(e.task), e.upstream, e.count]
        if tag == "task_remove":
            return [tag, op[1], list(op[2]), op[3]]
        if tag == "task_append":
            return [tag, op[1], op[2].to_dict()]
        if tag == "sentinel_put":
            return [tag, list(op[1]), op[2]]
        if tag == "partition_put":
            return [tag, list(op[1]), op[2]]
        if tag == "queues_replace":
            return [tag, {str(w): [e.to_dict() for e in q] for w, q in sorted(op[1].items())}]
        if tag == "mapping_put":
            return [tag, list(op[1]), op[2]]
        return [tag, *op[1:]]

    # -- protocol-level helpers --------------------------------------------

    def commit_task_completion(
        self,
        worker: int,
        entry: LineageEntry,
        successor: Optional[TaskEntry],
        epoch: int,
        sentinel: Optional[int] = None,
        partition_owner=None,
        attempt: Optional[int] = None,
    ) -> str:
        """Atomically commit a finished task (Algorithm 1's final step).

        Returns 'committed', 'recommitted' (rewound task re-producing a
        logged output) or 'duplicate' (retry of an already-applied commit;
        idempotent success, no mutation).
        """
        task = entry.task
        queued = any(
            e.name == task and e.kind == "channel" for e in self.queues.get(worker, ())
        )
        prior = self.lineage.get(task)
        if prior is not None and not queued:
            return "duplicate"
        if prior is not None and (prior.upstream, prior.count) != (entry.upstream, entry.count):
            raise GcsError(f"lineage immutability violated for {task}")
        ops = [("lineage_put", entry), ("task_remove", worker, task, "channel")]
        if successor is not None:
            ops.append(("task_append", worker, successor))
        if sentinel is not None:
            ops.append(("sentinel_put", (task.stage, task.channel), sentinel))
        if partition_owner is not None:
            ops.append(("partition_put", task, partition_owner))
        self.apply_transaction(ops, epoch=epoch, attempt=attempt)
        return "recommitted" if prior is not None else "committed"

    def set_control_flag(self) -> None:
        self.apply_transaction([("flag_set",)])

    def clear_control_flag(self, new_epoch: int, extra_ops=()) -> None:
        self.apply_transaction([*extra_ops, ("flag_clear", new_epoch)])
