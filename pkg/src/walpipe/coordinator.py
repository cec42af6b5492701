"""Coordinator logic: failure detection, recovery planning, placement.

Recovery planning seeds rewind requests from the failed workers' queued
channel tasks, then walks stages in reverse topological order resolving
every committed upstream output a rewound channel will need into a replay
(live backup), an input-regeneration task (source stage), or a further
rewind. Rewound channels re-execute from seq 0 under prescribed lineage up
to their pre-failure frontier, so they regenerate identical outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .gcs import DURABLE_OWNER, TaskEntry, TaskName
from .plan import InputReader, ValidatedPlan


class Unrecoverable(Exception):
    """A required partition has no live backup, no source, no rewindable
    producer. Cannot happen while lineage is closed; signals corruption."""


@dataclass(frozen=True)
class ClusterView:
    live: tuple  # sorted worker ids
    mapping: dict = field(hash=False)  # (stage, channel) -> worker id


@dataclass
class RecoveryPlan:
    rewinds: set = field(default_factory=set)  # {(stage, channel)}
    frontiers: dict = field(default_factory=dict)  # (stage, channel) -> committed count
    replays: list = field(default_factory=list)  # (TaskName, owner, requesting (s, c))
    input_tasks: list = field(default_factory=list)  # TaskEntry(kind='input')
    placements: dict = field(default_factory=dict)  # (stage, channel) -> worker id
    input_placements: list = field(default_factory=list)  # worker per input task

    @property
    def reconstructed_partitions(self) -> int:
        """Data partitions regenerated by this plan: lost source outputs plus
        every rewound task re-executed up to its channel's frontier."""
        return len(self.input_tasks) + sum(self.frontiers[rc] for rc in self.rewinds)

    def closure(self) -> set:
        """The exact set of task names this plan re-executes."""
        tasks = {e.name for e in self.input_tasks}
        for s, c in self.rewinds:
            tasks.update(TaskName(s, c, q) for q in range(self.frontiers[(s, c)]))
        return tasks

    def is_empty(self) -> bool:
        return not self.rewinds and not self.replays and not self.input_tasks


def detect_failures(last_heartbeat: dict, now: float, interval: float) -> set:
    """Workers whose heartbeat is at least one detection interval stale."""
    return {w for w, t in sorted(last_heartbeat.items()) if now - t >= interval}


def prescribed_lineage_for(stage_channel, lineage: dict) -> tuple:
    """Ordered (upstream, count) selections logged for a channel's tasks.

    Rewound tasks up to the frontier must replicate exactly these choices
    instead of choosing dynamically.
    """
    s, c = stage_channel
    out = []
    q = 0
    while TaskName(s, c, q) in lineage:
        out.append(tuple(lineage[TaskName(s, c, q)]))
        q += 1
    return tuple(out)


def plan_recovery(
    failed: set,
    snapshot: dict,
    view: ClusterView,
    vplan: ValidatedPlan,
) -> RecoveryPlan:
    """Algorithm 2: compute rewinds, replays and input tasks for a failure.

    `snapshot` is a consistent GCS snapshot (taken under the control-flag
    barrier): lineage {TaskName: (i, K)}, queues, sentinels, partitions
    {TaskName: owner}.
    """
    lineage = snapshot["lineage"]
    partitions = snapshot["partitions"]
    live = set(view.live)
    plan = RecoveryPlan()

    orphaned = []  # replay/input tasks lost with their worker; re-resolved below
    for w in sorted(failed):
        for entry in snapshot["queues"].get(w, ()):
            if entry.kind == "channel":
                plan.rewinds.add((entry.name.stage, entry.name.channel))
            else:
                orphaned.append(entry)

    committed_counts: dict = {}

    def committed(sc) -> int:
        if sc not in committed_counts:
            n = 0
            while TaskName(sc[0], sc[1], n) in lineage:
                n += 1
            committed_counts[sc] = n
        return committed_counts[sc]

    def resolve(name: TaskName, requester) -> None:
        """Route one required committed partition per Algorithm 2's cases."""
        producer = (name.stage, name.channel)
        if producer in plan.rewinds:
            return  # the rewound producer will re-push it
        owner = partitions.get(name)
        if owner == DURABLE_OWNER or owner in live:
            plan.replays.append((name, owner, requester))
            return
        if isinstance(vplan.stage_map[name.stage].operator, InputReader):
            i, k = lineage[name]
            start = sum(lineage[TaskName(name.stage, name.channel, q)][1] for q in range(name.seq))
            plan.input_tasks.append(
                TaskEntry(kind="input", name=name, lineage=(i, k), chunk_start=start)
            )
            return
        if name not in lineage:
            raise Unrecoverable(f"partition {name} required but never committed")
        plan.rewinds.add(producer)

    # Lost replay/input tasks from a nested failure are re-resolved first;
    # they may add rewinds, which the traversal below then covers.
    for entry in orphaned:
        resolve(entry.name, None)

    # Reverse topological order: resolving a consumer may add producer
    # rewinds, which are then visited afterwards.
    for stage in reversed(vplan.topo_order):
        for channel in range(vplan.stage_map[stage].channels):
            sc = (stage, channel)
            if sc not in plan.rewinds:
                continue
            plan.frontiers[sc] = committed(sc)
            if isinstance(vplan.stage_map[stage].operator, InputReader):
                continue
            # A rewound channel needs every committed output of each of its
            # upstream channels: the prescribed ones to retrace its steps,
            # the rest to continue past the frontier (the originals were in
            # the dead worker's exchange buffer).
            for us, uc in vplan.upstream_channels[stage]:
                for q in range(committed((us, uc))):
                    resolve(TaskName(us, uc, q), sc)

    # Late rewinds make earlier replay/input plans for the same producer
    # redundant: the rewound channel re-pushes everything itself.
    plan.replays = [
        (n, o, r) for n, o, r in plan.replays if (n.stage, n.channel) not in plan.rewinds
    ]
    seen: set = set()
    deduped = []
    for entry in plan.input_tasks:
        if entry.name not in seen and (entry.name.stage, entry.name.channel) not in plan.rewinds:
            seen.add(entry.name)
            deduped.append(entry)
    plan.input_tasks = deduped
    dedup_replays = []
    seen = set()
    for item in plan.replays:
        if item[0] not in seen:
            seen.add(item[0])
            dedup_replays.append(item)
    plan.replays = dedup_replays
    return plan


def place_recovery(plan: RecoveryPlan, view: ClusterView, vplan: ValidatedPlan) -> RecoveryPlan:
    """Assign rewound channels and input tasks to live workers.

    Pipelined-parallel placement: rewound stateful channels of different
    stages land on different workers whenever live capacity permits (each
    stage gets a disjoint block of workers); otherwise stage-major
    round-robin. Stateless rewinds and input tasks spread round-robin.
    """
    live = sorted(view.live)
    n = len(live)
    if n == 0:
        raise Unrecoverable("no live workers to place recovery on")

    stateful = sorted(rc for rc in plan.rewinds if vplan.stage_map[rc[0]].stateful)
    stateless = sorted(rc for rc in plan.rewinds if not vplan.stage_map[rc[0]].stateful)

    stages = sorted({s for s, _ in stateful})
    if stages and len(stages) <= n:
        base, extra = divmod(n, len(stages))
        blocks, start = {}, 0
        for k, stage in enumerate(stages):
            size = base + (1 if k < extra else 0)
            blocks[stage] = live[start : start + size]
            start += size
        counters = {stage: 0 for stage in stages}
        for s, c in stateful:
            block = blocks[s]
            plan.placements[(s, c)] = block[counters[s] % len(block)]
            counters[s] += 1
    else:
        for idx, rc in enumerate(stateful):
            plan.placements[rc] = live[idx % n]

    rr = 0
    for rc in stateless:
        plan.placements[rc] = live[rr % n]
        rr += 1
    plan.input_placements = []
    for _ in plan.input_tasks:
        plan.input_placements.append(live[rr % n])
        rr += 1
    return plan
