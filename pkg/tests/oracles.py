"""Independent test oracles.

These deliberately re-derive expected values through different algorithms
than the implementation: the recovery closure uses a set fixpoint instead of
a reverse-topological walk, and the join oracle is a nested loop. They share
no logic with the package beyond reading plan structure and trace records.
"""
from __future__ import annotations

from walpipe import InputReader, ValidatedPlan


def _committed_counts(lineage: dict) -> dict:
    counts: dict = {}
    for (s, c, q) in lineage:
        counts[(s, c)] = max(counts.get((s, c), 0), q + 1)
    # lineage is committed strictly in order; holes would be a store bug
    for (s, c), n in counts.items():
        missing = [q for q in range(n) if (s, c, q) not in lineage]
        assert not missing, f"lineage hole in channel {(s, c)}: {missing}"
    return counts


def recovery_closure_oracle(record: dict, vplan: ValidatedPlan):
    """Recompute a recovery's re-execution closure by fixpoint iteration.

    Input is the recovery trace record (which embeds the pre-recovery store
    snapshot). Returns (rewound channels, closure task-name set).
    """
    snap = record["snapshot"]
    lineage = {tuple(t): (i, k) for t, i, k in snap["lineage"]}
    counts = _committed_counts(lineage)
    partitions = {tuple(t): owner for t, owner in snap["partitions"]}
    failed = set(record["failed"])
    live = set(record["live"])

    def is_source(stage: int) -> bool:
        return isinstance(vplan.stage_map[stage].operator, InputReader)

    def lost(name) -> bool:
        owner = partitions.get(name)
        if owner == "durable":
            return False
        return owner is None or int(owner) not in live

    rewinds: set = set()
    orphans: list = []  # replay/input work queued on a failed worker
    for w in failed:
        for entry in snap["queues"].get(str(w), []):
            name = tuple(entry["name"])
            if entry["kind"] == "channel":
                rewinds.add(name[:2])
            else:
                orphans.append(name)

    while True:
        needed = set(orphans)
        for s, c in rewinds:
            if is_source(s):
                continue
            for us, uc in vplan.upstream_channels[s]:
                needed.update((us, uc, q) for q in range(counts.get((us, uc), 0)))
        inputs = set()
        grew = False
        for name in needed:
            sc = name[:2]
            if sc in rewinds or not lost(name):
                continue
            if is_source(name[0]):
                inputs.add(name)
            else:
                rewinds.add(sc)
                grew = True
        if not grew:
            break

    closure = set(inputs)
    for s, c in rewinds:
        closure.update((s, c, q) for q in range(counts.get((s, c), 0)))
    return rewinds, closure


def reexecuted_tasks(trace: list):
    """Task names actually re-executed, read straight off the raw trace:
    lineage entries committed a second time, plus regenerated source tasks."""
    committed: set = set()
    redone: set = set()
    for rec in trace:
        if rec.get("type") != "txn":
            continue
        for op in rec["ops"]:
            if op[0] == "lineage_put":
                name = tuple(op[1])
                if name in committed:
                    redone.add(name)
                committed.add(name)
            elif op[0] == "task_remove" and op[3] == "input":
                redone.add(tuple(op[2]))
            elif op[0] == "wipe":
                committed.clear()
                redone.clear()
    return redone


def expected_closures(trace: list, vplan: ValidatedPlan):
    """Union of per-recovery oracle closures over a whole run's trace."""
    closure: set = set()
    for rec in trace:
        if rec.get("type") == "recovery" and rec.get("strategy") != "restart":
            _, c = recovery_closure_oracle(rec, vplan)
            closure |= c
    return closure


def nested_loop_join(probe_rows, probe_schema, build_rows, build_schema, key):
    """Quadratic reference join, output schema = probe + non-clashing build."""
    p_names = [n for n, _ in probe_schema]
    b_names = [n for n, _ in build_schema]
    p_idx = p_names.index(key)
    b_idx = b_names.index(key)
    out = []
    for pr in probe_rows:
        for br in build_rows:
            if pr[p_idx] == br[b_idx]:
                out.append(pr + tuple(v for n, v in zip(b_names, br) if n not in p_names))
    return out


def placement_by_stage(record: dict, vplan: ValidatedPlan) -> dict:
    """stage -> set of workers hosting that stage's rewound stateful channels."""
    out: dict = {}
    for key, wid in record.get("placements", {}).items():
        s, c = (int(x) for x in key.split(","))
        if vplan.stage_map[s].stateful:
            out.setdefault(s, set()).add(wid)
    return out
