"""Online/offline auditing of run traces against the core invariants.

The trace is a flat list of JSON-able records emitted by the store and the
simulator. The auditor replays it, maintaining shadow state, and reports
violations as data (never exceptions): gating, commit atomicity,
no-commit-after-push-failure, in-order exactly-once consumption, output
digest stability across rewinds, and recovery locality.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

AUDIT_LOG_VERSION = 1


@dataclass(frozen=True)
class Violation:
    rule: str
    detail: str
    index: int

    def __str__(self) -> str:
        return f"[{self.rule}] record {self.index}: {self.detail}"


class AuditLogError(ValueError):
    pass


def write_audit_log(trace: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"type": "header", "version": AUDIT_LOG_VERSION}) + "\n")
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_audit_log(path) -> list:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AuditLogError(f"line {lineno}: malformed record: {exc}") from exc
            if lineno == 1:
                if rec.get("type") != "header" or rec.get("version") != AUDIT_LOG_VERSION:
                    raise AuditLogError(f"line 1: bad or missing audit log header")
                continue
            records.append(rec)
    return records


def _name(lst) -> tuple:
    return tuple(lst)


def audit_trace(trace: list) -> list:
    violations: list = []

    committed: dict = {}  # name -> (i, K)
    shadow_queues: dict = {}  # worker -> set of names (channel tasks only)
    produced_digest: dict = {}  # name -> digest
    consumed_next: dict = {}  # (consumer (s, c), upstream (s, c)) -> next expected seq
    allowed_reexec: set = set()
    failed_attempts: set = set()  # attempt ids that reported push failure

    def fail(rule, detail, idx):
        violations.append(Violation(rule, detail, idx))

    for idx, rec in enumerate(trace):
        typ = rec.get("type")

        if typ == "txn":
            attempt = rec.get("attempt")
            if attempt is not None and attempt in failed_attempts:
                fail("no-commit-on-push-failure", f"txn after failed push (attempt {attempt})", idx)
            for op in rec["ops"]:
                tag = op[0]
                if tag == "lineage_put":
                    name = _name(op[1])
                    ik = (op[2], op[3])
                    if name in committed:
                        if committed[name] != ik:
                            fail("lineage-immutability", f"{name}: {committed[name]} -> {ik}", idx)
                        if name not in allowed_reexec:
                            fail(
                                "recovery-locality",
                                f"{name} re-committed outside any recovery closure",
                                idx,
                            )
                    committed[name] = ik
                elif tag == "task_remove":
                    if op[3] == "channel":
                        shadow_queues.get(op[1], set()).discard(_name(op[2]))
                elif tag == "task_append":
                    entry = op[2]
                    # Prescribed entries are coordinator-ordered rewinds: their
                    # names legitimately sit in both G.L and a queue while the
                    # channel retraces its logged lineage.
                    if entry["kind"] == "channel" and "prescribed" not in entry:
                        shadow_queues.setdefault(op[1], set()).add(_name(entry["name"]))
                elif tag == "queues_replace":
                    shadow_queues = {}
                    for w, entries in op[1].items():
                        shadow_queues[int(w)] = {
                            _name(e["name"])
                            for e in entries
                            if e["kind"] == "channel" and "prescribed" not in e
                        }
                elif tag == "wipe":
                    committed.clear()
                    shadow_queues = {}
                    produced_digest.clear()
                    consumed_next.clear()
                    allowed_reexec.clear()
            # Atomicity: a name never sits in the lineage table and a queue
            # at the same time, observed after every transaction.
            for w, names in shadow_queues.items():
                both = names & committed.keys()
                if both:
                    fail("atomic-commit", f"in both G.L and G.T on worker {w}: {sorted(both)}", idx)

        elif typ == "attempt":
            if rec["outcome"] == "push_failed":
                failed_attempts.add(rec["id"])
            if rec["outcome"] == "executed" and rec.get("consumed"):
                consumer = tuple(rec["task"][:2])
                for raw in rec["consumed"]:
                    name = _name(raw)
                    if name not in committed:
                        fail(
                            "lineage-gating",
                            f"task {rec['task']} consumed {name} with no committed lineage",
                            idx,
                        )
                    key = (consumer, name[:2])
                    expected = consumed_next.get(key, 0)
                    if name[2] != expected:
                        fail(
                            "in-order-consumption",
                            f"consumer {consumer} took {name}, expected seq {expected}",
                            idx,
                        )
                    consumed_next[key] = name[2] + 1

        elif typ == "produce":
            name = _name(rec["task"])
            prior = produced_digest.get(name)
            if prior is not None and prior != rec["digest"]:
                fail("output-determinism", f"{name} produced two different payloads", idx)
            produced_digest[name] = rec["digest"]

        elif typ == "recovery":
            if rec.get("strategy") == "restart":
                continue
            closure = {_name(n) for n in rec["closure"]}
            allowed_reexec |= closure
            # Rewound consumers retrace their steps; reset their in-order
            # counters so the replayed consumption doesn't read as a skip.
            for s, c in rec["rewinds"]:
                for key in [k for k in consumed_next if k[0] == (s, c)]:
                    del consumed_next[key]

    return violations


def audit_log_file(path) -> list:
    return audit_trace(read_audit_log(path))
