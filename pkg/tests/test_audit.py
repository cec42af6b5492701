"""Auditor rules on hand-crafted traces, plus the log file format."""
import json

import pytest

from walpipe import (
    AuditLogError,
    SimConfig,
    Fault,
    audit_log_file,
    audit_trace,
    read_audit_log,
    run,
    write_audit_log,
)

from planlib import two_stage_plan


def _txn(ops, attempt=None):
    return {"type": "txn", "t": 0.0, "txid": 1, "epoch": 0, "attempt": attempt, "ops": ops,
            "pre": "", "post": ""}


def _lineage_put(name, i, k):
    return ["lineage_put", list(name), i, k]


def _rules(trace):
    return [v.rule for v in audit_trace(trace)]


def test_clean_run_has_no_violations():
    vplan, datasets = two_stage_plan()
    result = run(vplan, datasets, SimConfig(workers=3, seed=20), [Fault(worker=0, at_fraction=0.5)])
    assert audit_trace(result.trace) == []


def test_commit_after_push_failure_flagged():
    trace = [
        {"type": "attempt", "id": 7, "worker": 0, "kind": "channel", "task": [1, 0, 0],
         "outcome": "push_failed"},
        _txn([_lineage_put((1, 0, 0), 0, 2)], attempt=7),
    ]
    assert _rules(trace) == ["no-commit-on-push-failure"]


def test_lineage_rewrite_flagged():
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
        _txn([_lineage_put((1, 0, 0), 1, 3)]),
    ]
    rules = _rules(trace)
    assert "lineage-immutability" in rules


def test_recommit_outside_recovery_closure_flagged():
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
    ]
    assert _rules(trace) == ["recovery-locality"]


def test_recommit_inside_recovery_closure_allowed():
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
        {"type": "recovery", "strategy": "wal", "closure": [[1, 0, 0]], "rewinds": [[1, 0]]},
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
    ]
    assert _rules(trace) == []


def test_task_in_both_lineage_and_queue_flagged():
    entry = {"kind": "channel", "name": [1, 0, 0]}
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2), ["task_append", 0, entry]]),
    ]
    assert _rules(trace) == ["atomic-commit"]


def test_prescribed_rewind_entry_exempt_from_atomicity():
    # a coordinator-ordered rewind legitimately re-queues a committed name
    entry = {"kind": "channel", "name": [1, 0, 0], "prescribed": [[0, 2]]}
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
        {"type": "recovery", "strategy": "wal", "closure": [[1, 0, 0]], "rewinds": [[1, 0]]},
        _txn([["task_append", 0, entry]]),
    ]
    assert _rules(trace) == []


def test_consuming_uncommitted_input_flagged():
    trace = [
        {"type": "attempt", "id": 1, "worker": 0, "kind": "channel", "task": [1, 0, 0],
         "outcome": "executed", "consumed": [[0, 0, 0]]},
    ]
    assert _rules(trace) == ["lineage-gating"]


def test_out_of_order_consumption_flagged():
    trace = [
        _txn([_lineage_put((0, 0, 0), 0, 1), _lineage_put((0, 0, 1), 0, 1)]),
        {"type": "attempt", "id": 1, "worker": 0, "kind": "channel", "task": [1, 0, 0],
         "outcome": "executed", "consumed": [[0, 0, 1]]},
    ]
    assert _rules(trace) == ["in-order-consumption"]


def test_rewound_consumer_may_reconsume_from_zero():
    committed = _txn([_lineage_put((0, 0, 0), 0, 1)])
    consume = {"type": "attempt", "id": 1, "worker": 0, "kind": "channel", "task": [1, 0, 0],
               "outcome": "executed", "consumed": [[0, 0, 0]]}
    recovery = {"type": "recovery", "strategy": "wal", "closure": [[1, 0, 0]], "rewinds": [[1, 0]]}
    assert _rules([committed, consume, recovery, dict(consume, id=2)]) == []
    # without the rewind the re-consumption is a violation
    assert _rules([committed, consume, dict(consume, id=2)]) == ["in-order-consumption"]


def test_nondeterministic_rewind_output_flagged():
    trace = [
        {"type": "produce", "task": [1, 0, 0], "digest": "aaa", "bytes": 1, "recommit": False},
        {"type": "produce", "task": [1, 0, 0], "digest": "bbb", "bytes": 1, "recommit": True},
    ]
    assert _rules(trace) == ["output-determinism"]


def test_violation_names_rule_and_record():
    trace = [
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
        _txn([_lineage_put((1, 0, 0), 0, 2)]),
    ]
    v = audit_trace(trace)[0]
    assert v.index == 1
    assert "(1, 0, 0)" in str(v)


def test_audit_log_round_trip(tmp_path):
    vplan, datasets = two_stage_plan()
    result = run(vplan, datasets, SimConfig(workers=2, seed=21))
    path = tmp_path / "audit.jsonl"
    write_audit_log(result.trace, path)
    records = read_audit_log(path)
    assert records == json.loads(json.dumps(result.trace))
    assert audit_log_file(path) == []


def test_read_rejects_missing_header(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "txn"}\n')
    with pytest.raises(AuditLogError):
        read_audit_log(path)


def test_read_names_malformed_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"type": "header", "version": 1}\n{"type": "txn"\n')
    with pytest.raises(AuditLogError) as err:
        read_audit_log(path)
    assert "line 2" in str(err.value)
