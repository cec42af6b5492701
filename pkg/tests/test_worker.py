"""Worker-side machinery: input selection, exchange buffer, local backups."""
import pytest
from hypothesis import given
from hypothesis import strategies as st

from walpipe import (
    Aggregate,
    Batch,
    BatchingPolicy,
    ExchangeBuffer,
    Filter,
    FtStrategy,
    Gcs,
    InputReader,
    LineageEntry,
    LocalBackupStore,
    QueryPlan,
    StageSpec,
    TaskName,
    choose_inputs,
    make_dataset,
    validate_plan,
)
from walpipe.batch import encode_batch
from walpipe.worker import Selection, eligibility, new_runtime, plan_selection

SCHEMA = (("k", "int64"), ("v", "int64"))


def _batch(rows):
    return Batch.from_rows(SCHEMA, rows)


# -- choose_inputs -----------------------------------------------------------


def test_dynamic_picks_largest_then_lowest_index():
    assert choose_inputs([2, 5, 5], BatchingPolicy("dynamic"), [False] * 3) == (1, 5)


def test_dynamic_returns_none_when_nothing_eligible():
    assert choose_inputs([0, 0], BatchingPolicy("dynamic"), [False, False]) is None


def test_static_picks_first_channel_meeting_batch_size():
    assert choose_inputs([3, 9], BatchingPolicy("static", 8), [False, False]) == (1, 8)


def test_static_waits_below_batch_size():
    assert choose_inputs([3, 5], BatchingPolicy("static", 8), [False, False]) is None


def test_static_allows_final_short_read_at_end_of_stream():
    assert choose_inputs([3, 5], BatchingPolicy("static", 8), [True, False]) == (0, 3)


@given(st.lists(st.integers(0, 20), min_size=1, max_size=6))
def test_dynamic_selection_property(eligible):
    pick = choose_inputs(eligible, BatchingPolicy("dynamic"), [False] * len(eligible))
    if all(n == 0 for n in eligible):
        assert pick is None
    else:
        i, k = pick
        assert k == eligible[i] == max(eligible)
        assert all(eligible[j] < k for j in range(i))  # lowest index among maxima


@given(st.lists(st.integers(0, 20), min_size=1, max_size=6), st.integers(1, 8))
def test_static_selection_property(eligible, size):
    pick = choose_inputs(eligible, BatchingPolicy("static", size), [False] * len(eligible))
    if pick is None:
        assert all(n < size for n in eligible)
    else:
        i, k = pick
        assert k == size and eligible[i] >= size


def test_batching_policy_parse():
    assert BatchingPolicy.parse("dynamic") == BatchingPolicy("dynamic")
    assert BatchingPolicy.parse("static:8") == BatchingPolicy("static", 8)
    with pytest.raises(ValueError):
        BatchingPolicy.parse("bogus")
    with pytest.raises(ValueError):
        BatchingPolicy("static", 0)
    with pytest.raises(ValueError):
        FtStrategy("teleport")


# -- exchange buffer ---------------------------------------------------------


def test_exchange_buffer_dedups_by_name():
    buf = ExchangeBuffer()
    name = TaskName(0, 0, 0)
    assert buf.insert(name, (1, 0), _batch([(1, 1)]), watermark=0)
    # a re-push after recovery is simply ignored
    assert not buf.insert(name, (1, 0), _batch([(1, 1)]), watermark=0)
    assert len(buf) == 1


def test_exchange_buffer_drops_below_watermark():
    buf = ExchangeBuffer()
    assert not buf.insert(TaskName(0, 0, 2), (1, 0), _batch([]), watermark=3)
    assert buf.get(TaskName(0, 0, 2), (1, 0)) is None


def test_exchange_buffer_keys_by_consumer_channel():
    buf = ExchangeBuffer()
    name = TaskName(0, 0, 0)
    buf.insert(name, (1, 0), _batch([(1, 1)]), watermark=0)
    assert buf.insert(name, (1, 1), _batch([(2, 2)]), watermark=0)
    assert buf.get(name, (1, 0)).column("k") == (1,)
    assert buf.get(name, (1, 1)).column("k") == (2,)


def test_discard_consumed_frees_partitions():
    buf = ExchangeBuffer()
    for q in range(3):
        buf.insert(TaskName(0, 0, q), (1, 0), _batch([(q, q)]), watermark=0)
    buf.discard_consumed((1, 0), (0, 0), below_seq=2)
    assert buf.get(TaskName(0, 0, 1), (1, 0)) is None
    assert buf.get(TaskName(0, 0, 2), (1, 0)) is not None


# -- local backup store ------------------------------------------------------


def test_backup_round_trip_is_bit_identical():
    store = LocalBackupStore()
    b = _batch([(1, 10), (2, 20)])
    n = store.put(TaskName(0, 0, 0), (1, 0), b)
    assert n == len(encode_batch(b))
    out = store.get(TaskName(0, 0, 0), (1, 0))
    assert encode_batch(out) == encode_batch(b)


def test_backup_slices_grouped_by_name():
    store = LocalBackupStore()
    store.put(TaskName(0, 0, 0), (1, 0), _batch([(1, 1)]))
    store.put(TaskName(0, 0, 0), (1, 1), _batch([(2, 2)]))
    store.put(TaskName(0, 0, 1), (1, 0), _batch([(3, 3)]))
    assert set(store.slices(TaskName(0, 0, 0))) == {(1, 0), (1, 1)}
    assert store.has(TaskName(0, 0, 1))
    assert not store.has(TaskName(9, 9, 9))
    assert store.get(TaskName(0, 0, 1), (1, 1)) is None


# -- eligibility and selection under lineage gating --------------------------


def _tiny_pipeline():
    t = make_dataset("t", SCHEMA, [(i, i) for i in range(8)], chunk_rows=2)
    plan = QueryPlan(
        stages=(
            StageSpec(0, 1, InputReader("t"), partition_key="k"),
            StageSpec(1, 1, Filter("v", ">=", 0)),
        ),
        edges=((0, 1),),
    )
    return validate_plan(plan), {"t": t}


def _stock(gcs, buf, seqs, commit=True):
    """Push stage-0 partitions for the given seqs; optionally commit lineage."""
    for q in seqs:
        name = TaskName(0, 0, q)
        buf.insert(name, (1, 0), _batch([(q, q)]), watermark=0)
        if commit:
            gcs.apply_transaction([("lineage_put", LineageEntry(name, 0, 1))])


def test_gap_limits_eligibility_to_contiguous_prefix():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 1, 0)
    _stock(gcs, buf, [0, 2])  # seq 1 missing: in-order consumption forbids skipping
    eligible, exhausted = eligibility(
        vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 2
    )
    assert eligible == [1]
    assert exhausted == [False]


def test_uncommitted_lineage_blocks_consumption():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 1, 0)
    _stock(gcs, buf, [0, 1], commit=False)  # present in the buffer, not in G.L
    eligible, _ = eligibility(vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 2)
    assert eligible == [0]
    sel = plan_selection(
        vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 2,
        BatchingPolicy("dynamic"), None,
    )
    assert sel is None


def test_prescribed_selection_replays_logged_lineage():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 1, 0)
    _stock(gcs, buf, [0, 1, 2])
    args = (vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 2)
    # must take exactly (i=0, K=2) even though 3 partitions are available
    sel = plan_selection(*args, BatchingPolicy("dynamic"), ((0, 2), (0, 1)))
    assert sel == Selection("consume", 0, 2)
    # a prescription deeper than the contiguous prefix waits
    assert plan_selection(*args, BatchingPolicy("dynamic"), ((0, 5),)) is None
    # count 0 prescribes the end-of-stream flush
    assert plan_selection(*args, BatchingPolicy("dynamic"), ((0, 0),)) == Selection("flush")


def test_dynamic_selection_capped_by_max_inputs():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 1, 0)
    _stock(gcs, buf, [0, 1, 2, 3])
    sel = plan_selection(
        vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 2,
        BatchingPolicy("dynamic"), None, max_inputs=2,
    )
    assert sel == Selection("consume", 0, 2)


def test_reader_selection_respects_window_and_remaining():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 0, 0)
    args = (vplan, vplan.stage_map[0], runtime, buf, gcs, datasets, None, 2)
    assert plan_selection(*args, BatchingPolicy("dynamic"), None) == Selection("consume", 0, 2)
    # a static size above the read-ahead window degrades to window-sized reads
    assert plan_selection(*args, BatchingPolicy("static", 8), None) == Selection("consume", 0, 2)
    runtime.watermarks[0] = 3  # one chunk left of four
    assert plan_selection(*args, BatchingPolicy("dynamic"), None) == Selection("consume", 0, 1)
    runtime.watermarks[0] = 4
    assert plan_selection(*args, BatchingPolicy("dynamic"), None) == Selection("flush")


def test_consumer_flushes_only_after_sentinel_fully_consumed():
    vplan, datasets = _tiny_pipeline()
    gcs, buf = Gcs(), ExchangeBuffer()
    runtime = new_runtime(vplan, 1, 0)
    _stock(gcs, buf, [0])
    gcs.apply_transaction([("sentinel_put", (0, 0), 2)])
    args = (vplan, vplan.stage_map[1], runtime, buf, gcs, datasets, None, 4)
    # one more partition outstanding: consume it, don't flush
    assert plan_selection(*args, BatchingPolicy("dynamic"), None) == Selection("consume", 0, 1)
    runtime.watermarks[0] = 2
    assert plan_selection(*args, BatchingPolicy("dynamic"), None) == Selection("flush")
