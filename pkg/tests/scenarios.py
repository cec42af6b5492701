"""Randomized scenario generator shared by the property and acceptance tests.

A scenario is (validated plan, datasets, SimConfig, faults). Plans are drawn
from typed templates (filters, maps, aggregations, one- and two-join
pipelines) so that partitioning constraints always hold; sizes, channel
counts, key cardinalities, worker counts, strategies, batching policies and
fault points are all randomized.
"""
from __future__ import annotations

import random

from walpipe import (
    Aggregate,
    BatchingPolicy,
    Fault,
    Filter,
    FtStrategy,
    HashJoinBuild,
    HashJoinProbe,
    InputReader,
    MapCol,
    QueryPlan,
    SimConfig,
    StageSpec,
    make_dataset,
    validate_plan,
)


def _table(rng: random.Random, name: str, keys: int, rows: int, chunk_rows: int):
    data = [(rng.randrange(keys), rng.randrange(1000)) for _ in range(rows)]
    return make_dataset(name, [("k", "int64"), (f"v_{name}", "int64")], data, chunk_rows=chunk_rows)


def _chans(rng: random.Random) -> int:
    return rng.randint(1, 3)


def random_plan(rng: random.Random):
    """One random (ValidatedPlan, datasets) with at most 5 stages."""
    keys = rng.randint(2, 9)
    chunk_rows = rng.randint(2, 5)
    shape = rng.randrange(6)

    if shape == 0:  # single source stage (also the sink)
        t = _table(rng, "t", keys, rng.randint(8, 40), chunk_rows)
        plan = QueryPlan(stages=(StageSpec(0, _chans(rng), InputReader("t")),), edges=())
        return validate_plan(plan), {"t": t}

    if shape == 1:  # reader -> filter
        t = _table(rng, "t", keys, rng.randint(10, 50), chunk_rows)
        plan = QueryPlan(
            stages=(
                StageSpec(0, _chans(rng), InputReader("t"), partition_key="k"),
                StageSpec(1, _chans(rng), Filter("v_t", rng.choice([">", "<", ">="]), rng.randrange(1000))),
            ),
            edges=((0, 1),),
        )
        return validate_plan(plan), {"t": t}

    if shape == 2:  # reader -> map -> aggregate
        t = _table(rng, "t", keys, rng.randint(10, 60), chunk_rows)
        plan = QueryPlan(
            stages=(
                StageSpec(0, _chans(rng), InputReader("t"), partition_key="k"),
                StageSpec(1, _chans(rng), MapCol("w", "v_t", rng.choice(["add", "mul"]), rng.randint(1, 5)), partition_key="k"),
                StageSpec(2, _chans(rng), Aggregate(("k",), (("sum", "w", "sw"), ("count", "w", "n")))),
            ),
            edges=((0, 1), (1, 2)),
        )
        return validate_plan(plan), {"t": t}

    if shape == 3:  # reader -> aggregate
        t = _table(rng, "t", keys, rng.randint(10, 60), chunk_rows)
        agg = rng.choice([("min", "v_t", "mn"), ("max", "v_t", "mx"), ("sum", "v_t", "sv")])
        plan = QueryPlan(
            stages=(
                StageSpec(0, _chans(rng), InputReader("t"), partition_key="k"),
                StageSpec(1, _chans(rng), Aggregate(("k",), (agg,))),
            ),
            edges=((0, 1),),
        )
        return validate_plan(plan), {"t": t}

    if shape == 4:  # two readers -> build/probe join (4 stages)
        left = _table(rng, "left", keys, rng.randint(6, 25), chunk_rows)
        right = _table(rng, "right", keys, rng.randint(10, 40), chunk_rows)
        plan = QueryPlan(
            stages=(
                StageSpec(0, _chans(rng), InputReader("left"), partition_key="k"),
                StageSpec(1, _chans(rng), InputReader("right"), partition_key="k"),
                StageSpec(2, _chans(rng), HashJoinBuild("k"), partition_key="k"),
                StageSpec(3, _chans(rng), HashJoinProbe("k", build_stage=2, probe_stage=1)),
            ),
            edges=((0, 2), (2, 3), (1, 3)),
        )
        return validate_plan(plan), {"left": left, "right": right}

    # shape 5: join then aggregate (5 stages)
    left = _table(rng, "left", keys, rng.randint(6, 20), chunk_rows)
    right = _table(rng, "right", keys, rng.randint(10, 35), chunk_rows)
    plan = QueryPlan(
        stages=(
            StageSpec(0, _chans(rng), InputReader("left"), partition_key="k"),
            StageSpec(1, _chans(rng), InputReader("right"), partition_key="k"),
            StageSpec(2, _chans(rng), HashJoinBuild("k"), partition_key="k"),
            StageSpec(3, _chans(rng), HashJoinProbe("k", build_stage=2, probe_stage=1), partition_key="k"),
            StageSpec(4, _chans(rng), Aggregate(("k",), (("sum", "v_right", "sv"), ("count", "v_right", "n")))),
        ),
        edges=((0, 2), (2, 3), (1, 3), (3, 4)),
    )
    return validate_plan(plan), {"left": left, "right": right}


def random_scenario(seed: int, strategies=("wal", "spool", "restart")):
    """(vplan, datasets, config, faults) drawn deterministically from `seed`."""
    rng = random.Random(f"scenario/{seed}")
    vplan, datasets = random_plan(rng)
    strategy = FtStrategy(
        rng.choice(list(strategies)),
        rng.choice([BatchingPolicy("dynamic"), BatchingPolicy("static", rng.randint(2, 6))]),
    )
    config = SimConfig(
        workers=rng.randint(2, 4),
        seed=rng.randrange(1 << 30),
        strategy=strategy,
        read_lag=rng.choice([0.0, 0.0, 0.5]),
    )
    n_faults = rng.randint(0, 2)
    faults = []
    for _ in range(n_faults):
        target = rng.choice(["random", rng.randrange(config.workers)])
        faults.append(Fault(worker=target, at_fraction=round(rng.uniform(0.05, 0.95), 3)))
    return vplan, datasets, config, tuple(faults)
