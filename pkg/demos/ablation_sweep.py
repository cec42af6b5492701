"""Compare fault-tolerance strategies and batching policies on one plan.

Runs a shuffle-heavy three-join pipeline under every strategy (write-ahead
lineage, durable spooling, restart-only) and batching policy (dynamic,
static batches of 4 and 8), with one worker killed halfway through, and
prints the overhead of each cell relative to the no-fault-tolerance
baseline. Also contrasts pipelined with stage-blocking execution.

    python3 demos/ablation_sweep.py
"""
import random

from walpipe import (
    Fault,
    HashJoinBuild,
    HashJoinProbe,
    InputReader,
    QueryPlan,
    SimConfig,
    StageSpec,
    compare_strategies,
    make_dataset,
    run,
    run_blocking,
    validate_plan,
)


def build_plan():
    def table(name, n):
        rng = random.Random(name)
        rows = [(rng.randrange(6), rng.randrange(100)) for _ in range(n)]
        return make_dataset(name, [("k", "int64"), (f"v_{name}", "int64")], rows, chunk_rows=4)

    datasets = {"a": table("a", 16), "b": table("b", 20), "c": table("c", 20), "d": table("d", 20)}
    plan = QueryPlan(
        stages=(
            StageSpec(0, 2, InputReader("a"), partition_key="k"),
            StageSpec(1, 2, InputReader("b"), partition_key="k"),
            StageSpec(2, 2, InputReader("c"), partition_key="k"),
            StageSpec(3, 2, InputReader("d"), partition_key="k"),
            StageSpec(4, 2, HashJoinBuild("k"), partition_key="k"),
            StageSpec(5, 2, HashJoinProbe("k", build_stage=4, probe_stage=1), partition_key="k"),
            StageSpec(6, 2, HashJoinBuild("k"), partition_key="k"),
            StageSpec(7, 2, HashJoinProbe("k", build_stage=6, probe_stage=2), partition_key="k"),
            StageSpec(8, 2, HashJoinBuild("k"), partition_key="k"),
            StageSpec(9, 2, HashJoinProbe("k", build_stage=8, probe_stage=3)),
        ),
        edges=((0, 4), (4, 5), (1, 5), (5, 6), (6, 7), (2, 7), (7, 8), (8, 9), (3, 9)),
    )
    return validate_plan(plan), datasets


def main() -> None:
    vplan, datasets = build_plan()
    config = SimConfig(workers=4, seed=0)
    faults = [Fault(worker=0, at_fraction=0.5)]

    table = compare_strategies(vplan, datasets, config, faults, batch_sizes=(4, 8))
    header = f"{'strategy':<16} {'makespan':>10} {'overhead':>9} {'lineage B':>10} {'durable B':>10}"
    print(header)
    print("-" * len(header))
    for label, m in table.items():
        print(f"{label:<16} {m.makespan:>10.1f} {m.overhead:>9.3f} "
              f"{m.lineage_bytes:>10} {m.bytes_durable:>10}")

    digests = {m.result_digest for m in table.values()}
    assert len(digests) == 1
    print("\nall cells produced the identical result digest")

    pipe = run(vplan, datasets, config).metrics.makespan
    block = run_blocking(vplan, datasets, config).metrics.makespan
    print(f"\npipelined vs stage-blocking (no faults): {pipe:.1f} vs {block:.1f} "
          f"({block / pipe:.2f}x slower when blocking)")


if __name__ == "__main__":
    main()
