"""A miniature pipelined distributed query engine under simulated faults.

Queries run as DAGs of stages split into data-parallel channels. Task
lineage is committed write-ahead to a transactional control store, so a
failure rewinds only the channels whose state or un-backed-up outputs were
lost, replays them in pipelined parallel, and provably reproduces the
failure-free result. Everything executes inside a deterministic
discrete-event simulator with an explicit cost model and fault injection.
"""

from .batch import (
    Batch,
    BatchFormatError,
    batch_digest,
    concat_batches,
    decode_batch,
    empty_batch,
    encode_batch,
    encode_row,
    multiset_digest,
)
from .plan import (
    Aggregate,
    CyclicPlan,
    DanglingEdge,
    Dataset,
    Filter,
    HashJoinBuild,
    HashJoinProbe,
    InputReader,
    MapCol,
    MissingPartitioner,
    PlanError,
    QueryPlan,
    StageSpec,
    ValidatedPlan,
    load_plan_file,
    make_dataset,
    parse_plan,
    plan_to_json,
    validate_plan,
)
from .kernels import SchemaMismatch, execute_kernel, finalize_kernel, partition_batch, stage_schemas
from .reference import evaluate, result_digest
from .gcs import (
    DURABLE_OWNER,
    DuplicateCommit,
    FlagAlreadySet,
    Gcs,
    GcsError,
    InjectedCrash,
    LineageEntry,
    StaleEpoch,
    TaskEntry,
    TaskName,
)
from .worker import BatchingPolicy, ExchangeBuffer, FtStrategy, LocalBackupStore, choose_inputs
from .coordinator import (
    ClusterView,
    RecoveryPlan,
    Unrecoverable,
    detect_failures,
    place_recovery,
    plan_recovery,
)
from .harness import (
    Deadlock,
    Fault,
    RunMetrics,
    RunResult,
    SimConfig,
    Simulator,
    compare_strategies,
    run,
    run_blocking,
)
from .audit import (
    AUDIT_LOG_VERSION,
    AuditLogError,
    Violation,
    audit_log_file,
    audit_trace,
    read_audit_log,
    write_audit_log,
)

__version__ = "0.1.0"
