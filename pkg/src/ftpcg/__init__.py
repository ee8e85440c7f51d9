"""Fault-tolerant preconditioned conjugate gradient on a simulated
message-passing cluster.

Three resilience schemes around a distributed PCG iteration:

- exact state reconstruction from per-iteration redundant copies of the
  search direction ("esr"),
- the periodic-storage variant that adds duplicate state every T iterations
  and rolls back to the last completed storage stage ("esrp"),
- in-memory buddy checkpoint/restart ("imcr").

The cluster is simulated deterministically with per-message byte accounting,
so iteration counts and communication volumes are exactly reproducible.
"""
from .cluster import (
    ClusterConfig,
    DeadNodeError,
    FailureEvent,
    Message,
    RedundantQueue,
    SimCluster,
    UnrecoverableFailureError,
)
from .harness import (
    ExperimentSpec,
    RunReport,
    aggregate,
    emit_report,
    load_reports,
    residual_drift,
    run_experiment,
    worst_case_failure_iteration,
)
from .recovery import RecoveryReport, solve_inner_system
from .redundancy import (
    CommPlan,
    RedundancyPlan,
    buddy,
    build_comm_plan,
    compute_extra_sets,
    gather_lost_entries,
    perform_product,
)
from .solver import (
    SolveResult,
    SolverBreakdownError,
    SolverConfig,
    TrajectoryLog,
    reference_pcg,
    solve,
)
from .sparse import (
    BlockJacobiPreconditioner,
    MatrixFormatError,
    Partition,
    SparseMatrix,
    build_block_jacobi,
    extract_submatrix,
    generate_poisson2d,
    generate_random_banded,
    load_matrix_market,
    make_block_row_partition,
    matvec,
    write_matrix_market,
)

__version__ = "0.1.0"

__all__ = [
    "BlockJacobiPreconditioner",
    "ClusterConfig",
    "CommPlan",
    "DeadNodeError",
    "ExperimentSpec",
    "FailureEvent",
    "MatrixFormatError",
    "Message",
    "Partition",
    "RecoveryReport",
    "RedundancyPlan",
    "RedundantQueue",
    "RunReport",
    "SimCluster",
    "SolveResult",
    "SolverBreakdownError",
    "SolverConfig",
    "SparseMatrix",
    "TrajectoryLog",
    "UnrecoverableFailureError",
    "aggregate",
    "buddy",
    "build_block_jacobi",
    "build_comm_plan",
    "compute_extra_sets",
    "emit_report",
    "extract_submatrix",
    "gather_lost_entries",
    "generate_poisson2d",
    "generate_random_banded",
    "load_matrix_market",
    "load_reports",
    "make_block_row_partition",
    "matvec",
    "perform_product",
    "reference_pcg",
    "residual_drift",
    "run_experiment",
    "solve",
    "solve_inner_system",
    "worst_case_failure_iteration",
    "write_matrix_market",
]
