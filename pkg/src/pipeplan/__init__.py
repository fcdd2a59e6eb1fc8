"""Planning, simulation and fault-tolerant replay for hybrid pipeline
parallelism on heterogeneous edge devices.

The library turns measured workload profiles into latency-optimal pipeline
plans (contiguous layer stages replicated on device groups, micro-batches
split by capacity under memory budgets), validates the analytic latency
model against a deterministic 1F1B discrete-event simulation, and models
heartbeat-driven failure detection plus lightweight pipeline replay.
"""

from .allocator import Allocation, allocate_microbatch, memory_aware_balancing, straggler_offloading
from .cost_model import (
    MemoryBreakdown,
    StageSpec,
    Step,
    StepTimeline,
    allreduce_time,
    comm_volume_hdp,
    comm_volume_hpp,
    exec_phase_time,
    flops_proportional_cuts,
    kp_default,
    round_latency,
    stage_memory,
    transfer_time_ms,
    waiting_time,
)
from .errors import (
    DegenerateCapacity,
    EstimateExceedsSimulation,
    InfeasibleAllocation,
    MultiDeviceFailure,
    NoBackupTarget,
    NoFeasiblePlan,
    NoSurvivingDevices,
    OutOfRange,
    ParseError,
    PipePlanError,
    ValidationError,
)
from .fault_tolerance import (
    BackupAssignment,
    LivenessConfig,
    LivenessState,
    MigrationOp,
    ReplayPlan,
    RestoreOp,
    assign_backups,
    initial_liveness,
    liveness_step,
    migration_plan,
    replan_on_failure,
    replay_for_failures,
)
from .planfile import load_plan, save_plan
from .planner import (
    PlanConfig,
    build_timeline,
    estimate_plan,
    order_devices,
    plan,
    pure_data_parallel_plan,
    pure_pipeline_plan,
    update_dominant,
)
from .profiles import (
    BandwidthMatrix,
    DeviceProfile,
    LayerProfile,
    WorkloadProfile,
    capacity,
    exec_time,
    load_profile,
    save_profile,
)
from .simulator import (
    EstimateReport,
    SimEvent,
    SimResult,
    bubble_count,
    simulate_round,
    simulate_timeline,
    validate_estimate,
)

__version__ = "0.1.0"
