"""linerate: a parallel-TCP speed test framework with a deterministic flow simulator."""

from .coordinator import (
    MultiDestResult,
    Registry,
    Schedule,
    ServerDescriptor,
    candidate_pool,
    generate_schedule,
    run_multi_destination,
    select_server,
    simulate_destination_transfers,
)
from .engine import Engine, RawTestRecord, TestRefusedError, TestSpec, UnreachableTargetError
from .flowmodel import (
    FlowState,
    LinkModel,
    ThroughputTrace,
    advance_round,
    loss_limited_throughput,
    simulate_transfer,
    slow_start_rounds,
)
from .metrics import (
    EstimationMethod,
    LatencyStats,
    MetricReport,
    detect_steady_start,
    estimate_throughput,
    interval_rates,
    jitter,
    loss_rate,
)
from .records import AggregateReport, MeasurementResult, ResultStore
from .responder import Responder

__version__ = "0.1.0"

__all__ = [
    "LinkModel",
    "FlowState",
    "ThroughputTrace",
    "advance_round",
    "simulate_transfer",
    "slow_start_rounds",
    "loss_limited_throughput",
    "LatencyStats",
    "EstimationMethod",
    "MetricReport",
    "loss_rate",
    "jitter",
    "interval_rates",
    "detect_steady_start",
    "estimate_throughput",
    "Engine",
    "TestSpec",
    "RawTestRecord",
    "TestRefusedError",
    "UnreachableTargetError",
    "Responder",
    "ServerDescriptor",
    "Registry",
    "Schedule",
    "MultiDestResult",
    "candidate_pool",
    "select_server",
    "generate_schedule",
    "run_multi_destination",
    "simulate_destination_transfers",
    "MeasurementResult",
    "AggregateReport",
    "ResultStore",
    "__version__",
]
