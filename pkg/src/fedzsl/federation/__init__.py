from fedzsl.federation.client import ClientState, LocalResult, calibrate_threshold, local_train
from fedzsl.federation.server import (
    AggregationConfig,
    FederationResult,
    RoundSchedule,
    aggregate,
    aggregation_weights,
    run_federation,
    sample_clients,
    server_lr,
)

__all__ = [
    "AggregationConfig",
    "ClientState",
    "FederationResult",
    "LocalResult",
    "RoundSchedule",
    "aggregate",
    "aggregation_weights",
    "calibrate_threshold",
    "local_train",
    "run_federation",
    "sample_clients",
    "server_lr",
]
