from .fusion import FusedBuffer, fuse, fused_allreduce, fusion_threshold, unfuse
from .ops import (
    adasum_rvh,
    check_consistent,
    hierarchical_adasum,
    is_power_of_two,
    sum_allreduce,
    sum_rvh,
)
from .transport import (
    InProcNetwork,
    RankContext,
    TCPTransport,
    find_free_base_port,
    run_ranks,
)

__all__ = [
    "FusedBuffer",
    "InProcNetwork",
    "RankContext",
    "TCPTransport",
    "adasum_rvh",
    "check_consistent",
    "find_free_base_port",
    "fuse",
    "fused_allreduce",
    "fusion_threshold",
    "hierarchical_adasum",
    "is_power_of_two",
    "run_ranks",
    "sum_allreduce",
    "sum_rvh",
    "unfuse",
]
