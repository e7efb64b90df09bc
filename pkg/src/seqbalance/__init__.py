"""Token-level load balancing across compute bags, with a deterministic
distributed-training step simulator."""

from .balancer import (
    BalanceReport,
    ChunkAssignment,
    RoutingPlan,
    SequenceAssignment,
    assign_to_bags,
    balance_uniform_items,
    brute_force_assign,
    chunk_sequences,
    plan_routing,
    reverse_plan,
)
from .datasim import ShardingGroupConfig, StreamSpec, next_batch, parse_data_code, visual_tokens
from .estimators import GammaLatencyModel, SequenceBalancer
from .exceptions import ConfigError, FitError, InstanceTooLarge, IntegrityError, ParseError
from .exchange import post_attn, pre_attn, reverse_route, route, simulate_step
from .metrics import CostModel, StepMetrics, wir
from .topology import Topology, WorldLayout, bag_of_rank, parse_topology, replicate
from .workload import (
    ModelShape,
    WorkloadModel,
    estimate_latency,
    fit_gamma,
    flops_per_block,
    gamma_weighted_workload,
    per_gpu_workload,
)

__version__ = "0.1.0"
