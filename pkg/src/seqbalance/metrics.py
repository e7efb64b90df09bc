"""Step metrics: workload imbalance ratio, forward-backward latency,
tokens per second and hardware FLOPs utilisation.

Communication uses a bandwidth-only model: an exchange phase costs the
busiest rank's bytes (max of sent and received) over the link bandwidth,
intra-node when every transfer stays inside one node, inter-node otherwise.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .balancer import RoutingPlan, chunk_bounds
from .exceptions import ConfigError
from .topology import ComputeBag
from .workload import WorkloadModel

# forward m + backward 2m + recompute m
FLOPS_MULTIPLIER = 4


@dataclass(frozen=True)
class CostModel:
    peak_flops: float = 989e12
    intra_node_bw: float = 400e9
    inter_node_bw: float = 50e9
    bytes_per_element: int = 2
    gpus_per_node: int = 8
    # Ulysses exchanges run in forward, recompute and backward
    ulysses_passes: int = 3

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"cost model field {name} must be positive, got {value!r}")

    def node_of(self, rank: int) -> int:
        return rank // self.gpus_per_node

    def bandwidth(self, pairs: Iterable[tuple[int, int]]) -> float:
        if all(self.node_of(s) == self.node_of(d) for s, d in pairs):
            return self.intra_node_bw
        return self.inter_node_bw


@dataclass
class StepMetrics:
    wir: float
    fbl_s: float
    tps: float
    hfu: float
    per_gpu_workload: list[float] = field(default_factory=list)
    comm_s: float = 0.0
    compute_s: float = 0.0
    total_tokens: int = 0
    forward_flops: float = 0.0
    exchanges: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def wir(per_gpu_workloads: Sequence[float]) -> float:
    """max / min per-GPU workload; 1.0 when all are zero, inf when only the min is."""
    values = list(per_gpu_workloads)
    if not values:
        raise ValueError("wir of an empty workload list")
    if any(v < 0 for v in values):
        raise ValueError("workloads must be >= 0")
    hi, lo = max(values), min(values)
    if hi == 0:
        return 1.0
    if lo == 0:
        return math.inf
    return hi / lo


def phase_time(bytes_matrix: Sequence[Sequence[float]], cost: CostModel) -> float:
    """Time of one all-to-all given ``bytes_matrix[src][dst]``."""
    n = len(bytes_matrix)
    pairs = [(s, d) for s in range(n) for d in range(n) if s != d and bytes_matrix[s][d] > 0]
    if not pairs:
        return 0.0
    sent = [sum(bytes_matrix[s][d] for d in range(n) if d != s) for s in range(n)]
    recv = [sum(bytes_matrix[s][d] for s in range(n) if s != d) for d in range(n)]
    busiest = max(max(sent), max(recv))
    return busiest / cost.bandwidth(pairs)


def route_comm_time(plan: RoutingPlan, d_model: int, cost: CostModel) -> float:
    """One route plus one reverse route."""
    m = plan.bytes_matrix(d_model * cost.bytes_per_element)
    forward = phase_time(m, cost)
    backward = phase_time([list(col) for col in zip(*m)], cost)
    return forward + backward


def ulysses_comm_time(bag_seq_lens: dict[int, list[int]], bags: Sequence[ComputeBag], model: WorkloadModel, cost: CostModel) -> float:
    """Per-step time of the intra-bag layout exchanges.

    Each block does a pre-attention exchange of q, k, v and a
    post-attention exchange of the output; all bags exchange concurrently,
    so one phase lasts as long as its slowest bag.
    """
    d = model.shape.d_model
    bpe = cost.bytes_per_element
    pre = post = 0.0
    for bag in bags:
        g = bag.size
        if g == 1:
            continue
        per_rank = [0] * g
        for l in bag_seq_lens.get(bag.bag_id, []):
            for i, (s, e) in enumerate(chunk_bounds(l, g)):
                per_rank[i] += e - s
        total = sum(per_rank)
        # rank i keeps 1/g of its chunk, sends the rest; receives 1/g of every other chunk
        busiest = max(max(n * (g - 1), total - n) for n in per_rank) * d * bpe / g
        bw = cost.bandwidth((bag.gpu_ranks[0], r) for r in bag.gpu_ranks[1:])
        pre = max(pre, 3 * busiest / bw)
        post = max(post, busiest / bw)
    return (pre + post) * model.shape.n_blocks * cost.ulysses_passes


def compute_time(max_per_gpu_workload: float, model: WorkloadModel) -> float:
    return FLOPS_MULTIPLIER * model.k * model.shape.n_blocks * max_per_gpu_workload


def estimate_fbl(per_gpu_workloads: Sequence[float], model: WorkloadModel, comm_s: float = 0.0) -> float:
    return compute_time(max(per_gpu_workloads), model) + comm_s


def tps(total_tokens: float, fbl_s: float, num_gpus_in_scope: int | None = None) -> float:
    """Tokens per second over all GPUs in scope (the count is informational:
    ``total_tokens`` already aggregates them)."""
    if not fbl_s > 0:
        raise ValueError("forward-backward latency must be positive")
    return total_tokens / fbl_s


def hfu(total_forward_flops_m: float, fbl_s: float, num_gpus: int, cost: CostModel) -> float:
    if not fbl_s > 0 or num_gpus < 1:
        raise ValueError("fbl and num_gpus must be positive")
    return FLOPS_MULTIPLIER * total_forward_flops_m / (cost.peak_flops * num_gpus * fbl_s)


def average(metrics: Sequence[StepMetrics]) -> StepMetrics:
    if not metrics:
        raise ValueError("nothing to average")
    n = len(metrics)
    return StepMetrics(
        wir=sum(m.wir for m in metrics) / n,
        fbl_s=sum(m.fbl_s for m in metrics) / n,
        tps=sum(m.tps for m in metrics) / n,
        hfu=sum(m.hfu for m in metrics) / n,
        per_gpu_workload=[sum(v) / n for v in zip(*(m.per_gpu_workload for m in metrics))],
        comm_s=sum(m.comm_s for m in metrics) / n,
        compute_s=sum(m.compute_s for m in metrics) / n,
        total_tokens=round(sum(m.total_tokens for m in metrics) / n),
        forward_flops=sum(m.forward_flops for m in metrics) / n,
        exchanges=dict(metrics[-1].exchanges),
    )


def _fmt_tokens(x: float) -> str:
    return f"{x / 1e3:.2f}K"


def markdown_table(rows: Sequence[tuple[str, StepMetrics]]) -> str:
    lines = ["| | WIR | FBL | TPS | HFU |", "|---|---|---|---|---|"]
    for label, m in rows:
        lines.append(f"| {label} | {m.wir:.2f} | {m.fbl_s:.2f}s | {_fmt_tokens(m.tps)} | {100 * m.hfu:.2f}% |")
    return "\n".join(lines) + "\n"


def to_csv(rows: Sequence[tuple[str, StepMetrics]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "wir", "fbl_s", "tps", "hfu", "comm_s", "compute_s", "total_tokens"])
    for label, m in rows:
        w.writerow([label, repr(m.wir), repr(m.fbl_s), repr(m.tps), repr(m.hfu), repr(m.comm_s), repr(m.compute_s), m.total_tokens])
    return buf.getvalue()


def to_json(rows: Sequence[tuple[str, StepMetrics]], **kwargs) -> str:
    return json.dumps([{"label": label, **m.to_dict()} for label, m in rows], **kwargs)
