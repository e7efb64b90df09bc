"""Greedy multi-knapsack sequence balancer and routing plans.

Planning runs in three passes per replica:

1. assign whole sequences to bags (descending workload, lowest-occupancy
   bag that still has room, falling back to lowest occupancy overall);
2. cut each sequence into one contiguous chunk per GPU of its bag;
3. describe the resulting moves as one all-to-all, plus its inverse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .exceptions import ConfigError, InstanceTooLarge, IntegrityError
from .topology import ComputeBag, WorldLayout
from .workload import (
    WorkloadModel,
    attention_workload,
    check_bag_size,
    gamma_weighted_workload,
    linear_workload,
)

ORACLE_MAX_ITEMS = 14
ORACLE_MAX_BAGS = 4


@dataclass(frozen=True)
class SequenceAssignment:
    sample_id: int
    workload: float
    assigned_bag: int
    fallback: bool = False


@dataclass(frozen=True)
class ChunkAssignment:
    sample_id: int
    chunk_index: int
    start: int
    end: int
    source_rank: int
    target_rank: int
    # position of the chunk's sequence in the packed buffer of each side
    source_slot: int = 0
    target_slot: int = 0

    @property
    def length(self) -> int:
        return self.end - self.start

    def reversed(self) -> "ChunkAssignment":
        return ChunkAssignment(
            self.sample_id,
            self.chunk_index,
            self.start,
            self.end,
            self.target_rank,
            self.source_rank,
            self.target_slot,
            self.source_slot,
        )


@dataclass(frozen=True)
class RoutingPlan:
    world_size: int
    chunks: tuple[ChunkAssignment, ...]

    def send_manifest(self, rank: int) -> list[ChunkAssignment]:
        """Chunks leaving ``rank`` in send order (source buffer order)."""
        out = [c for c in self.chunks if c.source_rank == rank]
        out.sort(key=lambda c: (c.source_slot, c.chunk_index))
        return out

    def recv_manifest(self, rank: int) -> list[ChunkAssignment]:
        """Chunks arriving at ``rank`` in the order they are packed."""
        out = [c for c in self.chunks if c.target_rank == rank]
        out.sort(key=lambda c: (c.target_slot, c.chunk_index))
        return out

    def manifests(self) -> tuple[list[list[ChunkAssignment]], list[list[ChunkAssignment]]]:
        sends: list[list[ChunkAssignment]] = [[] for _ in range(self.world_size)]
        recvs: list[list[ChunkAssignment]] = [[] for _ in range(self.world_size)]
        for c in self.chunks:
            sends[c.source_rank].append(c)
            recvs[c.target_rank].append(c)
        for s in sends:
            s.sort(key=lambda c: (c.source_slot, c.chunk_index))
        for r in recvs:
            r.sort(key=lambda c: (c.target_slot, c.chunk_index))
        return sends, recvs

    @property
    def moves(self) -> list[ChunkAssignment]:
        """Non-empty chunks that actually change rank."""
        return [c for c in self.chunks if c.source_rank != c.target_rank and c.length > 0]

    @property
    def exchange_phases(self) -> int:
        return 1

    @property
    def is_identity(self) -> bool:
        return not self.moves

    def inverse(self) -> "RoutingPlan":
        return reverse_plan(self)

    def bytes_matrix(self, bytes_per_token: int) -> list[list[int]]:
        """``m[src][dst]`` bytes moved between distinct ranks."""
        m = [[0] * self.world_size for _ in range(self.world_size)]
        for c in self.chunks:
            if c.source_rank != c.target_rank:
                m[c.source_rank][c.target_rank] += c.length * bytes_per_token
        return m

    def to_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "chunks": [
                {
                    "sample_id": c.sample_id,
                    "chunk_index": c.chunk_index,
                    "start": c.start,
                    "end": c.end,
                    "src": c.source_rank,
                    "dst": c.target_rank,
                    "src_slot": c.source_slot,
                    "dst_slot": c.target_slot,
                }
                for c in self.chunks
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "RoutingPlan":
        chunks = tuple(
            ChunkAssignment(
                int(c["sample_id"]),
                int(c["chunk_index"]),
                int(c["start"]),
                int(c["end"]),
                int(c["src"]),
                int(c["dst"]),
                int(c.get("src_slot", 0)),
                int(c.get("dst_slot", 0)),
            )
            for c in data["chunks"]
        )
        world = int(data.get("world_size", 1 + max((max(c.source_rank, c.target_rank) for c in chunks), default=-1)))
        return cls(world, chunks)


def reverse_plan(plan: RoutingPlan) -> RoutingPlan:
    """Plan that sends every chunk back where it came from, in its old slot."""
    return RoutingPlan(plan.world_size, tuple(c.reversed() for c in plan.chunks))


@dataclass
class BalanceReport:
    per_gpu_workload: list[float]
    bag_occupancy: list[float] = field(default_factory=list)
    capacity_violations: int = 0
    total_workload: float = 0.0

    @property
    def wir(self) -> float:
        from .metrics import wir

        return wir(self.per_gpu_workload)

    def to_dict(self) -> dict:
        return {
            "per_gpu_workload": list(self.per_gpu_workload),
            "bag_occupancy": list(self.bag_occupancy),
            "capacity_violations": self.capacity_violations,
            "total_workload": self.total_workload,
            "wir": self.wir,
        }


def _bag_sizes(bags) -> list[int]:
    return [b.size if isinstance(b, ComputeBag) else int(b) for b in bags]


def assign_to_bags(workloads: Iterable[tuple[int, float]], bags: Sequence) -> list[SequenceAssignment]:
    """First pass: place whole sequences into bags.

    ``bags`` may be :class:`ComputeBag` objects or plain bag sizes; bag ids
    are their positions. Returns assignments in processing order
    (descending workload, ascending sample id).
    """
    sizes = _bag_sizes(bags)
    if not sizes:
        raise ConfigError("no bags to assign to")
    items = list(workloads)
    for sid, w in items:
        if w < 0:
            raise ValueError(f"negative workload {w} for sample {sid}")
    total = sum(w for _, w in items)
    target = total / sum(sizes)
    capacity = [g * target for g in sizes]
    load = [0.0] * len(sizes)

    def occupancy(j: int) -> float:
        if capacity[j] > 0:
            return load[j] / capacity[j]
        return 0.0 if load[j] == 0 else float("inf")

    out = []
    for sid, w in sorted(items, key=lambda it: (-it[1], it[0])):
        feasible = [j for j in range(len(sizes)) if capacity[j] - load[j] >= w]
        fallback = not feasible
        candidates = feasible or range(len(sizes))
        best = min(candidates, key=lambda j: (occupancy(j), j))
        load[best] += w
        out.append(SequenceAssignment(sid, w, best, fallback))
    return out


def chunk_bounds(seq_len: int, parts: int) -> list[tuple[int, int]]:
    """Split ``[0, seq_len)`` into ``parts`` contiguous ranges, longer ones first."""
    base, extra = divmod(seq_len, parts)
    bounds, start = [], 0
    for i in range(parts):
        n = base + (1 if i < extra else 0)
        bounds.append((start, start + n))
        start += n
    return bounds


@dataclass(frozen=True)
class _SeqInfo:
    sample_id: int
    total_len: int
    origin_rank: int
    origin_slot: int


def chunk_sequences(
    assignments: Sequence[SequenceAssignment],
    seq_info: Mapping[int, _SeqInfo | tuple[int, int, int]],
    bags: Sequence[ComputeBag],
) -> list[ChunkAssignment]:
    """Second pass: one chunk per GPU of the assigned bag.

    ``seq_info`` maps sample id to ``(total_len, origin_rank, origin_slot)``.
    Sequences keep their assignment order inside each bag, which becomes
    their packed order on every member rank.
    """
    by_id = {b.bag_id: b for b in bags}
    next_slot = {b.bag_id: 0 for b in bags}
    chunks = []
    for a in assignments:
        if a.assigned_bag not in by_id:
            raise ConfigError(f"sample {a.sample_id} assigned to unknown bag {a.assigned_bag}")
        info = seq_info[a.sample_id]
        if not isinstance(info, _SeqInfo):
            info = _SeqInfo(a.sample_id, *info)
        bag = by_id[a.assigned_bag]
        slot = next_slot[bag.bag_id]
        next_slot[bag.bag_id] += 1
        for i, ((start, end), rank) in enumerate(zip(chunk_bounds(info.total_len, bag.size), bag.gpu_ranks)):
            chunks.append(
                ChunkAssignment(a.sample_id, i, start, end, info.origin_rank, rank, info.origin_slot, slot)
            )
    return chunks


def chunk_workload(chunk_len: int, seq_len: int, bag_size: int, model: WorkloadModel) -> float:
    """Workload of one chunk: its own tokens through the linear layers plus
    ``1/bag_size`` of the heads over the full sequence in attention."""
    return linear_workload(chunk_len, model.shape.d_model) + attention_workload(seq_len, model) / bag_size


def _normalize_rank_lists(all_rank_seq_lens) -> list[list[tuple[int, int]]]:
    out = []
    for rank, seqs in enumerate(all_rank_seq_lens):
        row = []
        for item in seqs:
            if hasattr(item, "sample_id"):
                sid, length = item.sample_id, item.total_len
            else:
                sid, length = item
            if length < 0:
                raise ValueError(f"negative length {length} for sample {sid} on rank {rank}")
            row.append((int(sid), int(length)))
        out.append(row)
    return out


def local_workloads(all_rank_seq_lens, model: WorkloadModel) -> list[float]:
    """Per-rank workload when nothing moves."""
    ranks = _normalize_rank_lists(all_rank_seq_lens)
    return [sum(gamma_weighted_workload(l, model) for _, l in row) for row in ranks]


def identity_plan(all_rank_seq_lens) -> RoutingPlan:
    ranks = _normalize_rank_lists(all_rank_seq_lens)
    chunks = tuple(
        ChunkAssignment(sid, 0, 0, l, r, r, slot, slot)
        for r, row in enumerate(ranks)
        for slot, (sid, l) in enumerate(row)
    )
    return RoutingPlan(len(ranks), chunks)


def plan_routing(all_rank_seq_lens, model: WorkloadModel, layout: WorldLayout) -> tuple[RoutingPlan, BalanceReport]:
    """Plan where every sequence chunk goes.

    ``all_rank_seq_lens[r]`` lists ``(sample_id, total_len)`` pairs (or
    objects with those attributes) held by rank ``r``, in packed order.
    Each replica of the layout is balanced on its own.
    """
    ranks = _normalize_rank_lists(all_rank_seq_lens)
    if len(ranks) != layout.world_size:
        raise ConfigError(f"got sequence lists for {len(ranks)} ranks, layout has {layout.world_size}")
    for size in set(layout.topology.bag_sizes):
        check_bag_size(size, model.shape.n_heads)
    seen: set[int] = set()
    for row in ranks:
        for sid, _ in row:
            if sid in seen:
                raise ConfigError(f"duplicate sample id {sid}")
            seen.add(sid)

    chunks: list[ChunkAssignment] = []
    per_gpu = [0.0] * layout.world_size
    occupancy: list[float] = []
    violations = 0
    total = 0.0
    for replica in layout.replicas:
        info: dict[int, _SeqInfo] = {}
        weights = []
        for r in replica.ranks:
            for slot, (sid, l) in enumerate(ranks[r]):
                info[sid] = _SeqInfo(sid, l, r, slot)
                w = gamma_weighted_workload(l, model)
                weights.append((sid, w))
                total += w
        bags = replica.bags
        assignments = assign_to_bags(weights, bags)
        violations += sum(a.fallback for a in assignments)
        rep_chunks = chunk_sequences(assignments, info, bags)
        chunks.extend(rep_chunks)

        bag_load = [0.0] * len(bags)
        for a in assignments:
            bag_load[a.assigned_bag] += a.workload
        target = sum(bag_load) / replica.topology.unit_size if bags else 0.0
        for b, load in zip(bags, bag_load):
            cap = b.size * target
            occupancy.append(load / cap if cap > 0 else 0.0)
        size_of = {r: b.size for b in bags for r in b.gpu_ranks}
        for c in rep_chunks:
            per_gpu[c.target_rank] += chunk_workload(c.length, info[c.sample_id].total_len, size_of[c.target_rank], model)

    plan = RoutingPlan(layout.world_size, tuple(chunks))
    report = BalanceReport(per_gpu, occupancy, violations, total)
    return plan, report


def validate_plan(plan: RoutingPlan, all_rank_seq_lens) -> None:
    """Check that the plan's chunks tile every sequence exactly once."""
    ranks = _normalize_rank_lists(all_rank_seq_lens)
    lengths = {sid: (l, r) for r, row in enumerate(ranks) for sid, l in row}
    by_sample: dict[int, list[ChunkAssignment]] = {}
    for c in plan.chunks:
        by_sample.setdefault(c.sample_id, []).append(c)
    if set(by_sample) != set(lengths):
        missing = sorted(set(lengths) - set(by_sample))
        extra = sorted(set(by_sample) - set(lengths))
        raise IntegrityError(f"plan/sequence mismatch: missing {missing[:5]}, unknown {extra[:5]}")
    for sid, cs in by_sample.items():
        l, origin = lengths[sid]
        cs.sort(key=lambda c: c.chunk_index)
        pos = 0
        for i, c in enumerate(cs):
            if c.chunk_index != i or c.start != pos or c.end < c.start or c.source_rank != origin:
                raise IntegrityError(f"sample {sid}: chunks do not tile [0, {l}) from rank {origin}")
            pos = c.end
        if pos != l:
            raise IntegrityError(f"sample {sid}: chunks cover {pos} of {l} tokens")
        if max(c.length for c in cs) - min(c.length for c in cs) > 1:
            raise IntegrityError(f"sample {sid}: chunk lengths differ by more than one token")


# --- quality oracle -----------------------------------------------------


def max_gpu_load(workloads: Sequence[float], assignment: Sequence[int], bag_sizes: Sequence[int]) -> float:
    loads = [0.0] * len(bag_sizes)
    for w, j in zip(workloads, assignment):
        loads[j] += w
    return max(load / g for load, g in zip(loads, bag_sizes))


def greedy_max_load(workloads: Sequence[float], bag_sizes: Sequence[int]) -> float:
    assignments = assign_to_bags(list(enumerate(workloads)), bag_sizes)
    order = [0] * len(workloads)
    for a in assignments:
        order[a.sample_id] = a.assigned_bag
    return max_gpu_load(workloads, order, bag_sizes)


def brute_force_assign(workloads: Sequence[float], bags: Sequence) -> tuple[list[int], float]:
    """Exhaustive search for the assignment minimising max per-GPU load.

    A sequence in a bag of G GPUs adds ``w/G`` to each of them. Returns
    ``(bag index per workload, optimal max load)``.
    """
    sizes = _bag_sizes(bags)
    n, m = len(workloads), len(sizes)
    if m == 0:
        raise ConfigError("no bags")
    if n > ORACLE_MAX_ITEMS or m > ORACLE_MAX_BAGS:
        raise InstanceTooLarge(
            f"exhaustive search limited to {ORACLE_MAX_ITEMS} sequences and {ORACLE_MAX_BAGS} bags, got {n} and {m}"
        )
    if n == 0:
        return [], 0.0
    order = sorted(range(n), key=lambda i: -workloads[i])
    ws = [workloads[i] for i in order]

    best_assign = [0] * n
    best = max_gpu_load(ws, best_assign, sizes)
    loads = [0.0] * m
    cur = [0] * n

    def dfs(i: int, cur_max: float) -> None:
        nonlocal best, best_assign
        if cur_max >= best:
            return
        if i == n:
            best = cur_max
            best_assign = cur.copy()
            return
        tried = set()
        for j in range(m):
            # identical empty bags are interchangeable
            key = (sizes[j], loads[j])
            if loads[j] == 0.0 and key in tried:
                continue
            tried.add(key)
            loads[j] += ws[i]
            cur[i] = j
            dfs(i + 1, max(cur_max, loads[j] / sizes[j]))
            loads[j] -= ws[i]

    dfs(0, 0.0)
    result = [0] * n
    for pos, i in enumerate(order):
        result[i] = best_assign[pos]
    return result, max_gpu_load(workloads, result, sizes)


# --- uniform-cost items (text encoder stage) -----------------------------


@dataclass(frozen=True)
class UniformPlan:
    """Redistribution of equal-cost items so per-rank counts differ by <= 1.

    ``forward[r][i]`` is the ``(rank, index)`` item ``i`` of rank ``r`` moves
    to; ``inverse`` maps the other way.
    """

    counts: tuple[int, ...]
    targets: tuple[int, ...]
    transfers: tuple[tuple[int, int, int], ...]
    forward: tuple[tuple[tuple[int, int], ...], ...]
    inverse: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def items_moved(self) -> int:
        return sum(n for _, _, n in self.transfers)

    def apply(self, per_rank_items):
        out = [[None] * t for t in self.targets]
        for r, items in enumerate(per_rank_items):
            for i, item in enumerate(items):
                dr, di = self.forward[r][i]
                out[dr][di] = item
        return out

    def restore(self, per_rank_items):
        out = [[None] * c for c in self.counts]
        for r, items in enumerate(per_rank_items):
            for i, item in enumerate(items):
                sr, si = self.inverse[r][i]
                out[sr][si] = item
        return out


def balance_uniform_items(counts_per_rank: Sequence[int]) -> UniformPlan:
    """Even out item counts with the fewest moves.

    The ``total % n`` extra slots go to the ranks holding the most items,
    which makes the number of moved items ``sum(max(0, c - target))``
    minimal. Surplus items are taken from the tail of each rank's list.
    """
    counts = [int(c) for c in counts_per_rank]
    if any(c < 0 for c in counts):
        raise ValueError("item counts must be >= 0")
    n = len(counts)
    if n == 0:
        return UniformPlan((), (), (), (), ())
    base, extra = divmod(sum(counts), n)
    by_size = sorted(range(n), key=lambda r: (-counts[r], r))
    targets = [base] * n
    for r in by_size[:extra]:
        targets[r] += 1

    forward = [[(r, i) for i in range(c)] for r, c in enumerate(counts)]
    surplus = [(r, i) for r in range(n) for i in range(targets[r], counts[r])]
    holes = [(r, i) for r in range(n) for i in range(counts[r], targets[r])]
    assert len(surplus) == len(holes)
    transfers: dict[tuple[int, int], int] = {}
    for (sr, si), (dr, di) in zip(surplus, holes):
        forward[sr][si] = (dr, di)
        transfers[(sr, dr)] = transfers.get((sr, dr), 0) + 1
    inverse: list[list[tuple[int, int]]] = [[(r, i) for i in range(t)] for r, t in enumerate(targets)]
    for r, row in enumerate(forward):
        for i, (dr, di) in enumerate(row):
            inverse[dr][di] = (r, i)
    return UniformPlan(
        tuple(counts),
        tuple(targets),
        tuple((s, d, k) for (s, d), k in sorted(transfers.items())),
        tuple(tuple(row) for row in forward),
        tuple(tuple(row) for row in inverse),
    )


def plan_to_json(plan: RoutingPlan, report: BalanceReport | None = None, **kwargs) -> str:
    data = plan.to_dict()
    if report is not None:
        data["report"] = report.to_dict()
    return json.dumps(data, **kwargs)


def plan_from_json(text: str) -> RoutingPlan:
    return RoutingPlan.from_dict(json.loads(text))
