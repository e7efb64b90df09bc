"""Simulated token buffers, all-to-all routing and Ulysses layout changes.

Every rank holds a packed buffer: rows grouped by sample id, positions
ascending inside a group. Row payloads are a deterministic hash of
``(sample_id, position, dim)`` so that content, not just metadata, can be
checked after any sequence of exchanges.

Payloads are shaped ``(rows, n_heads, head_width)``. ``head_width`` is a
simulation knob: the routing logic only depends on the head axis, so a
small width keeps full-size scenarios cheap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import datasim
from .balancer import (
    BalanceReport,
    RoutingPlan,
    local_workloads,
    plan_routing,
    reverse_plan,
    validate_plan,
)
from .exceptions import ConfigError, IntegrityError
from .metrics import (
    CostModel,
    StepMetrics,
    compute_time,
    hfu,
    route_comm_time,
    tps,
    ulysses_comm_time,
    wir,
)
from .topology import ComputeBag, WorldLayout
from .workload import WorkloadModel, check_bag_size, flops_per_block

PARTIAL_SEQ_FULL_HEADS = "partial_seq_full_heads"
FULL_SEQ_PARTIAL_HEADS = "full_seq_partial_heads"

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finaliser
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _to_unit(h: np.ndarray) -> np.ndarray:
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def _row_hash(sample_ids, positions, salt: int) -> np.ndarray:
    s = np.asarray(sample_ids, dtype=np.int64).astype(np.uint64)
    p = np.asarray(positions, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _mix64(s + _GOLDEN * np.uint64(salt + 1))
        return _mix64(h ^ (p * _GOLDEN))


def _dim_hash(row_h: np.ndarray, n_dims: int) -> np.ndarray:
    dims = np.arange(n_dims, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _to_unit(_mix64(row_h[:, None] ^ (dims[None, :] * _M2 + _GOLDEN)))


def witness(sample_ids, positions, n_dims: int) -> np.ndarray:
    """Payload ``f(sample_id, position, dim)`` in [0, 1), shape ``(rows, n_dims)``.

    splitmix64 over the sample id, folded with the position, then with the
    dim index; the top 53 bits become the float mantissa.
    """
    return _dim_hash(_row_hash(sample_ids, positions, 0), n_dims)


def perturbation(sample_ids, positions, n_dims: int) -> np.ndarray:
    """Deterministic stand-in for what a transformer block adds to a row."""
    return _dim_hash(_row_hash(sample_ids, positions, 1), n_dims)


@dataclass
class RankBuffer:
    rank: int
    sample_ids: np.ndarray
    positions: np.ndarray
    payload: np.ndarray
    mode: str = PARTIAL_SEQ_FULL_HEADS
    heads: tuple[int, ...] = ()
    # full_seq_partial_heads only: per sequence, rows contributed by each bag member
    chunk_counts: tuple[tuple[int, ...], ...] = ()

    def __len__(self) -> int:
        return len(self.sample_ids)

    def segments(self) -> list[tuple[int, int, int]]:
        """``(sample_id, row_start, row_end)`` for each packed sequence."""
        n = len(self.sample_ids)
        if n == 0:
            return []
        cuts = np.flatnonzero(self.sample_ids[1:] != self.sample_ids[:-1]) + 1
        starts = np.concatenate(([0], cuts))
        ends = np.concatenate((cuts, [n]))
        return [(int(self.sample_ids[s]), int(s), int(e)) for s, e in zip(starts, ends)]

    @property
    def seq_boundaries(self) -> list[int]:
        segs = self.segments()
        return [s for _, s, _ in segs] + [len(self)]

    @property
    def seq_lens(self) -> list[int]:
        return [e - s for _, s, e in self.segments()]

    def same_as(self, other: "RankBuffer") -> bool:
        return (
            self.rank == other.rank
            and self.mode == other.mode
            and tuple(self.heads) == tuple(other.heads)
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.positions, other.positions)
            and self.payload.shape == other.payload.shape
            and np.array_equal(self.payload, other.payload)
        )


World = list


def _empty_buffer(rank: int, n_heads: int, head_width: int, heads=None) -> RankBuffer:
    return RankBuffer(
        rank,
        np.zeros(0, dtype=np.int64),
        np.zeros(0, dtype=np.int64),
        np.zeros((0, n_heads, head_width)),
        heads=tuple(range(n_heads)) if heads is None else heads,
    )


def make_world(all_rank_seq_lens, n_heads: int, head_width: int = 1) -> list[RankBuffer]:
    """Buffers filled with witness payloads from per-rank ``(sample_id, length)`` lists."""
    world = []
    for rank, seqs in enumerate(all_rank_seq_lens):
        pairs = [(s.sample_id, s.total_len) if hasattr(s, "sample_id") else tuple(s) for s in seqs]
        lens = [l for _, l in pairs]
        sids = np.repeat(np.array([sid for sid, _ in pairs], dtype=np.int64), lens)
        pos = np.concatenate([np.arange(l, dtype=np.int64) for l in lens]) if pairs else np.zeros(0, np.int64)
        payload = witness(sids, pos, n_heads * head_width).reshape(len(sids), n_heads, head_width)
        world.append(RankBuffer(rank, sids, pos, payload, heads=tuple(range(n_heads))))
    return world


def _index(buf: RankBuffer) -> dict[int, tuple[int, int, int]]:
    out = {}
    for sid, s, e in buf.segments():
        if sid in out:
            raise IntegrityError(f"rank {buf.rank}: sample {sid} is not packed contiguously")
        first = int(buf.positions[s])
        if not np.array_equal(buf.positions[s:e], np.arange(first, first + e - s)):
            raise IntegrityError(f"rank {buf.rank}: sample {sid} positions are not consecutive")
        out[sid] = (s, e, first)
    return out


def _apply_plan(world: Sequence[RankBuffer], plan: RoutingPlan) -> list[RankBuffer]:
    if len(world) != plan.world_size:
        raise IntegrityError(f"plan is for {plan.world_size} ranks, world has {len(world)}")
    for buf in world:
        if buf.mode != PARTIAL_SEQ_FULL_HEADS:
            raise IntegrityError(f"rank {buf.rank} is in {buf.mode} layout; route needs full heads")
    indexes = [_index(b) for b in world]
    sends, recvs = plan.manifests()
    for r, buf in enumerate(world):
        sent = sum(c.length for c in sends[r])
        if sent != len(buf):
            raise IntegrityError(f"rank {r}: plan sends {sent} rows but buffer holds {len(buf)}")

    shape = world[0].payload.shape[1:] if world else (1, 1)
    out = []
    for r in range(plan.world_size):
        ids, pos, pay = [], [], []
        for c in recvs[r]:
            if c.length == 0:
                continue
            src = world[c.source_rank]
            try:
                s, e, first = indexes[c.source_rank][c.sample_id]
            except KeyError:
                raise IntegrityError(f"sample {c.sample_id} not found on rank {c.source_rank}") from None
            lo, hi = s + c.start - first, s + c.end - first
            if c.start < first or hi > e:
                raise IntegrityError(
                    f"sample {c.sample_id}: rank {c.source_rank} holds positions [{first}, {first + e - s}), "
                    f"plan asks for [{c.start}, {c.end})"
                )
            ids.append(src.sample_ids[lo:hi])
            pos.append(src.positions[lo:hi])
            pay.append(src.payload[lo:hi])
        if ids:
            out.append(RankBuffer(r, np.concatenate(ids), np.concatenate(pos), np.concatenate(pay), heads=tuple(range(shape[0]))))
        else:
            out.append(_empty_buffer(r, *shape))
    return out


def route(world: Sequence[RankBuffer], plan: RoutingPlan) -> list[RankBuffer]:
    """Move every chunk to its target rank (one simulated all-to-all)."""
    return _apply_plan(world, plan)


def reverse_route(world: Sequence[RankBuffer], plan: RoutingPlan) -> list[RankBuffer]:
    """Undo :func:`route` for ``plan`` (the forward plan, not its inverse)."""
    return _apply_plan(world, reverse_plan(plan))


def _head_slices(n_heads: int, g: int) -> list[tuple[int, ...]]:
    per = n_heads // g
    return [tuple(range(i * per, (i + 1) * per)) for i in range(g)]


def pre_attn(world: Sequence[RankBuffer], bag: ComputeBag, n_heads: int):
    """Switch a bag from (partial sequences, full heads) to (full sequences, partial heads).

    Returns ``(seq_lens, new_world)`` where ``seq_lens[i]`` lists the full
    sequence lengths now held by the bag's i-th rank. Ranks outside the
    bag are passed through untouched.
    """
    check_bag_size(bag.size, n_heads)
    world = list(world)
    members = [world[r] for r in bag.gpu_ranks]
    if bag.size == 1:
        return [members[0].seq_lens], world
    for m in members:
        if m.mode != PARTIAL_SEQ_FULL_HEADS:
            raise IntegrityError(f"rank {m.rank} is already in {m.mode} layout")
        if m.payload.shape[1] != n_heads:
            raise IntegrityError(f"rank {m.rank} holds {m.payload.shape[1]} heads, expected {n_heads}")
    indexes = [_index(m) for m in members]
    # the first member holds the longest chunk, hence every non-empty sequence
    order = [sid for sid, _, _ in members[0].segments()]
    known = set(order)
    for m, idx in zip(members[1:], indexes[1:]):
        if not set(idx) <= known:
            raise IntegrityError(f"rank {m.rank} holds sequences absent from rank {members[0].rank}")

    slices = _head_slices(n_heads, bag.size)
    full_lens = []
    counts = []
    parts: list[tuple[list, list, list]] = [([], [], []) for _ in members]
    for sid in order:
        seq_counts = []
        expected = 0
        for idx in indexes:
            s, e, first = idx.get(sid, (0, 0, expected))
            if e > s and first != expected:
                raise IntegrityError(f"sample {sid}: chunks on bag {bag.bag_id} are not in rank order")
            expected += e - s
            seq_counts.append(e - s)
        counts.append(tuple(seq_counts))
        full_lens.append(expected)
        for i, heads in enumerate(slices):
            ids, pos, pay = parts[i]
            for m, idx in zip(members, indexes):
                if sid in idx:
                    s, e, _ = idx[sid]
                    ids.append(m.sample_ids[s:e])
                    pos.append(m.positions[s:e])
                    pay.append(m.payload[s:e, heads[0] : heads[-1] + 1])
    width = members[0].payload.shape[2]
    for i, (r, heads) in enumerate(zip(bag.gpu_ranks, slices)):
        ids, pos, pay = parts[i]
        if ids:
            buf = RankBuffer(r, np.concatenate(ids), np.concatenate(pos), np.concatenate(pay))
        else:
            buf = _empty_buffer(r, len(heads), width)
        buf.mode = FULL_SEQ_PARTIAL_HEADS
        buf.heads = heads
        buf.chunk_counts = tuple(counts)
        world[r] = buf
    return [list(full_lens) for _ in members], world


def post_attn(world: Sequence[RankBuffer], bag: ComputeBag):
    """Inverse of :func:`pre_attn`: back to (partial sequences, full heads)."""
    world = list(world)
    members = [world[r] for r in bag.gpu_ranks]
    if bag.size == 1:
        return [members[0].seq_lens], world
    for m in members:
        if m.mode != FULL_SEQ_PARTIAL_HEADS:
            raise IntegrityError(f"rank {m.rank} is in {m.mode} layout; post_attn needs full sequences")
        if m.chunk_counts != members[0].chunk_counts:
            raise IntegrityError(f"rank {m.rank} disagrees with its bag on sequence layout")
    heads = [h for m in members for h in m.heads]
    if heads != list(range(len(heads))) or len({len(m.heads) for m in members}) != 1:
        raise IntegrityError(f"bag {bag.bag_id}: head slices do not partition the heads evenly")
    counts = members[0].chunk_counts
    ref = members[0]
    payload = np.concatenate([m.payload for m in members], axis=1)
    width = ref.payload.shape[2]
    out_parts: list[list[slice]] = [[] for _ in members]
    row = 0
    for seq_counts in counts:
        for i, n in enumerate(seq_counts):
            if n:
                out_parts[i].append(slice(row, row + n))
            row += n
    if row != len(ref):
        raise IntegrityError(f"bag {bag.bag_id}: layout covers {row} rows, buffer holds {len(ref)}")
    seq_lens = []
    for i, r in enumerate(bag.gpu_ranks):
        sl = out_parts[i]
        if sl:
            idx = np.concatenate([np.arange(s.start, s.stop) for s in sl])
            world[r] = RankBuffer(r, ref.sample_ids[idx], ref.positions[idx], payload[idx], heads=tuple(heads))
        else:
            world[r] = _empty_buffer(r, len(heads), width)
        seq_lens.append(world[r].seq_lens)
    return seq_lens, world


def content_multiset(world: Sequence[RankBuffer]) -> tuple[np.ndarray, ...]:
    """``(sample_ids, positions, heads, payload)`` over the whole world,
    one entry per (token, head), sorted by (sample, position, head).

    Works for both layouts, so it can be compared before and after any
    exchange to check that content is conserved.
    """
    sids, pos, heads, pays = [], [], [], []
    for buf in world:
        if not len(buf):
            continue
        n, h, w = buf.payload.shape
        sids.append(np.repeat(buf.sample_ids, h))
        pos.append(np.repeat(buf.positions, h))
        heads.append(np.tile(np.asarray(buf.heads, dtype=np.int64), n))
        pays.append(buf.payload.reshape(n * h, w))
    if not sids:
        return (np.zeros(0, np.int64),) * 3 + (np.zeros((0, 1)),)
    sid, p, hd, pay = (np.concatenate(x) for x in (sids, pos, heads, pays))
    _, dense = np.unique(sid, return_inverse=True)
    key = (dense.astype(np.int64) * (int(p.max()) + 1) + p) * (int(hd.max()) + 1) + hd
    order = np.argsort(key, kind="stable")
    return sid[order], p[order], hd[order], pay[order]


def same_content(a: Sequence[RankBuffer], b: Sequence[RankBuffer]) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(content_multiset(a), content_multiset(b)))


def worlds_equal(a: Sequence[RankBuffer], b: Sequence[RankBuffer]) -> bool:
    return len(a) == len(b) and all(x.same_as(y) for x, y in zip(a, b))


def snapshot(world: Sequence[RankBuffer]) -> dict:
    """JSON-friendly summary of where sequences sit (no payloads)."""
    ranks = []
    for buf in world:
        segs = buf.segments()
        ranks.append(
            {
                "rank": buf.rank,
                "mode": buf.mode,
                "heads": list(buf.heads),
                "sample_ids": [sid for sid, _, _ in segs],
                "lengths": [e - s for _, s, e in segs],
                "first_positions": [int(buf.positions[s]) for _, s, _ in segs],
            }
        )
    return {"ranks": ranks}


def snapshot_json(world: Sequence[RankBuffer], **kwargs) -> str:
    return json.dumps(snapshot(world), **kwargs)


# --- one simulated training step ------------------------------------------


@dataclass
class StepResult:
    metrics: StepMetrics
    plan: RoutingPlan | None = None
    report: BalanceReport | None = None
    batches: list = field(default_factory=list)


def _perturb(world: list[RankBuffer], index: "_TokenIndex", delta: np.ndarray) -> None:
    """Add the per-(token, head) ``delta`` table to every buffer in place."""
    for buf in world:
        if not len(buf):
            continue
        rows = index.rows(buf)
        buf.payload = buf.payload + delta[rows[:, None], np.asarray(buf.heads)[None, :]]


def simulate_step(
    layout: WorldLayout | None,
    scenario: datasim.ShardingGroupConfig,
    model: WorkloadModel,
    cost_model: CostModel,
    seed: int,
    step: int,
    world_size: int | None = None,
    verify: bool = True,
    head_width: int = 1,
) -> StepResult:
    """Generate one step of batches, balance them and account its cost.

    ``layout=None`` runs without a balancer. With ``verify`` the tokens are
    physically routed, passed through one attention layout round trip with
    a payload perturbation, and reverse routed; any content mismatch raises
    :class:`IntegrityError`. Per-block exchanges are accounted, not executed.
    """
    if layout is None and world_size is None:
        raise ConfigError("world_size is required when running without a balancer")
    n_ranks = layout.world_size if layout is not None else world_size
    batches = datasim.world_batches(scenario, n_ranks, step, seed)
    d = model.shape.d_model
    total_tokens = sum(s.total_len for b in batches for s in b)
    fwd_flops = float(sum(flops_per_block(s.total_len, d) for b in batches for s in b) * model.shape.n_blocks)
    before = local_workloads(batches, model)
    exchanges = {"route": 0, "reverse_route": 0, "ulysses_per_block": 0}

    plan = report = None
    if layout is None:
        per_gpu = before
        comm = 0.0
    else:
        plan, report = plan_routing(batches, model, layout)
        per_gpu = report.per_gpu_workload
        total_before, total_after = sum(before), sum(per_gpu)
        if abs(total_after - total_before) > 1e-9 * max(abs(total_before), 1.0):
            raise IntegrityError(f"workload not conserved: {total_before!r} before, {total_after!r} after")
        exchanges["route"] = exchanges["reverse_route"] = 1

        bags = [b for rep in layout.replicas for b in rep.bags]
        multi = [b for b in bags if b.size > 1]
        exchanges["ulysses_per_block"] = 2 if multi else 0
        comm = route_comm_time(plan, d, cost_model)
        if multi:
            comm += _ulysses_time(plan, layout, model, cost_model)
        if verify:
            _verify_round_trip(batches, plan, multi, model, head_width)

    compute = compute_time(max(per_gpu), model)
    fbl = compute + comm
    metrics = StepMetrics(
        wir=wir(per_gpu),
        fbl_s=fbl,
        tps=tps(total_tokens, fbl, n_ranks),
        hfu=hfu(fwd_flops, fbl, n_ranks, cost_model),
        per_gpu_workload=list(per_gpu),
        comm_s=comm,
        compute_s=compute,
        total_tokens=total_tokens,
        forward_flops=fwd_flops,
        exchanges=exchanges,
    )
    return StepResult(metrics, plan, report, batches)


def _ulysses_time(plan: RoutingPlan, layout: WorldLayout, model: WorkloadModel, cost: CostModel) -> float:
    lens: dict[int, int] = {}
    bag_of_rank = {}
    for rep in layout.replicas:
        for b in rep.bags:
            for r in b.gpu_ranks:
                bag_of_rank[r] = (rep.replica_id, b)
    per_bag: dict[tuple[int, int], list[int]] = {}
    seen = set()
    for c in plan.chunks:
        lens[c.sample_id] = max(lens.get(c.sample_id, 0), c.end)
    for c in plan.chunks:
        if c.sample_id in seen:
            continue
        seen.add(c.sample_id)
        rep, b = bag_of_rank[c.target_rank]
        per_bag.setdefault((rep, b.bag_id), []).append(lens[c.sample_id])
    total = 0.0
    for rep in layout.replicas:
        bags = rep.bags
        t = ulysses_comm_time({b.bag_id: per_bag.get((rep.replica_id, b.bag_id), []) for b in bags}, bags, model, cost)
        total = max(total, t)
    return total


class _TokenIndex:
    """Dense token numbering ``offset[sample] + position`` for a world."""

    def __init__(self, world: Sequence[RankBuffer]):
        segs = {}
        for buf in world:
            for sid, s, e in buf.segments():
                segs[sid] = segs.get(sid, 0) + (e - s)
        self.sids = np.array(sorted(segs), dtype=np.int64)
        lens = np.array([segs[s] for s in self.sids.tolist()], dtype=np.int64)
        self.lens = lens
        self.offsets = np.concatenate(([0], np.cumsum(lens)[:-1])).astype(np.int64)
        self.total = int(lens.sum())

    def table(self, world: Sequence[RankBuffer], n_heads: int, width: int) -> tuple[np.ndarray, np.ndarray]:
        """Scatter every (token, head) payload into one dense table.

        Returns ``(table, hits)``; ``hits`` counts how often each slot was
        written, so anything but all-ones means lost or duplicated content.
        """
        table = np.zeros((self.total, n_heads, width))
        flats = []
        for buf in world:
            if not len(buf):
                continue
            k = np.searchsorted(self.sids, buf.sample_ids)
            if np.any(k >= len(self.sids)) or np.any(self.sids[np.minimum(k, len(self.sids) - 1)] != buf.sample_ids):
                raise IntegrityError(f"rank {buf.rank} holds unknown samples")
            if np.any(buf.positions < 0) or np.any(buf.positions >= self.lens[k]):
                raise IntegrityError(f"rank {buf.rank} holds out-of-range positions")
            rows = self.offsets[k] + buf.positions
            heads = np.asarray(buf.heads, dtype=np.int64)
            table[rows[:, None], heads[None, :]] = buf.payload
            flats.append((rows[:, None] * n_heads + heads[None, :]).ravel())
        flat = np.concatenate(flats) if flats else np.zeros(0, np.int64)
        hits = np.bincount(flat, minlength=self.total * n_heads).reshape(self.total, n_heads)
        return table, hits

    def rows(self, buf: RankBuffer) -> np.ndarray:
        return self.offsets[np.searchsorted(self.sids, buf.sample_ids)] + buf.positions


def _content_matches(world, index: _TokenIndex, reference: np.ndarray) -> bool:
    table, hits = index.table(world, reference.shape[1], reference.shape[2])
    return bool(np.all(hits == 1)) and np.array_equal(table, reference)


def _verify_round_trip(batches, plan: RoutingPlan, bags: Sequence[ComputeBag], model: WorkloadModel, head_width: int) -> None:
    validate_plan(plan, batches)
    n_heads = model.shape.n_heads
    origin = make_world(batches, n_heads, head_width)
    index = _TokenIndex(origin)
    reference, _ = index.table(origin, n_heads, head_width)
    world = route(origin, plan)
    if not _content_matches(world, index, reference):
        raise IntegrityError("token content changed during route")
    for bag in bags:
        _, world = pre_attn(world, bag, n_heads)
    if not _content_matches(world, index, reference):
        raise IntegrityError("token content changed during pre_attn")
    delta = np.zeros_like(reference)
    for buf in origin:
        if len(buf):
            n = len(buf)
            delta[index.rows(buf)] = perturbation(buf.sample_ids, buf.positions, n_heads * head_width).reshape(n, n_heads, head_width)
    _perturb(world, index, delta)
    for bag in bags:
        _, world = post_attn(world, bag)
    back = reverse_route(world, plan)
    for o, b in zip(origin, back):
        if not (np.array_equal(o.sample_ids, b.sample_ids) and np.array_equal(o.positions, b.positions)):
            raise IntegrityError(f"rank {o.rank}: reverse route did not restore the original packing")
        expected = o.payload + delta[index.rows(o)] if len(o) else o.payload
        if not np.array_equal(expected, b.payload):
            raise IntegrityError(f"rank {o.rank}: payloads differ after the round trip")
