"""Compute-bag topology strings and their placement on a world of ranks.

Grammar (no whitespace)::

    topology := term ('+' term)*
    term     := 'g' INT 'n' INT          # N bags of G GPUs each

Bags are laid out on consecutive ranks in the order written, so a ``g8``
bag lines up with one 8-GPU node.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

from .exceptions import ConfigError, ParseError

# Guards against absurd literals; no real cluster comes close.
MAX_INT = 1 << 20


@dataclass(frozen=True)
class BagSpec:
    gpus_per_bag: int
    num_bags: int

    def __post_init__(self):
        if self.gpus_per_bag < 1 or self.num_bags < 1:
            raise ConfigError(f"invalid bag spec g{self.gpus_per_bag}n{self.num_bags}")


@dataclass(frozen=True)
class ComputeBag:
    bag_id: int
    gpu_ranks: tuple[int, ...]

    @property
    def size(self) -> int:
        return len(self.gpu_ranks)

    def offset(self, delta: int) -> "ComputeBag":
        return ComputeBag(self.bag_id, tuple(r + delta for r in self.gpu_ranks))


@dataclass(frozen=True)
class Topology:
    bags: tuple[ComputeBag, ...]

    @property
    def unit_size(self) -> int:
        return sum(b.size for b in self.bags)

    @property
    def bag_sizes(self) -> list[int]:
        return [b.size for b in self.bags]

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "Topology":
        bags, start = [], 0
        for i, g in enumerate(sizes):
            if g < 1:
                raise ConfigError(f"bag size must be >= 1, got {g}")
            bags.append(ComputeBag(i, tuple(range(start, start + g))))
            start += g
        if not bags:
            raise ConfigError("topology needs at least one bag")
        return cls(tuple(bags))

    def format(self) -> str:
        return format_topology(self)

    def __str__(self) -> str:
        return self.format()


def _read_int(spec: str, pos: int) -> tuple[int, int]:
    start = pos
    while pos < len(spec) and spec[pos].isascii() and spec[pos].isdigit():
        pos += 1
    if pos == start:
        raise ParseError("expected an integer", spec, start)
    digits = spec[start:pos]
    if len(digits) > 1 and digits[0] == "0":
        raise ParseError("leading zero in integer", spec, start)
    value = int(digits)
    if value < 1:
        raise ParseError("value must be >= 1", spec, start)
    if value > MAX_INT:
        raise ParseError(f"value exceeds {MAX_INT}", spec, start)
    return value, pos


def parse_bag_specs(spec: str) -> list[BagSpec]:
    if not isinstance(spec, str):
        raise TypeError(f"topology must be a string, got {type(spec).__name__}")
    if not spec:
        raise ParseError("empty topology string", spec, 0)
    terms = []
    pos = 0
    while True:
        if pos >= len(spec) or spec[pos] != "g":
            raise ParseError("expected 'g'", spec, pos)
        g, pos = _read_int(spec, pos + 1)
        if pos >= len(spec) or spec[pos] != "n":
            raise ParseError("expected 'n'", spec, pos)
        n, pos = _read_int(spec, pos + 1)
        terms.append(BagSpec(g, n))
        if pos == len(spec):
            break
        if spec[pos] != "+":
            raise ParseError("expected '+' or end of string", spec, pos)
        pos += 1
    return terms


def parse_topology(spec: str) -> Topology:
    """Parse ``"g1n2+g2n1+g4n1"`` style strings into a :class:`Topology`."""
    sizes = []
    for term in parse_bag_specs(spec):
        sizes.extend([term.gpus_per_bag] * term.num_bags)
    if len(sizes) > MAX_INT:
        raise ParseError(f"more than {MAX_INT} bags", spec, 0)
    return Topology.from_sizes(sizes)


def format_topology(topology: Topology) -> str:
    """Canonical string: runs of equal-size consecutive bags become one term."""
    terms: list[list[int]] = []
    for size in topology.bag_sizes:
        if terms and terms[-1][0] == size:
            terms[-1][1] += 1
        else:
            terms.append([size, 1])
    return "+".join(f"g{g}n{n}" for g, n in terms)


@dataclass(frozen=True)
class Replica:
    replica_id: int
    offset: int
    topology: Topology

    @property
    def bags(self) -> tuple[ComputeBag, ...]:
        """Bags with global rank numbers."""
        return tuple(b.offset(self.offset) for b in self.topology.bags)

    @property
    def ranks(self) -> range:
        return range(self.offset, self.offset + self.topology.unit_size)


@dataclass(frozen=True)
class WorldLayout:
    world_size: int
    replicas: tuple[Replica, ...]

    @property
    def topology(self) -> Topology:
        return self.replicas[0].topology

    def replica_of(self, rank: int) -> Replica:
        _check_rank(self, rank)
        return self.replicas[rank // self.topology.unit_size]

    def to_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "topology": format_topology(self.topology),
            "replicas": [
                {
                    "replica_id": rep.replica_id,
                    "offset": rep.offset,
                    "bags": [{"bag_id": b.bag_id, "ranks": list(b.gpu_ranks)} for b in rep.bags],
                }
                for rep in self.replicas
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def replicate(topology: Topology, world_size: int) -> WorldLayout:
    unit = topology.unit_size
    if world_size < unit:
        raise ConfigError(f"world size {world_size} is smaller than the sharding unit ({unit} GPUs)")
    if world_size % unit:
        raise ConfigError(f"world size {world_size} is not a multiple of the sharding unit ({unit} GPUs)")
    replicas = tuple(Replica(i, i * unit, topology) for i in range(world_size // unit))
    return WorldLayout(world_size, replicas)


def _check_rank(layout: WorldLayout, rank: int) -> None:
    if not 0 <= rank < layout.world_size:
        raise ConfigError(f"rank {rank} outside world of {layout.world_size}")


def bag_of_rank(layout: WorldLayout, rank: int) -> tuple[int, int, tuple[int, ...]]:
    """Return ``(replica_id, bag_id, peer_ranks)`` for a global rank."""
    replica = layout.replica_of(rank)
    for bag in replica.bags:
        if rank in bag.gpu_ranks:
            return replica.replica_id, bag.bag_id, tuple(r for r in bag.gpu_ranks if r != rank)
    raise AssertionError("unreachable: layout does not cover rank")  # pragma: no cover
