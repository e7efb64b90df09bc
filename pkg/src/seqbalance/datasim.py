"""Synthetic text-to-image/video sample streams.

A stream is described by a data code ``g{G}b{B}i{R}f{F}s{S}``: it is
sharded over G GPUs, each drawing B samples per step of R x R pixels and F
frames, with temporal compression when S is 1. A sharding group lists
streams whose GPU counts add up to the group size; the group is then
replicated across the world.

Randomness comes from numpy's counter-based Philox generator keyed through
a ``SeedSequence`` built from ``(seed, step, purpose, ...)`` integers, so a
batch depends only on its key and never on generation order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .exceptions import ConfigError, ParseError

SPATIAL_COMPRESSION = 16
# 17 pixel frames -> 5 latent frames for smooth clips
TEMPORAL_FRAMES_IN = 17
TEMPORAL_FRAMES_OUT = 5
TEXT_LEN_MAX = 392
ASPECT_RANGE = (0.96, 1.04)

_KEY_TEXT = 1
_KEY_ASPECT = 2
_KEY_ASPECT_SAMPLE = 3

# sample_id = step << 40 | rank << 20 | index
_ID_RANK_BITS = 20
_ID_INDEX_BITS = 20


@dataclass(frozen=True)
class StreamSpec:
    gpus: int
    batch_per_gpu: int
    resolution: int
    frames: int
    smooth: int

    def __post_init__(self):
        for name in ("gpus", "batch_per_gpu", "resolution", "frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1 in {self.code}")
        if self.smooth not in (0, 1):
            raise ConfigError(f"smooth flag must be 0 or 1, got {self.smooth}")
        if self.resolution % SPATIAL_COMPRESSION:
            raise ConfigError(f"resolution {self.resolution} is not a multiple of {SPATIAL_COMPRESSION}")
        if self.latent_frames < 1:
            raise ConfigError(f"{self.code}: {self.frames} frame(s) compress to zero latent frames")

    @property
    def code(self) -> str:
        return f"g{self.gpus}b{self.batch_per_gpu}i{self.resolution}f{self.frames}s{self.smooth}"

    @property
    def spatial_tokens(self) -> int:
        return (self.resolution // SPATIAL_COMPRESSION) ** 2

    @property
    def latent_frames(self) -> int:
        if not self.smooth:
            return self.frames
        # round-half-up of frames * 5/17 in integer arithmetic
        num = 2 * self.frames * TEMPORAL_FRAMES_OUT + TEMPORAL_FRAMES_IN
        return num // (2 * TEMPORAL_FRAMES_IN)

    def __str__(self) -> str:
        return self.code


@dataclass(frozen=True)
class DummyStreamSpec:
    """Ranks that emit a single 1-token sequence per step.

    They contribute almost no work, so the balancer hands them a share of
    the real ranks' sequences: sequence parallelism without synchronised
    data loaders.
    """

    gpus: int = 1

    def __post_init__(self):
        if self.gpus < 1:
            raise ConfigError("dummy stream needs >= 1 GPU")

    @property
    def code(self) -> str:
        return f"dummy{self.gpus}"

    def __str__(self) -> str:
        return self.code


Stream = Union[StreamSpec, DummyStreamSpec]


@dataclass(frozen=True)
class SampleMeta:
    sample_id: int
    text_len: int
    visual_len: int
    origin_rank: int
    aspect_multiplier: float = 1.0
    stream: int = 0

    @property
    def total_len(self) -> int:
        return self.text_len + self.visual_len


@dataclass(frozen=True)
class ShardingGroupConfig:
    streams: tuple[Stream, ...]
    group_size: int = field(default=0)

    def __post_init__(self):
        if not self.streams:
            raise ConfigError("sharding group has no streams")
        total = sum(s.gpus for s in self.streams)
        if self.group_size == 0:
            object.__setattr__(self, "group_size", total)
        elif total != self.group_size:
            raise ConfigError(f"streams cover {total} GPUs but group_size is {self.group_size}")

    @classmethod
    def from_codes(cls, codes, group_size: int = 0) -> "ShardingGroupConfig":
        return cls(tuple(parse_stream(c) for c in codes), group_size)

    def stream_of(self, rank: int) -> tuple[int, Stream]:
        """Stream index and spec owning ``rank`` (taken modulo the group size)."""
        local = rank % self.group_size
        start = 0
        for i, s in enumerate(self.streams):
            if local < start + s.gpus:
                return i, s
            start += s.gpus
        raise ConfigError(f"rank {rank} is not covered by any stream")  # pragma: no cover

    @property
    def codes(self) -> list[str]:
        return [s.code for s in self.streams]

    def to_text(self) -> str:
        return "\n".join([f"group_size {self.group_size}", *self.codes]) + "\n"


def _int_at(code: str, pos: int) -> tuple[int, int]:
    start = pos
    while pos < len(code) and code[pos].isascii() and code[pos].isdigit():
        pos += 1
    if pos == start:
        raise ParseError("expected an integer", code, start)
    if pos - start > 9:
        raise ParseError("integer too large", code, start)
    return int(code[start:pos]), pos


def parse_data_code(code: str) -> StreamSpec:
    """Parse ``g{G}b{B}i{R}f{F}s{S}`` (e.g. ``"g8b2i256f85s1"``)."""
    if not isinstance(code, str):
        raise TypeError(f"data code must be a string, got {type(code).__name__}")
    values = []
    pos = 0
    for letter in "gbif":
        if pos >= len(code) or code[pos] != letter:
            raise ParseError(f"expected {letter!r}", code, pos)
        value, end = _int_at(code, pos + 1)
        if value < 1:
            raise ParseError("value must be >= 1", code, pos + 1)
        values.append(value)
        pos = end
    if pos >= len(code) or code[pos] != "s":
        raise ParseError("expected 's'", code, pos)
    if pos + 1 >= len(code) or code[pos + 1] not in "01":
        raise ParseError("smooth flag must be 0 or 1", code, pos + 1)
    if pos + 2 != len(code):
        raise ParseError("trailing characters", code, pos + 2)
    g, b, r, f = values
    if r % SPATIAL_COMPRESSION:
        raise ParseError(f"resolution must be a multiple of {SPATIAL_COMPRESSION}", code, code.index("i") + 1)
    try:
        return StreamSpec(g, b, r, f, int(code[pos + 1]))
    except ConfigError as e:
        raise ParseError(str(e), code, code.index("f") + 1) from None


def parse_stream(code: str) -> Stream:
    """Data code, or ``dummy{G}`` for G dummy ranks."""
    if isinstance(code, (StreamSpec, DummyStreamSpec)):
        return code
    if code.startswith("dummy"):
        n, end = _int_at(code, 5) if len(code) > 5 else (1, 5)
        if end != len(code) or n < 1:
            raise ParseError("malformed dummy stream", code, end)
        return DummyStreamSpec(n)
    return parse_data_code(code)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def visual_tokens(spec: StreamSpec, aspect_multiplier: float = 1.0) -> int:
    """Latent visual tokens for one sample of ``spec``."""
    lo, hi = ASPECT_RANGE
    if not lo - 1e-12 <= aspect_multiplier <= hi + 1e-12:
        raise ValueError(f"aspect multiplier {aspect_multiplier} outside [{lo}, {hi}]")
    spatial = _round_half_up(spec.spatial_tokens * aspect_multiplier)
    return max(1, spatial * spec.latent_frames)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


def aspect_multiplier(seed: int, step: int, replica: int, stream: int) -> float:
    """The per-step multiplier shared by every sample of one stream."""
    lo, hi = ASPECT_RANGE
    return float(_rng(seed, step, _KEY_ASPECT, replica, stream).uniform(lo, hi))


def make_sample_id(step: int, rank: int, index: int) -> int:
    if not (0 <= rank < 1 << _ID_RANK_BITS and 0 <= index < 1 << _ID_INDEX_BITS):
        raise ConfigError("rank or batch index too large for sample id encoding")
    return (step << (_ID_RANK_BITS + _ID_INDEX_BITS)) | (rank << _ID_INDEX_BITS) | index


def dummy_batch(rank: int, step: int, stream: int = 0) -> list[SampleMeta]:
    return [SampleMeta(make_sample_id(step, rank, 0), 0, 1, rank, 1.0, stream)]


class DummyStream:
    """Stream for one rank that always yields a single 1-token sample."""

    def __init__(self, rank: int):
        self.rank = rank

    def next_batch(self, step: int) -> list[SampleMeta]:
        return dummy_batch(self.rank, step)

    def __iter__(self):
        step = 0
        while True:
            yield self.next_batch(step)
            step += 1


def dummy_stream(rank: int) -> DummyStream:
    return DummyStream(rank)


def next_batch(
    config: ShardingGroupConfig,
    rank: int,
    step: int,
    seed: int,
    per_sample_aspect: bool = False,
) -> list[SampleMeta]:
    """Samples drawn by global ``rank`` at ``step``.

    Text lengths are independent uniform integers in ``[0, 392]``. The
    aspect multiplier is one draw per (replica, stream, step) unless
    ``per_sample_aspect`` is set.
    """
    if rank < 0:
        raise ConfigError(f"negative rank {rank}")
    stream_idx, spec = config.stream_of(rank)
    if isinstance(spec, DummyStreamSpec):
        return dummy_batch(rank, step, stream_idx)
    replica = rank // config.group_size
    n = spec.batch_per_gpu
    texts = _rng(seed, step, _KEY_TEXT, rank).integers(0, TEXT_LEN_MAX + 1, size=n)
    if per_sample_aspect:
        lo, hi = ASPECT_RANGE
        mults = _rng(seed, step, _KEY_ASPECT_SAMPLE, rank).uniform(lo, hi, size=n).tolist()
    else:
        mults = [aspect_multiplier(seed, step, replica, stream_idx)] * n
    return [
        SampleMeta(
            sample_id=make_sample_id(step, rank, i),
            text_len=int(texts[i]),
            visual_len=visual_tokens(spec, mults[i]),
            origin_rank=rank,
            aspect_multiplier=mults[i],
            stream=stream_idx,
        )
        for i in range(n)
    ]


def world_batches(config: ShardingGroupConfig, world_size: int, step: int, seed: int, **kw) -> list[list[SampleMeta]]:
    if world_size % config.group_size:
        raise ConfigError(f"world size {world_size} is not a multiple of the data group size {config.group_size}")
    return [next_batch(config, r, step, seed, **kw) for r in range(world_size)]


PRESETS = {
    "lowres_image": ("g32b32i256f1s0",),
    "mixed_image": ("g16b4i256f1s0", "g4b5i512f1s0", "g4b5i1024f1s0", "g8b1i2048f1s0"),
    "joint_image_video": (
        "g8b4i256f1s0",
        "g2b5i512f1s0",
        "g2b5i1024f1s0",
        "g4b1i2048f1s0",
        "g1b10i256f4s0",
        "g3b1i512f4s0",
        "g8b2i256f85s1",
        "g4b1i512f85s1",
    ),
}


def preset(name: str) -> ShardingGroupConfig:
    try:
        codes = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ShardingGroupConfig.from_codes(codes)


def parse_scenario(text: str) -> ShardingGroupConfig:
    """Scenario text: optional ``group_size N`` header then one code per line.

    Blank lines and ``#`` comments are ignored.
    """
    group_size = 0
    codes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("group_size"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].isdigit() or codes or group_size:
                raise ParseError("malformed group_size header", raw, line=lineno)
            group_size = int(parts[1])
            continue
        try:
            codes.append(parse_stream(line))
        except ParseError as e:
            raise ParseError(f"bad data code ({e})", raw, line=lineno) from None
    try:
        return ShardingGroupConfig(tuple(codes), group_size)
    except ConfigError as e:
        raise ParseError(str(e)) from None


def load_scenario(path) -> ShardingGroupConfig:
    return parse_scenario(Path(path).read_text())
