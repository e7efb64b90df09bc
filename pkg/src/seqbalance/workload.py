"""Per-sequence transformer cost model.

A sequence of ``l`` tokens through one transformer block of width ``d``
costs ``24*l*d**2 + 4*l**2*d`` forward FLOPs. Latency is modelled as
``k * (24*l*d**2 + gamma * 4*l**2*d)`` per block, where ``gamma`` down-weights
the (memory-bound) attention term and ``k`` is seconds per weighted FLOP.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import ConfigError, FitError, ParseError

GAMMA_PRESETS = {
    # latency fit on H100 (single-block measurement)
    "h100_fit": 0.385,
    # value used for the 32-GPU benchmark tables
    "h100": 0.49,
}
DEFAULT_GAMMA = GAMMA_PRESETS["h100"]

# Seconds per weighted FLOP: H100 bf16 dense peak at ~30% achieved efficiency.
DEFAULT_K = 1.0 / (0.3 * 989e12)


@dataclass(frozen=True)
class ModelShape:
    d_model: int = 3072
    n_heads: int = 24
    d_head: int = 128
    n_blocks: int = 57

    def __post_init__(self):
        for name in ("d_model", "n_heads", "d_head", "n_blocks"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.n_heads * self.d_head != self.d_model:
            raise ConfigError(
                f"n_heads * d_head = {self.n_heads * self.d_head} != d_model = {self.d_model}"
            )

    @classmethod
    def flux(cls) -> "ModelShape":
        """19 double-stream + 38 single-stream blocks, treated uniformly."""
        return cls(d_model=3072, n_heads=24, d_head=128, n_blocks=57)


@dataclass(frozen=True)
class WorkloadModel:
    shape: ModelShape = field(default_factory=ModelShape.flux)
    gamma: float = DEFAULT_GAMMA
    k: float = DEFAULT_K

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError(f"gamma must be > 0, got {self.gamma!r}")
        if not self.k > 0:
            raise ConfigError(f"k must be > 0, got {self.k!r}")

    @property
    def d_model(self) -> int:
        return self.shape.d_model

    def workload(self, seq_len: int) -> float:
        return gamma_weighted_workload(seq_len, self)


@dataclass(frozen=True)
class LatencySample:
    seq_len: int
    latency: float

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be positive, got {self.seq_len}")
        if not self.latency > 0:
            raise ValueError(f"latency must be positive, got {self.latency}")


def flops_per_block(seq_len: int, d_model: int) -> int:
    """Forward FLOPs of one block on one sequence, as an exact integer."""
    if seq_len < 0:
        raise ValueError(f"seq_len must be >= 0, got {seq_len}")
    if d_model < 1:
        raise ValueError(f"d_model must be >= 1, got {d_model}")
    l, d = int(seq_len), int(d_model)
    return 24 * l * d * d + 4 * l * l * d


def linear_workload(seq_len: int, d_model: int) -> float:
    """The token-linear part ``24*l*d**2`` (projections and MLP)."""
    return 24.0 * seq_len * d_model * d_model


def attention_workload(seq_len: int, model: WorkloadModel) -> float:
    """The gamma-weighted attention part ``gamma*4*l**2*d``."""
    d = model.shape.d_model
    return model.gamma * (4 * seq_len * seq_len * d)


def gamma_weighted_workload(seq_len: int, model: WorkloadModel) -> float:
    if seq_len < 0:
        raise ValueError(f"seq_len must be >= 0, got {seq_len}")
    return linear_workload(seq_len, model.shape.d_model) + attention_workload(seq_len, model)


def check_bag_size(bag_size: int, n_heads: int) -> None:
    if bag_size < 1:
        raise ConfigError(f"bag size must be >= 1, got {bag_size}")
    if n_heads % bag_size:
        raise ConfigError(
            f"bag of {bag_size} GPUs cannot split {n_heads} attention heads evenly"
        )


def per_gpu_workload(seq_len: int, bag_size: int, model: WorkloadModel) -> float:
    """Workload each GPU of a ``bag_size`` bag carries for one sequence.

    Tokens are chunked across the bag for the linear layers and heads are
    split for attention, so both terms divide by ``bag_size``.
    """
    check_bag_size(bag_size, model.shape.n_heads)
    return gamma_weighted_workload(seq_len, model) / bag_size


def estimate_latency(seq_len: int, bag_size: int, model: WorkloadModel) -> float:
    """Compute-only forward latency in seconds across all blocks."""
    return model.k * model.shape.n_blocks * per_gpu_workload(seq_len, bag_size, model)


@dataclass(frozen=True)
class GammaFit:
    k: float
    gamma: float
    a: float
    b: float
    r2: float
    n_blocks: int = 1


def _r2(samples: Sequence[LatencySample], a: float, b: float) -> float:
    ts = [s.latency for s in samples]
    mean = sum(ts) / len(ts)
    ss_tot = sum((t - mean) ** 2 for t in ts)
    ss_res = sum((s.latency - (a * s.seq_len + b * s.seq_len**2)) ** 2 for s in samples)
    return 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0


def fit_gamma(samples: Iterable[LatencySample], d_model: int, n_blocks: int = 1) -> GammaFit:
    """Fit ``k`` and ``gamma`` to measured latencies.

    Each sample's latency is taken to cover ``n_blocks`` blocks (1 for
    per-block measurements). Solves ``t = a*l + b*l**2`` by least squares;
    the normal equations are accumulated in exact rational arithmetic, so
    noiseless data round-trips to float precision.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise FitError("need at least 2 samples")
    if len({s.seq_len for s in samples}) < 2:
        raise FitError("need at least 2 distinct sequence lengths (design matrix is rank-deficient)")
    if n_blocks < 1:
        raise FitError(f"n_blocks must be >= 1, got {n_blocks}")

    s2 = s3 = s4 = s1t = s2t = Fraction(0)
    for s in samples:
        l = Fraction(s.seq_len)
        t = Fraction(s.latency)
        s2 += l * l
        s3 += l * l * l
        s4 += l * l * l * l
        s1t += l * t
        s2t += l * l * t
    det = s2 * s4 - s3 * s3
    if det == 0:
        raise FitError("degenerate design matrix")
    a = (s4 * s1t - s3 * s2t) / det
    b = (s2 * s2t - s3 * s1t) / det
    if a <= 0 or b <= 0:
        raise FitError(
            f"data inconsistent with model: fitted linear coefficient {float(a):.3g}, "
            f"quadratic coefficient {float(b):.3g} (both must be positive)"
        )
    d = Fraction(d_model)
    k = a / (24 * d * d * n_blocks)
    gamma = 6 * b * d / a
    af, bf = float(a), float(b)
    return GammaFit(k=float(k), gamma=float(gamma), a=af, b=bf, r2=_r2(samples, af, bf), n_blocks=n_blocks)


def fit_k_unweighted(samples: Iterable[LatencySample], d_model: int, n_blocks: int = 1) -> float:
    """Best ``k`` for the raw-FLOPs model ``t = k * n_blocks * flops`` (no gamma)."""
    num = den = Fraction(0)
    for s in samples:
        w = Fraction(flops_per_block(s.seq_len, d_model) * n_blocks)
        num += w * Fraction(s.latency)
        den += w * w
    if den == 0:
        raise FitError("no non-empty samples")
    return float(num / den)


def read_latency_csv(path) -> list[LatencySample]:
    """Read ``seq_len,latency_s`` rows. Malformed rows raise with their line number."""
    text = Path(path).read_text()
    rows = list(csv.reader(text.splitlines()))
    if not rows or [c.strip() for c in rows[0]] != ["seq_len", "latency_s"]:
        raise ParseError("expected header 'seq_len,latency_s'", line=1)
    samples = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise ParseError(f"expected 2 fields, got {len(row)}", text=",".join(row), line=lineno)
        raw_l, raw_t = row[0].strip(), row[1].strip()
        try:
            seq_len = int(raw_l)
            latency = float(raw_t)
        except ValueError:
            raise ParseError("non-numeric field", text=",".join(row), line=lineno) from None
        if seq_len < 1 or not latency > 0 or latency == float("inf"):
            raise ParseError("seq_len and latency_s must be positive", text=",".join(row), line=lineno)
        samples.append(LatencySample(seq_len, latency))
    return samples
