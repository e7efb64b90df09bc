"""scikit-learn style front ends.

:class:`SequenceBalancer` plans on per-rank sequence lengths (``fit``),
routes token buffers (``transform``) and routes them back
(``inverse_transform``). :class:`GammaLatencyModel` fits the
gamma-corrected latency curve to measured ``(length, seconds)`` pairs.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import exchange
from ._validation import check_lengths, check_rank_seq_lens
from .balancer import plan_routing
from .topology import parse_topology, replicate
from .workload import (
    DEFAULT_GAMMA,
    DEFAULT_K,
    LatencySample,
    ModelShape,
    WorkloadModel,
    fit_gamma,
    fit_k_unweighted,
    flops_per_block,
)


class SequenceBalancer(TransformerMixin, BaseEstimator):
    """Balance packed variable-length sequences over compute bags.

    Parameters
    ----------
    topology : str
        Bag layout of one sharding unit, e.g. ``"g8n4"`` or ``"g1n2+g2n1+g4n1"``.
    d_model, n_heads, n_blocks : int
        Model shape used by the workload estimate.
    gamma : float
        Attention down-weighting factor.
    k : float
        Seconds per weighted FLOP (only affects latency estimates).
    """

    def __init__(self, topology="g8n4", d_model=3072, n_heads=24, n_blocks=57, gamma=DEFAULT_GAMMA, k=DEFAULT_K):
        self.topology = topology
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.gamma = gamma
        self.k = k

    def _model(self) -> WorkloadModel:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        shape = ModelShape(self.d_model, self.n_heads, self.d_model // self.n_heads, self.n_blocks)
        return WorkloadModel(shape, self.gamma, self.k)

    def fit(self, X, y=None):
        """Plan routing for ``X``: one list of sequence lengths per rank.

        Entries may be plain lengths or ``(sample_id, length)`` pairs.
        """
        seqs = check_rank_seq_lens(X)
        self.model_ = self._model()
        self.layout_ = replicate(parse_topology(self.topology), len(seqs))
        self.seq_lens_ = seqs
        self.plan_, self.report_ = plan_routing(seqs, self.model_, self.layout_)
        self.n_ranks_ = len(seqs)
        return self

    plan_routing = fit

    @property
    def wir_(self) -> float:
        check_is_fitted(self, "report_")
        return self.report_.wir

    def make_world(self, head_width: int = 1):
        """Witness token buffers matching the fitted sequence lengths."""
        check_is_fitted(self, "plan_")
        return exchange.make_world(self.seq_lens_, self.n_heads, head_width)

    def transform(self, X):
        """Route a world of rank buffers (see :func:`exchange.make_world`)."""
        check_is_fitted(self, "plan_")
        return exchange.route(X, self.plan_)

    def inverse_transform(self, X):
        check_is_fitted(self, "plan_")
        return exchange.reverse_route(X, self.plan_)

    def route(self, world):
        return self.transform(world)

    def reverse_route(self, world):
        return self.inverse_transform(world)

    def _bags(self):
        return [b for rep in self.layout_.replicas for b in rep.bags]

    def pre_attn(self, world):
        """Ulysses layout switch on every bag; returns ``(seq_lens per rank, world)``."""
        check_is_fitted(self, "plan_")
        seq_lens = [None] * self.n_ranks_
        for bag in self._bags():
            lens, world = exchange.pre_attn(world, bag, self.n_heads)
            for r, l in zip(bag.gpu_ranks, lens):
                seq_lens[r] = l
        return seq_lens, world

    def post_attn(self, world):
        check_is_fitted(self, "plan_")
        seq_lens = [None] * self.n_ranks_
        for bag in self._bags():
            lens, world = exchange.post_attn(world, bag)
            for r, l in zip(bag.gpu_ranks, lens):
                seq_lens[r] = l
        return seq_lens, world


class GammaLatencyModel(RegressorMixin, BaseEstimator):
    """Least-squares fit of ``t = k * n_blocks * (24*l*d**2 + gamma*4*l**2*d)``.

    ``n_blocks`` is how many blocks each measured latency spans (1 for
    per-block timings).
    """

    def __init__(self, d_model=3072, n_blocks=1):
        self.d_model = d_model
        self.n_blocks = n_blocks

    def fit(self, X, y):
        lengths = check_lengths(X)
        y = np.asarray(y, dtype=np.float64).ravel()
        if len(y) != len(lengths):
            raise ValueError(f"X has {len(lengths)} samples, y has {len(y)}")
        samples = [LatencySample(int(l), float(t)) for l, t in zip(lengths, y)]
        fit = fit_gamma(samples, self.d_model, self.n_blocks)
        self.k_ = fit.k
        self.gamma_ = fit.gamma
        self.r2_ = fit.r2
        self.coef_ = np.array([fit.a, fit.b])
        self.k_unweighted_ = fit_k_unweighted(samples, self.d_model, self.n_blocks)
        return self

    def predict(self, X):
        check_is_fitted(self, "gamma_")
        l = check_lengths(X).astype(np.float64)
        d = float(self.d_model)
        return self.k_ * self.n_blocks * (24 * l * d * d + self.gamma_ * 4 * l * l * d)

    def predict_unweighted(self, X):
        """Latency predicted from raw FLOPs (gamma = 1), with ``k`` refitted for that model."""
        check_is_fitted(self, "k_unweighted_")
        l = check_lengths(X)
        return np.array([self.k_unweighted_ * self.n_blocks * flops_per_block(int(v), self.d_model) for v in l], dtype=np.float64)
