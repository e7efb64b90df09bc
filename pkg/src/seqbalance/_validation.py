"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_rank_seq_lens(seq_lens, *, allow_ids: bool = True) -> list[list[tuple[int, int]]]:
    """Normalise per-rank sequence lengths to ``(sample_id, length)`` pairs.

    Each rank's entry may be plain lengths (ids are then assigned in
    rank-major order) or ``(sample_id, length)`` pairs / sample objects.
    """
    if isinstance(seq_lens, (str, bytes)) or not hasattr(seq_lens, "__iter__"):
        raise TypeError("expected one sequence-length list per rank")
    out = []
    next_id = 0
    for rank, row in enumerate(seq_lens):
        if isinstance(row, (str, bytes)) or not hasattr(row, "__iter__"):
            raise TypeError(f"rank {rank}: expected a list of sequence lengths")
        pairs = []
        for item in row:
            if hasattr(item, "sample_id"):
                sid, length = item.sample_id, item.total_len
            elif isinstance(item, numbers.Integral):
                sid, length = next_id, item
            elif allow_ids and len(item) == 2:
                sid, length = item
            else:
                raise TypeError(f"rank {rank}: cannot interpret {item!r} as a sequence length")
            if not isinstance(length, numbers.Integral) or length < 0:
                raise ValueError(f"rank {rank}: sequence length must be a non-negative integer, got {length!r}")
            pairs.append((int(sid), int(length)))
            next_id += 1
        out.append(pairs)
    if not out:
        raise ValueError("no ranks given")
    return out


def check_lengths(X) -> np.ndarray:
    """1-D array of positive sequence lengths from a vector or one-column matrix."""
    X = np.asarray(X)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    if X.shape[1] != 1:
        raise ValueError(f"expected a single feature (sequence length), got {X.shape[1]}")
    lengths = X[:, 0]
    if np.any(lengths < 0) or np.any(lengths != np.round(lengths)):
        raise ValueError("sequence lengths must be non-negative integers")
    return lengths.astype(np.int64)
