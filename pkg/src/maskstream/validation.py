"""Input validation helpers for ragged sequence data."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .ctc import check_feasible


def check_features(X, feat_dim: int | None = None) -> list[np.ndarray]:
    """Coerce a sequence of ``(T, D)`` arrays to float32, checking D and finiteness."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        raise TypeError("X must be a sequence of (T, D) arrays, not a single 2-d array")
    out = []
    for i, x in enumerate(X):
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"X[{i}] must be a non-empty (T, D) array, got shape {x.shape}")
        if feat_dim is not None and x.shape[1] != feat_dim:
            raise ValueError(f"X[{i}] has {x.shape[1]} features, expected {feat_dim}")
        if not np.isfinite(x).all():
            raise ValueError(f"X[{i}] contains non-finite values")
        out.append(x)
    if not out:
        raise ValueError("X is empty")
    dims = {x.shape[1] for x in out}
    if len(dims) != 1:
        raise ValueError(f"inconsistent feature dims {sorted(dims)}")
    return out


def check_targets(y, n_content: int, n_features: Sequence[int] | None = None,
                  ctc_feasible: bool = False) -> list[np.ndarray]:
    """Token sequences of content ids in ``1..n_content``; optionally CTC-feasible."""
    out = []
    for i, seq in enumerate(y):
        seq = np.asarray(seq, dtype=np.int64).reshape(-1)
        if seq.size == 0:
            raise ValueError(f"y[{i}] is empty")
        if seq.min() < 1 or seq.max() > n_content:
            raise ValueError(f"y[{i}] has ids outside the content range 1..{n_content}")
        if ctc_feasible and n_features is not None:
            check_feasible(n_features[i], seq.tolist())
        out.append(seq)
    if n_features is not None and len(out) != len(n_features):
        raise ValueError(f"X has {len(n_features)} utterances but y has {len(out)}")
    return out


def pad_features(xs: Sequence[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([x.shape[0] for x in xs], dtype=torch.long)
    out = torch.zeros(len(xs), int(lengths.max()), xs[0].shape[1], dtype=torch.float32)
    for i, x in enumerate(xs):
        out[i, : x.shape[0]] = torch.from_numpy(x)
    return out, lengths


def pad_tokens(ys: Sequence[np.ndarray], value: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(y) for y in ys], dtype=torch.long)
    out = torch.full((len(ys), max(int(lengths.max()), 1)), value, dtype=torch.long)
    for i, y in enumerate(ys):
        out[i, : len(y)] = torch.as_tensor(np.asarray(y, dtype=np.int64))
    return out, lengths
