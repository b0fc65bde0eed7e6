"""Trainable feature memory.

A bank of T prototype vectors stands in for the point stream at inference.
Reading the bank is literally the encoder's correlate / top-K / softmax /
aggregate routine with the bank as the candidate set. Training pulls the
bank's readout toward the point stream's readout with an L2 alignment loss,
so the two become interchangeable inputs to the detection backbone.
"""

from __future__ import annotations

import numpy as np

from . import difftensor as dt
from .difftensor import nn
from .difftensor import tensor as T
from .encoder import correlate_topk_aggregate


class MemoryBank(nn.Module):
    """T x C trainable items, initialized to unit-norm Gaussian rows."""

    def __init__(self, name: str, n_items: int, channels: int, rng: np.random.Generator):
        if n_items < 1 or channels < 1:
            raise ValueError("memory bank needs positive item count and channels")
        raw = rng.normal(size=(n_items, channels))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        self.n_items = n_items
        self.channels = channels
        self.items = nn.Parameter(f"{name}.items", raw)

    def read(self, f_vox: T.Tensor, k: int):
        """Read the bank for every pillar query: (C, N) -> (C, N) plus the
        selected item indices (N, k) and their weights (N, k)."""
        if f_vox.shape[0] != self.channels:
            raise ValueError(f"query channels {f_vox.shape[0]} != bank channels {self.channels}")
        if not 1 <= k <= self.n_items:
            raise ValueError(f"k={k} outside [1, {self.n_items}]")
        bank_cols = dt.tensor.transpose(self.items.tensor, (1, 0))  # (C, T)
        return correlate_topk_aggregate(f_vox, bank_cols, k)


def memory_alignment_loss(g_pts: T.Tensor, g_mem: T.Tensor) -> T.Tensor:
    """Sum over pillars of the L2 distance between the two readouts.

    The square root uses a zero subgradient at zero, so a perfectly aligned
    pillar contributes nothing to the gradient instead of a NaN.
    """
    if g_pts.shape != g_mem.shape:
        raise ValueError(f"readout shapes differ: {g_pts.shape} vs {g_mem.shape}")
    diff = dt.tensor.sub(g_pts, g_mem)
    sq = dt.tensor.sum_(dt.tensor.mul(diff, diff), axis=0)  # (N,)
    return dt.tensor.sum_(dt.tensor.sqrt(sq))


def mean_alignment_distance(g_pts: T.Tensor, g_mem: T.Tensor) -> float:
    """Mean per-pillar readout distance, for monitoring (no gradient)."""
    diff = g_pts.data - g_mem.data
    if diff.shape[1] == 0:
        return 0.0
    return float(np.sqrt((diff * diff).sum(axis=0)).mean())
