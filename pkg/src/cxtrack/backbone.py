"""Shared point-feature backbone: edge convolutions over a static k-NN graph.

Both frames run through identical weights. Each layer concatenates a point's
feature with the offsets to its k neighbors, applies a shared affine + ReLU,
and max-reduces over the neighborhood.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as tt
from .geometry import PointCloud
from .kernels import fps_indices, knn_indices
from .tensor import Tensor

__all__ = [
    "EdgeConvWeights",
    "FeatureSet",
    "knn_graph",
    "farthest_point_sample",
    "edge_conv",
    "extract_features",
]

UNKNOWN_MASK = 0.5  # targetness placeholder for the frame being localized


@dataclass
class EdgeConvWeights:
    weight: Tensor  # (2*Cin, Cout)
    bias: Tensor  # (Cout,)


@dataclass
class FeatureSet:
    """Per-point rows for both frames stacked: previous block, then current.

    mask rows are binary for the previous frame and UNKNOWN_MASK for the
    current frame until the transformer refines them.
    """

    coords: np.ndarray  # (N, 3)
    feats: Tensor  # (N, C)
    mask: Tensor  # (N, 1)
    frame_split: int

    def __post_init__(self):
        n = self.coords.shape[0]
        if not 0 <= self.frame_split <= n:
            raise ValueError("frame_split out of range")
        if self.feats.shape[0] != n or self.mask.shape != (n, 1):
            raise ValueError("feature/mask rows must match coords")
        if np.any(self.mask.data < 0) or np.any(self.mask.data > 1):
            raise ValueError("mask entries must lie in [0, 1]")

    @property
    def n_prev(self) -> int:
        return self.frame_split

    @property
    def n_cur(self) -> int:
        return self.coords.shape[0] - self.frame_split


def knn_graph(coords: np.ndarray, k: int) -> np.ndarray:
    """k nearest neighbors per point, self excluded, ties to the lower index."""
    return knn_indices(coords, k)


def farthest_point_sample(coords: np.ndarray, budget: int) -> np.ndarray:
    """Deterministic farthest-point selection starting from index 0."""
    return fps_indices(coords, budget)


def edge_conv(feats: Tensor, neighbors: np.ndarray, w: EdgeConvWeights) -> Tensor:
    """One edge convolution: max_j relu(W . (x_i, x_j - x_i) + b)."""
    n, k = neighbors.shape
    if feats.shape[0] != n:
        raise tt.ShapeError("neighbor table rows must match feature rows")
    cin = feats.shape[1]
    if w.weight.shape[0] != 2 * cin:
        raise tt.ShapeError(f"edge weight expects {2 * cin} input channels, got {w.weight.shape[0]}")
    center_idx = np.repeat(np.arange(n), k)
    xi = tt.gather_rows(feats, center_idx)
    xj = tt.gather_rows(feats, neighbors.reshape(-1))
    edges = tt.concat([xi, xj - xi], axis=1)
    h = tt.relu(tt.linear(edges, w.weight, w.bias))
    cout = w.weight.shape[1]
    return tt.amax(h.reshape((n, k, cout)), axis=1)


def _embed_frame(points: np.ndarray, layers: Sequence[EdgeConvWeights], k: int) -> Tensor:
    neighbors = knn_graph(points, k)
    feats = Tensor(points)
    for w in layers:
        feats = edge_conv(feats, neighbors, w)
    return feats


def extract_features(p_prev: PointCloud, mask_prev: np.ndarray, p_cur: PointCloud,
                     layers: Sequence[EdgeConvWeights], k: int = 8,
                     budget: Optional[int] = None) -> FeatureSet:
    """Embed both frames with shared weights and stack their rows.

    ``budget`` caps each frame's point count via farthest-point sampling;
    masks are gathered by the same indices so row alignment survives.
    """
    if len(p_prev) == 0 or len(p_cur) == 0:
        raise ValueError("both frames must contain points")
    mask_prev = np.asarray(mask_prev, dtype=np.float64).reshape(-1)
    if mask_prev.shape[0] != len(p_prev):
        raise ValueError("previous-frame mask length must match its cloud")

    prev_pts, cur_pts = p_prev.points, p_cur.points
    if budget is not None:
        sel_prev = farthest_point_sample(prev_pts, budget)
        sel_cur = farthest_point_sample(cur_pts, budget)
        prev_pts = prev_pts[sel_prev]
        cur_pts = cur_pts[sel_cur]
        mask_prev = mask_prev[sel_prev]

    feats_prev = _embed_frame(prev_pts, layers, k)
    feats_cur = _embed_frame(cur_pts, layers, k)

    coords = np.concatenate([prev_pts, cur_pts], axis=0)
    feats = tt.concat([feats_prev, feats_cur], axis=0)
    mask = np.concatenate([mask_prev, np.full(cur_pts.shape[0], UNKNOWN_MASK)])
    return FeatureSet(coords=coords, feats=feats, mask=Tensor(mask.reshape(-1, 1)),
                      frame_split=prev_pts.shape[0])
