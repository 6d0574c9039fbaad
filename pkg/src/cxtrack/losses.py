"""Supervision terms: per-layer mask CE, per-layer center regression,
proposal labeling, proposal score CE and the positive-box Huber term.

A term that has nothing to supervise (no points inside the box, no positive
proposals) contributes an exact zero and raises a flag instead of erroring;
sparse frames are a legitimate state for LiDAR-style data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as tt
from .geometry import Box7
from .tensor import Tensor
from .xrpn import ProposalSet

__all__ = [
    "CE_CLAMP",
    "POSITIVE_RADIUS",
    "NEGATIVE_RADIUS",
    "LossWeights",
    "LossReport",
    "mask_ce",
    "center_loss",
    "assign_labels",
    "score_loss",
    "box_loss",
    "total_loss",
]

CE_CLAMP = 1e-7
POSITIVE_RADIUS = 0.3  # proposals voting closer than this are positives
NEGATIVE_RADIUS = 0.6  # farther than this are negatives; between is ignored

RIGID_GAMMAS = (0.2, 1.0, 1.5)
NON_RIGID_GAMMAS = (0.2, 10.0, 1.0)


@dataclass(frozen=True)
class LossWeights:
    gamma1: float
    gamma2: float
    gamma3: float
    rigidity: str = "rigid"
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.rigidity not in ("rigid", "non_rigid"):
            raise ValueError(f"rigidity must be rigid|non_rigid, got {self.rigidity!r}")
        if min(self.gamma1, self.gamma2, self.gamma3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.huber_delta <= 0:
            raise ValueError("huber delta must be positive")

    @classmethod
    def preset(cls, rigidity: str, huber_delta: float = 1.0,
               overrides: Optional[Sequence[Optional[float]]] = None) -> "LossWeights":
        base = RIGID_GAMMAS if rigidity == "rigid" else NON_RIGID_GAMMAS
        g = list(base)
        if overrides is not None:
            for i, v in enumerate(overrides):
                if v is not None:
                    g[i] = v
        return cls(g[0], g[1], g[2], rigidity=rigidity, huber_delta=huber_delta)


@dataclass
class LossReport:
    """Per-term values; ``flags`` records which terms were vacuous."""

    cm: List[Tensor]
    cc: List[Tensor]
    rm: Tensor
    box: Tensor
    total: Tensor
    flags: Dict[str, bool] = field(default_factory=dict)

    def values(self) -> Dict[str, float]:
        out = {f"cm_{i+1}": float(t.data) for i, t in enumerate(self.cm)}
        out.update({f"cc_{i+1}": float(t.data) for i, t in enumerate(self.cc)})
        out["rm"] = float(self.rm.data)
        out["box"] = float(self.box.data)
        out["total"] = float(self.total.data)
        return out


def mask_ce(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy; predictions clamped to [1e-7, 1 - 1e-7]."""
    target = np.asarray(target, dtype=np.float64).reshape(-1, 1)
    if pred.shape != target.shape:
        raise tt.ShapeError(f"prediction shape {pred.shape} vs target {target.shape}")
    p = tt.clamp(pred, CE_CLAMP, 1.0 - CE_CLAMP)
    t = Tensor(target)
    return -(t * tt.log(p) + (1.0 - t) * tt.log(1.0 - p)).mean()


def center_loss(pred: Tensor, gt_center: np.ndarray, inside: np.ndarray,
                rigidity: str, huber_delta: float = 1.0) -> Tuple[Tensor, bool]:
    """Vote regression over points inside the ground-truth box.

    non_rigid: mean over inside points of the squared distance.
    rigid: mean over inside points of the per-component Huber sum.
    Returns (loss, empty_flag); no inside points gives an exact zero.
    """
    inside = np.asarray(inside, dtype=bool).reshape(-1)
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        return Tensor(0.0), True
    votes = tt.gather_rows(pred, idx)
    resid = votes - Tensor(np.asarray(gt_center, dtype=np.float64).reshape(1, 3))
    if rigidity == "non_rigid":
        per_point = (resid * resid).sum(axis=1)
    else:
        per_point = tt.huber(resid, huber_delta).sum(axis=1)
    return per_point.mean(), False


def assign_labels(centers: np.ndarray, gt_center: np.ndarray,
                  pos_radius: float = POSITIVE_RADIUS,
                  neg_radius: float = NEGATIVE_RADIUS) -> np.ndarray:
    """+1 within pos_radius, -1 beyond neg_radius, 0 (ignored) between."""
    centers = np.asarray(centers, dtype=np.float64)
    d = np.sqrt(((centers - np.asarray(gt_center, dtype=np.float64)) ** 2).sum(axis=1))
    labels = np.zeros(centers.shape[0], dtype=np.int8)
    labels[d < pos_radius] = 1
    labels[d > neg_radius] = -1
    return labels


def score_loss(scores: Tensor, labels: np.ndarray) -> Tuple[Tensor, bool]:
    """Binary cross-entropy of proposal logits against assigned labels.

    Ignore-labeled proposals are excluded from the mean entirely.
    """
    labels = np.asarray(labels).reshape(-1)
    idx = np.flatnonzero(labels != 0)
    if idx.size == 0:
        return Tensor(0.0), True
    sel = tt.gather_rows(scores, idx)
    target = (labels[idx] == 1).astype(np.float64)
    return mask_ce(tt.sigmoid(sel), target), False


def _wrap_residual(t: Tensor) -> Tensor:
    # subtract the nearest multiple of 2*pi as a constant: gradient stays 1
    k = np.round(t.data / (2.0 * np.pi))
    return t - Tensor(k * (2.0 * np.pi))


def box_loss(proposals: ProposalSet, labels: np.ndarray, gt_box: Box7,
             prev_yaw: float, huber_delta: float = 1.0) -> Tuple[Tensor, bool]:
    """Huber over the 4 residual components of positive proposals.

    Residuals are (center - gt_center, wrap(prev_yaw + dtheta - gt_yaw));
    the mean runs over positives and components. No positives: zero, flag.
    """
    labels = np.asarray(labels).reshape(-1)
    pos = np.flatnonzero(labels == 1)
    if pos.size == 0:
        return Tensor(0.0), True
    centers = tt.gather_rows(proposals.centers, pos)
    yaws = tt.gather_rows(proposals.yaw_offsets, pos)
    c_resid = centers - Tensor(gt_box.center.reshape(1, 3))
    y_resid = _wrap_residual(yaws + Tensor(np.array([[prev_yaw - gt_box.yaw]])))
    resid = tt.concat([c_resid, y_resid], axis=1)
    return tt.huber(resid, huber_delta).mean(), False


def total_loss(cm: Sequence[Tensor], cc: Sequence[Tensor], rm: Tensor, box: Tensor,
               w: LossWeights) -> Tensor:
    """gamma1 * sum(cm) + gamma2 * sum(cc) + gamma3 * rm + box."""
    if len(cm) != len(cc):
        raise ValueError("per-layer loss lists must have equal length")
    acc = rm * w.gamma3 + box
    for t in cm:
        acc = acc + t * w.gamma1
    for t in cc:
        acc = acc + t * w.gamma2
    return acc
