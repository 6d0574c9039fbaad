"""Oriented 3D boxes, point membership, yaw-aware IoU and tracking metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from .kernels import rect_intersection_area

__all__ = [
    "Box7",
    "Motion4",
    "PointCloud",
    "normalize_angle",
    "points_in_box",
    "apply_motion",
    "iou3d",
    "success_curve",
    "precision_curve",
    "success_precision",
]

TAU = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    a = (theta + math.pi) % TAU - math.pi
    return math.pi if a == -math.pi else a


@dataclass(frozen=True)
class Box7:
    """Oriented box: center (x, y, z), yaw about +z, size (w, l, h).

    In the box frame, w spans x, l spans y, h spans z. Yaw is normalized to
    (-pi, pi] at construction.
    """

    center: np.ndarray
    yaw: float
    size: np.ndarray

    def __post_init__(self):
        center = np.ascontiguousarray(self.center, dtype=np.float64)
        size = np.ascontiguousarray(self.size, dtype=np.float64)
        if center.shape != (3,) or size.shape != (3,):
            raise ValueError("Box7 center and size must be 3-vectors")
        if not (np.all(np.isfinite(center)) and np.isfinite(self.yaw) and np.all(np.isfinite(size))):
            raise ValueError("Box7 fields must be finite")
        if np.any(size <= 0):
            raise ValueError(f"Box7 sizes must be positive, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    @property
    def volume(self) -> float:
        return float(self.size[0] * self.size[1] * self.size[2])

    def bev_corners(self) -> np.ndarray:
        """Counterclockwise footprint corners, shape (4, 2)."""
        hx, hy = 0.5 * self.size[0], 0.5 * self.size[1]
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass(frozen=True)
class Motion4:
    """Frame-to-frame rigid motion: translation plus yaw increment."""

    translation: np.ndarray
    yaw_delta: float

    def __post_init__(self):
        t = np.ascontiguousarray(self.translation, dtype=np.float64)
        if t.shape != (3,):
            raise ValueError("Motion4 translation must be a 3-vector")
        if not (np.all(np.isfinite(t)) and np.isfinite(self.yaw_delta)):
            raise ValueError("Motion4 fields must be finite")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "yaw_delta", float(self.yaw_delta))

    def __neg__(self) -> "Motion4":
        return Motion4(-self.translation, -self.yaw_delta)


@dataclass(frozen=True)
class PointCloud:
    """N x 3 array of point coordinates in meters."""

    points: np.ndarray

    def __post_init__(self):
        p = np.ascontiguousarray(self.points, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {p.shape}")
        if p.size and not np.all(np.isfinite(p)):
            raise ValueError("points must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


def points_in_box(pc: PointCloud, box: Box7) -> np.ndarray:
    """Boolean mask of points inside the closed box (faces count as inside)."""
    p = pc.points - box.center
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    x = c * p[:, 0] - s * p[:, 1]
    y = s * p[:, 0] + c * p[:, 1]
    half = 0.5 * box.size
    return (np.abs(x) <= half[0]) & (np.abs(y) <= half[1]) & (np.abs(p[:, 2]) <= half[2])


def apply_motion(box: Box7, motion: Motion4) -> Box7:
    """Shift center and yaw; size stays constant across a track."""
    return Box7(box.center + motion.translation,
                normalize_angle(box.yaw + motion.yaw_delta),
                box.size)


def iou3d(a: Box7, b: Box7) -> float:
    """Exact yaw-aware IoU: clipped footprint area times vertical overlap."""
    inter_area = rect_intersection_area(a.bev_corners(), b.bev_corners())
    if inter_area <= 0.0:
        return 0.0
    top = min(a.center[2] + 0.5 * a.size[2], b.center[2] + 0.5 * b.size[2])
    bot = max(a.center[2] - 0.5 * a.size[2], b.center[2] - 0.5 * b.size[2])
    if top <= bot:
        return 0.0
    inter = inter_area * (top - bot)
    union = a.volume + b.volume - inter
    if union <= 0.0:
        return 0.0
    return float(min(max(inter / union, 0.0), 1.0))


# ---------------------------------------------------------------------------
# one-pass-evaluation metrics
# ---------------------------------------------------------------------------
#
# Both AUCs are the arithmetic mean over 101 uniform thresholds. Overlap
# compares strictly (a frame counts while its IoU exceeds the threshold); the
# top threshold saturates non-strictly so that an all-ones series scores
# exactly 100 instead of losing the degenerate iou > 1 grid point. Distance
# compares non-strictly throughout.

SUCCESS_THRESHOLDS = np.arange(101) / 100.0
PRECISION_THRESHOLDS = (np.arange(101) * 2.0) / 100.0


def _validate_series(ious, errors):
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    errors = np.ascontiguousarray(errors, dtype=np.float64)
    if ious.ndim != 1 or errors.ndim != 1 or ious.shape != errors.shape:
        raise ValueError("iou and error series must be 1-D and equally long")
    if ious.size == 0:
        raise ValueError("empty series has no AUC")
    if np.any(ious < 0) or np.any(ious > 1):
        raise ValueError("iou values must lie in [0, 1]")
    if np.any(errors < 0):
        raise ValueError("center errors must be nonnegative")
    return ious, errors


def success_curve(ious) -> np.ndarray:
    """Fraction of frames above each overlap threshold (101 grid points)."""
    ious = np.ascontiguousarray(ious, dtype=np.float64)
    frac = np.empty(101)
    frac[:100] = (ious[None, :] > SUCCESS_THRESHOLDS[:100, None]).mean(axis=1)
    frac[100] = (ious >= SUCCESS_THRESHOLDS[100]).mean()
    return frac


def precision_curve(errors) -> np.ndarray:
    """Fraction of frames within each center-distance threshold."""
    errors = np.ascontiguousarray(errors, dtype=np.float64)
    return (errors[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)


def success_precision(ious, errors) -> Tuple[float, float]:
    """(Success, Precision) in [0, 100]: AUCs of the two threshold curves."""
    ious, errors = _validate_series(ious, errors)
    return (float(100.0 * success_curve(ious).mean()),
            float(100.0 * precision_curve(errors).mean()))
