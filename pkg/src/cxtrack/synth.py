"""Synthetic tracking sequences and simple point-cloud/box file formats.

A scene is a target box moving under bounded per-frame motion, sampled as
LiDAR-style surface returns, plus optional same-shape distractors, uniform
clutter and i.i.d. occlusion dropout of target points. Everything is
deterministic under the spec seed.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence as Seq, Tuple

import numpy as np

from .geometry import Box7, Motion4, PointCloud, apply_motion

__all__ = [
    "ParseError",
    "SceneSpec",
    "Sequence",
    "PRESETS",
    "sample_box_surface",
    "generate_sequence",
    "load_xyz_text",
    "save_xyz_text",
    "load_lidar_bin",
    "save_lidar_bin",
    "load_box_file",
    "save_box_file",
    "load_manifest",
    "write_sequence_dir",
    "load_sequence_dir",
    "discover_sequences",
]

# pull surface samples off exact face planes so a rotate/unrotate round trip
# cannot push them outside the closed box
SURFACE_INSET = 1.0 - 1e-12


class ParseError(ValueError):
    """Malformed input file; carries the offending line number."""

    def __init__(self, path, line_no: int, message: str):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    frames: int = 12
    size: Tuple[float, float, float] = (0.6, 0.8, 1.7)
    points_per_object: int = 64
    trans_bound: Tuple[float, float, float] = (0.12, 0.12, 0.02)
    yaw_bound: float = 0.06
    distractors: int = 2
    distractor_offset: Tuple[float, float] = (1.5, 3.0)
    clutter: int = 32
    clutter_extent: float = 4.0
    occlusion_drop: float = 0.0

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if min(self.size) <= 0:
            raise ValueError("degenerate target size")
        if self.points_per_object < 1:
            raise ValueError("need at least one target point")
        if self.distractors < 0 or self.clutter < 0:
            raise ValueError("object counts must be nonnegative")
        if not 0.0 <= self.occlusion_drop < 1.0:
            raise ValueError("occlusion drop must lie in [0, 1)")
        lo, hi = self.distractor_offset
        if not 0.0 < lo <= hi:
            raise ValueError("distractor offset range must satisfy 0 < min <= max")


@dataclass
class Sequence:
    """Per-frame clouds and ground-truth boxes, plus distractor tracks."""

    clouds: List[PointCloud]
    boxes: List[Box7]
    distractor_centers: List[np.ndarray] = field(default_factory=list)  # (D, 3) per frame

    def __len__(self) -> int:
        return len(self.clouds)

    def frame_pairs(self):
        """(cloud_prev, box_prev, cloud_cur, box_cur) for consecutive frames."""
        for t in range(1, len(self.clouds)):
            yield self.clouds[t - 1], self.boxes[t - 1], self.clouds[t], self.boxes[t]


def _rot_z(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def sample_box_surface(size, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area samples on the closed box surface, in the box frame."""
    w, l, h = (float(v) for v in size)
    hx, hy, hz = 0.5 * w, 0.5 * l, 0.5 * h
    areas = np.array([l * h, l * h, w * h, w * h, w * l, w * l])
    faces = rng.choice(6, size=count, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=count)
    v = rng.uniform(-1.0, 1.0, size=count)
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    pts = np.empty((count, 3))
    ax = faces // 2  # 0: +-x face, 1: +-y face, 2: +-z face
    pts[ax == 0] = np.column_stack([sign[ax == 0] * hx, u[ax == 0] * hy, v[ax == 0] * hz])
    pts[ax == 1] = np.column_stack([u[ax == 1] * hx, sign[ax == 1] * hy, v[ax == 1] * hz])
    pts[ax == 2] = np.column_stack([u[ax == 2] * hx, v[ax == 2] * hy, sign[ax == 2] * hz])
    return pts * SURFACE_INSET


def _sample_motion(spec: SceneSpec, rng: np.random.Generator) -> Motion4:
    t = rng.uniform(-1.0, 1.0, size=3) * np.asarray(spec.trans_bound)
    return Motion4(t, rng.uniform(-spec.yaw_bound, spec.yaw_bound))


def generate_sequence(spec: SceneSpec) -> Sequence:
    """Deterministic scene: same seed, same bits.

    Draw order per frame is pinned: target motion, distractor motions,
    occlusion mask, clutter. Distractors are independent objects with the
    target's size but their own surface samples and trajectories.
    """
    rng = np.random.default_rng(spec.seed)
    size = np.asarray(spec.size, dtype=np.float64)

    box = Box7(np.zeros(3), rng.uniform(-math.pi, math.pi), size)
    template = sample_box_surface(size, spec.points_per_object, rng)

    d_boxes = []
    d_templates = []
    for _ in range(spec.distractors):
        ang = rng.uniform(-math.pi, math.pi)
        radius = rng.uniform(*spec.distractor_offset)
        offset = np.array([radius * math.cos(ang), radius * math.sin(ang), 0.0])
        d_boxes.append(Box7(box.center + offset, rng.uniform(-math.pi, math.pi), size))
        d_templates.append(sample_box_surface(size, spec.points_per_object, rng))

    clutter_anchor = box.center.copy()

    clouds, boxes, d_centers = [], [], []
    for t in range(spec.frames):
        if t > 0:
            box = apply_motion(box, _sample_motion(spec, rng))
            d_boxes = [apply_motion(b, _sample_motion(spec, rng)) for b in d_boxes]

        target = template @ _rot_z(box.yaw).T + box.center
        if spec.occlusion_drop > 0.0:
            target = target[rng.random(spec.points_per_object) >= spec.occlusion_drop]

        parts = [target]
        for b, tpl in zip(d_boxes, d_templates):
            parts.append(tpl @ _rot_z(b.yaw).T + b.center)
        if spec.clutter > 0:
            parts.append(clutter_anchor + rng.uniform(-spec.clutter_extent,
                                                      spec.clutter_extent,
                                                      size=(spec.clutter, 3)))
        clouds.append(PointCloud(np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))))
        boxes.append(box)
        d_centers.append(np.array([b.center for b in d_boxes]).reshape(len(d_boxes), 3))

    return Sequence(clouds=clouds, boxes=boxes, distractor_centers=d_centers)


PRESETS = {
    "pedestrian_like": {
        "data.size": [0.6, 0.8, 1.7],
        "data.points_per_object": 64,
        "data.trans_bound": [0.12, 0.12, 0.02],
        "data.yaw_bound": 0.06,
        "data.distractors": 2,
        "data.distractor_offset": [1.5, 3.0],
        "data.clutter": 32,
        "data.clutter_extent": 4.0,
        "data.occlusion_drop": 0.2,
        "xrpn.radius": 0.3,
        "xrpn.sigma2_init": 0.25,
        "xrpn.sigma_learnable": False,
        "loss.rigidity": "non_rigid",
        "train.prev_box_noise": 0.08,
        "train.prev_box_yaw_noise": 0.03,
    },
    "car_like": {
        "data.size": [1.9, 4.5, 1.6],
        "data.points_per_object": 96,
        "data.trans_bound": [0.25, 0.25, 0.02],
        "data.yaw_bound": 0.04,
        "data.distractors": 1,
        "data.distractor_offset": [4.0, 8.0],
        "data.clutter": 48,
        "data.clutter_extent": 8.0,
        "data.occlusion_drop": 0.15,
        "xrpn.radius": 1.0,
        "xrpn.sigma2_init": 10.0,
        "xrpn.sigma_learnable": True,
        "loss.rigidity": "rigid",
        "train.prev_box_noise": 0.15,
        "train.prev_box_yaw_noise": 0.02,
    },
}


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load_xyz_text(path) -> PointCloud:
    """Whitespace-separated ``x y z`` per line; blanks and # comments skipped."""
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 3:
                raise ParseError(path, line_no, f"expected 3 fields, got {len(fields)}")
            try:
                pts.append([float(v) for v in fields])
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric coordinate in {line!r}") from None
    return PointCloud(np.array(pts, dtype=np.float64).reshape(-1, 3))


def save_xyz_text(path, pc: PointCloud) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in pc.points:
            fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n")


def load_lidar_bin(path) -> PointCloud:
    """Little-endian float32 records of (x, y, z, intensity); intensity dropped."""
    blob = Path(path).read_bytes()
    if len(blob) % 16 != 0:
        raise ParseError(path, 0, f"size {len(blob)} is not a multiple of 16 bytes")
    rec = np.frombuffer(blob, dtype="<f4").reshape(-1, 4)
    return PointCloud(rec[:, :3].astype(np.float64))


def save_lidar_bin(path, pc: PointCloud) -> None:
    rec = np.zeros((len(pc), 4), dtype="<f4")
    rec[:, :3] = pc.points.astype("<f4")
    Path(path).write_bytes(rec.tobytes())


def load_box_file(path) -> List[Box7]:
    """One box per line: ``x y z theta w l h`` (meters, radians)."""
    boxes = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 7:
                raise ParseError(path, line_no, f"expected 7 fields, got {len(fields)}")
            try:
                vals = [float(v) for v in fields]
            except ValueError:
                raise ParseError(path, line_no, f"non-numeric field in {line!r}") from None
            try:
                boxes.append(Box7(np.array(vals[0:3]), vals[3], np.array(vals[4:7])))
            except ValueError as exc:
                raise ParseError(path, line_no, str(exc)) from None
    return boxes


def _box_line(b: Box7) -> str:
    vals = [b.center[0], b.center[1], b.center[2], b.yaw, b.size[0], b.size[1], b.size[2]]
    return " ".join(repr(float(v)) for v in vals)


def save_box_file(path, boxes: Seq[Box7]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for b in boxes:
            fh.write(_box_line(b) + "\n")


def load_manifest(path) -> Tuple[Box7, List[Path]]:
    """First line: the frame-0 box (7 floats). Rest: cloud paths in order."""
    base = Path(path).parent
    box0 = None
    paths = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if box0 is None:
                fields = line.split()
                if len(fields) != 7:
                    raise ParseError(path, line_no, "first line must hold 7 box floats")
                try:
                    vals = [float(v) for v in fields]
                except ValueError:
                    raise ParseError(path, line_no, "non-numeric box field") from None
                box0 = Box7(np.array(vals[0:3]), vals[3], np.array(vals[4:7]))
            else:
                paths.append(base / line)
    if box0 is None or not paths:
        raise ParseError(path, 0, "manifest needs a box line and at least one cloud path")
    return box0, paths


def load_cloud(path) -> PointCloud:
    p = Path(path)
    return load_lidar_bin(p) if p.suffix == ".bin" else load_xyz_text(p)


# ---------------------------------------------------------------------------
# dataset directories (one directory per sequence)
# ---------------------------------------------------------------------------

def write_sequence_dir(dirpath, seq: Sequence) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for t, pc in enumerate(seq.clouds):
        name = f"frame_{t:03d}.xyz"
        save_xyz_text(d / name, pc)
        names.append(name)
    save_box_file(d / "boxes.txt", seq.boxes)
    with open(d / "manifest.txt", "w", encoding="utf-8") as fh:
        fh.write(_box_line(seq.boxes[0]) + "\n")
        for name in names:
            fh.write(name + "\n")


def load_sequence_dir(dirpath) -> Sequence:
    d = Path(dirpath)
    boxes = load_box_file(d / "boxes.txt")
    _, cloud_paths = load_manifest(d / "manifest.txt")
    if len(boxes) != len(cloud_paths):
        raise ParseError(d / "boxes.txt", 0,
                         f"{len(boxes)} boxes vs {len(cloud_paths)} clouds")
    return Sequence(clouds=[load_cloud(p) for p in cloud_paths], boxes=boxes)


def discover_sequences(data_dir) -> List[Path]:
    root = Path(data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    return sorted(p for p in root.iterdir() if (p / "manifest.txt").is_file())
