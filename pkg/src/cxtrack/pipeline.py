"""End-to-end plumbing: parameter init, frame-pair forward pass, training
loop, open-loop tracking and dataset evaluation.

Tracking is open loop: each frame's prediction becomes the next frame's
previous box, so errors can compound exactly as they would on a benchmark.
Training pairs use ground-truth previous boxes.
"""

from __future__ import annotations

import dataclasses
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence as Seq, Tuple

import numpy as np

from .backbone import EdgeConvWeights, FeatureSet, extract_features
from .config import DEFAULTS
from .geometry import Box7, PointCloud, iou3d, points_in_box, precision_curve, success_curve, success_precision
from .losses import LossReport, LossWeights, assign_labels, box_loss, center_loss, mask_ce, score_loss, total_loss
from .synth import Sequence
from .tensor import Graph, Tensor, checked_mode, gather_rows
from .transformer import AttentionConfig, LayerWeights, MLPHead, transformer_forward
from .xrpn import ProposalSet, XRPNInput, XRPNWeights, forward_xrpn, select_best

__all__ = [
    "Settings",
    "ModelParams",
    "FrameOutput",
    "TrackResult",
    "EvalResult",
    "EmptyFrameError",
    "TrainingDiverged",
    "named_tensors",
    "init_params",
    "forward_frame_pair",
    "frame_pair_loss",
    "train",
    "track_sequence",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "load_params",
]

SIGMA2_FLOOR = 1e-3  # keeps the displacement prior a valid Gaussian while learning

CHECKPOINT_MAGIC = b"CXTK"
CHECKPOINT_VERSION = 1


class EmptyFrameError(ValueError):
    """A frame (or its context crop) holds no usable points."""


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the step and per-term values."""


@dataclass(frozen=True)
class Settings:
    """Typed view of a run configuration."""

    attention: AttentionConfig = AttentionConfig()
    backbone_k: int = 8
    backbone_budget: Optional[int] = 128
    radius: float = 0.3
    sigma2_init: float = 10.0
    sigma_learnable: bool = False
    center_embedding: bool = True
    loss: LossWeights = LossWeights.preset("non_rigid")
    context: bool = True
    seed: int = 0
    steps: int = 500
    step_size: float = 1e-3
    # training-time jitter of the previous box; teaches the tracker to snap
    # back from its own open-loop drift (supervision stays on true boxes)
    prev_box_noise: float = 0.0
    prev_box_yaw_noise: float = 0.0

    @classmethod
    def from_config(cls, cfg: Dict) -> "Settings":
        full = dict(DEFAULTS)
        full.update(cfg)
        attention = AttentionConfig(
            layers=full["transformer.layers"],
            heads=full["transformer.heads"],
            model_dim=full["transformer.model_dim"],
            key_dim=full["transformer.key_dim"],
            value_dim=full["transformer.value_dim"],
            ffn_dim=full["transformer.ffn_dim"],
            dropout=full["transformer.dropout"],
            variant=full["transformer.variant"],
        )
        loss = LossWeights.preset(
            full["loss.rigidity"],
            huber_delta=full["loss.huber_delta"],
            overrides=(full["loss.gamma1"], full["loss.gamma2"], full["loss.gamma3"]),
        )
        return cls(
            attention=attention,
            backbone_k=full["backbone.k"],
            backbone_budget=full["backbone.budget"],
            radius=full["xrpn.radius"],
            sigma2_init=full["xrpn.sigma2_init"],
            sigma_learnable=full["xrpn.sigma_learnable"],
            center_embedding=full["xrpn.center_embedding"] == "on",
            loss=loss,
            context=full["pipeline.context"] == "on",
            seed=full["seed"],
            steps=full["train.steps"],
            step_size=full["train.step_size"],
            prev_box_noise=full["train.prev_box_noise"],
            prev_box_yaw_noise=full["train.prev_box_yaw_noise"],
        )


@dataclass
class ModelParams:
    backbone: List[EdgeConvWeights]
    transformer: List[LayerWeights]
    xrpn: XRPNWeights
    sigma2: Tensor


def named_tensors(obj, prefix: str = "") -> List[Tuple[str, Tensor]]:
    """Deterministic (name, tensor) walk over nested parameter containers."""
    out: List[Tuple[str, Tensor]] = []
    if isinstance(obj, Tensor):
        out.append((prefix, obj))
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            child = getattr(obj, f.name)
            if child is None:
                continue
            out.extend(named_tensors(child, f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, child in enumerate(obj):
            out.extend(named_tensors(child, f"{prefix}.{i}"))
    return out


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def _glorot(rng: np.random.Generator, shape: Tuple[int, int]) -> Tensor:
    limit = np.sqrt(6.0 / (shape[0] + shape[1]))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def _mlp_head(rng, dim_in: int, dim_hidden: int, dim_out: int,
              zero_out: bool = False) -> MLPHead:
    """Hidden+readout head; ``zero_out`` zeroes the readout so regression
    heads start as exact identities (votes at the points, refinements at the
    votes), which is what lets the proposal-label losses engage early."""
    w2 = _zeros((dim_hidden, dim_out)) if zero_out else _glorot(rng, (dim_hidden, dim_out))
    return MLPHead(w1=_glorot(rng, (dim_in, dim_hidden)), b1=_zeros(dim_hidden),
                   w2=w2, b2=_zeros(dim_out))


def _layer_weights(rng, cfg: AttentionConfig) -> LayerWeights:
    c, dk, dv = cfg.model_dim, cfg.key_dim, cfg.value_dim
    gated = cfg.variant == "gated"
    return LayerWeights(
        wq=[_glorot(rng, (c, dk)) for _ in range(cfg.heads)],
        wk=[_glorot(rng, (c, dk)) for _ in range(cfg.heads)],
        wv=[_glorot(rng, (c, dv)) for _ in range(cfg.heads)],
        wo=_glorot(rng, (cfg.heads * dv, c)),
        w1=_glorot(rng, (c, cfg.ffn_dim)),
        b1=_zeros(cfg.ffn_dim),
        w2=_glorot(rng, (cfg.ffn_dim, c)),
        b2=_zeros(c),
        mask_embed_w=_glorot(rng, (1, c)),
        mask_embed_b=_zeros(c),
        ln_attn_g=_ones(c),
        ln_attn_b=_zeros(c),
        ln_ffn_g=_ones(c),
        ln_ffn_b=_zeros(c),
        mask_head=_mlp_head(rng, c, c, 1),
        center_head=_mlp_head(rng, c, c, 3, zero_out=True),
        ln_gate_mask_g=_ones(c) if gated else None,
        ln_gate_mask_b=_zeros(c) if gated else None,
        ln_gate_feat_g=_ones(c) if gated else None,
        ln_gate_feat_b=_zeros(c) if gated else None,
        ln_gate_out_g=_ones(c) if gated else None,
        ln_gate_out_b=_zeros(c) if gated else None,
    )


BACKBONE_HIDDEN = 32  # channel plan: 3 -> 32 -> 32 -> model_dim


def init_params(settings: Settings, seed: Optional[int] = None) -> ModelParams:
    cfg = settings.attention
    rng = np.random.default_rng(settings.seed if seed is None else seed)
    plan = [3, BACKBONE_HIDDEN, BACKBONE_HIDDEN, cfg.model_dim]
    backbone = [EdgeConvWeights(weight=_glorot(rng, (2 * cin, cout)), bias=_zeros(cout))
                for cin, cout in zip(plan[:-1], plan[1:])]
    layers = [_layer_weights(rng, cfg) for _ in range(cfg.layers)]
    c = cfg.model_dim
    xrpn = XRPNWeights(
        wq=[_glorot(rng, (c, cfg.key_dim)) for _ in range(cfg.heads)],
        wk=[_glorot(rng, (c, cfg.key_dim)) for _ in range(cfg.heads)],
        wv=[_glorot(rng, (c, cfg.value_dim)) for _ in range(cfg.heads)],
        wo=_glorot(rng, (cfg.heads * cfg.value_dim, c)),
        ln_g=_ones(c),
        ln_b=_zeros(c),
        mask_embed_w=_glorot(rng, (1, c)),
        mask_embed_b=_zeros(c),
        center_embed_w=_glorot(rng, (1, c)),
        center_embed_b=_zeros(c),
        offset_head=_mlp_head(rng, c, c, 3, zero_out=True),
        yaw_head=_mlp_head(rng, c, c, 1, zero_out=True),
        score_w=_glorot(rng, (c, 1)),
        score_b=_zeros(1),
    )
    sigma2 = Tensor(np.array(settings.sigma2_init), requires_grad=settings.sigma_learnable)
    return ModelParams(backbone=backbone, transformer=layers, xrpn=xrpn, sigma2=sigma2)


# ---------------------------------------------------------------------------
# forward pass and supervision
# ---------------------------------------------------------------------------

@dataclass
class FrameOutput:
    fs: FeatureSet
    states: list
    proposals: ProposalSet
    pred_box: Box7
    origin: np.ndarray  # world position of the local frame (= previous center)
    prev_yaw: float  # yaw of the box the network was anchored to


def forward_frame_pair(p_prev: PointCloud, box_prev: Box7, p_cur: PointCloud,
                       params: ModelParams, settings: Settings,
                       training: bool = False, rng=None) -> FrameOutput:
    """Mask, backbone, global transformer, current-frame X-RPN, best proposal.

    Neither cloud is cropped unless the context ablation is switched off, in
    which case the previous frame is reduced to the points inside its box.

    The network sees coordinates relative to the previous box center, which
    makes it translation-invariant by construction; the predicted box (and
    everything in ``fs``/``states``/``proposals``) lives in that local frame
    with ``origin`` mapping it back to world coordinates.
    """
    if len(p_prev) == 0 or len(p_cur) == 0:
        raise EmptyFrameError("both frames need at least one point")
    mask_prev = points_in_box(p_prev, box_prev).astype(np.float64)
    origin = box_prev.center.copy()
    prev_pts = p_prev.points - origin
    cur_pts = p_cur.points - origin
    if not settings.context:
        keep = np.flatnonzero(mask_prev > 0)
        if keep.size == 0:
            raise EmptyFrameError("context crop removed every previous-frame point")
        prev_pts = prev_pts[keep]
        mask_prev = mask_prev[keep]

    fs = extract_features(PointCloud(prev_pts), mask_prev, PointCloud(cur_pts),
                          params.backbone, k=settings.backbone_k,
                          budget=settings.backbone_budget)
    states = transformer_forward(fs, params.transformer, settings.attention, training, rng)
    last = states[-1]

    cur_idx = np.arange(fs.frame_split, fs.coords.shape[0])
    inp = XRPNInput(
        feats=gather_rows(last.feats, cur_idx),
        centers=gather_rows(last.centers, cur_idx),
        mask=gather_rows(last.mask, cur_idx),
        coords=fs.coords[fs.frame_split:],
        prev_center=np.zeros(3),  # the previous center is the local origin
        radius=settings.radius,
        sigma2=params.sigma2,
    )
    proposals = forward_xrpn(inp, params.xrpn, settings.attention,
                             use_center_embedding=settings.center_embedding,
                             training=training, rng=rng)
    local = select_best(proposals, Box7(np.zeros(3), box_prev.yaw, box_prev.size))
    pred = Box7(local.center + origin, local.yaw, local.size)
    return FrameOutput(fs=fs, states=states, proposals=proposals,
                       pred_box=pred, origin=origin, prev_yaw=box_prev.yaw)


def frame_pair_loss(out: FrameOutput, box_prev: Box7, box_cur: Box7,
                    settings: Settings,
                    frozen_labels: Optional[np.ndarray] = None) -> LossReport:
    """All supervision terms for one training pair.

    Mask and vote targets are per frame: previous rows against the previous
    box, current rows against the current box. ``frozen_labels`` substitutes
    precomputed proposal labels (finite-difference probes freeze them so the
    checked function stays on one smooth branch).
    """
    lw = settings.loss
    # supervision happens in the forward pass's local frame
    box_prev = Box7(box_prev.center - out.origin, box_prev.yaw, box_prev.size)
    box_cur = Box7(box_cur.center - out.origin, box_cur.yaw, box_cur.size)
    coords = out.fs.coords
    split = out.fs.frame_split
    inside_prev = points_in_box(PointCloud(coords[:split]), box_prev)
    inside_cur = points_in_box(PointCloud(coords[split:]), box_cur)
    gt_mask = np.concatenate([inside_prev, inside_cur]).astype(np.float64)
    prev_idx = np.arange(split)
    cur_idx = np.arange(split, coords.shape[0])

    cm, cc = [], []
    flags = {"empty_center_supervision": False}
    for st in out.states:
        cm.append(mask_ce(st.mask, gt_mask))
        lp, fp = center_loss(gather_rows(st.centers, prev_idx), box_prev.center,
                             inside_prev, lw.rigidity, lw.huber_delta)
        lc, fc = center_loss(gather_rows(st.centers, cur_idx), box_cur.center,
                             inside_cur, lw.rigidity, lw.huber_delta)
        cc.append(lp + lc)
        flags["empty_center_supervision"] |= fp or fc

    labels = (assign_labels(out.proposals.centers.data, box_cur.center)
              if frozen_labels is None else frozen_labels)
    rm, no_scores = score_loss(out.proposals.scores, labels)
    # yaw offsets compose with the yaw the network was actually anchored to
    box, no_pos = box_loss(out.proposals, labels, box_cur, out.prev_yaw, lw.huber_delta)
    flags["no_supervised_scores"] = no_scores
    flags["no_positive_proposals"] = no_pos
    total = total_loss(cm, cc, rm, box, lw)
    return LossReport(cm=cm, cc=cc, rm=rm, box=box, total=total, flags=flags)


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive moments with bias correction; beta = (0.9, 0.999)."""

    def __init__(self, named: Seq[Tuple[str, Tensor]], step_size: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.named = list(named)
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in self.named}
        self.v = {name: np.zeros_like(t.data) for name, t in self.named}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, t in self.named:
            if t.grad is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * t.grad
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * t.grad ** 2
            t.data = t.data - self.step_size * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


FramePair = Tuple[PointCloud, Box7, PointCloud, Box7]


def train(pairs: Seq[FramePair], settings: Settings,
          params: Optional[ModelParams] = None,
          log_every: int = 0) -> Tuple[ModelParams, List[float]]:
    """Cycle through the pairs for settings.steps Adam updates.

    Deterministic under settings.seed (init, dropout and ordering all derive
    from it). A non-finite loss aborts with per-term diagnostics.
    """
    if not pairs:
        raise ValueError("training needs at least one frame pair")
    if params is None:
        params = init_params(settings)
    named = named_tensors(params)
    opt = Adam(named, settings.step_size)
    history: List[float] = []

    with checked_mode(False):
        for step in range(settings.steps):
            p_prev, box_prev, p_cur, box_cur = pairs[step % len(pairs)]
            rng = np.random.default_rng([settings.seed, 7919, step])
            box_in = box_prev
            if settings.prev_box_noise > 0.0 or settings.prev_box_yaw_noise > 0.0:
                box_in = Box7(box_prev.center + rng.normal(0.0, settings.prev_box_noise, 3),
                              box_prev.yaw + rng.normal(0.0, settings.prev_box_yaw_noise),
                              box_prev.size)
            with Graph() as g:
                out = forward_frame_pair(p_prev, box_in, p_cur, params, settings,
                                         training=True, rng=rng)
                report = frame_pair_loss(out, box_prev, box_cur, settings)
            value = float(report.total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: {report.values()}")
            history.append(value)
            if settings.step_size > 0.0:
                g.backward(report.total)
                opt.step()
                if settings.sigma_learnable:
                    params.sigma2.data = np.maximum(params.sigma2.data, SIGMA2_FLOOR)
            for _, t in named:
                t.grad = None
            if log_every and step % log_every == 0:
                print(f"step {step:5d} loss {value:.6f}")
    return params, history


# ---------------------------------------------------------------------------
# tracking and evaluation
# ---------------------------------------------------------------------------

@dataclass
class TrackResult:
    boxes: List[Box7]  # predictions for frames 1..T-1
    ious: np.ndarray
    errors: np.ndarray
    carried: List[bool]  # frames where the box was carried over unchanged


def track_boxes(clouds: Seq[PointCloud], box0: Box7, params: ModelParams,
                settings: Settings) -> Tuple[List[Box7], List[bool]]:
    """Open-loop predictions for frames 1..T-1 given the frame-0 box."""
    if len(clouds) < 2:
        raise ValueError("tracking needs at least two frames")
    boxes, carried = [], []
    prev_box = box0
    for t in range(1, len(clouds)):
        if len(clouds[t]) == 0 or len(clouds[t - 1]) == 0:
            boxes.append(prev_box)  # nothing to see: keep the last state
            carried.append(True)
        else:
            out = forward_frame_pair(clouds[t - 1], prev_box, clouds[t], params,
                                     settings, training=False)
            boxes.append(out.pred_box)
            carried.append(False)
        prev_box = boxes[-1]
    return boxes, carried


def track_sequence(seq: Sequence, params: ModelParams, settings: Settings,
                   teacher_forcing: bool = False) -> TrackResult:
    """Track one sequence and score each predicted frame against its gt box."""
    if teacher_forcing:
        boxes, carried = [], []
        for p_prev, box_prev, p_cur, _ in seq.frame_pairs():
            if len(p_cur) == 0 or len(p_prev) == 0:
                boxes.append(box_prev)
                carried.append(True)
                continue
            out = forward_frame_pair(p_prev, box_prev, p_cur, params, settings)
            boxes.append(out.pred_box)
            carried.append(False)
    else:
        boxes, carried = track_boxes(seq.clouds, seq.boxes[0], params, settings)
    gts = seq.boxes[1:]
    ious = np.array([iou3d(p, g) for p, g in zip(boxes, gts)])
    errors = np.array([float(np.linalg.norm(p.center - g.center))
                       for p, g in zip(boxes, gts)])
    return TrackResult(boxes=boxes, ious=ious, errors=errors, carried=carried)


@dataclass
class EvalResult:
    success: float
    precision: float
    per_sequence: List[Tuple[int, int, float, float]]  # (index, frames, succ, prec)
    success_curve: np.ndarray
    precision_curve: np.ndarray


def evaluate(sequences: Seq[Sequence], params: ModelParams, settings: Settings,
             threads: int = 1) -> EvalResult:
    """Frame-count-weighted Success/Precision over all sequences.

    The aggregate equals the AUC of the pooled threshold curves, which is
    what the plot CSV carries.
    """
    if not sequences:
        raise ValueError("evaluation needs at least one sequence")
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: track_sequence(s, params, settings), sequences))
    else:
        results = [track_sequence(s, params, settings) for s in sequences]

    per_sequence = []
    for i, r in enumerate(results):
        s, p = success_precision(r.ious, r.errors)
        per_sequence.append((i, int(r.ious.size), s, p))
    all_ious = np.concatenate([r.ious for r in results])
    all_errors = np.concatenate([r.errors for r in results])
    s_curve = success_curve(all_ious)
    p_curve = precision_curve(all_errors)
    return EvalResult(success=float(100.0 * s_curve.mean()),
                      precision=float(100.0 * p_curve.mean()),
                      per_sequence=per_sequence,
                      success_curve=s_curve,
                      precision_curve=p_curve)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "CXTK" | u32 version | u64 entry count
#   per entry: u64 name length | name bytes (utf-8)
#              u64 rank | u64 dims[rank] | float64 payload (row-major)

def save_checkpoint(path, params: ModelParams) -> None:
    entries = sorted(named_tensors(params), key=lambda kv: kv[0])
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(entries)))
        for name, t in entries:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<Q", t.data.ndim))
            fh.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<Q", blob, off)
        off += 8
        dims = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
        off += 8 * n
        out[name] = np.array(arr, dtype=np.float64)  # own, writable copy
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    return out


def load_params(path, settings: Settings) -> ModelParams:
    """Materialize a ModelParams for these settings from a checkpoint."""
    arrays = load_checkpoint(path)
    params = init_params(settings, seed=0)
    named = dict(named_tensors(params))
    missing = set(named) - set(arrays)
    extra = set(arrays) - set(named)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                         f"unexpected {sorted(extra)}")
    for name, t in named.items():
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"{name}: checkpoint shape {arrays[name].shape} "
                             f"!= expected {t.data.shape}")
        t.data = arrays[name]
    return params
