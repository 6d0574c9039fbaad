"""Localization head: local attention in voted-center space plus a Gaussian
displacement prior that separates the target from same-class distractors.

Only current-frame rows enter. Points whose center votes land within radius
``r`` of each other attend to one another; everything else is masked out of
the softmax. One attention sublayer (semi-dropout form, no feed-forward
network) is enough to sharpen the per-point proposals.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import tensor as tt
from .geometry import Box7, normalize_angle
from .tensor import Tensor
from .transformer import AttentionConfig, MLPHead, positional_encoding

__all__ = [
    "NEG_INF_LOGIT",
    "XRPNWeights",
    "XRPNInput",
    "ProposalSet",
    "center_neighborhood",
    "gaussian_center_mask",
    "embed_and_combine",
    "local_attention",
    "propose",
    "select_best",
    "forward_xrpn",
]

# additive logit mask for out-of-neighborhood pairs; exped to exactly 0
NEG_INF_LOGIT = -1e30


@dataclass
class XRPNWeights:
    wq: List[Tensor]
    wk: List[Tensor]
    wv: List[Tensor]
    wo: Tensor
    ln_g: Tensor
    ln_b: Tensor
    mask_embed_w: Tensor  # (1, C)
    mask_embed_b: Tensor
    center_embed_w: Tensor  # (1, C)
    center_embed_b: Tensor
    offset_head: MLPHead  # C -> 3
    yaw_head: MLPHead  # C -> 1
    score_w: Tensor  # (C, 1)
    score_b: Tensor  # (1,)


@dataclass
class XRPNInput:
    """Current-frame slice of the transformer output plus the motion prior."""

    feats: Tensor  # (Nt, C)
    centers: Tensor  # (Nt, 3) voted centers
    mask: Tensor  # (Nt, 1) refined targetness
    coords: np.ndarray  # (Nt, 3) raw point coordinates
    prev_center: np.ndarray  # (3,)
    radius: float
    sigma2: Tensor  # scalar; requires_grad iff learnable

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("neighborhood radius must be positive")
        if float(self.sigma2.data) <= 0:
            raise ValueError("sigma2 must be positive")


@dataclass
class ProposalSet:
    """One proposal per current-frame point."""

    centers: Tensor  # (Nt, 3) refined centers
    yaw_offsets: Tensor  # (Nt, 1)
    scores: Tensor  # (Nt, 1) raw logits

    def __len__(self):
        return self.scores.shape[0]


def center_neighborhood(centers: np.ndarray, radius: float) -> np.ndarray:
    """Adjacency in voted-center space: strict ||c_i - c_j|| < r.

    Self-distance is zero, so every point belongs to its own neighborhood.
    """
    if radius <= 0:
        raise ValueError("neighborhood radius must be positive")
    centers = np.asarray(centers, dtype=np.float64)
    if radius == np.inf:
        return np.ones((centers.shape[0],) * 2, dtype=bool)
    d2 = ((centers[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2 < radius * radius


def gaussian_center_mask(centers: Tensor, prev_center: np.ndarray, sigma2: Tensor) -> Tensor:
    """exp(-||c_i - c_prev||^2 / (2 sigma^2)) per point, in (0, 1]."""
    diff = centers - Tensor(np.asarray(prev_center, dtype=np.float64).reshape(1, 3))
    d2 = (diff * diff).sum(axis=1, keepdims=True)
    return tt.exp(-(d2 / (2.0 * sigma2)))


def embed_and_combine(mask: Tensor, center_mask: Tensor, w: XRPNWeights,
                      use_center_embedding: bool = True) -> Tensor:
    """Equal-weight blend of mask embedding and center embedding.

    With the center embedding ablated the mask term keeps its 0.5 factor, so
    toggling the switch isolates exactly the displacement prior.
    """
    me = tt.linear(mask, w.mask_embed_w, w.mask_embed_b)
    if not use_center_embedding:
        return 0.5 * me
    ce = tt.linear(center_mask, w.center_embed_w, w.center_embed_b)
    return 0.5 * me + 0.5 * ce


def local_attention(feats: Tensor, coords: np.ndarray, combined: Tensor,
                    adjacency: np.ndarray, w: XRPNWeights, cfg: AttentionConfig,
                    training: bool = False, rng=None) -> Tensor:
    """Neighborhood-restricted semi-dropout attention sublayer, no FFN.

    Out-of-neighborhood logits get NEG_INF_LOGIT, which underflows to an
    exact zero weight, so each softmax row is a distribution over the
    point's neighborhood only. With radius = inf this is bit-for-bit the
    global sublayer.
    """
    from .transformer import _apply_values, _attention_rows  # shared machinery

    n = feats.shape[0]
    if adjacency.shape != (n, n):
        raise tt.ShapeError("adjacency must be square over current-frame rows")
    xbar = tt.layer_norm(feats, w.ln_g, w.ln_b)
    pe = Tensor(positional_encoding(coords, cfg.model_dim))
    xqk = xbar + pe
    bias = None
    if not adjacency.all():
        bias = Tensor(np.where(adjacency, 0.0, NEG_INF_LOGIT))
    rows = _attention_rows(xqk, xqk, w, cfg, bias)
    feat = _apply_values(rows, xbar, w)
    emb = _apply_values(rows, combined, w)
    return feats + tt.dropout(feat, cfg.dropout, training, rng) + emb


def propose(refined: Tensor, centers: Tensor, w: XRPNWeights) -> ProposalSet:
    """Pointwise heads: refined center, yaw offset and targetness logit."""
    return ProposalSet(
        centers=centers + w.offset_head.apply(refined),
        yaw_offsets=w.yaw_head.apply(refined),
        scores=tt.linear(refined, w.score_w, w.score_b),
    )


def select_best(proposals: ProposalSet, prev_box: Box7) -> Box7:
    """Highest-scoring proposal wins; ties go to the lowest index.

    The box inherits the previous size; yaw is the previous yaw plus the
    winning offset.
    """
    if len(proposals) == 0:
        raise ValueError("cannot select from an empty proposal set")
    scores = proposals.scores.data.reshape(-1)
    best = int(np.argmax(scores))  # argmax returns the first maximum
    center = proposals.centers.data[best].copy()
    yaw = normalize_angle(prev_box.yaw + float(proposals.yaw_offsets.data[best, 0]))
    return Box7(center, yaw, prev_box.size)


def forward_xrpn(inp: XRPNInput, w: XRPNWeights, cfg: AttentionConfig,
                 use_center_embedding: bool = True, training: bool = False,
                 rng=None) -> ProposalSet:
    """Full head: neighborhood, prior, combined embedding, attention, heads."""
    adjacency = center_neighborhood(inp.centers.data, inp.radius)
    center_mask = gaussian_center_mask(inp.centers, inp.prev_center, inp.sigma2)
    combined = embed_and_combine(inp.mask, center_mask, w, use_center_embedding)
    refined = local_attention(inp.feats, inp.coords, combined, adjacency, w, cfg,
                              training, rng)
    return propose(refined, inp.centers, w)
