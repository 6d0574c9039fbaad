"""Target-centric transformer: mask-fused global attention over both frames.

A stack of identical layers refines point features, the targetness mask and
per-point center votes together. Three interchangeable schemes inject the
mask embedding into the attention value path:

* ``vanilla``       adds the mask embedding to the value tokens
* ``semi_dropout``  splits value into a feature branch (dropout) and a mask
                    branch (no dropout), sharing attention weights
* ``gated``         transformed mask gates the features elementwise

With dropout disabled, vanilla and semi_dropout agree to rounding error
because attention output is linear in its value argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import tensor as tt
from .backbone import FeatureSet
from .tensor import Tensor

__all__ = [
    "VARIANTS",
    "AttentionConfig",
    "MLPHead",
    "LayerWeights",
    "LayerState",
    "positional_encoding",
    "multi_head_attention",
    "attention_sublayer_vanilla",
    "attention_sublayer_semi",
    "attention_sublayer_gated",
    "ffn_sublayer",
    "layer_forward",
    "transformer_forward",
]

VARIANTS = ("vanilla", "semi_dropout", "gated")


@dataclass(frozen=True)
class AttentionConfig:
    layers: int = 4
    heads: int = 2
    model_dim: int = 32
    key_dim: int = 16
    value_dim: int = 16
    ffn_dim: int = 64
    dropout: float = 0.1
    variant: str = "semi_dropout"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("need at least one transformer layer")
        if min(self.heads, self.model_dim, self.key_dim, self.value_dim, self.ffn_dim) < 1:
            raise ValueError("all attention dimensions must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")


@dataclass
class MLPHead:
    """One hidden ReLU layer, then a linear readout."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def apply(self, x: Tensor) -> Tensor:
        return tt.linear(tt.relu(tt.linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class LayerWeights:
    """All trainable tensors of one transformer layer."""

    wq: List[Tensor]  # heads x (C, d_k)
    wk: List[Tensor]
    wv: List[Tensor]  # heads x (C, d_v)
    wo: Tensor  # (heads*d_v, C)
    w1: Tensor  # (C, ffn)
    b1: Tensor
    w2: Tensor  # (ffn, C)
    b2: Tensor
    mask_embed_w: Tensor  # (1, C)
    mask_embed_b: Tensor  # (C,)
    ln_attn_g: Tensor
    ln_attn_b: Tensor
    ln_ffn_g: Tensor
    ln_ffn_b: Tensor
    mask_head: MLPHead
    center_head: MLPHead
    # gated variant only
    ln_gate_mask_g: Optional[Tensor] = None
    ln_gate_mask_b: Optional[Tensor] = None
    ln_gate_feat_g: Optional[Tensor] = None
    ln_gate_feat_b: Optional[Tensor] = None
    ln_gate_out_g: Optional[Tensor] = None
    ln_gate_out_b: Optional[Tensor] = None


@dataclass
class LayerState:
    feats: Tensor  # (N, C)
    mask: Tensor  # (N, 1), entries in [0, 1]
    centers: Tensor  # (N, 3)


def positional_encoding(coords: np.ndarray, dim: int) -> np.ndarray:
    """Fixed sinusoidal encoding of raw coordinates, one band set per axis.

    For axis value c and band j the pair (sin(c*f_j), cos(c*f_j)) is emitted
    with f_j = 10000 ** (-2j / (dim/3)); the three axis blocks are
    concatenated and truncated (or zero-padded) to ``dim`` columns.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    bands = max(1, math.ceil(dim / 6))
    freqs = 10000.0 ** (-2.0 * np.arange(bands) / (dim / 3.0))
    phase = coords[:, :, None] * freqs[None, None, :]  # (N, 3, bands)
    block = np.empty((n, 3, 2 * bands))
    block[:, :, 0::2] = np.sin(phase)
    block[:, :, 1::2] = np.cos(phase)
    flat = block.reshape(n, 6 * bands)
    if flat.shape[1] >= dim:
        return np.ascontiguousarray(flat[:, :dim])
    out = np.zeros((n, dim))
    out[:, : flat.shape[1]] = flat
    return out


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------

def _attention_rows(xq: Tensor, xk: Tensor, w: LayerWeights, cfg: AttentionConfig,
                    bias: Optional[Tensor] = None,
                    weights_out: Optional[list] = None) -> List[Tensor]:
    """Per-head softmax attention matrices for the given query/key tokens."""
    scale = 1.0 / math.sqrt(cfg.key_dim)
    rows = []
    for i in range(cfg.heads):
        q = tt.matmul(xq, w.wq[i])
        k = tt.matmul(xk, w.wk[i])
        scores = tt.matmul(q, k.T) * scale
        if bias is not None:
            scores = scores + bias
        a = tt.softmax_rows(scores)
        if weights_out is not None:
            weights_out.append(a.data)
        rows.append(a)
    return rows


def _apply_values(rows: Sequence[Tensor], xv: Tensor, w: LayerWeights) -> Tensor:
    heads = [tt.matmul(a, tt.matmul(xv, w.wv[i])) for i, a in enumerate(rows)]
    return tt.matmul(tt.concat(heads, axis=1), w.wo)


def multi_head_attention(xq: Tensor, xk: Tensor, xv: Tensor, w: LayerWeights,
                         cfg: AttentionConfig, bias: Optional[Tensor] = None,
                         weights_out: Optional[list] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, concatenated and projected."""
    rows = _attention_rows(xq, xk, w, cfg, bias, weights_out)
    return _apply_values(rows, xv, w)


def _mask_embedding(mask: Tensor, w: LayerWeights) -> Tensor:
    return tt.linear(mask, w.mask_embed_w, w.mask_embed_b)


def _normed_qk(x: Tensor, pe: Tensor, w: LayerWeights):
    xbar = tt.layer_norm(x, w.ln_attn_g, w.ln_attn_b)
    return xbar, xbar + pe


def attention_sublayer_vanilla(x: Tensor, mask: Tensor, pe: Tensor, w: LayerWeights,
                               cfg: AttentionConfig, training: bool = False,
                               rng=None) -> Tensor:
    """Mask embedding added to the value tokens, like a positional code."""
    xbar, xqk = _normed_qk(x, pe, w)
    xv = xbar + _mask_embedding(mask, w)
    mha = multi_head_attention(xqk, xqk, xv, w, cfg)
    return x + tt.dropout(mha, cfg.dropout, training, rng)


def attention_sublayer_semi(x: Tensor, mask: Tensor, pe: Tensor, w: LayerWeights,
                            cfg: AttentionConfig, training: bool = False,
                            rng=None) -> Tensor:
    """Feature and mask value branches under shared attention weights.

    Dropout touches only the feature branch, so targetness information
    survives training even when the object has very few points.
    """
    xbar, xqk = _normed_qk(x, pe, w)
    rows = _attention_rows(xqk, xqk, w, cfg)
    feat = _apply_values(rows, xbar, w)
    memb = _apply_values(rows, _mask_embedding(mask, w), w)
    return x + tt.dropout(feat, cfg.dropout, training, rng) + memb


def attention_sublayer_gated(x: Tensor, mask: Tensor, pe: Tensor, w: LayerWeights,
                             cfg: AttentionConfig, training: bool = False,
                             rng=None) -> Tensor:
    """Attention-transformed mask gates the features elementwise.

    The mask branch multiplies normalized features by attended copies of the
    column-repeated mask; the feature branch attends over pre-gated features
    and keeps a residual path. Both are normalized, summed and normalized.
    """
    xbar, xqk = _normed_qk(x, pe, w)
    c = xbar.shape[1]
    mbar = mask * Tensor(np.ones((1, c)))  # repeat the point mask across channels
    rows = _attention_rows(xqk, xqk, w, cfg)
    gate = _apply_values(rows, mbar, w)
    xm = tt.layer_norm(gate * xbar, w.ln_gate_mask_g, w.ln_gate_mask_b)
    xf = tt.layer_norm(_apply_values(rows, mbar * xbar, w) + xbar,
                       w.ln_gate_feat_g, w.ln_gate_feat_b)
    return tt.layer_norm(xf + xm, w.ln_gate_out_g, w.ln_gate_out_b)


_SUBLAYERS = {
    "vanilla": attention_sublayer_vanilla,
    "semi_dropout": attention_sublayer_semi,
    "gated": attention_sublayer_gated,
}


def ffn_sublayer(x: Tensor, w: LayerWeights, cfg: AttentionConfig,
                 training: bool = False, rng=None) -> Tensor:
    """x + Dropout(relu(LN(x) W1 + b1) W2 + b2)."""
    h = tt.layer_norm(x, w.ln_ffn_g, w.ln_ffn_b)
    h = tt.linear(tt.relu(tt.linear(h, w.w1, w.b1)), w.w2, w.b2)
    return x + tt.dropout(h, cfg.dropout, training, rng)


def layer_forward(state: LayerState, pe: Tensor, coords: Tensor, w: LayerWeights,
                  cfg: AttentionConfig, training: bool = False, rng=None) -> LayerState:
    """One full layer: attention + FFN, then fresh mask and center votes."""
    attn = _SUBLAYERS[cfg.variant]
    x = attn(state.feats, state.mask, pe, w, cfg, training, rng)
    x = ffn_sublayer(x, w, cfg, training, rng)
    mask = tt.sigmoid(w.mask_head.apply(x))
    centers = coords + w.center_head.apply(x)
    return LayerState(feats=x, mask=mask, centers=centers)


def transformer_forward(fs: FeatureSet, weights: Sequence[LayerWeights],
                        cfg: AttentionConfig, training: bool = False,
                        rng=None) -> List[LayerState]:
    """Run the full stack; every intermediate state is kept for supervision.

    Attention is global over all rows of both frames, which is what carries
    target cues from the previous frame into the current one.
    """
    if len(weights) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} weight sets, got {len(weights)}")
    pe = Tensor(positional_encoding(fs.coords, cfg.model_dim))
    coords = Tensor(fs.coords)
    state = LayerState(feats=fs.feats, mask=fs.mask, centers=coords)
    states = []
    for w in weights:
        state = layer_forward(state, pe, coords, w, cfg, training, rng)
        states.append(state)
    return states
