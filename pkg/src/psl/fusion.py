"""Video-level embedding assembly, weighted modality fusion, and the
embedding-space augmentations (polarity inversion + noise, span masking)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError, DimensionError
from .tensorcore import Tensor

RGB = "RGB"
THERMAL = "THERMAL"
FUSED = "FUSED"

LABELS = ("NP", "P1", "P2", "P3", "P4")

FUSION_NONE = "NONE"
FUSION_W2 = "W2"
FUSION_W3 = "W3"


@dataclass
class VideoEmbedding:
    values: Tensor
    modality: str
    subject_id: str
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"unknown pain label {self.label!r}; expected one of {LABELS}")
        if self.modality not in (RGB, THERMAL, FUSED):
            raise ContractError(f"unknown modality {self.modality!r}")


@dataclass
class FusionWeights:
    mode: str = FUSION_W2
    w1: Optional[Tensor] = None
    w2: Optional[Tensor] = None
    w3: Optional[Tensor] = None

    def __post_init__(self):
        if self.mode not in (FUSION_NONE, FUSION_W2, FUSION_W3):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if self.mode == FUSION_NONE:
            self.w1 = self.w2 = self.w3 = None
            return
        if self.w1 is None:
            self.w1 = Tensor(1.0, requires_grad=True)
        if self.w2 is None:
            self.w2 = Tensor(1.0, requires_grad=True)
        if self.mode == FUSION_W3 and self.w3 is None:
            self.w3 = Tensor(1.0, requires_grad=True)
        if self.mode == FUSION_W2:
            self.w3 = None

    def params(self):
        out = {}
        if self.w1 is not None:
            out["fusion.w1"] = self.w1
        if self.w2 is not None:
            out["fusion.w2"] = self.w2
        if self.w3 is not None:
            out["fusion.w3"] = self.w3
        return out


@dataclass
class AugmentConfig:
    p_aug: float = 0.7
    mask_lo: float = 0.1
    mask_hi: float = 0.5
    noise_scale: float = 0.05  # relative to the embedding RMS

    def __post_init__(self):
        if not 0.0 <= self.p_aug <= 1.0:
            raise ConfigError(f"p_aug must lie in [0,1], got {self.p_aug}")
        if not 0.0 <= self.mask_lo <= self.mask_hi <= 1.0:
            raise ConfigError(
                f"mask bounds must satisfy 0 <= lo <= hi <= 1, got [{self.mask_lo}, {self.mask_hi}]"
            )
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be >= 0")


def concat_frames(frame_embs, modality, subject_id, label):
    """Concatenate per-frame embeddings (order preserved) into one vector."""
    if not frame_embs:
        raise DimensionError("concat_frames needs at least one frame embedding")
    d = frame_embs[0].shape[-1]
    for e in frame_embs:
        if e.ndim != 1 or e.shape[0] != d:
            raise DimensionError(
                f"ragged frame embeddings: expected length {d}, got shape {e.shape}"
            )
    values = frame_embs[0] if len(frame_embs) == 1 else tc.concat(frame_embs, axis=0)
    return VideoEmbedding(values, modality, subject_id, label)


def fuse(rgb: VideoEmbedding, thermal: VideoEmbedding, w: FusionWeights):
    """Weighted sum of the RGB and thermal video embeddings."""
    if rgb.modality != RGB or thermal.modality != THERMAL:
        raise ContractError(
            f"fuse expects (RGB, THERMAL) inputs, got ({rgb.modality}, {thermal.modality})"
        )
    if rgb.values.shape != thermal.values.shape:
        raise ContractError(
            f"fuse: embedding lengths differ: {rgb.values.shape} vs {thermal.values.shape}"
        )
    if w.mode == FUSION_NONE:
        fused = tc.add(rgb.values, thermal.values)
    else:
        fused = tc.add(tc.mul(w.w1, rgb.values), tc.mul(w.w2, thermal.values))
        if w.mode == FUSION_W3:
            fused = tc.mul(w.w3, fused)
    return VideoEmbedding(fused, FUSED, rgb.subject_id, rgb.label)


def _with_values(e: VideoEmbedding, values):
    return VideoEmbedding(values, e.modality, e.subject_id, e.label)


def augment_basic(e: VideoEmbedding, noise_scale, rng):
    """Polarity inversion plus Gaussian noise scaled by the embedding RMS."""
    if noise_scale < 0:
        raise ConfigError("noise_scale must be >= 0")
    values = tc.neg(e.values)
    if noise_scale > 0:
        rms = math.sqrt(float(np.mean(e.values.data ** 2)))
        noise = rng.normal(0.0, noise_scale * rms, size=e.values.shape)
        values = tc.add(values, Tensor(noise.astype(e.values.data.dtype)))
    return _with_values(e, values)


def draw_mask_span(n, mask_lo, mask_hi, rng):
    """Sample (start, length) of the contiguous zero span for an n-vector."""
    lo_len = math.ceil(mask_lo * n)
    hi_len = math.floor(mask_hi * n)
    if hi_len < lo_len:
        hi_len = lo_len
    length = int(rng.integers(lo_len, hi_len + 1))
    if length >= n and length > 0:
        raise ContractError(f"mask span {length} covers the whole embedding of size {n}")
    start = int(rng.integers(0, n - length + 1)) if length else 0
    return start, length


def augment_mask(e: VideoEmbedding, mask_lo, mask_hi, rng):
    """Zero one contiguous random span covering mask_lo..mask_hi of the vector."""
    if not 0.0 <= mask_lo <= mask_hi <= 1.0:
        raise ConfigError(f"invalid mask bounds [{mask_lo}, {mask_hi}]")
    n = e.values.shape[0]
    start, length = draw_mask_span(n, mask_lo, mask_hi, rng)
    if length == 0:
        return _with_values(e, e.values)
    mask = np.ones(n, dtype=e.values.data.dtype)
    mask[start : start + length] = 0.0
    return _with_values(e, tc.mul(e.values, Tensor(mask)))


def apply_augmentations(e: VideoEmbedding, cfg: AugmentConfig, rng, training=True):
    """Basic then Masking, each gated by an independent Bernoulli(p_aug) draw.

    Identity outside training mode.
    """
    if not training or cfg.p_aug == 0.0:
        return e
    if rng.random() < cfg.p_aug:
        e = augment_basic(e, cfg.noise_scale, rng)
    if rng.random() < cfg.p_aug:
        e = augment_mask(e, cfg.mask_lo, cfg.mask_hi, rng)
    return e


def augment_batch(values: Tensor, cfg: AugmentConfig, rng, training=True):
    """Row-wise augmentation of a (V, N) embedding batch.

    Matches apply_augmentations applied per row with the same rng stream,
    but performs the arithmetic as two batched tensor ops.
    """
    if not training or cfg.p_aug == 0.0:
        return values
    v, n = values.shape
    scale = np.ones((v, n), dtype=values.data.dtype)
    offset = np.zeros((v, n), dtype=values.data.dtype)
    for i in range(v):
        row_scale = 1.0
        if rng.random() < cfg.p_aug:
            row_scale = -1.0
            if cfg.noise_scale > 0:
                rms = math.sqrt(float(np.mean(values.data[i] ** 2)))
                offset[i] = rng.normal(0.0, cfg.noise_scale * rms, size=n)
        scale[i] *= row_scale
        if rng.random() < cfg.p_aug:
            start, length = draw_mask_span(n, cfg.mask_lo, cfg.mask_hi, rng)
            if length:
                scale[i, start : start + length] = 0.0
                offset[i, start : start + length] = 0.0
    return tc.add(tc.mul(values, Tensor(scale)), Tensor(offset))
