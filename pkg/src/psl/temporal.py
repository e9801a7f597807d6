"""Temporal module over fused video embeddings.

Four blocks, each pairing single-head self-attention over the M frame
tokens with 8-head cross-attention from a small array of learned latent
queries (N < M).  Block outputs are averaged ("parallel" layout; a
sequential stack is available behind ``parallel=False``), mean-pooled and
projected to the output embedding, then classified by a linear head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .backbone import ChannelMixerParams, LayerNormParams, _apply_linear, _linear_params, _ln_params
from .errors import ConfigError, DimensionError
from .tensorcore import Tensor


@dataclass
class TemporalConfig:
    num_frames: int = 16          # M tokens per video
    channel_dim: int = 100        # C, per-frame embedding size
    latent_count: int = 8         # N latent queries, defaults to M/2
    num_blocks: int = 4
    self_heads: int = 1
    cross_heads: int = 8
    out_dim: int = 340
    num_classes: int = 2
    parallel: bool = True

    def __post_init__(self):
        if self.latent_count is None:
            self.latent_count = max(1, self.num_frames // 2)
        if self.latent_count >= self.num_frames:
            raise ConfigError(
                f"latent count {self.latent_count} must be < frame count {self.num_frames}"
            )
        # attention projects to heads * ceil(C / heads) internally, so C need
        # not divide evenly (the default C=100 with 8 heads would otherwise
        # be unrepresentable)
        if self.out_dim <= 0:
            raise ConfigError("out_dim must be positive")
        if self.num_classes not in (2, 5):
            raise ConfigError(f"num_classes must be 2 or 5, got {self.num_classes}")

    @classmethod
    def toy(cls, num_frames=4, channel_dim=8, num_classes=2):
        return cls(num_frames=num_frames, channel_dim=channel_dim,
                   latent_count=max(1, num_frames // 2), num_classes=num_classes)


@dataclass
class AttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


@dataclass
class LatentQueries:
    values: Tensor


@dataclass
class BlockParams:
    ln_self: LayerNormParams
    self_attn: AttentionParams
    ln_cross: LayerNormParams
    cross_attn: AttentionParams
    latents: LatentQueries


def attention_width(c, heads):
    """Internal projection width: smallest multiple of ``heads`` >= C."""
    return heads * ((c + heads - 1) // heads)


def _attention_params(rng, c, heads=1):
    a = attention_width(c, heads)
    scale = 1.0 / math.sqrt(c)
    w_q = Tensor(rng.normal(0.0, scale, size=(a, c)), requires_grad=True)
    w_k = Tensor(rng.normal(0.0, scale, size=(a, c)), requires_grad=True)
    w_v = Tensor(rng.normal(0.0, scale, size=(a, c)), requires_grad=True)
    w_o = Tensor(rng.normal(0.0, 1.0 / math.sqrt(a), size=(c, a)), requires_grad=True)
    return AttentionParams(w_q, w_k, w_v, w_o)


def _split_heads(x, heads):
    *lead, m, c = x.shape
    dk = c // heads
    nl = len(lead)
    x = tc.reshape(x, (*lead, m, heads, dk))
    return tc.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))


def _merge_heads(x):
    *lead, heads, m, dk = x.shape
    nl = len(lead)
    x = tc.transpose(x, tuple(range(nl)) + (nl + 1, nl, nl + 2))
    return tc.reshape(x, (*lead, m, heads * dk))


def attention(q, k, v, heads, params: AttentionParams):
    """Scaled dot-product attention with ``heads`` heads and output projection."""
    c = q.shape[-1]
    a = params.w_q.shape[0]
    if a % heads != 0:
        raise ConfigError(f"attention width {a} not divisible by {heads} heads")
    if k.shape[-1] != c or v.shape[-1] != c:
        raise DimensionError(
            f"attention: channel dims differ: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(
            f"attention: key count {k.shape[-2]} != value count {v.shape[-2]}"
        )
    dk = a // heads
    qh = _split_heads(tc.matmul(q, tc.transpose(params.w_q, (1, 0))), heads)
    kh = _split_heads(tc.matmul(k, tc.transpose(params.w_k, (1, 0))), heads)
    vh = _split_heads(tc.matmul(v, tc.transpose(params.w_v, (1, 0))), heads)
    scores = tc.mul(tc.matmul(qh, tc._mT(kh)), 1.0 / math.sqrt(dk))
    weights = tc.softmax(scores, axis=-1)
    mixed = _merge_heads(tc.matmul(weights, vh))
    return tc.matmul(mixed, tc.transpose(params.w_o, (1, 0)))


class TemporalTransformer:
    """Maps a flat (.., M*C) video embedding to a (.., out_dim) vector."""

    def __init__(self, cfg: TemporalConfig, rng):
        self.cfg = cfg
        c = cfg.channel_dim
        self.blocks = []
        for _ in range(cfg.num_blocks):
            self.blocks.append(
                BlockParams(
                    ln_self=_ln_params(c),
                    self_attn=_attention_params(rng, c, cfg.self_heads),
                    ln_cross=_ln_params(c),
                    cross_attn=_attention_params(rng, c, cfg.cross_heads),
                    latents=LatentQueries(
                        Tensor(rng.normal(0.0, 1.0 / math.sqrt(c),
                                          size=(cfg.latent_count, c)),
                               requires_grad=True)
                    ),
                )
            )
        self.out_proj = _linear_params(rng, cfg.out_dim, c)
        self.head = _linear_params(rng, cfg.num_classes, cfg.out_dim)

    def forward(self, video_emb):
        cfg = self.cfg
        m, c = cfg.num_frames, cfg.channel_dim
        *lead, total = video_emb.shape
        if total != m * c:
            raise DimensionError(
                f"temporal input length {total} != M*C = {m}*{c}"
            )
        x = tc.reshape(video_emb, (*lead, m, c))
        latent_outputs = []
        for block in self.blocks:
            normed = tc.layernorm(x, block.ln_self.gain, block.ln_self.bias)
            y = tc.add(x, attention(normed, normed, normed, cfg.self_heads,
                                    block.self_attn))
            keys = tc.layernorm(y, block.ln_cross.gain, block.ln_cross.bias)
            lat = tc.add(
                block.latents.values,
                attention(block.latents.values, keys, keys, cfg.cross_heads,
                          block.cross_attn),
            )
            latent_outputs.append(lat)
            if not cfg.parallel:
                x = y
        if cfg.parallel:
            acc = latent_outputs[0]
            for lat in latent_outputs[1:]:
                acc = tc.add(acc, lat)
            lat = tc.mul(acc, 1.0 / len(latent_outputs))
        else:
            lat = latent_outputs[-1]
        pooled = tc.mean(lat, axis=-2)
        return _apply_linear(pooled, self.out_proj)

    def classify(self, video_emb):
        return classify(self.forward(video_emb), self.head)

    def params(self):
        out = {}
        for i, blk in enumerate(self.blocks):
            p = f"block{i}"
            out[f"{p}.ln_self.gain"] = blk.ln_self.gain
            out[f"{p}.ln_self.bias"] = blk.ln_self.bias
            out[f"{p}.ln_cross.gain"] = blk.ln_cross.gain
            out[f"{p}.ln_cross.bias"] = blk.ln_cross.bias
            for name, attn in (("self", blk.self_attn), ("cross", blk.cross_attn)):
                out[f"{p}.{name}.w_q"] = attn.w_q
                out[f"{p}.{name}.w_k"] = attn.w_k
                out[f"{p}.{name}.w_v"] = attn.w_v
                out[f"{p}.{name}.w_o"] = attn.w_o
            out[f"{p}.latents"] = blk.latents.values
        out["out_proj.w"] = self.out_proj.w_c
        out["out_proj.b"] = self.out_proj.bias
        out["head.w"] = self.head.w_c
        out["head.b"] = self.head.bias
        return out

    def num_params(self):
        return sum(int(t.size) for t in self.params().values())


def temporal_forward(video_emb, model: TemporalTransformer):
    return model.forward(video_emb)


def classify(emb, head: ChannelMixerParams):
    """Linear head followed by softmax; probabilities sum to 1."""
    logits = _apply_linear(emb, head)
    return tc.softmax(logits, axis=-1)


def count_params(cfg: TemporalConfig):
    """Closed-form parameter count for the temporal module + classifier head."""
    c = cfg.channel_dim
    a_self = attention_width(c, cfg.self_heads)
    a_cross = attention_width(c, cfg.cross_heads)
    per_block = (
        2 * c + 2 * c                          # two layer norms
        + 4 * a_self * c + 4 * a_cross * c     # q/k/v/o projections per attention
        + cfg.latent_count * c                 # latent queries
    )
    total = cfg.num_blocks * per_block
    total += cfg.out_dim * c + cfg.out_dim
    total += cfg.num_classes * cfg.out_dim + cfg.num_classes
    return total
