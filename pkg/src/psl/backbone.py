"""Wave-mixing vision MLP that encodes one frame into a fixed-size embedding.

Four hierarchical stages; each stage repeats [norm -> token mixer -> norm ->
channel MLP] with residual connections, and stages are bridged by a 2x2
neighboring-token merge plus linear projection.  The token mixer combines
two wave blocks (amplitude times learned cos/sin phase) and one channel
mixer in parallel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, DimensionError
from .tensorcore import Tensor


@dataclass
class BackboneConfig:
    image_size: int = 224
    patch_size: int = 16
    stage_depths: tuple = (3, 4, 18, 3)
    stage_dims: tuple = (64, 128, 320, 100)
    expansion: int = 4

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4:
            raise ConfigError(
                f"expected 4 stages, got depths {self.stage_depths}, dims {self.stage_dims}"
            )
        if any(d <= 0 for d in self.stage_depths + self.stage_dims):
            raise ConfigError("stage depths and dims must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}"
            )

    @classmethod
    def toy(cls):
        """Shrunk configuration for tests and toy experiments."""
        return cls(image_size=32, patch_size=4, stage_depths=(1, 1, 1, 1),
                   stage_dims=(8, 8, 8, 8), expansion=2)

    @property
    def grids(self):
        """Token grid edge per stage; odd grids are edge-replicated before merging."""
        g = self.image_size // self.patch_size
        out = [g]
        for _ in range(3):
            g = (g + 1) // 2
            out.append(g)
        return tuple(out)

    @property
    def token_counts(self):
        return tuple(g * g for g in self.grids)

    @property
    def out_dim(self):
        return self.stage_dims[-1]


@dataclass
class FrameTokens:
    """Token matrix for one frame (or a batch stacked on leading axes)."""

    tokens: Tensor

    @property
    def count(self):
        return self.tokens.shape[-2]

    @property
    def dim(self):
        return self.tokens.shape[-1]


@dataclass
class ChannelMixerParams:
    w_c: Tensor
    bias: Tensor


@dataclass
class WaveBlockParams:
    w_t: Tensor
    w_i: Tensor
    w_c_phase: Tensor


@dataclass
class TokenMixerParams:
    wave1: WaveBlockParams
    wave2: WaveBlockParams
    channel: ChannelMixerParams
    reproj: ChannelMixerParams


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor


@dataclass
class MlpParams:
    fc1: ChannelMixerParams
    fc2: ChannelMixerParams


@dataclass
class StageBlockParams:
    ln1: LayerNormParams
    mixer: TokenMixerParams
    ln2: LayerNormParams
    mlp: MlpParams


def _linear_params(rng, d_out, d_in):
    scale = 1.0 / math.sqrt(d_in)
    w = Tensor(rng.normal(0.0, scale, size=(d_out, d_in)), requires_grad=True)
    b = Tensor(np.zeros(d_out), requires_grad=True)
    return ChannelMixerParams(w, b)


def _wave_params(rng, n, d):
    scale_t = 1.0 / math.sqrt(n)
    scale_p = 1.0 / math.sqrt(d)
    return WaveBlockParams(
        w_t=Tensor(rng.normal(0.0, scale_t, size=(n, n)), requires_grad=True),
        w_i=Tensor(rng.normal(0.0, scale_t, size=(n, n)), requires_grad=True),
        w_c_phase=Tensor(rng.normal(0.0, scale_p, size=(d, d)), requires_grad=True),
    )


def _ln_params(d):
    return LayerNormParams(
        gain=Tensor(np.ones(d), requires_grad=True),
        bias=Tensor(np.zeros(d), requires_grad=True),
    )


# -- spec-level operations -------------------------------------------------


def extract_patches(frame, patch_size):
    """(.., 3, H, W) -> (.., n, 3*p*p) raw raster-order patches."""
    frame = frame.tokens if isinstance(frame, FrameTokens) else frame
    *lead, c, h, w = frame.shape
    p = patch_size
    if h % p or w % p:
        raise DimensionError(
            f"frame extents {(h, w)} not divisible by patch size {p}"
        )
    gh, gw = h // p, w // p
    nl = len(lead)
    x = tc.reshape(frame, (*lead, c, gh, p, gw, p))
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl, nl + 2, nl + 4)
    x = tc.transpose(x, axes)  # (.., gh, gw, c, p, p)
    return tc.reshape(x, (*lead, gh * gw, c * p * p))


def patch_partition(frame, patch_size, proj):
    """Split a frame into tokens and project them to the stage-1 dimension."""
    patches = extract_patches(frame, patch_size)
    return FrameTokens(_apply_linear(patches, proj))


def _apply_linear(tokens, p: ChannelMixerParams):
    if tokens.ndim == 1:
        row = tc.reshape(tokens, (1, tokens.shape[0]))
        out = tc.add(tc.matmul(row, tc.transpose(p.w_c, (1, 0))), p.bias)
        return tc.reshape(out, (out.shape[-1],))
    return tc.add(tc.matmul(tokens, tc.transpose(p.w_c, (1, 0))), p.bias)


def channel_mix(tokens, params: ChannelMixerParams):
    """Per-token linear map across channels; token order is preserved."""
    t = tokens.tokens if isinstance(tokens, FrameTokens) else tokens
    if t.shape[-1] != params.w_c.shape[-1]:
        raise DimensionError(
            f"channel_mix: token dim {t.shape[-1]} != weight input dim {params.w_c.shape[-1]}"
        )
    out = _apply_linear(t, params)
    return FrameTokens(out) if isinstance(tokens, FrameTokens) else out


def wave_block(tokens, params: WaveBlockParams):
    """Two-branch wave mixing: sum_k W_t[j,k] f_k*cos(phase_k) + W_i[j,k] f_k*sin(phase_k).

    The phase of token k is a learned linear map of the token itself; the
    amplitude uses the raw token values (no absolute value).
    """
    t = tokens.tokens if isinstance(tokens, FrameTokens) else tokens
    n, d = t.shape[-2], t.shape[-1]
    if params.w_t.shape != (n, n) or params.w_i.shape != (n, n):
        raise DimensionError(
            f"wave_block: token weights {params.w_t.shape} do not match {n} tokens"
        )
    if params.w_c_phase.shape != (d, d):
        raise DimensionError(
            f"wave_block: phase weights {params.w_c_phase.shape} do not match dim {d}"
        )
    theta = tc.matmul(t, tc.transpose(params.w_c_phase, (1, 0)))
    real = tc.mul(t, tc.cos(theta))
    imag = tc.mul(t, tc.sin(theta))
    out = tc.add(tc.matmul(params.w_t, real), tc.matmul(params.w_i, imag))
    return FrameTokens(out) if isinstance(tokens, FrameTokens) else out


def _token_mixer_core(t, params: TokenMixerParams):
    branches = tc.add(
        tc.add(wave_block(t, params.wave1), wave_block(t, params.wave2)),
        channel_mix(t, params.channel),
    )
    return _apply_linear(branches, params.reproj)


def token_mixer(tokens, params: TokenMixerParams):
    """Parallel [wave, wave, channel] branches, re-projected, with residual."""
    t = tokens.tokens if isinstance(tokens, FrameTokens) else tokens
    out = tc.add(t, _token_mixer_core(t, params))
    return FrameTokens(out) if isinstance(tokens, FrameTokens) else out


def _merge_tokens(tokens, grid, proj: ChannelMixerParams):
    """2x2 neighboring-token merge (edge-replicated when the grid is odd)."""
    *lead, n, d = tokens.shape
    h = w = grid
    if n != h * w:
        raise DimensionError(f"token count {n} does not match grid {grid}x{grid}")
    hp = h + (h % 2)
    wp = w + (w % 2)
    if (hp, wp) != (h, w):
        lead_n = int(np.prod(lead)) if lead else 1
        li = np.arange(lead_n).reshape(-1, 1, 1, 1)
        ri = np.minimum(np.arange(hp), h - 1).reshape(1, -1, 1, 1)
        ci = np.minimum(np.arange(wp), w - 1).reshape(1, 1, -1, 1)
        di = np.arange(d).reshape(1, 1, 1, -1)
        idx = ((li * h + ri) * w + ci) * d + di
        tokens = tc.take(tokens, idx, (*lead, hp * wp, d))
    nl = len(lead)
    x = tc.reshape(tokens, (*lead, hp // 2, 2, wp // 2, 2, d))
    axes = tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4)
    x = tc.transpose(x, axes)
    x = tc.reshape(x, (*lead, (hp // 2) * (wp // 2), 4 * d))
    return _apply_linear(x, proj)


class WaveMlpBackbone:
    """Frame encoder; forward maps (.., 3, H, W) to a (.., d) embedding."""

    def __init__(self, cfg: BackboneConfig, rng):
        self.cfg = cfg
        dims = cfg.stage_dims
        counts = cfg.token_counts
        self.stem = _linear_params(rng, dims[0], 3 * cfg.patch_size ** 2)
        self.stages = []
        self.transitions = []
        for s in range(4):
            n, d = counts[s], dims[s]
            blocks = []
            for _ in range(cfg.stage_depths[s]):
                blocks.append(
                    StageBlockParams(
                        ln1=_ln_params(d),
                        mixer=TokenMixerParams(
                            wave1=_wave_params(rng, n, d),
                            wave2=_wave_params(rng, n, d),
                            channel=_linear_params(rng, d, d),
                            reproj=_linear_params(rng, d, d),
                        ),
                        ln2=_ln_params(d),
                        mlp=MlpParams(
                            fc1=_linear_params(rng, cfg.expansion * d, d),
                            fc2=_linear_params(rng, d, cfg.expansion * d),
                        ),
                    )
                )
            self.stages.append(blocks)
            if s < 3:
                self.transitions.append(_linear_params(rng, dims[s + 1], 4 * d))

    def forward(self, frames):
        cfg = self.cfg
        single = frames.ndim == 3
        if single:
            frames = tc.reshape(frames, (1, *frames.shape))
        if frames.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise DimensionError(
                f"backbone expects {cfg.image_size}x{cfg.image_size} frames, got {frames.shape}"
            )
        x = patch_partition(frames, cfg.patch_size, self.stem).tokens
        for s, blocks in enumerate(self.stages):
            expected = cfg.token_counts[s]
            if x.shape[-2] != expected:
                raise DimensionError(
                    f"stage {s}: token count {x.shape[-2]} != expected {expected}"
                )
            for block in blocks:
                normed = tc.layernorm(x, block.ln1.gain, block.ln1.bias)
                x = tc.add(x, _token_mixer_core(normed, block.mixer))
                normed = tc.layernorm(x, block.ln2.gain, block.ln2.bias)
                hidden = tc.gelu(_apply_linear(normed, block.mlp.fc1))
                x = tc.add(x, _apply_linear(hidden, block.mlp.fc2))
            if s < 3:
                x = _merge_tokens(x, cfg.grids[s], self.transitions[s])
        out = tc.mean(x, axis=-2)
        if single:
            out = tc.reshape(out, (out.shape[-1],))
        return out

    def params(self):
        """Ordered name -> Tensor mapping (checkpoint layout)."""
        out = {"stem.w": self.stem.w_c, "stem.b": self.stem.bias}
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                prefix = f"stage{s}.block{b}"
                out[f"{prefix}.ln1.gain"] = blk.ln1.gain
                out[f"{prefix}.ln1.bias"] = blk.ln1.bias
                for wname, wave in (("wave1", blk.mixer.wave1), ("wave2", blk.mixer.wave2)):
                    out[f"{prefix}.mixer.{wname}.w_t"] = wave.w_t
                    out[f"{prefix}.mixer.{wname}.w_i"] = wave.w_i
                    out[f"{prefix}.mixer.{wname}.w_c_phase"] = wave.w_c_phase
                out[f"{prefix}.mixer.channel.w"] = blk.mixer.channel.w_c
                out[f"{prefix}.mixer.channel.b"] = blk.mixer.channel.bias
                out[f"{prefix}.mixer.reproj.w"] = blk.mixer.reproj.w_c
                out[f"{prefix}.mixer.reproj.b"] = blk.mixer.reproj.bias
                out[f"{prefix}.ln2.gain"] = blk.ln2.gain
                out[f"{prefix}.ln2.bias"] = blk.ln2.bias
                out[f"{prefix}.mlp.fc1.w"] = blk.mlp.fc1.w_c
                out[f"{prefix}.mlp.fc1.b"] = blk.mlp.fc1.bias
                out[f"{prefix}.mlp.fc2.w"] = blk.mlp.fc2.w_c
                out[f"{prefix}.mlp.fc2.b"] = blk.mlp.fc2.bias
            if s < 3:
                out[f"transition{s}.w"] = self.transitions[s].w_c
                out[f"transition{s}.b"] = self.transitions[s].bias
        return out

    def num_params(self):
        return sum(int(t.size) for t in self.params().values())


def backbone_forward(frames, model: WaveMlpBackbone):
    return model.forward(frames)


def count_params(cfg: BackboneConfig):
    """Closed-form parameter count for the configured backbone."""
    dims, counts, e = cfg.stage_dims, cfg.token_counts, cfg.expansion
    total = 3 * cfg.patch_size ** 2 * dims[0] + dims[0]  # stem
    for s in range(4):
        n, d = counts[s], dims[s]
        per_block = (
            2 * d  # ln1
            + 2 * (2 * n * n + d * d)  # two wave blocks
            + (d * d + d)  # channel branch
            + (d * d + d)  # re-projection
            + 2 * d  # ln2
            + (d * e * d + e * d) + (e * d * d + d)  # MLP
        )
        total += cfg.stage_depths[s] * per_block
    for s in range(3):
        total += 4 * dims[s] * dims[s + 1] + dims[s + 1]
    return total
