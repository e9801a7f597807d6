"""Paired RGB -> thermal translation GAN.

Generator: two strided downsampling convolutions, nine shape-preserving
residual blocks (dropout noise inside), two transposed convolutions back to
the input resolution, tanh output.  Discriminator: pixel-level PatchGAN with
two 1x1 convolutions over the channel-concatenated (source, candidate) pair.
The adversarial loss is the sigmoid-log form; an interpolate gradient
penalty (double backward) is added to the discriminator objective.  A pure
critic mode (no sigmoid) is available behind ``critic_mode``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError, DimensionError
from .tensorcore import Tensor

LOG_EPS = 1e-8


@dataclass
class GanConfig:
    image_size: int = 256
    base_channels: int = 64
    disc_channels: int = 64
    num_res_blocks: int = 9
    dropout: float = 0.5
    penalty_coeff: float = 10.0  # gradient-penalty weight, WGAN-GP convention
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    critic_mode: bool = False

    def __post_init__(self):
        if self.penalty_coeff < 0:
            raise ConfigError(f"penalty coefficient must be >= 0, got {self.penalty_coeff}")
        if self.image_size % 4 != 0:
            raise ConfigError("image size must be divisible by the 4x downsampling factor")

    @classmethod
    def toy(cls):
        """Desk-scale setup: small images, shallow stacks, and a fast
        discriminator (lr_d >> lr_g) so the color-mapping toy task converges
        within a couple hundred steps."""
        return cls(image_size=64, base_channels=8, disc_channels=8,
                   num_res_blocks=2, dropout=0.0, penalty_coeff=1.0,
                   lr_g=1e-3, lr_d=5e-2)


@dataclass
class ImagePair:
    source: Tensor  # RGB, values in [-1, 1]
    target: Tensor  # thermal, values in [-1, 1]

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ContractError(
                f"paired images must share extents: {self.source.shape} vs {self.target.shape}"
            )


def _conv_params(rng, c_out, c_in, k):
    scale = 1.0 / math.sqrt(c_in * k * k)
    w = Tensor(rng.normal(0.0, scale, size=(c_out, c_in, k, k)), requires_grad=True)
    b = Tensor(np.zeros(c_out), requires_grad=True)
    return w, b


def _norm_params(c):
    return (Tensor(np.ones(c), requires_grad=True),
            Tensor(np.zeros(c), requires_grad=True))


def instance_norm(x, gain, bias, eps=1e-5):
    """Normalize each (sample, channel) plane over its spatial extent."""
    mu = tc.mean(x, axis=(-2, -1), keepdims=True)
    centered = tc.add(x, tc.neg(mu))
    var = tc.mean(tc.mul(centered, centered), axis=(-2, -1), keepdims=True)
    normed = tc.mul(centered, tc.pow_(tc.add(var, eps), -0.5))
    g = tc.reshape(gain, (1, gain.shape[0], 1, 1))
    b = tc.reshape(bias, (1, bias.shape[0], 1, 1))
    return tc.add(tc.mul(normed, g), b)


def leaky_relu(x, slope=0.2):
    return tc.add(tc.relu(x), tc.mul(-slope, tc.relu(tc.neg(x))))


def _bias4(b):
    return tc.reshape(b, (1, b.shape[0], 1, 1))


class GeneratorParams:
    """Encoder (2 strided convs) + N residual blocks + decoder (2 transposed convs)."""

    def __init__(self, cfg: GanConfig, rng):
        self.cfg = cfg
        c = cfg.base_channels
        self.enc1_w, self.enc1_b = _conv_params(rng, c, 3, 4)
        self.enc1_g, self.enc1_bn = _norm_params(c)
        self.enc2_w, self.enc2_b = _conv_params(rng, 2 * c, c, 4)
        self.enc2_g, self.enc2_bn = _norm_params(2 * c)
        self.res = []
        for _ in range(cfg.num_res_blocks):
            w1, b1 = _conv_params(rng, 2 * c, 2 * c, 3)
            g1, n1 = _norm_params(2 * c)
            w2, b2 = _conv_params(rng, 2 * c, 2 * c, 3)
            g2, n2 = _norm_params(2 * c)
            self.res.append((w1, b1, g1, n1, w2, b2, g2, n2))
        # transposed-conv weights are (C_in, C_out, kh, kw); bias sized to C_out
        self.dec1_w, _ = _conv_params(rng, 2 * c, c, 4)
        self.dec1_b = Tensor(np.zeros(c), requires_grad=True)
        self.dec1_g, self.dec1_bn = _norm_params(c)
        self.dec2_w, _ = _conv_params(rng, c, 3, 4)
        self.dec2_b = Tensor(np.zeros(3), requires_grad=True)

    def params(self):
        out = {
            "g.enc1.w": self.enc1_w, "g.enc1.b": self.enc1_b,
            "g.enc1.gain": self.enc1_g, "g.enc1.bias": self.enc1_bn,
            "g.enc2.w": self.enc2_w, "g.enc2.b": self.enc2_b,
            "g.enc2.gain": self.enc2_g, "g.enc2.bias": self.enc2_bn,
        }
        for i, (w1, b1, g1, n1, w2, b2, g2, n2) in enumerate(self.res):
            out[f"g.res{i}.w1"] = w1
            out[f"g.res{i}.b1"] = b1
            out[f"g.res{i}.gain1"] = g1
            out[f"g.res{i}.bias1"] = n1
            out[f"g.res{i}.w2"] = w2
            out[f"g.res{i}.b2"] = b2
            out[f"g.res{i}.gain2"] = g2
            out[f"g.res{i}.bias2"] = n2
        out.update({
            "g.dec1.w": self.dec1_w, "g.dec1.b": self.dec1_b,
            "g.dec1.gain": self.dec1_g, "g.dec1.bias": self.dec1_bn,
            "g.dec2.w": self.dec2_w, "g.dec2.b": self.dec2_b,
        })
        return out


class DiscriminatorParams:
    """Two 1x1 convolutions over the 6-channel (source, candidate) stack."""

    def __init__(self, cfg: GanConfig, rng):
        self.cfg = cfg
        c = cfg.disc_channels
        self.w1, self.b1 = _conv_params(rng, c, 6, 1)
        self.w2, self.b2 = _conv_params(rng, 1, c, 1)

    def params(self):
        return {"d.conv1.w": self.w1, "d.conv1.b": self.b1,
                "d.conv2.w": self.w2, "d.conv2.b": self.b2}


def generator_forward(x, g: GeneratorParams, rng=None, training=False):
    """Translate (B,3,H,W) source images; output in [-1,1] with tanh."""
    single = x.ndim == 3
    if single:
        x = tc.reshape(x, (1, *x.shape))
    if tc.debug_enabled() and (np.max(x.data) > 1.0 + 1e-6 or np.min(x.data) < -1.0 - 1e-6):
        raise ContractError("generator input outside [-1, 1]")
    h = tc.conv2d(x, g.enc1_w, stride=2, pad=1)
    h = tc.relu(instance_norm(tc.add(h, _bias4(g.enc1_b)), g.enc1_g, g.enc1_bn))
    h = tc.conv2d(h, g.enc2_w, stride=2, pad=1)
    h = tc.relu(instance_norm(tc.add(h, _bias4(g.enc2_b)), g.enc2_g, g.enc2_bn))
    drop = g.cfg.dropout
    for w1, b1, g1, n1, w2, b2, g2, n2 in g.res:
        r = tc.conv2d(h, w1, stride=1, pad=1)
        r = tc.relu(instance_norm(tc.add(r, _bias4(b1)), g1, n1))
        if training and rng is not None and drop > 0:
            keep = (rng.random(size=r.shape) >= drop).astype(r.data.dtype) / (1.0 - drop)
            r = tc.mul(r, Tensor(keep))
        r = tc.conv2d(r, w2, stride=1, pad=1)
        r = instance_norm(tc.add(r, _bias4(b2)), g2, n2)
        h = tc.add(h, r)  # residual blocks preserve shape
    h = tc.conv_transpose2d(h, g.dec1_w, stride=2, pad=1)
    h = tc.relu(instance_norm(tc.add(h, _bias4(g.dec1_b)), g.dec1_g, g.dec1_bn))
    h = tc.conv_transpose2d(h, g.dec2_w, stride=2, pad=1)
    out = tc.tanh(tc.add(h, _bias4(g.dec2_b)))
    if single:
        out = tc.reshape(out, out.shape[1:])
    return out


def discriminator_forward(x, y, d: DiscriminatorParams):
    """Per-pixel real score map; receptive field is exactly one pixel."""
    single = x.ndim == 3
    if single:
        x = tc.reshape(x, (1, *x.shape))
        y = tc.reshape(y, (1, *y.shape))
    if x.shape[-2:] != y.shape[-2:]:
        raise DimensionError(
            f"discriminator inputs must share spatial extents: {x.shape} vs {y.shape}"
        )
    h = tc.concat([x, y], axis=1)
    h = leaky_relu(tc.add(tc.conv2d(h, d.w1, stride=1, pad=0), _bias4(d.b1)))
    s = tc.add(tc.conv2d(h, d.w2, stride=1, pad=0), _bias4(d.b2))
    if single:
        s = tc.reshape(s, s.shape[1:])
    return s


def _log_mean(scores_prob):
    return tc.mean(tc.log(tc.add(scores_prob, LOG_EPS)))


def cgan_losses(batch, g: GeneratorParams, d: DiscriminatorParams, rng,
                critic_mode=False, fake=None):
    """(loss_G, loss_D) for a batch of ImagePair.

    loss_D is computed against a detached fake so its gradient touches only
    the discriminator; loss_G flows through the generator.
    """
    if not batch:
        raise ContractError("cgan_losses needs a nonempty batch")
    x = tc.concat([tc.reshape(p.source, (1, *p.source.shape)) for p in batch], axis=0)
    y = tc.concat([tc.reshape(p.target, (1, *p.target.shape)) for p in batch], axis=0)
    if fake is None:
        fake = generator_forward(x, g, rng=rng, training=True)
    s_real = discriminator_forward(x, y, d)
    s_fake_d = discriminator_forward(x, fake.detach(), d)
    s_fake_g = discriminator_forward(x, fake, d)
    if critic_mode:
        loss_d = tc.add(tc.mean(s_fake_d), tc.neg(tc.mean(s_real)))
        loss_g = tc.neg(tc.mean(s_fake_g))
    else:
        p_real = tc.sigmoid(s_real)
        p_fake_d = tc.sigmoid(s_fake_d)
        p_fake_g = tc.sigmoid(s_fake_g)
        loss_d = tc.neg(tc.add(_log_mean(p_real),
                               _log_mean(tc.add(1.0, tc.neg(p_fake_d)))))
        loss_g = tc.neg(_log_mean(p_fake_g))  # non-saturating form
    return loss_g, loss_d


def gradient_penalty(x, y_real, y_fake, d_apply, penalty_coeff, rng):
    """penalty_coeff * E[(||grad_xhat D(x, xhat)||_2 - 1)^2] via double backward."""
    if penalty_coeff < 0:
        raise ConfigError(f"penalty coefficient must be >= 0, got {penalty_coeff}")
    if penalty_coeff == 0:
        return Tensor(0.0)
    if y_real.shape != y_fake.shape:
        raise DimensionError(
            f"gradient_penalty: shapes differ: {y_real.shape} vs {y_fake.shape}"
        )
    b = y_real.shape[0]
    eps = rng.random(size=(b,) + (1,) * (y_real.ndim - 1)).astype(y_real.data.dtype)
    interp = eps * y_real.data + (1.0 - eps) * (
        y_fake.data if isinstance(y_fake, Tensor) else y_fake
    )
    xhat = Tensor(interp, requires_grad=True, dtype=interp.dtype)
    score = tc.sum_(d_apply(x, xhat))
    (grad,) = tc.grads_wrt(score, [xhat])
    sq = tc.sum_(tc.mul(grad, grad), axis=tuple(range(1, y_real.ndim)))
    norm = tc.pow_(tc.add(sq, 1e-12), 0.5)
    gap = tc.add(norm, -1.0)
    return tc.mul(penalty_coeff, tc.mean(tc.mul(gap, gap)))


def train_step(batch, g: GeneratorParams, d: DiscriminatorParams, cfg: GanConfig,
               opt_g, opt_d, rng):
    """One discriminator update (adversarial + penalty) then one generator update."""
    if not batch:
        raise ContractError("train_step needs a nonempty batch")
    x = tc.concat([tc.reshape(p.source, (1, *p.source.shape)) for p in batch], axis=0)
    y = tc.concat([tc.reshape(p.target, (1, *p.target.shape)) for p in batch], axis=0)
    fake = generator_forward(x, g, rng=rng, training=True)

    # discriminator update: adversarial loss on detached fakes + penalty
    s_real = discriminator_forward(x, y, d)
    s_fake_d = discriminator_forward(x, fake.detach(), d)
    if cfg.critic_mode:
        loss_d = tc.add(tc.mean(s_fake_d), tc.neg(tc.mean(s_real)))
    else:
        loss_d = tc.neg(tc.add(
            _log_mean(tc.sigmoid(s_real)),
            _log_mean(tc.add(1.0, tc.neg(tc.sigmoid(s_fake_d)))),
        ))
    if cfg.penalty_coeff > 0:
        # per-sample critic value = mean over the score map, keeping the
        # penalty on the same scale as the adversarial term
        gp = gradient_penalty(
            x, y, fake.detach(),
            lambda xs, ys: tc.mean(discriminator_forward(xs, ys, d), axis=(-3, -2, -1)),
            cfg.penalty_coeff, rng,
        )
        total_d = tc.add(loss_d, gp)
    else:
        gp = Tensor(0.0)
        total_d = loss_d  # bitwise equal to the plain adversarial objective
    tc.backward(total_d)
    opt_d.step()
    opt_d.zero_grad()

    # generator update against the freshly updated discriminator
    s_fake_g = discriminator_forward(x, fake, d)
    if cfg.critic_mode:
        loss_g = tc.neg(tc.mean(s_fake_g))
    else:
        loss_g = tc.neg(_log_mean(tc.sigmoid(s_fake_g)))
    tc.backward(loss_g)
    opt_g.step()
    opt_g.zero_grad()
    opt_d.zero_grad()  # discard discriminator grads contributed by loss_g

    record = {
        "loss_d": float(total_d.data),
        "loss_d_adv": float(loss_d.data),
        "penalty": float(gp.data),
        "loss_g": float(loss_g.data),
    }
    for value in record.values():
        if not np.isfinite(value):
            raise ContractError(f"non-finite GAN loss encountered: {record}")
    return record


def translate_video(frames, g: GeneratorParams):
    """Frame-wise translation in evaluation mode (deterministic)."""
    return [generator_forward(f, g, rng=None, training=False) for f in frames]


def generator_mae(pairs, g: GeneratorParams):
    """Mean absolute error of translated sources against paired targets."""
    total, count = 0.0, 0
    for p in pairs:
        out = generator_forward(p.source, g, rng=None, training=False)
        total += float(np.abs(out.data - p.target.data).sum())
        count += p.target.size
    return total / count
