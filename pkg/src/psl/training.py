"""Optimization, losses, LOSO cross-validation, metrics, blur, and FLOP accounting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensorcore as tc
from .errors import ConfigError, ContractError, DimensionError
from .tensorcore import Tensor

BINARY = "BINARY"  # NP vs P4
MC = "MC"          # all five pain levels


@dataclass
class ScheduleConfig:
    base_lr: float = 2e-5
    weight_decay: float = 0.1
    warmup_epochs: int = 5
    total_epochs: int = 200
    batch_size: int = 32

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.warmup_epochs > self.total_epochs:
            raise ConfigError(
                f"warmup epochs {self.warmup_epochs} exceed total {self.total_epochs}"
            )


@dataclass
class MultiTaskWeights:
    w1: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))
    w2: Tensor = field(default_factory=lambda: Tensor(0.0, requires_grad=True))


def multitask_loss(loss_s1, loss_s2, w: MultiTaskWeights):
    """Two-task combination [e^{w1} L1 + w1] + [e^{w2} L2 + w2]."""
    term1 = tc.add(tc.mul(tc.exp(w.w1), loss_s1), w.w1)
    term2 = tc.add(tc.mul(tc.exp(w.w2), loss_s2), w.w2)
    return tc.add(term1, term2)


def lr_at(step, epoch, cfg: ScheduleConfig, steps_per_epoch=1):
    """Linear warmup to base_lr, then cosine decay to 0 at total_epochs."""
    if epoch > cfg.total_epochs:
        raise ContractError(f"epoch {epoch} beyond total {cfg.total_epochs}")
    t = epoch + step / max(1, steps_per_epoch)
    if cfg.warmup_epochs > 0 and t <= cfg.warmup_epochs:
        return cfg.base_lr * t / cfg.warmup_epochs
    span = max(1e-12, cfg.total_epochs - cfg.warmup_epochs)
    progress = min(1.0, (t - cfg.warmup_epochs) / span)
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adamw_step(param, grad, state, lr, weight_decay=0.0,
               beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update; mutates param and state in place.

    ``state`` holds m, v arrays and the step counter t.
    """
    if param.shape != grad.shape:
        raise ContractError(
            f"adamw_step: param shape {param.shape} != grad shape {grad.shape}"
        )
    if state["m"].shape != param.shape or state["v"].shape != param.shape:
        raise ContractError("adamw_step: state shapes do not match parameter")
    state["t"] += 1
    t = state["t"]
    state["m"] = beta1 * state["m"] + (1.0 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1.0 - beta2) * grad * grad
    m_hat = state["m"] / (1.0 - beta1 ** t)
    v_hat = state["v"] / (1.0 - beta2 ** t)
    param -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * param)
    return param


class AdamW:
    """Keeps per-parameter moment state for a name -> Tensor mapping."""

    def __init__(self, params, lr, weight_decay=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = {
            name: {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "t": 0}
            for name, p in self.params.items()
        }

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is None:
                continue
            adamw_step(p.data, p.grad.data.astype(p.data.dtype), self.state[name],
                       lr, self.weight_decay, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()


def cross_entropy(probs, labels):
    """Mean negative log-likelihood of integer ``labels`` under (V,K) probabilities."""
    v, k = probs.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (v,):
        raise DimensionError(f"labels shape {labels.shape} != ({v},)")
    idx = np.arange(v, dtype=np.int64) * k + labels
    picked = tc.take(probs, idx, (v,))
    return tc.neg(tc.mean(tc.log(tc.add(picked, 1e-12))))


# -- LOSO protocol and metrics ----------------------------------------------


def loso_split(records, num_subjects=None):
    """One (train, test) fold per subject; folds partition the record list."""
    subjects = sorted({r.subject_id for r in records})
    if len(subjects) < 2:
        raise ContractError(f"LOSO needs >= 2 subjects, found {len(subjects)}")
    if num_subjects is not None and len(subjects) != num_subjects:
        raise ConfigError(
            f"expected {num_subjects} subjects, manifest has {len(subjects)}"
        )
    counts = {s: 0 for s in subjects}
    for r in records:
        counts[r.subject_id] += 1
    empty = [s for s, c in counts.items() if c == 0]
    if empty:
        raise ConfigError(f"subjects without samples: {empty}")
    folds = []
    for held_out in subjects:
        test = [r for r in records if r.subject_id == held_out]
        train = [r for r in records if r.subject_id != held_out]
        folds.append((train, test))
    return folds


@dataclass
class FoldResult:
    held_out_subject: str
    task: str
    confusion: np.ndarray  # rows: true class, columns: predicted class

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        if self.task not in (BINARY, MC):
            raise ConfigError(f"unknown task {self.task!r}")

    @property
    def n_test(self):
        return int(self.confusion.sum())

    @property
    def n_correct(self):
        return int(np.trace(self.confusion))


@dataclass
class MetricsReport:
    accuracy: float          # pooled over folds
    fold_mean_accuracy: float
    recall_macro: float
    f1_macro: float


def _fold_macro(confusion):
    k = confusion.shape[0]
    recalls, f1s = [], []
    for c in range(k):
        support = confusion[c].sum()
        predicted = confusion[:, c].sum()
        if support == 0:
            continue
        tp = confusion[c, c]
        recall = tp / support
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        recalls.append(recall)
        f1s.append(f1)
    return recalls, f1s


def compute_metrics(folds):
    """Pooled accuracy plus macro recall/F1 over the pooled confusion table."""
    if not folds:
        raise ContractError("compute_metrics needs at least one fold")
    k = folds[0].confusion.shape[0]
    pooled = np.zeros((k, k), dtype=np.int64)
    fold_accs = []
    for f in folds:
        if f.confusion.shape != (k, k):
            raise DimensionError("folds disagree on class count")
        pooled += f.confusion
        fold_accs.append(f.n_correct / f.n_test if f.n_test else 0.0)

    recalls, f1s = [], []
    for c in range(k):
        if pooled[c].sum() == 0:
            warnings.warn(f"class {c} absent from all folds; excluded from macro averages")
            continue
        tp = pooled[c, c]
        recall = tp / pooled[c].sum()
        predicted = pooled[:, c].sum()
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        recalls.append(recall)
        f1s.append(f1)
    return MetricsReport(
        accuracy=float(np.trace(pooled) / pooled.sum()),
        fold_mean_accuracy=float(np.mean(fold_accs)),
        recall_macro=float(np.mean(recalls)),
        f1_macro=float(np.mean(f1s)),
    )


def fold_metrics(fold: FoldResult):
    """Macro recall/F1 for a single fold (used for the per-fold CSV rows)."""
    recalls, f1s = _fold_macro(fold.confusion)
    recall = float(np.mean(recalls)) if recalls else 0.0
    f1 = float(np.mean(f1s)) if f1s else 0.0
    return recall, f1


# -- Gaussian blur -------------------------------------------------------------


def blur_sigma(k):
    """Kernel-size to sigma mapping used for the blur sweep."""
    return 0.3 * ((k - 1) * 0.5 - 1.0) + 0.8


def gaussian_blur(frame, k):
    """Separable Gaussian blur with reflect padding; k=0 is the identity."""
    if k == 0:
        return frame
    if k % 2 == 0 or k < 0:
        raise ContractError(f"blur kernel size must be odd or 0, got {k}")
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    h, w = data.shape[-2], data.shape[-1]
    if k >= min(h, w) + k - 1:  # padded extent is edge + k - 1
        raise ContractError(f"kernel {k} too large for {h}x{w} frame")
    sigma = blur_sigma(k)
    half = k // 2
    xs = np.arange(k, dtype=np.float64) - half
    kernel = np.exp(-(xs ** 2) / (2.0 * sigma ** 2))
    kernel /= kernel.sum()
    kernel = kernel.astype(data.dtype)

    pad_spec = [(0, 0)] * (data.ndim - 2) + [(half, half), (half, half)]
    padded = np.pad(data, pad_spec, mode="reflect")
    # rows then columns
    out = np.zeros(data.shape[:-2] + (h, w + 2 * half), dtype=data.dtype)
    for i in range(k):
        out += kernel[i] * padded[..., i : i + h, :]
    final = np.zeros_like(data)
    for j in range(k):
        final += kernel[j] * out[..., :, j : j + w]
    if isinstance(frame, Tensor):
        return Tensor(final, dtype=final.dtype)
    return final


# -- FLOP accounting -----------------------------------------------------------
# Policy: 2 FLOPs per multiply-add in matmul/conv/attention score products;
# elementwise work and normalizations are not counted.


def matmul_flops(m, k, n):
    return 2 * m * k * n


def backbone_flops(cfg):
    from .backbone import BackboneConfig  # local import to avoid cycles

    assert isinstance(cfg, BackboneConfig)
    dims, counts = cfg.stage_dims, cfg.token_counts
    total = matmul_flops(counts[0], 3 * cfg.patch_size ** 2, dims[0])  # stem
    for s in range(4):
        n, d, e = counts[s], dims[s], cfg.expansion
        per_block = (
            2 * (matmul_flops(n, d, d) + 2 * matmul_flops(n, n, d))  # wave: phase + 2 token mixes
            + matmul_flops(n, d, d)  # channel branch
            + matmul_flops(n, d, d)  # re-projection
            + matmul_flops(n, d, e * d) + matmul_flops(n, e * d, d)  # MLP
        )
        total += cfg.stage_depths[s] * per_block
    for s in range(3):
        merged = ((cfg.grids[s] + 1) // 2) ** 2
        total += matmul_flops(merged, 4 * dims[s], dims[s + 1])
    return total


def attention_flops(queries, keys, c, heads):
    from .temporal import attention_width

    a = attention_width(c, heads)
    total = matmul_flops(queries, c, a) + 2 * matmul_flops(keys, c, a)  # q, k, v proj
    total += 2 * matmul_flops(queries, a, keys)  # scores and value mix (per-head sum)
    total += matmul_flops(queries, a, c)  # output projection
    return total


def temporal_flops(cfg):
    from .temporal import TemporalConfig

    assert isinstance(cfg, TemporalConfig)
    m, c, n = cfg.num_frames, cfg.channel_dim, cfg.latent_count
    per_block = attention_flops(m, m, c, cfg.self_heads) + attention_flops(
        n, m, c, cfg.cross_heads
    )
    total = cfg.num_blocks * per_block
    total += matmul_flops(1, c, cfg.out_dim)
    total += matmul_flops(1, cfg.out_dim, cfg.num_classes)
    return total


def count_flops(backbone_cfg=None, temporal_cfg=None):
    """Total forward FLOPs for the configured modules (one frame / one video)."""
    total = 0
    if backbone_cfg is not None:
        total += backbone_flops(backbone_cfg)
    if temporal_cfg is not None:
        total += temporal_flops(temporal_cfg)
    return total
