"""Experiment orchestration: LOSO classification runs, the blur sweep,
fusion-mode comparison, and GAN training — each emitting deterministic
artifacts (results/folds.csv + results/summary.json) under an output dir."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .backbone import WaveMlpBackbone
from .checkpoint import assign_params, load_checkpoint, save_checkpoint
from .config import ExperimentSpec
from .data import check_modality_pairing, load_manifest, load_video, write_ppm, frame_to_pixels
from .errors import ConfigError, ContractError
from .fusion import (FUSED, FUSION_NONE, FUSION_W2, FUSION_W3, LABELS, RGB,
                     THERMAL, FusionWeights, augment_batch)
from .gan import (GanConfig, GeneratorParams, DiscriminatorParams, ImagePair,
                  generator_forward, generator_mae, train_step)
from .temporal import TemporalTransformer
from .tensorcore import Tensor
from .training import (BINARY, AdamW, FoldResult, compute_metrics,
                       cross_entropy, fold_metrics, loso_split, lr_at)

FOLD_COLUMNS = ["subject_id", "task", "n_test", "n_correct", "recall_macro", "f1_macro"]


# -- dataset assembly -------------------------------------------------------------


@dataclass
class VideoSet:
    """All videos of one experiment as dense arrays, indexed consistently."""

    frames: dict          # modality -> (V, m, 3, S, S) float32
    labels: np.ndarray    # (V,) int64
    subjects: list        # (V,) subject ids
    video_ids: list

    def __len__(self):
        return len(self.subjects)

    def select(self, mask):
        return VideoSet(
            frames={k: v[mask] for k, v in self.frames.items()},
            labels=self.labels[mask],
            subjects=[s for s, keep in zip(self.subjects, mask) if keep],
            video_ids=[v for v, keep in zip(self.video_ids, mask) if keep],
        )


def task_label_map(task):
    if task == BINARY:
        return {"NP": 0, "P4": 1}
    return {lab: i for i, lab in enumerate(LABELS)}


def load_video_set(spec: ExperimentSpec):
    """Resolve the manifest into dense per-modality frame arrays.

    The RGB record's bbox is propagated onto the paired thermal record.
    """
    if spec.manifest is None:
        raise ConfigError("experiment needs a manifest path")
    records = load_manifest(spec.manifest)
    needed = [RGB, THERMAL] if spec.modality == FUSED else [spec.modality]
    if spec.modality == FUSED:
        check_modality_pairing(records)
    by_key = {}
    for r in records:
        by_key.setdefault((r.subject_id, r.video_id), {})[r.modality] = r
    label_map = task_label_map(spec.task)

    frames = {m: [] for m in needed}
    labels, subjects, video_ids = [], [], []
    size = spec.backbone.image_size
    for key in sorted(by_key):
        group = by_key[key]
        any_rec = next(iter(group.values()))
        if any_rec.label not in label_map:
            continue
        missing = [m for m in needed if m not in group]
        if missing:
            raise ContractError(f"video {key} lacks modalities {missing}")
        bbox = group[RGB].bbox if RGB in group else any_rec.bbox
        for m in needed:
            frames[m].append(load_video(group[m], spec.frames_per_video, size,
                                        bbox=bbox, blur_k=spec.blur_k))
        labels.append(label_map[any_rec.label])
        subjects.append(any_rec.subject_id)
        video_ids.append(any_rec.video_id)
    if not labels:
        raise ContractError(f"no usable videos for task {spec.task} in {spec.manifest}")
    return VideoSet(
        frames={m: np.stack(v) for m, v in frames.items()},
        labels=np.asarray(labels, dtype=np.int64),
        subjects=subjects,
        video_ids=video_ids,
    )


# -- classification model ----------------------------------------------------------


class PainModel:
    """Backbone + temporal transformer (+ fusion weights for FUSED runs)."""

    def __init__(self, spec: ExperimentSpec, rng):
        self.spec = spec
        self.backbone = WaveMlpBackbone(spec.backbone, rng)
        self.temporal = TemporalTransformer(spec.temporal(), rng)
        self.fusion = (FusionWeights(spec.fusion_mode)
                       if spec.modality == FUSED else None)

    def params(self):
        out = {f"backbone.{k}": v for k, v in self.backbone.params().items()}
        out.update({f"temporal.{k}": v for k, v in self.temporal.params().items()})
        if self.fusion is not None:
            out.update(self.fusion.params())
        return out

    def video_embeddings(self, frames):
        """(V, m, 3, S, S) frames -> (V, m*C) concatenated frame embeddings."""
        v, m = frames.shape[:2]
        flat = Tensor(frames.reshape(v * m, *frames.shape[2:]))
        emb = self.backbone.forward(flat)  # (V*m, C)
        return tc.reshape(emb, (v, m * emb.shape[-1]))

    def fuse_embeddings(self, rgb, thermal):
        w = self.fusion
        if w.mode == FUSION_NONE:
            return tc.add(rgb, thermal)
        fused = tc.add(tc.mul(w.w1, rgb), tc.mul(w.w2, thermal))
        if w.mode == FUSION_W3:
            fused = tc.mul(w.w3, fused)
        return fused

    def forward(self, dataset: VideoSet, rng=None, training=False):
        """Class probabilities (V, K) for every video in the set."""
        spec = self.spec
        if spec.modality == FUSED:
            emb = self.fuse_embeddings(
                self.video_embeddings(dataset.frames[RGB]),
                self.video_embeddings(dataset.frames[THERMAL]),
            )
        else:
            emb = self.video_embeddings(dataset.frames[spec.modality])
        if training:
            emb = augment_batch(emb, spec.augment, rng, training=True)
        return self.temporal.classify(emb)

    def predict(self, dataset: VideoSet):
        return np.argmax(self.forward(dataset).data, axis=-1)

    def accuracy(self, dataset: VideoSet):
        return float(np.mean(self.predict(dataset) == dataset.labels))


def train_model(spec: ExperimentSpec, model: PainModel, dataset: VideoSet, rng):
    """Full-batch training for spec.epochs with warmup + cosine lr."""
    sched = spec.schedule
    opt = AdamW(model.params(), lr=sched.base_lr, weight_decay=sched.weight_decay)
    for epoch in range(spec.epochs):
        lr = lr_at(0, epoch, sched)
        probs = model.forward(dataset, rng=rng, training=True)
        loss = cross_entropy(probs, dataset.labels)
        tc.backward(loss)
        opt.step(lr=lr)
        opt.zero_grad()
    return model


def _confusion(preds, labels, num_classes):
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        conf[t, p] += 1
    return conf


# -- artifact writers ---------------------------------------------------------------


def _write_folds_csv(path, rows, extra_columns=()):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FOLD_COLUMNS + list(extra_columns))
        writer.writerows(rows)


def _write_summary(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fold_rows(folds):
    rows = []
    for f in sorted(folds, key=lambda f: f.held_out_subject):
        recall, f1 = fold_metrics(f)
        rows.append([f.held_out_subject, f.task, f.n_test, f.n_correct,
                     f"{recall:.6f}", f"{f1:.6f}"])
    return rows


def _metrics_payload(report, spec: ExperimentSpec):
    return {
        "accuracy": report.accuracy,
        "fold_mean_accuracy": report.fold_mean_accuracy,
        "recall_macro": report.recall_macro,
        "f1_macro": report.f1_macro,
        "task": spec.task,
        "modality": spec.modality,
        "fusion_mode": spec.fusion_mode,
        "epochs": spec.epochs,
        "blur_k": spec.blur_k,
        "seed": spec.seed,
    }


# -- experiment entry points ---------------------------------------------------------


class _SubjectRef:
    __slots__ = ("subject_id",)

    def __init__(self, subject_id):
        self.subject_id = subject_id


def run_loso(spec: ExperimentSpec, out_dir, dataset=None):
    """Leave-one-subject-out training/eval; writes folds.csv + summary.json."""
    if dataset is None:
        dataset = load_video_set(spec)
    # reuse the loso_split invariant checks on lightweight subject refs
    loso_split([_SubjectRef(s) for s in dataset.subjects])
    subjects = sorted(set(dataset.subjects))
    folds = []
    train_accs = []
    for i, held_out in enumerate(subjects):
        mask = np.array([s != held_out for s in dataset.subjects])
        train_set, test_set = dataset.select(mask), dataset.select(~mask)
        rng = np.random.default_rng([spec.seed, i])
        model = PainModel(spec, rng)
        train_model(spec, model, train_set, rng)
        preds = model.predict(test_set)
        folds.append(FoldResult(held_out, spec.task,
                                _confusion(preds, test_set.labels, spec.num_classes)))
        train_accs.append(model.accuracy(train_set))
    report = compute_metrics(folds)

    results = Path(out_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    _write_folds_csv(results / "folds.csv", _fold_rows(folds))
    payload = _metrics_payload(report, spec)
    payload["train_accuracy_mean"] = float(np.mean(train_accs))
    _write_summary(results / "summary.json", payload)
    return report, folds


def run_train(spec: ExperimentSpec, out_dir, dataset=None):
    """Fit a single model on the full dataset; reports training metrics."""
    if dataset is None:
        dataset = load_video_set(spec)
    rng = np.random.default_rng([spec.seed])
    model = PainModel(spec, rng)
    train_model(spec, model, dataset, rng)
    preds = model.predict(dataset)
    conf = _confusion(preds, dataset.labels, spec.num_classes)
    fold = FoldResult("ALL", spec.task, conf)
    report = compute_metrics([fold])

    results = Path(out_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    _write_folds_csv(results / "folds.csv", _fold_rows([fold]))
    payload = _metrics_payload(report, spec)
    payload["train_accuracy"] = float(fold.n_correct / fold.n_test)
    _write_summary(results / "summary.json", payload)
    save_checkpoint(model.params(), results / "model.pslb")
    return report, model


BLUR_GRID = (0, 41, 91, 191)


def run_blur_sweep(spec: ExperimentSpec, out_dir, ks=BLUR_GRID):
    """LOSO at each blur kernel size; one folds.csv with a blur_k column."""
    import dataclasses as dc

    all_rows, summary = [], {}
    for k in ks:
        sub = dc.replace(spec, blur_k=int(k))
        report, folds = run_loso(sub, Path(out_dir) / f"blur_{k}")
        for row in _fold_rows(folds):
            all_rows.append(row + [k])
        summary[str(k)] = _metrics_payload(report, sub)
    results = Path(out_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    _write_folds_csv(results / "folds.csv", all_rows, extra_columns=["blur_k"])
    _write_summary(results / "summary.json", summary)
    return summary


def run_fuse_eval(spec: ExperimentSpec, out_dir):
    """LOSO under each fusion mode (NONE / W2 / W3) on the FUSED modality."""
    import dataclasses as dc

    all_rows, summary = [], {}
    for mode in (FUSION_NONE, FUSION_W2, FUSION_W3):
        sub = dc.replace(spec, modality=FUSED, fusion_mode=mode)
        report, folds = run_loso(sub, Path(out_dir) / f"fuse_{mode}")
        for row in _fold_rows(folds):
            all_rows.append(row + [mode])
        summary[mode] = _metrics_payload(report, sub)
    results = Path(out_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    _write_folds_csv(results / "folds.csv", all_rows, extra_columns=["fusion_mode"])
    _write_summary(results / "summary.json", summary)
    return summary


# -- GAN experiments -----------------------------------------------------------------


def toy_color_pairs(n, size, seed):
    """Solid-color source images mapped through a fixed per-channel transform."""
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        c = rng.uniform(-0.9, 0.9, size=3).astype(np.float32)
        src = np.broadcast_to(c[:, None, None], (3, size, size)).copy()
        r, g, _ = c
        t = np.array([-r, r, 0.5 * g - 0.25], dtype=np.float32)
        tgt = np.broadcast_to(t[:, None, None], (3, size, size)).copy()
        pairs.append(ImagePair(Tensor(src), Tensor(tgt)))
    return pairs


def manifest_pairs(spec: ExperimentSpec, max_pairs=None):
    """Paired (RGB frame, thermal frame) images from the manifest."""
    records = load_manifest(spec.manifest)
    check_modality_pairing(records)
    by_key = {}
    for r in records:
        by_key.setdefault((r.subject_id, r.video_id), {})[r.modality] = r
    size = spec.gan.image_size
    pairs = []
    for key in sorted(by_key):
        group = by_key[key]
        bbox = group[RGB].bbox
        src = load_video(group[RGB], 1, size, bbox=bbox)[0]
        tgt = load_video(group[THERMAL], 1, size, bbox=bbox)[0]
        pairs.append(ImagePair(Tensor(src), Tensor(tgt)))
        if max_pairs and len(pairs) >= max_pairs:
            break
    return pairs


def run_gan_training(spec: ExperimentSpec, out_dir, pairs=None):
    """Train the translation GAN; logs per-step losses and saves a checkpoint."""
    cfg = spec.gan
    if pairs is None:
        if spec.manifest is not None:
            pairs = manifest_pairs(spec, max_pairs=8)
        else:
            pairs = toy_color_pairs(8, cfg.image_size, spec.seed)
    rng = np.random.default_rng(spec.seed)
    g = GeneratorParams(cfg, rng)
    d = DiscriminatorParams(cfg, rng)
    opt_g = AdamW(g.params(), lr=cfg.lr_g)
    opt_d = AdamW(d.params(), lr=cfg.lr_d)

    mae_init = generator_mae(pairs, g)
    history = []
    for step in range(spec.gan_steps):
        if spec.gan_batch_size >= len(pairs):
            batch = pairs
        else:
            idx = rng.choice(len(pairs), size=spec.gan_batch_size, replace=False)
            batch = [pairs[i] for i in idx]
        record = train_step(batch, g, d, cfg, opt_g, opt_d, rng)
        history.append(record)
    mae_final = generator_mae(pairs, g)

    results = Path(out_dir) / "results"
    results.mkdir(parents=True, exist_ok=True)
    with open(results / "gan_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss_d", "loss_d_adv", "penalty", "loss_g"])
        for i, rec in enumerate(history):
            writer.writerow([i, f"{rec['loss_d']:.6f}", f"{rec['loss_d_adv']:.6f}",
                             f"{rec['penalty']:.6f}", f"{rec['loss_g']:.6f}"])
    save_checkpoint(g.params(), results / "generator.pslb")
    save_checkpoint(d.params(), results / "discriminator.pslb")
    _write_summary(results / "summary.json", {
        "mae_init": mae_init,
        "mae_final": mae_final,
        "mae_ratio": mae_final / mae_init,
        "steps": spec.gan_steps,
        "seed": spec.seed,
        "penalty_coeff": cfg.penalty_coeff,
        "critic_mode": cfg.critic_mode,
    })
    return {"mae_init": mae_init, "mae_final": mae_final, "history": history,
            "generator": g, "discriminator": d}


def run_translate(spec: ExperimentSpec, checkpoint_path, frames_dir, out_dir):
    """Load a generator checkpoint and translate every PPM frame in a directory."""
    from .data import load_frame

    cfg = spec.gan
    rng = np.random.default_rng(spec.seed)
    g = GeneratorParams(cfg, rng)
    assign_params(g.params(), load_checkpoint(checkpoint_path))
    frames_dir, out_dir = Path(frames_dir), Path(out_dir)
    paths = sorted(frames_dir.glob("*.ppm"))
    if not paths:
        raise ContractError(f"no PPM frames under {frames_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    for p in paths:
        frame = load_frame(p)
        out = generator_forward(frame, g, rng=None, training=False)
        write_ppm(out_dir / p.name, frame_to_pixels(out))
    return len(paths)
