"""Dataset I/O: binary PPM frames, CSV manifests, face-crop propagation,
and the synthetic toy dataset that stands in for restricted recordings."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, ParseError
from .fusion import LABELS, RGB, THERMAL
from .tensorcore import Tensor

MANIFEST_HEADER = [
    "subject_id", "video_id", "label", "modality", "frame_dir",
    "bbox_x", "bbox_y", "bbox_w", "bbox_h",
]


# -- PPM (P6) ------------------------------------------------------------------


def write_ppm(path, pixels):
    """Write (H,W,3) or (3,H,W) uint8 pixels as binary PPM, maxval 255."""
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise DimensionError(f"PPM pixels must be 3-D, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[-1] != 3:
        arr = np.transpose(arr, (1, 2, 0))
    if arr.shape[-1] != 3:
        raise DimensionError(f"PPM pixels need 3 channels, got shape {arr.shape}")
    arr = arr.astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    """Read a binary PPM into (H,W,3) uint8."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def fail(msg, offset):
        raise ParseError(f"{path}: {msg}", offset)

    if blob[:2] != b"P6":
        fail(f"bad magic {blob[:2]!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":  # comment line
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            fail("truncated header", start)
        try:
            fields.append(int(blob[start:pos]))
        except ValueError:
            fail(f"non-numeric header field {blob[start:pos]!r}", start)
    w, h, maxval = fields
    if maxval != 255:
        fail(f"unsupported maxval {maxval}", pos)
    pos += 1  # single whitespace byte after maxval
    expected = w * h * 3
    if len(blob) - pos < expected:
        fail(f"truncated pixel data: need {expected} bytes, have {len(blob) - pos}", pos)
    data = np.frombuffer(blob, dtype=np.uint8, count=expected, offset=pos)
    return data.reshape(h, w, 3).copy()


def load_frame(path):
    """PPM file -> channels-first float tensor scaled to [-1, 1]."""
    pixels = read_ppm(path)
    data = np.transpose(pixels, (2, 0, 1)).astype(np.float32) / 127.5 - 1.0
    return Tensor(data, dtype=np.float32)


def frame_to_pixels(frame):
    """[-1,1] float tensor/array back to (H,W,3) uint8."""
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    pixels = np.clip(np.rint((data + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.transpose(pixels, (1, 2, 0))


# -- crop + resize ---------------------------------------------------------------


def _bilinear_axis(length_in, length_out):
    """Source coordinates and weights for one resized axis."""
    scale = length_in / length_out
    centers = (np.arange(length_out) + 0.5) * scale - 0.5
    centers = np.clip(centers, 0.0, length_in - 1.0)
    lo = np.floor(centers).astype(np.int64)
    hi = np.minimum(lo + 1, length_in - 1)
    frac = centers - lo
    return lo, hi, frac


def bilinear_resize(data, out_h, out_w):
    """(C,H,W) -> (C,out_h,out_w) bilinear interpolation."""
    c, h, w = data.shape
    ylo, yhi, yf = _bilinear_axis(h, out_h)
    xlo, xhi, xf = _bilinear_axis(w, out_w)
    top = data[:, ylo][:, :, xlo] * (1 - xf) + data[:, ylo][:, :, xhi] * xf
    bot = data[:, yhi][:, :, xlo] * (1 - xf) + data[:, yhi][:, :, xhi] * xf
    return top * (1 - yf[None, :, None]) + bot * yf[None, :, None]


def apply_crop(frame, bbox, out_size=224):
    """Crop ``bbox`` = (x, y, w, h) then bilinear-resize to (3, out, out).

    The same bbox must be reused for the paired thermal frame; the loader
    enforces that pairing.
    """
    data = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    _, h, w = data.shape
    x, y, bw, bh = (int(v) for v in bbox)
    if x < 0 or y < 0 or bw <= 0 or bh <= 0 or x + bw > w or y + bh > h:
        raise ContractError(f"bbox {bbox} outside frame extents {(h, w)}")
    crop = data[:, y : y + bh, x : x + bw]
    if (bh, bw) == (out_size, out_size):
        resized = crop.copy()
    else:
        resized = bilinear_resize(crop, out_size, out_size)
    return Tensor(resized.astype(data.dtype), dtype=data.dtype)


# -- manifests -------------------------------------------------------------------


@dataclass
class ManifestRecord:
    subject_id: str
    video_id: str
    label: str
    modality: str
    frame_dir: str
    bbox: Optional[tuple] = None  # (x, y, w, h) in source pixels

    def __post_init__(self):
        if self.label not in LABELS:
            raise ContractError(f"unknown label {self.label!r}")
        if self.modality not in (RGB, THERMAL):
            raise ContractError(f"unknown modality {self.modality!r}")

    def frame_paths(self):
        root = Path(self.frame_dir)
        if not root.is_dir():
            raise ContractError(f"frame directory missing: {root}")
        return sorted(root.glob("*.ppm"))


def write_manifest(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            bbox = r.bbox if r.bbox is not None else ("", "", "", "")
            writer.writerow([r.subject_id, r.video_id, r.label, r.modality,
                             r.frame_dir, *bbox])


def load_manifest(path):
    """Read manifest CSV; rejects duplicate (subject, video, modality) keys."""
    records = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ParseError(f"{path}: unexpected manifest header {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ParseError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields")
            subject, video, label, modality, frame_dir, *bbox_fields = row
            bbox = tuple(int(v) for v in bbox_fields) if all(bbox_fields) else None
            key = (subject, video, modality)
            if key in seen:
                raise ContractError(f"duplicate manifest key {key}")
            seen.add(key)
            records.append(ManifestRecord(subject, video, label, modality,
                                          frame_dir, bbox))
    return records


def check_modality_pairing(records):
    """Every RGB record must have a THERMAL partner with the same ids (and back)."""
    by_modality = {RGB: set(), THERMAL: set()}
    for r in records:
        by_modality[r.modality].add((r.subject_id, r.video_id))
    missing_thermal = by_modality[RGB] - by_modality[THERMAL]
    missing_rgb = by_modality[THERMAL] - by_modality[RGB]
    if missing_thermal or missing_rgb:
        raise ContractError(
            f"unpaired videos: missing THERMAL for {sorted(missing_thermal)}, "
            f"missing RGB for {sorted(missing_rgb)}"
        )


# -- synthetic toy dataset --------------------------------------------------------


@dataclass
class ToyDataSpec:
    num_subjects: int = 4
    videos_per_class: int = 2
    frames_per_video: int = 4
    image_size: int = 32
    labels: tuple = LABELS
    signal_strength: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if min(self.num_subjects, self.videos_per_class,
               self.frames_per_video, self.image_size) <= 0:
            raise ConfigError("toy data extents must be positive")
        for lab in self.labels:
            if lab not in LABELS:
                raise ConfigError(f"unknown label {lab!r}")


def _toy_rgb_frame(rng, spec, class_idx, subject_offset):
    k = len(spec.labels)
    span = 140.0 * spec.signal_strength
    base = 60.0 + (span * class_idx / max(1, k - 1))
    s = spec.image_size
    gradient = np.linspace(-10.0, 10.0, s)[None, :] * np.ones((s, 1))
    noise = rng.normal(0.0, 4.0, size=(s, s))
    v = np.clip(base + subject_offset + gradient + noise, 0, 255)
    frame = np.stack([v, np.clip(v * 0.8, 0, 255), np.clip(v * 0.6, 0, 255)])
    return frame.astype(np.uint8)


def _toy_thermal_frame(rgb_frame):
    """Deterministic pixelwise channel map standing in for the thermal domain."""
    r, g, b = rgb_frame.astype(np.int64)
    return np.stack([255 - r, r, g // 2]).astype(np.uint8)


def generate_toy_dataset(spec: ToyDataSpec, out_dir):
    """Write paired RGB/THERMAL PPM frames + manifest; deterministic in the seed.

    Class identity is encoded as a per-class brightness level with a small
    per-subject shift, so classes are separable from the mean pixel value.
    """
    out_dir = Path(out_dir)
    frames_root = out_dir / "frames"
    frames_root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    subject_offsets = rng.uniform(-10.0, 10.0, size=spec.num_subjects)

    records = []
    full_bbox = (0, 0, spec.image_size, spec.image_size)
    for s in range(spec.num_subjects):
        subject = f"S{s:02d}"
        for c, label in enumerate(spec.labels):
            for rep in range(spec.videos_per_class):
                video = f"{label}_{rep:02d}"
                dirs = {}
                for modality in (RGB, THERMAL):
                    d = frames_root / f"{subject}_{video}_{modality}"
                    d.mkdir(exist_ok=True)
                    dirs[modality] = d
                for i in range(spec.frames_per_video):
                    rgb = _toy_rgb_frame(rng, spec, c, subject_offsets[s])
                    thermal = _toy_thermal_frame(rgb)
                    write_ppm(dirs[RGB] / f"frame_{i:03d}.ppm", rgb)
                    write_ppm(dirs[THERMAL] / f"frame_{i:03d}.ppm", thermal)
                for modality in (RGB, THERMAL):
                    records.append(ManifestRecord(
                        subject, video, label, modality,
                        str(dirs[modality]), full_bbox,
                    ))
    write_manifest(records, out_dir / "manifest.csv")
    return records


# -- video loading -----------------------------------------------------------------


def sample_frame_indices(count, m):
    """Uniform temporal sampling of m frames from ``count`` available."""
    if count <= 0:
        raise ContractError("video has no frames")
    if m >= count:
        return list(range(count)) + [count - 1] * (m - count)
    positions = (np.arange(m) + 0.5) * count / m
    return [min(count - 1, int(p)) for p in positions]


def load_video(record: ManifestRecord, m, out_size, bbox=None, blur_k=0):
    """Load m uniformly sampled frames as one (m, 3, out, out) float32 array.

    ``bbox`` overrides the record's own bbox (crop propagation from the RGB
    record onto the paired thermal record).
    """
    from .training import gaussian_blur

    paths = record.frame_paths()
    if not paths:
        raise ContractError(f"no frames under {record.frame_dir}")
    idx = sample_frame_indices(len(paths), m)
    use_bbox = bbox if bbox is not None else record.bbox
    frames = []
    for i in idx:
        frame = load_frame(paths[i])
        if blur_k:
            frame = gaussian_blur(frame, blur_k)
        if use_bbox is not None:
            frame = apply_crop(frame, use_bbox, out_size=out_size)
        elif frame.shape[-1] != out_size:
            frame = Tensor(bilinear_resize(frame.data, out_size, out_size))
        frames.append(frame.data)
    return np.stack(frames).astype(np.float32)
