"""PPM I/O, crop/resize, manifest handling, and the synthetic toy dataset."""

import hashlib

import numpy as np
import pytest

from psl.data import (LABELS, RGB, THERMAL, ManifestRecord, ToyDataSpec,
                      apply_crop, bilinear_resize, check_modality_pairing,
                      frame_to_pixels, generate_toy_dataset, load_frame,
                      load_manifest, load_video, read_ppm,
                      sample_frame_indices, write_manifest, write_ppm)
from psl.errors import ConfigError, ContractError, DimensionError, ParseError
from psl.tensorcore import Tensor


# -- PPM I/O ----------------------------------------------------------------------


def test_load_1x1_white(tmp_path):
    p = tmp_path / "white.ppm"
    write_ppm(p, np.full((1, 1, 3), 255, dtype=np.uint8))
    frame = load_frame(p)
    assert frame.shape == (3, 1, 1)
    assert np.allclose(frame.data, 1.0)


def test_load_1x1_black(tmp_path):
    p = tmp_path / "black.ppm"
    write_ppm(p, np.zeros((1, 1, 3), dtype=np.uint8))
    assert np.allclose(load_frame(p).data, -1.0)


def test_midgray_near_zero(tmp_path):
    p = tmp_path / "gray.ppm"
    write_ppm(p, np.full((2, 2, 3), 127, dtype=np.uint8))
    assert np.all(np.abs(load_frame(p).data) < 0.01)


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    p = tmp_path / "rt.ppm"
    write_ppm(p, pixels)
    assert np.array_equal(read_ppm(p), pixels)


def test_roundtrip_channels_first_accepted(tmp_path):
    rng = np.random.default_rng(1)
    pixels = rng.integers(0, 256, size=(3, 4, 6), dtype=np.uint8)
    p = tmp_path / "cf.ppm"
    write_ppm(p, pixels)
    assert np.array_equal(read_ppm(p), np.transpose(pixels, (1, 2, 0)))


def test_float_roundtrip_through_frame_to_pixels(tmp_path):
    rng = np.random.default_rng(2)
    pixels = rng.integers(0, 256, size=(6, 6, 3), dtype=np.uint8)
    p = tmp_path / "fr.ppm"
    write_ppm(p, pixels)
    back = frame_to_pixels(load_frame(p))
    assert np.array_equal(back, pixels)


def test_comment_in_header(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# a comment\n1 1\n255\n\xff\x00\x00")
    assert np.array_equal(read_ppm(p), [[[255, 0, 0]]])


def test_bad_magic_offset_zero(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n1 1\n255\n\x00")
    with pytest.raises(ParseError) as e:
        read_ppm(p)
    assert e.value.offset == 0


def test_truncated_pixels(tmp_path):
    p = tmp_path / "trunc.ppm"
    p.write_bytes(b"P6\n2 2\n255\n\x00\x00\x00")
    with pytest.raises(ParseError) as e:
        read_ppm(p)
    assert e.value.offset is not None
    assert "truncated" in str(e.value)


def test_non_numeric_header(tmp_path):
    p = tmp_path / "nn.ppm"
    p.write_bytes(b"P6\nxx 1\n255\n\x00\x00\x00")
    with pytest.raises(ParseError):
        read_ppm(p)


def test_unsupported_maxval(tmp_path):
    p = tmp_path / "mv.ppm"
    p.write_bytes(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00")
    with pytest.raises(ParseError):
        read_ppm(p)


def test_write_rejects_2d():
    with pytest.raises(DimensionError):
        write_ppm("/tmp/never.ppm", np.zeros((4, 4), dtype=np.uint8))


# -- crop + resize ------------------------------------------------------------------


def test_crop_full_frame_identity():
    rng = np.random.default_rng(3)
    data = rng.normal(size=(3, 8, 8)).astype(np.float32)
    out = apply_crop(Tensor(data), (0, 0, 8, 8), out_size=8)
    assert np.array_equal(out.data, data)


def test_crop_constant_downscale():
    data = np.full((3, 16, 16), 0.25, dtype=np.float64)
    out = apply_crop(Tensor(data), (0, 0, 16, 16), out_size=4)
    assert np.allclose(out.data, 0.25, atol=1e-12)


def test_bilinear_midpoint():
    # upsampling [0, 2] by 2x places a sample exactly between the two inputs
    data = np.array([[[0.0, 2.0]]])
    out = bilinear_resize(data, 1, 4)
    assert abs(out[0, 0, 1] - 0.5) < 1e-12 or abs(out[0, 0, 2] - 1.5) < 1e-12
    assert np.all(np.diff(out[0, 0]) >= 0)  # monotone along the ramp
    assert out[0, 0, 0] == 0.0 and out[0, 0, -1] == 2.0


def test_bilinear_average_downscale():
    data = np.array([[[0.0, 2.0], [0.0, 2.0]]])
    out = bilinear_resize(data, 1, 1)
    assert abs(out[0, 0, 0] - 1.0) < 1e-12


def test_crop_region_selects_pixels():
    data = np.zeros((3, 4, 4), dtype=np.float32)
    data[:, 1:3, 2:4] = 1.0
    out = apply_crop(Tensor(data), (2, 1, 2, 2), out_size=2)
    assert np.allclose(out.data, 1.0)


def test_crop_outside_frame_rejected():
    frame = Tensor(np.zeros((3, 8, 8), dtype=np.float32))
    with pytest.raises(ContractError):
        apply_crop(frame, (4, 4, 8, 8), out_size=4)
    with pytest.raises(ContractError):
        apply_crop(frame, (-1, 0, 4, 4), out_size=4)
    with pytest.raises(ContractError):
        apply_crop(frame, (0, 0, 0, 4), out_size=4)


# -- manifests ----------------------------------------------------------------------


def _record(subject="S00", video="NP_00", label="NP", modality=RGB, tmp="."):
    return ManifestRecord(subject, video, label, modality, tmp, (0, 0, 8, 8))


def test_manifest_roundtrip(tmp_path):
    records = [_record(), _record(modality=THERMAL),
               _record(video="P4_00", label="P4"),
               _record(video="P4_00", label="P4", modality=THERMAL)]
    path = tmp_path / "manifest.csv"
    write_manifest(records, path)
    back = load_manifest(path)
    assert [(r.subject_id, r.video_id, r.label, r.modality, r.bbox) for r in back] == [
        (r.subject_id, r.video_id, r.label, r.modality, r.bbox) for r in records]


def test_manifest_duplicate_key_rejected(tmp_path):
    path = tmp_path / "dup.csv"
    write_manifest([_record(), _record()], path)
    with pytest.raises(ContractError):
        load_manifest(path)


def test_manifest_bad_label_rejected():
    with pytest.raises(ContractError):
        _record(label="P9")


def test_manifest_bad_modality_rejected():
    with pytest.raises(ContractError):
        _record(modality="DEPTH")


def test_pairing_enforced():
    ok = [_record(), _record(modality=THERMAL)]
    check_modality_pairing(ok)  # no error
    with pytest.raises(ContractError):
        check_modality_pairing([_record()])
    with pytest.raises(ContractError):
        check_modality_pairing(ok + [_record(video="P1_00", label="P1")])


# -- frame sampling -----------------------------------------------------------------


def test_sample_exact_count():
    assert sample_frame_indices(4, 4) == [0, 1, 2, 3]


def test_sample_downsamples_uniformly():
    idx = sample_frame_indices(16, 4)
    assert idx == [2, 6, 10, 14]


def test_sample_pads_short_video():
    assert sample_frame_indices(2, 5) == [0, 1, 1, 1, 1]


def test_sample_empty_video():
    with pytest.raises(ContractError):
        sample_frame_indices(0, 4)


# -- toy dataset ---------------------------------------------------------------------


def _tree_hash(root):
    digest = hashlib.sha256()
    for p in sorted(root.rglob("*.ppm")):  # manifest holds absolute paths
        if p.is_file():
            digest.update(p.name.encode())
            digest.update(p.read_bytes())
    return digest.hexdigest()


def test_toy_row_counts(tmp_path):
    spec = ToyDataSpec(num_subjects=2, videos_per_class=1, frames_per_video=2,
                       image_size=8, labels=("NP", "P4"))
    records = generate_toy_dataset(spec, tmp_path)
    # 2 subjects x 2 classes x 1 video x 2 modalities
    assert len(records) == 8
    per_modality = {m: sum(r.modality == m for r in records) for m in (RGB, THERMAL)}
    assert per_modality == {RGB: 4, THERMAL: 4}
    check_modality_pairing(records)
    assert (tmp_path / "manifest.csv").exists()
    back = load_manifest(tmp_path / "manifest.csv")
    assert len(back) == 8


def test_toy_same_seed_bit_identical(tmp_path):
    spec = ToyDataSpec(num_subjects=2, videos_per_class=1, frames_per_video=2,
                       image_size=8, labels=("NP", "P4"), seed=7)
    generate_toy_dataset(spec, tmp_path / "a")
    generate_toy_dataset(spec, tmp_path / "b")
    assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")


def test_toy_different_seed_differs(tmp_path):
    a = ToyDataSpec(num_subjects=2, videos_per_class=1, frames_per_video=2,
                    image_size=8, labels=("NP", "P4"), seed=0)
    b = ToyDataSpec(num_subjects=2, videos_per_class=1, frames_per_video=2,
                    image_size=8, labels=("NP", "P4"), seed=1)
    generate_toy_dataset(a, tmp_path / "a")
    generate_toy_dataset(b, tmp_path / "b")
    assert _tree_hash(tmp_path / "a") != _tree_hash(tmp_path / "b")


def test_toy_classes_separable_by_mean_pixel(tmp_path):
    # separability certificate: a threshold on the mean pixel value classifies
    # NP vs P4 videos with > 95% accuracy
    spec = ToyDataSpec(num_subjects=4, videos_per_class=3, frames_per_video=2,
                       image_size=16, labels=("NP", "P4"), seed=0)
    records = generate_toy_dataset(spec, tmp_path)
    means, labels = [], []
    for r in records:
        if r.modality != RGB:
            continue
        video = load_video(r, 2, 16)
        means.append(float(video.mean()))
        labels.append(1 if r.label == "P4" else 0)
    means, labels = np.array(means), np.array(labels)
    threshold = means.mean()
    acc = ((means > threshold).astype(int) == labels).mean()
    assert acc > 0.95


def test_toy_thermal_channel_map(tmp_path):
    spec = ToyDataSpec(num_subjects=1, videos_per_class=1, frames_per_video=1,
                       image_size=4, labels=("NP", "P4"), seed=3)
    records = generate_toy_dataset(spec, tmp_path)
    by_mod = {r.modality: r for r in records if r.video_id == "NP_00"}
    rgb = read_ppm(by_mod[RGB].frame_paths()[0]).astype(np.int64)
    thermal = read_ppm(by_mod[THERMAL].frame_paths()[0]).astype(np.int64)
    assert np.array_equal(thermal[..., 0], 255 - rgb[..., 0])
    assert np.array_equal(thermal[..., 1], rgb[..., 0])
    assert np.array_equal(thermal[..., 2], rgb[..., 1] // 2)


def test_toy_spec_validation():
    with pytest.raises(ConfigError):
        ToyDataSpec(num_subjects=0)
    with pytest.raises(ConfigError):
        ToyDataSpec(labels=("NP", "XX"))


# -- load_video ----------------------------------------------------------------------


def test_load_video_shape_and_range(tmp_path):
    spec = ToyDataSpec(num_subjects=1, videos_per_class=1, frames_per_video=5,
                       image_size=8, labels=("NP", "P4"))
    records = generate_toy_dataset(spec, tmp_path)
    video = load_video(records[0], 3, 8)
    assert video.shape == (3, 3, 8, 8)
    assert video.dtype == np.float32
    assert video.min() >= -1.0 and video.max() <= 1.0


def test_load_video_bbox_override(tmp_path):
    spec = ToyDataSpec(num_subjects=1, videos_per_class=1, frames_per_video=1,
                       image_size=8, labels=("NP", "P4"))
    records = generate_toy_dataset(spec, tmp_path)
    full = load_video(records[0], 1, 4)
    sub = load_video(records[0], 1, 4, bbox=(0, 0, 4, 4))
    assert full.shape == sub.shape == (1, 3, 4, 4)
    assert not np.array_equal(full, sub)


def test_load_video_blur_smooths(tmp_path):
    spec = ToyDataSpec(num_subjects=1, videos_per_class=1, frames_per_video=1,
                       image_size=16, labels=("NP", "P4"))
    records = generate_toy_dataset(spec, tmp_path)
    crisp = load_video(records[0], 1, 16)
    soft = load_video(records[0], 1, 16, blur_k=9)
    assert np.std(np.diff(soft, axis=-1)) < np.std(np.diff(crisp, axis=-1))


def test_load_video_missing_dir():
    record = ManifestRecord("S00", "NP_00", "NP", RGB, "/nonexistent/dir")
    with pytest.raises(ContractError):
        load_video(record, 2, 8)


def test_labels_constant():
    assert LABELS == ("NP", "P1", "P2", "P3", "P4")
