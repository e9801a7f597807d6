"""TOML config parsing, binary checkpoints, and the CLI contract."""

import json

import numpy as np
import pytest

from psl.checkpoint import assign_params, load_checkpoint, save_checkpoint
from psl.cli import cli
from psl.config import ExperimentSpec, load_config
from psl.errors import ConfigError, ParseError
from psl.tensorcore import Tensor

MINI_TOML = """
[experiment]
task = "BINARY"
modality = "FUSED"
fusion_mode = "W2"
epochs = 4
frames_per_video = 2
seed = 3

[schedule]
base_lr = 3e-3
warmup_epochs = 1

[augment]
p_aug = 0.0

[toy_data]
num_subjects = 2
videos_per_class = 1
frames_per_video = 2
image_size = 32
labels = ["NP", "P4"]
"""


# -- config --------------------------------------------------------------------------


def test_default_spec():
    spec = ExperimentSpec()
    assert spec.task == "BINARY" and spec.num_classes == 2
    assert spec.scale == "toy"
    assert spec.backbone is not None and spec.schedule is not None


def test_load_config_mapping(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(MINI_TOML)
    spec = load_config(path)
    assert spec.epochs == 4
    assert spec.seed == 3
    assert spec.schedule.base_lr == 3e-3
    assert spec.schedule.total_epochs == 4  # inherited from [experiment] epochs
    assert spec.augment.p_aug == 0.0
    assert spec.toy_data.labels == ("NP", "P4")
    assert spec.toy_data.seed == 3  # seed propagates into toy_data


def test_temporal_sized_from_backbone(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(MINI_TOML)
    spec = load_config(path)
    t = spec.temporal()
    assert t.num_frames == 2
    assert t.channel_dim == spec.backbone.out_dim
    assert t.latent_count == 1
    assert t.num_classes == 2


def test_temporal_kwargs_override(tmp_path):
    path = tmp_path / "exp.toml"
    path.write_text(MINI_TOML + "\n[temporal]\nnum_blocks = 2\n")
    t = load_config(path).temporal()
    assert t.num_blocks == 2


def test_unknown_section_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[optimizer]\nlr = 1.0\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[experiment]\nlearning_rate = 1.0\n")
    with pytest.raises(ConfigError):
        load_config(path)
    path.write_text("[schedule]\nbase_lr = 1.0\nmomentum = 0.9\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_malformed_toml_rejected(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text("[experiment\n")
    with pytest.raises(ConfigError):
        load_config(path)


def test_invalid_task_rejected():
    with pytest.raises(ConfigError):
        ExperimentSpec(task="REGRESSION")
    with pytest.raises(ConfigError):
        ExperimentSpec(fusion_mode="W9")


def test_mc_task_five_classes():
    assert ExperimentSpec(task="MC").num_classes == 5


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "layer.w": Tensor(rng.normal(size=(3, 4)).astype(np.float32)),
        "layer.b": rng.normal(size=4).astype(np.float32),
        "scalar": np.float32(2.5),
    }
    path = tmp_path / "model.pslb"
    save_checkpoint(params, path)
    back = load_checkpoint(path)
    assert list(back) == ["layer.w", "layer.b", "scalar"]  # order preserved
    assert np.array_equal(back["layer.w"], params["layer.w"].data)
    assert np.array_equal(back["layer.b"], params["layer.b"])
    assert back["scalar"] == np.float32(2.5)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.pslb"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ParseError) as e:
        load_checkpoint(path)
    assert e.value.offset == 0


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "trunc.pslb"
    save_checkpoint({"w": np.ones((4, 4), dtype=np.float32)}, path)
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ParseError):
        load_checkpoint(path)


def test_assign_params_copies_and_validates(tmp_path):
    target = {"w": Tensor(np.zeros((2, 2), dtype=np.float32))}
    assign_params(target, {"w": np.ones((2, 2), dtype=np.float32)})
    assert np.array_equal(target["w"].data, np.ones((2, 2)))
    with pytest.raises(ParseError):
        assign_params(target, {})
    with pytest.raises(ParseError):
        assign_params(target, {"w": np.ones((3, 3), dtype=np.float32)})


# -- CLI ----------------------------------------------------------------------------


def test_cli_usage_errors():
    assert cli(["frobnicate"]) == 64
    assert cli(["loso", "--not-a-flag"]) == 64
    assert cli([]) == 64


def test_cli_missing_config_is_io_error(tmp_path, capsys):
    assert cli(["loso", "--config", str(tmp_path / "absent.toml"),
                "--out", str(tmp_path)]) == 2


def test_cli_bad_folds_header_is_io_error(tmp_path, capsys):
    bad = tmp_path / "folds.csv"
    bad.write_text("wrong,header\n1,2\n")
    assert cli(["metrics", "--folds", str(bad)]) == 2


def test_cli_gradcheck_passes(capsys):
    assert cli(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "max relative error" in out


def test_cli_count_params_reference_line(capsys):
    assert cli(["count-params"]) == 0
    out = capsys.readouterr().out
    assert "total params:" in out
    assert "7.35M" in out and "7.96M" in out


def test_cli_count_flops_reference_line(capsys):
    assert cli(["count-flops"]) == 0
    out = capsys.readouterr().out
    assert "total flops:" in out
    assert "30.95G" in out and "61.85G" in out


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Generate toy data once and run LOSO twice for the determinism checks."""
    root = tmp_path_factory.mktemp("cli_toy")
    data_dir = root / "data"
    cfg = root / "exp.toml"
    cfg.write_text(MINI_TOML)
    assert cli(["gen-toy-data", "--config", str(cfg), "--out", str(data_dir)]) == 0

    run_cfg = root / "run.toml"
    run_cfg.write_text(
        MINI_TOML.replace("[experiment]",
                          f'[experiment]\nmanifest = "{data_dir / "manifest.csv"}"'))
    outs = []
    for name in ("run_a", "run_b"):
        out = root / name
        assert cli(["loso", "--config", str(run_cfg), "--out", str(out)]) == 0
        outs.append(out)
    return root, run_cfg, outs


def test_cli_gen_toy_data_writes_manifest(toy_run):
    root, _, _ = toy_run
    assert (root / "data" / "manifest.csv").exists()


def test_cli_loso_outputs(toy_run):
    _, _, (out_a, _) = toy_run
    assert (out_a / "results" / "folds.csv").exists()
    summary = json.loads((out_a / "results" / "summary.json").read_text())
    assert {"accuracy", "fold_mean_accuracy", "recall_macro", "f1_macro"} <= set(summary)


def test_cli_loso_deterministic(toy_run):
    _, _, (out_a, out_b) = toy_run
    a = (out_a / "results" / "summary.json").read_bytes()
    b = (out_b / "results" / "summary.json").read_bytes()
    assert a == b
    fa = (out_a / "results" / "folds.csv").read_bytes()
    fb = (out_b / "results" / "folds.csv").read_bytes()
    assert fa == fb


def test_cli_metrics_matches_summary(toy_run, capsys):
    _, _, (out_a, _) = toy_run
    assert cli(["metrics", "--folds", str(out_a / "results" / "folds.csv")]) == 0
    payload = json.loads(capsys.readouterr().out)
    summary = json.loads((out_a / "results" / "summary.json").read_text())
    assert payload["accuracy"] == summary["accuracy"]
    assert payload["fold_mean_accuracy"] == summary["fold_mean_accuracy"]


def test_cli_seed_override_changes_toy_data(tmp_path):
    cfg = tmp_path / "exp.toml"
    cfg.write_text(MINI_TOML)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli(["gen-toy-data", "--config", str(cfg), "--out", str(a)]) == 0
    assert cli(["gen-toy-data", "--config", str(cfg), "--seed", "99",
                "--out", str(b)]) == 0
    ppm_a = sorted(p for p in (a / "frames").rglob("*.ppm"))
    ppm_b = sorted(p for p in (b / "frames").rglob("*.ppm"))
    assert any(x.read_bytes() != y.read_bytes() for x, y in zip(ppm_a, ppm_b))
