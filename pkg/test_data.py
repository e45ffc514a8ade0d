#!/usr/bin/env python3
"""Tests for synthetic data, CSV datasets and checkpoint files."""

import numpy as np
import pytest

from lrdm.lrdm_data import (CheckpointError, CheckpointShapeError, CheckpointTruncatedError,
                            CheckpointVersionError, Dataset, DatasetFormatError, MAGIC, load_checkpoint,
                            load_csv_dataset, make_mixture, mixture_centers, read_checkpoint_header,
                            restore_rng, save_checkpoint, save_csv_dataset)
from lrdm.lrdm_trainer import TrainConfig, TrainerService, build_bundle


def test_single_mode_at_origin():
    data = make_mixture(2000, modes=1, radius=0.0, std=0.05, seed=3)
    assert data.points.shape == (2000, 2)
    assert np.allclose(data.points.mean(axis=0), 0.0, atol=4 * 0.05 / np.sqrt(2000))
    assert data.points.std(axis=0) == pytest.approx([0.05, 0.05], rel=0.1)


def test_mixture_mode_counts_and_labels():
    n, modes = 8000, 8
    data = make_mixture(n, modes=modes, seed=0, labeled=True)
    assert data.num_classes == modes
    counts = np.bincount(data.labels, minlength=modes)
    expected = n / modes
    sd = np.sqrt(n * (1 / modes) * (1 - 1 / modes))
    assert np.all(np.abs(counts - expected) < 4 * sd)
    centers = mixture_centers(modes, 1.0)
    assert np.allclose(np.linalg.norm(centers, axis=1), 1.0)
    dist = np.linalg.norm(data.points - centers[data.labels], axis=1)
    assert np.mean(dist < 3 * 0.05 * np.sqrt(2)) > 0.98


def test_mixture_is_seeded():
    assert np.array_equal(make_mixture(50, seed=4).points, make_mixture(50, seed=4).points)
    assert not np.array_equal(make_mixture(50, seed=4).points, make_mixture(50, seed=5).points)
    with pytest.raises(ValueError):
        make_mixture(10, modes=0)


def test_dataset_validation_and_subset():
    with pytest.raises(ValueError):
        Dataset(np.zeros(3))
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), labels=np.array([0]))
    data = make_mixture(30, seed=0, labeled=True)
    head = data.subset(5)
    assert np.array_equal(head.points, data.points[:5])
    assert head.num_classes == data.num_classes
    assert data.subset(100).n == 30
    assert data.subset(10, np.random.default_rng(0)).n == 10


def test_csv_round_trip(tmp_path):
    data = make_mixture(25, seed=1, labeled=True)
    path = save_csv_dataset(tmp_path / "points.csv", data)
    loaded = load_csv_dataset(path, has_labels=True)
    assert np.array_equal(loaded.points, data.points)
    assert np.array_equal(loaded.labels, data.labels)
    unlabeled = load_csv_dataset(path)
    assert unlabeled.dim == 3 and unlabeled.labels is None


def test_csv_ragged_row_is_named(tmp_path):
    rows = ["0.1,0.2"] * 6 + ["0.3"] + ["0.4,0.5"]
    path = tmp_path / "ragged.csv"
    path.write_text("\n".join(rows) + "\n")
    with pytest.raises(DatasetFormatError, match="row 7"):
        load_csv_dataset(path)


def test_csv_bad_cells_and_labels(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("0.1,abc\n")
    with pytest.raises(DatasetFormatError, match="non-numeric"):
        load_csv_dataset(path)
    path.write_text("0.1,0.2,1\n0.3,0.4,1.5\n")
    with pytest.raises(DatasetFormatError, match="row 2"):
        load_csv_dataset(path, has_labels=True)
    path.write_text("")
    with pytest.raises(DatasetFormatError):
        load_csv_dataset(path)
    with pytest.raises(FileNotFoundError):
        load_csv_dataset(tmp_path / "missing.csv")


def test_csv_infers_classes(tmp_path):
    path = tmp_path / "labeled.csv"
    path.write_text("0.0,0.0,0\n1.0,0.0,2\n0.0,1.0,1\n")
    data = load_csv_dataset(path, has_labels=True)
    assert data.num_classes == 3
    assert data.dim == 2


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------
@pytest.fixture
def trained_bundle(tiny_config):
    config = tiny_config("lrdm")
    data = make_mixture(64, seed=0)
    bundle = build_bundle(config.values, data.dim)
    cfg = TrainConfig.from_config(config.values)
    cfg.steps = 3
    TrainerService().train(cfg, bundle, data, np.random.default_rng(0))
    return bundle


def test_checkpoint_round_trip_is_bitwise(trained_bundle, tmp_path):
    path = save_checkpoint(tmp_path / "a.lrdm", trained_bundle)
    loaded = load_checkpoint(path)
    for module in ("denoiser", "encoder"):
        original = getattr(trained_bundle, module).state_dict()
        restored = getattr(loaded, module).state_dict()
        assert original.keys() == restored.keys()
        for name in original:
            assert np.array_equal(original[name], restored[name]), name
    for name, shadow in trained_bundle.denoiser_ema.shadow.items():
        assert np.array_equal(shadow, loaded.denoiser_ema.shadow[name])
    assert loaded.denoiser_ema.num_updates == 3
    assert loaded.optimizer_state.step == 3
    for name, m in trained_bundle.optimizer_state.m.items():
        assert np.array_equal(m, loaded.optimizer_state.m[name])
        assert np.array_equal(trained_bundle.optimizer_state.v[name], loaded.optimizer_state.v[name])
    assert loaded.step == 3
    assert loaded.mode == "lrdm"

    again = save_checkpoint(tmp_path / "b.lrdm", loaded)
    assert (tmp_path / "a.lrdm").read_bytes() == (tmp_path / "b.lrdm").read_bytes()
    assert again.endswith("b.lrdm")


def test_checkpoint_restores_rng(trained_bundle, tmp_path):
    expected = restore_rng(trained_bundle.rng_state, 0).standard_normal(4)
    loaded = load_checkpoint(save_checkpoint(tmp_path / "c.lrdm", trained_bundle))
    assert np.array_equal(restore_rng(loaded.rng_state, 0).standard_normal(4), expected)
    assert np.array_equal(restore_rng(None, 7).standard_normal(2), np.random.default_rng(7).standard_normal(2))


def _blob_offset(raw: bytes) -> int:
    _, offset = read_checkpoint_header(raw)
    return offset


def test_corrupted_length_prefix(trained_bundle, tmp_path):
    path = tmp_path / "d.lrdm"
    save_checkpoint(path, trained_bundle)
    raw = bytearray(path.read_bytes())
    offset = _blob_offset(bytes(raw))
    raw[offset:offset + 8] = (10 ** 9).to_bytes(8, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)


def test_truncated_file(trained_bundle, tmp_path):
    path = tmp_path / "e.lrdm"
    save_checkpoint(path, trained_bundle)
    raw = path.read_bytes()
    path.write_bytes(raw[:-12])
    with pytest.raises(CheckpointTruncatedError):
        load_checkpoint(path)
    path.write_bytes(raw + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_count_disagreeing_with_header_shape(trained_bundle, tmp_path):
    path = tmp_path / "f.lrdm"
    save_checkpoint(path, trained_bundle)
    raw = bytearray(path.read_bytes())
    offset = _blob_offset(bytes(raw))
    count = int.from_bytes(raw[offset:offset + 8], "little")
    raw[offset:offset + 8] = (count - 1).to_bytes(8, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_version_and_magic_checks(trained_bundle, tmp_path):
    path = tmp_path / "g.lrdm"
    save_checkpoint(path, trained_bundle)
    raw = path.read_bytes()
    path.write_bytes(b"LRDM9\n" + raw[len(MAGIC):])
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
    path.write_bytes(raw.replace(b'"version": 1', b'"version": 2', 1))
    with pytest.raises(CheckpointVersionError, match="version 2"):
        load_checkpoint(path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.lrdm")
