"""Synthetic generator and file-format tests."""

import json
import struct

import numpy as np
import pytest

from sharpseg import data as D
from sharpseg.data import (FormatError, SyntheticConfig, generate_synthetic,
                           load_manifest, load_samples, load_tensor, read_pgm,
                           save_tensor, write_dataset, write_pgm)


# --------------------------------------------------------------- generator

def test_generator_is_deterministic():
    cfg = SyntheticConfig(n_samples=4, h=32, w=32, seed=9)
    a, _ = generate_synthetic(cfg)
    b, _ = generate_synthetic(cfg)
    for sa, sb in zip(a, b):
        assert np.array_equal(sa.image, sb.image)
        assert np.array_equal(sa.mask, sb.mask)


def test_generator_respects_contracts():
    cfg = SyntheticConfig(n_samples=6, h=32, w=48, num_classes=3,
                          in_channels=2, hair=True, seed=1)
    samples, manifest = generate_synthetic(cfg)
    assert manifest.num_classes == 3 and manifest.in_channels == 2
    lo, hi = cfg.roi_area_range
    for s in samples:
        assert s.image.shape == (1, 2, 32, 48)
        assert s.mask.shape == (1, 1, 32, 48)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        labels = np.unique(s.mask)
        assert labels.max() < 3 and labels.min() >= 0
        assert np.array_equal(labels, np.rint(labels))
        frac = np.count_nonzero(s.mask) / s.mask[0, 0].size
        assert lo <= frac <= hi


def test_generator_unsatisfiable_area_raises():
    cfg = SyntheticConfig(n_samples=1, h=32, w=32,
                          roi_area_range=(0.97, 0.98), seed=0)
    with pytest.raises(D.GenerationError):
        generate_synthetic(cfg)


def test_generator_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(h=60)  # not divisible by 16
    with pytest.raises(ValueError):
        SyntheticConfig(roi_area_range=(0.5, 0.2))
    with pytest.raises(ValueError):
        SyntheticConfig(num_classes=1)


# ------------------------------------------------------------ tensor files

def test_tensor_roundtrip_exact(tmp_path):
    rng = np.random.default_rng(0)
    t = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    path = tmp_path / "t.tnsr"
    save_tensor(path, t)
    assert np.array_equal(load_tensor(path), t)


def test_tensor_bad_magic(tmp_path):
    path = tmp_path / "bad.tnsr"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(FormatError):
        load_tensor(path)


def test_tensor_truncated_payload(tmp_path):
    path = tmp_path / "t.tnsr"
    save_tensor(path, np.zeros((1, 1, 2, 2), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError) as err:
        load_tensor(path)
    assert "length" in str(err.value)


def test_tensor_header_payload_mismatch(tmp_path):
    # header claims [2,3,4,4] = 96 floats but carries 95
    header = json.dumps({"dtype": "f32", "order": "NCHW",
                         "shape": [2, 3, 4, 4]}).encode()
    blob = D.TENSOR_MAGIC + struct.pack("<I", len(header)) + header
    blob += b"\x00" * (95 * 4)
    path = tmp_path / "bad.tnsr"
    path.write_bytes(blob)
    with pytest.raises(FormatError):
        load_tensor(path)


def test_tensor_non_finite_rejected(tmp_path):
    arr = np.zeros((1, 1, 2, 2), dtype=np.float32)
    path = tmp_path / "t.tnsr"
    save_tensor(path, arr)
    raw = bytearray(path.read_bytes())
    raw[-4:] = struct.pack("<f", np.inf)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_tensor(path)


# -------------------------------------------------------------- pgm files

def test_pgm_extremes(tmp_path):
    zeros = np.zeros((1, 1, 3, 4), dtype=np.float32)
    ones = np.ones((1, 1, 3, 4), dtype=np.float32)
    write_pgm(tmp_path / "z.pgm", zeros)
    write_pgm(tmp_path / "o.pgm", ones)
    raw_z = (tmp_path / "z.pgm").read_bytes()
    raw_o = (tmp_path / "o.pgm").read_bytes()
    assert raw_z.endswith(b"\x00" * 12)
    assert raw_o.endswith(b"\xff" * 12)
    assert np.array_equal(read_pgm(tmp_path / "z.pgm"), zeros)
    assert np.array_equal(read_pgm(tmp_path / "o.pgm"), ones)


def test_pgm_roundtrip_quantization_bound(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.random((1, 1, 8, 8)).astype(np.float32)
    write_pgm(tmp_path / "r.pgm", img)
    back = read_pgm(tmp_path / "r.pgm")
    assert np.abs(back - img).max() <= 1.0 / 255.0 + 1e-7


def test_pgm_rejects_non_p5_and_bad_maxval(tmp_path):
    (tmp_path / "p2.pgm").write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "p2.pgm")
    (tmp_path / "m.pgm").write_bytes(b"P5\n2 2\n65535\n" + b"\x00" * 8)
    with pytest.raises(FormatError):
        read_pgm(tmp_path / "m.pgm")


# ---------------------------------------------------------------- manifest

def test_written_dataset_loads_cleanly(tmp_path):
    cfg = SyntheticConfig(n_samples=3, h=32, w=32, seed=2)
    samples, manifest = generate_synthetic(cfg)
    mpath = write_dataset(samples, manifest, tmp_path / "ds")
    loaded = load_manifest(mpath)
    assert loaded.num_classes == 2 and len(loaded.samples) == 3
    back = load_samples(loaded)
    for orig, got in zip(samples, back):
        assert np.array_equal(orig.image, got.image)
        assert np.array_equal(orig.mask, got.mask)


def test_manifest_missing_file_names_path(tmp_path):
    cfg = SyntheticConfig(n_samples=2, h=32, w=32, seed=3)
    samples, manifest = generate_synthetic(cfg)
    mpath = write_dataset(samples, manifest, tmp_path / "ds")
    (tmp_path / "ds" / "img_0001.tnsr").unlink()
    with pytest.raises(FormatError) as err:
        load_manifest(mpath)
    assert "img_0001.tnsr" in str(err.value)


def test_manifest_label_out_of_range(tmp_path):
    cfg = SyntheticConfig(n_samples=1, h=32, w=32, seed=4)
    samples, manifest = generate_synthetic(cfg)
    bad = samples[0].mask.copy()
    bad[0, 0, 0, 0] = 9.0
    out = tmp_path / "ds"
    write_dataset([D.Sample(samples[0].image, bad)], manifest, out)
    with pytest.raises(FormatError) as err:
        load_manifest(out / "dataset.json")
    assert "label" in str(err.value)


def test_manifest_shape_disagreement(tmp_path):
    cfg = SyntheticConfig(n_samples=1, h=32, w=32, seed=5)
    samples, manifest = generate_synthetic(cfg)
    out = tmp_path / "ds"
    write_dataset(samples, manifest, out)
    save_tensor(out / "img_0000.tnsr", np.zeros((1, 1, 16, 16), np.float32))
    with pytest.raises(FormatError) as err:
        load_manifest(out / "dataset.json")
    assert "shape" in str(err.value)
