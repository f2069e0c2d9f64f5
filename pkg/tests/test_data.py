import struct

import numpy as np
import pytest

from oodbench import data as D
from oodbench.data import SyntheticSpec

# Two 2×2 images, hand-written: magic 0x00000803, dims (2, 2, 2), then 8 bytes.
IDX_IMAGES = bytes.fromhex("00000803" "00000002" "00000002" "00000002") + bytes([0, 255, 51, 102, 204, 0, 255, 153])
IDX_LABELS = bytes.fromhex("00000801" "00000002") + bytes([7, 3])
EXPECTED_RAW = np.array([[[0, 255], [51, 102]], [[204, 0], [255, 153]]], dtype=np.float64) / 255.0


def write(tmp_path, name, blob):
    p = tmp_path / name
    p.write_bytes(blob)
    return p


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------
def test_idx_fixture_parses_to_exact_pixels(tmp_path):
    d = D.read_idx(write(tmp_path, "img.idx", IDX_IMAGES), write(tmp_path, "lbl.idx", IDX_LABELS))
    assert d.images.shape == (2, 1, 2, 2)
    assert d.labels.tolist() == [7, 3]
    np.testing.assert_array_equal(d.raw()[:, 0], EXPECTED_RAW)
    # standardized with its own stats: mean 0, std 1
    assert abs(d.images.mean()) < 1e-15 and abs(d.images.std() - 1.0) < 1e-15


def test_idx_with_external_stats_is_exact(tmp_path):
    d = D.read_idx(write(tmp_path, "img.idx", IDX_IMAGES), stats=(np.zeros(1), np.ones(1)))
    assert np.array_equal(d.images[:, 0], EXPECTED_RAW)
    assert not d.labeled


def test_idx_bad_magic(tmp_path):
    blob = bytes(4) + IDX_IMAGES[4:]
    with pytest.raises(D.BadMagicError):
        D.read_idx(write(tmp_path, "bad.idx", blob))
    # a label file where an image file is expected
    with pytest.raises(D.BadMagicError):
        D.read_idx(write(tmp_path, "lbl.idx", IDX_LABELS))


def test_idx_truncated(tmp_path):
    with pytest.raises(D.TruncatedPayloadError):
        D.read_idx(write(tmp_path, "short.idx", IDX_IMAGES[:-1]))
    with pytest.raises(D.TruncatedPayloadError):
        D.read_idx(write(tmp_path, "hdr.idx", IDX_IMAGES[:10]))
    with pytest.raises(D.TruncatedPayloadError):
        D.read_idx(write(tmp_path, "tiny.idx", b"\x00\x00"))


def test_idx_error_kinds_are_distinct():
    assert not issubclass(D.BadMagicError, D.TruncatedPayloadError)
    assert not issubclass(D.TruncatedPayloadError, D.BadMagicError)
    assert issubclass(D.BadMagicError, D.IdxFormatError) and issubclass(D.TruncatedPayloadError, D.IdxFormatError)


def test_idx_count_mismatch(tmp_path):
    labels = struct.pack(">II", 0x801, 3) + bytes([1, 2, 3])
    with pytest.raises(D.CountMismatchError):
        D.read_idx(write(tmp_path, "img.idx", IDX_IMAGES), write(tmp_path, "lbl.idx", labels))


def test_idx_empty_dataset(tmp_path):
    blob = struct.pack(">IIII", 0x803, 0, 4, 4)
    d = D.read_idx(write(tmp_path, "empty.idx", blob))
    assert d.images.shape == (0, 1, 4, 4) and len(d) == 0


def test_idx_write_read_round_trip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(5, 3, 4), dtype=np.uint8)
    D.write_idx(tmp_path / "a.idx", arr)
    D.write_idx(tmp_path / "l.idx", np.arange(5, dtype=np.uint8))
    d = D.read_idx(tmp_path / "a.idx", tmp_path / "l.idx", stats=(np.zeros(1), np.ones(1)))
    assert np.array_equal(d.images[:, 0] * 255.0, arr.astype(float))
    assert d.labels.tolist() == list(range(5))
    assert (tmp_path / "a.idx").read_bytes()[:4] == bytes.fromhex("00000803")


# ----------------------------------------------------------------------
# synthetic ID data
# ----------------------------------------------------------------------
def test_noiseless_classes_are_constant():
    spec = SyntheticSpec(samples_per_class=5, noise_sigma=0.0)
    d = D.gen_synthetic_id(spec)
    for c in range(spec.num_classes):
        imgs = d.images[d.labels == c]
        assert np.array_equal(imgs, np.broadcast_to(imgs[0], imgs.shape))
    assert len({d.images[d.labels == c][0].tobytes() for c in range(spec.num_classes)}) == spec.num_classes


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(samples_per_class=20)
    a, b = D.gen_synthetic_id(spec), D.gen_synthetic_id(spec)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    c = D.gen_synthetic_id(SyntheticSpec(samples_per_class=20, seed=1))
    assert not np.array_equal(a.images, c.images)


def test_train_and_test_splits_differ_but_share_templates():
    spec = SyntheticSpec(samples_per_class=50, test_per_class=50)
    tr = D.gen_synthetic_id(spec, "train")
    te = D.gen_synthetic_id(spec, "test", stats=(tr.mean, tr.std))
    assert not np.array_equal(tr.images, te.images)
    for c in range(spec.num_classes):
        diff = tr.images[tr.labels == c].mean(0) - te.images[te.labels == c].mean(0)
        assert np.abs(diff).mean() < 0.2
    with pytest.raises(ValueError):
        D.gen_synthetic_id(spec, "val")


def test_train_split_is_standardized():
    d = D.gen_synthetic_id(SyntheticSpec(samples_per_class=100))
    assert abs(d.images.mean()) < 1e-12 and abs(d.images.std() - 1) < 1e-12


def nearest_template_accuracy(spec: SyntheticSpec, split="test") -> float:
    """Classify each raw image by the closest noiseless class template."""
    d = D.gen_synthetic_id(spec, split, stats=(np.zeros(spec.channels), np.ones(spec.channels)))
    tpl = np.stack([D.render_template(a, f, p, spec.image_size, spec.channels, spec.contrast)
                    for a, f, p in spec.templates()])
    dist = ((d.images[:, None] - tpl[None]) ** 2).sum(axis=(2, 3, 4))
    return float(np.mean(dist.argmin(axis=1) == d.labels))


def test_template_matching_oracle_separates_classes():
    spec = SyntheticSpec(noise_sigma=0.2, test_per_class=250)
    assert nearest_template_accuracy(spec) > 0.99


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(noise_sigma=-0.1)
    with pytest.raises(ValueError):
        SyntheticSpec(angles=(0.0, 1.0))


# ----------------------------------------------------------------------
# OOD sets
# ----------------------------------------------------------------------
def id_stats(spec):
    tr = D.gen_synthetic_id(spec)
    return tr.mean, tr.std


def test_uniform_noise_range():
    spec = SyntheticSpec(samples_per_class=50)
    mean, std = id_stats(spec)
    d = D.gen_ood("uniform_noise", 300, 0, spec, (mean, std))
    lo, hi = (0 - mean[0]) / std[0], (1 - mean[0]) / std[0]
    assert d.images.min() >= lo and d.images.max() <= hi
    assert not d.labeled and len(d) == 300


def test_held_out_templates_disjoint_from_id():
    spec = SyntheticSpec()
    id_tpl = {tuple(np.round(t, 12)) for t in spec.templates()}
    held = {tuple(np.round(t, 12)) for t in spec.held_out_templates()}
    assert not id_tpl & held


def test_shift_zero_matches_id_distribution():
    spec = SyntheticSpec(samples_per_class=400, test_per_class=0)
    stats = id_stats(spec)
    null = D.gen_ood("shifted_templates", 1600, 3, spec, stats, shift=0.0)
    tr = D.gen_synthetic_id(spec)
    # per-pixel means of the two sets agree to sampling error (σ/sqrt(n) ≈ 0.025 standardized)
    assert np.abs(null.images.mean(0) - tr.images.mean(0)).max() < 0.15
    shifted = D.gen_ood("shifted_templates", 1600, 3, spec, stats)
    assert np.abs(shifted.images.mean(0) - tr.images.mean(0)).max() > 0.15


def test_ood_kinds_and_determinism():
    spec = SyntheticSpec(samples_per_class=10)
    for kind in D.OOD_KINDS:
        a = D.gen_ood(kind, 10, 5, spec)
        b = D.gen_ood(kind, 10, 5, spec)
        assert np.array_equal(a.images, b.images) and a.id == kind
    with pytest.raises(ValueError):
        D.gen_ood("svhn", 10, 0, spec)


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------
def tiny(n=10):
    imgs = np.arange(n, dtype=float).reshape(n, 1, 1, 1)
    return D.Dataset(imgs, np.arange(n) % 3, "tiny", np.zeros(1), np.ones(1))


def test_single_batch_is_permutation():
    d = tiny()
    (x, y), = list(D.batches(d, 64, 0, 0))
    assert sorted(x.ravel().tolist()) == list(range(10))
    assert np.array_equal(y, (x.ravel().astype(int)) % 3)


def test_batches_partition_with_partial_last():
    d = tiny(10)
    parts = list(D.batches(d, 4, 1, 2))
    assert [len(x) for x, _ in parts] == [4, 4, 2]
    assert sorted(np.concatenate([x.ravel() for x, _ in parts]).tolist()) == list(range(10))


def test_permutation_replay_and_epoch_dependence():
    a = D.epoch_permutation(100, 7, 3)
    assert np.array_equal(a, D.epoch_permutation(100, 7, 3))
    assert not np.array_equal(a, D.epoch_permutation(100, 7, 4))
    assert not np.array_equal(a, D.epoch_permutation(100, 8, 3))
    with pytest.raises(ValueError):
        list(D.batches(tiny(), 0, 0, 0))


def test_dataset_invariants():
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((3, 1, 2, 2)), [0, 1], "x", np.zeros(1), np.ones(1))
    with pytest.raises(ValueError):
        D.Dataset(np.zeros((3, 2, 2)), [], "x", np.zeros(1), np.ones(1))
