import numpy as np
import pytest

from riemannformer import data as D


def write_cifar10(root, n_train=3, n_test=2, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    for name in D.CIFAR10_TRAIN + D.CIFAR10_TEST:
        n = n_test if name in D.CIFAR10_TEST else n_train
        imgs = rng.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
        (root / name).write_bytes(D.to_record_bytes(imgs, rng.integers(0, 10, n)))
    return root


def test_normalize_frozen_pixel_values():
    white = np.full((3, 32, 32), 255, dtype=np.uint8)
    out = D.normalize(white)
    np.testing.assert_allclose(out[:, 0, 0], (1.0 - D.CIFAR_MEAN) / D.CIFAR_STD, rtol=1e-15)
    assert out[0, 0, 0] == pytest.approx((1 - 0.4914) / 0.2470, rel=1e-15)
    assert D.normalize(np.zeros((2, 3, 32, 32), np.uint8))[1, 2, 5, 5] == pytest.approx(-0.4465 / 0.2616)


def test_record_round_trip_and_layout():
    rng = np.random.default_rng(1)
    imgs = rng.integers(0, 256, (4, 3, 32, 32), dtype=np.uint8)
    labels = np.array([3, 0, 9, 1])
    blob = D.to_record_bytes(imgs, labels)
    assert len(blob) == 4 * 3073
    assert blob[3073] == 0 and blob[1] == imgs[0, 0, 0, 0] and blob[1 + 1024] == imgs[0, 1, 0, 0]
    got_labels, got_imgs = D.parse_records(blob, 1, 10)
    np.testing.assert_array_equal(got_labels, labels)
    np.testing.assert_array_equal(got_imgs, imgs)


def test_cifar100_uses_fine_label():
    imgs = np.zeros((2, 3, 32, 32), np.uint8)
    blob = D.to_record_bytes(imgs, [57, 99], coarse=[3, 19])
    labels, _ = D.parse_records(blob, 2, 100)
    np.testing.assert_array_equal(labels, [57, 99])


def test_truncated_and_bad_label_errors_name_offsets():
    blob = D.to_record_bytes(np.zeros((2, 3, 32, 32), np.uint8), [1, 2])
    with pytest.raises(D.DataError, match="offset 3073"):
        D.parse_records(blob[:-5], 1, 10, "x.bin")
    bad = bytearray(blob)
    bad[3073] = 12
    with pytest.raises(D.DataError, match=r"record 1 \(byte offset 3073\)"):
        D.parse_records(bytes(bad), 1, 10)


def test_load_cifar10_from_dir_or_subdir(tmp_path):
    write_cifar10(tmp_path / "flat")
    splits = D.load_cifar10(tmp_path / "flat")
    assert len(splits.train) == 15 and len(splits.test) == 2
    write_cifar10(tmp_path / "nested" / "cifar-10-batches-bin")
    assert len(D.load_cifar10(tmp_path / "nested").train) == 15
    with pytest.raises(D.DataError, match="missing"):
        D.load_cifar10(tmp_path / "empty")


def test_load_cifar100(tmp_path):
    imgs = np.zeros((3, 3, 32, 32), np.uint8)
    for name in ("train.bin", "test.bin"):
        (tmp_path / name).write_bytes(D.to_record_bytes(imgs, [0, 50, 99], coarse=[0, 1, 2]))
    splits = D.load_cifar100(tmp_path)
    assert splits.train.classes == 100
    np.testing.assert_array_equal(splits.test.labels, [0, 50, 99])


def test_crop_and_flip():
    img = np.arange(3 * 32 * 32, dtype=float).reshape(3, 32, 32)
    np.testing.assert_array_equal(D.crop(img, 4, 4), img)
    shifted = D.crop(img, 0, 4)
    assert (shifted[:, :4] == 0).all()
    np.testing.assert_array_equal(shifted[:, 4:], img[:, :28])
    np.testing.assert_array_equal(D.hflip(img)[:, :, 0], img[:, :, 31])


def test_augment_is_seeded():
    img = D.normalize(np.random.default_rng(0).integers(0, 256, (3, 32, 32), dtype=np.uint8))
    s = D.Sample(img, 3)
    a, b = D.augment(s, 7), D.augment(s, 7)
    np.testing.assert_array_equal(a.image, b.image)
    assert a.label == 3 and a.image.shape == img.shape


def test_synthetic_task_structure():
    ds = D.synthetic_position_task(16, 100, seed=0)
    assert ds.inputs.shape == (100, 16) and ds.classes == 16
    for row, lab in zip(ds.inputs, ds.labels):
        assert row[lab] == D.MARKER
        assert (row == D.MARKER).sum() == 1
    counts = np.bincount(ds.labels, minlength=16)
    assert counts.min() >= 6 and counts.max() <= 7
    again = D.synthetic_position_task(16, 100, seed=0)
    np.testing.assert_array_equal(again.inputs, ds.inputs)
    with pytest.raises(ValueError):
        D.synthetic_position_task(1, 10, 0)
    with pytest.raises(D.DataError):
        ds.subset(101)


def test_synthetic_splits_differ():
    s = D.synthetic_splits(8, 32, 32, seed=1)
    assert not np.array_equal(s.train.inputs, s.test.inputs)
