"""CIFAR binary ingestion, augmentation and a synthetic position-probe task."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465])
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616])
PIXELS = 3 * 32 * 32

CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = ["test_batch.bin"]
CIFAR100_TRAIN = ["train.bin"]
CIFAR100_TEST = ["test.bin"]


class DataError(Exception):
    pass


@dataclass
class Sample:
    image: np.ndarray
    label: int


@dataclass
class Dataset:
    """``inputs`` are raw uint8 images (N, 3, 32, 32) or integer symbols (N, L)."""

    inputs: np.ndarray
    labels: np.ndarray
    classes: int
    kind: str = "image"

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Sample:
        return Sample(self.batch_inputs(np.array([i]))[0], int(self.labels[i]))

    def batch_inputs(self, idx) -> np.ndarray:
        x = self.inputs[idx]
        if self.kind == "image":
            return normalize(x)
        return x

    def subset(self, n: int) -> "Dataset":
        if n > len(self):
            raise DataError(f"subset of {n} requested from a dataset of {len(self)}")
        return Dataset(self.inputs[:n], self.labels[:n], self.classes, self.kind)


@dataclass
class Splits:
    train: Dataset
    test: Dataset


def normalize(raw: np.ndarray) -> np.ndarray:
    """uint8 pixels -> [0, 1] -> per-channel standardization."""
    x = np.asarray(raw, dtype=np.float64) / 255.0
    shape = (1,) * (x.ndim - 3) + (3, 1, 1)
    return (x - CIFAR_MEAN.reshape(shape)) / CIFAR_STD.reshape(shape)


def parse_records(blob: bytes, label_bytes: int, classes: int, source="<bytes>"):
    """Split a CIFAR batch into labels and (N, 3, 32, 32) uint8 images.

    ``label_bytes`` is 1 for CIFAR-10 and 2 for CIFAR-100 (coarse, fine); the
    last label byte is the class.
    """
    size = label_bytes + PIXELS
    if len(blob) % size:
        whole = len(blob) // size
        raise DataError(f"{source}: truncated record at byte offset {whole * size} "
                        f"(file length {len(blob)} is not a multiple of {size})")
    arr = np.frombuffer(blob, dtype=np.uint8).reshape(-1, size)
    labels = arr[:, label_bytes - 1].astype(np.int64)
    bad = np.nonzero(labels >= classes)[0]
    if bad.size:
        i = int(bad[0])
        raise DataError(f"{source}: label {labels[i]} >= {classes} in record {i} "
                        f"(byte offset {i * size + label_bytes - 1})")
    images = arr[:, label_bytes:].reshape(-1, 3, 32, 32).copy()
    return labels, images


def to_record_bytes(images: np.ndarray, labels, coarse=None) -> bytes:
    """Inverse of :func:`parse_records`; pass ``coarse`` labels to emit 3074-byte records."""
    images = np.asarray(images, dtype=np.uint8).reshape(-1, PIXELS)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    cols = [labels, images]
    if coarse is not None:
        cols.insert(0, np.asarray(coarse, dtype=np.uint8).reshape(-1, 1))
    return np.concatenate(cols, axis=1).tobytes()


def _resolve(directory, names, subdir):
    for base in (directory, os.path.join(directory, subdir)):
        if all(os.path.isfile(os.path.join(base, n)) for n in names):
            return [os.path.join(base, n) for n in names]
    missing = [n for n in names if not os.path.isfile(os.path.join(directory, n))]
    raise DataError(f"missing CIFAR file(s) {missing} in {directory}")


def _load(directory, train_names, test_names, subdir, label_bytes, classes) -> Splits:
    out = []
    for names in (train_names, test_names):
        labels, images = [], []
        for path in _resolve(directory, names, subdir):
            with open(path, "rb") as fh:
                lab, img = parse_records(fh.read(), label_bytes, classes, path)
            labels.append(lab)
            images.append(img)
        out.append(Dataset(np.concatenate(images), np.concatenate(labels), classes))
    return Splits(*out)


def load_cifar10(directory) -> Splits:
    return _load(directory, CIFAR10_TRAIN, CIFAR10_TEST, "cifar-10-batches-bin", 1, 10)


def load_cifar100(directory) -> Splits:
    return _load(directory, CIFAR100_TRAIN, CIFAR100_TEST, "cifar-100-binary", 2, 100)


def crop(image: np.ndarray, dy: int, dx: int, pad=4) -> np.ndarray:
    """Window of the zero-padded image whose top-left corner is (dy, dx)."""
    c, h, w = image.shape
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    return padded[:, dy:dy + h, dx:dx + w]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, :, ::-1]


def augment_batch(images: np.ndarray, rng: np.random.Generator, pad=4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip with probability 1/2, per image."""
    n = len(images)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        img = crop(images[i], offsets[i, 0], offsets[i, 1], pad)
        out[i] = hflip(img) if flips[i] else img
    return out


def augment(sample: Sample, seed) -> Sample:
    rng = np.random.Generator(np.random.Philox(seed))
    return Sample(augment_batch(sample.image[None], rng)[0], sample.label)


MARKER = 0


def synthetic_position_task(length: int, count: int, seed, vocab=4) -> Dataset:
    """Sequences of random filler symbols with one marker; the label is its position.

    Positions are balanced: each appears count // length or count // length + 1 times.
    """
    if length < 2:
        raise ValueError("position task needs at least two tokens")
    if vocab < 2:
        raise ValueError("need a marker symbol and at least one filler symbol")
    rng = np.random.Generator(np.random.Philox(seed))
    labels = rng.permutation(np.arange(count) % length)
    seqs = rng.integers(1, vocab, size=(count, length))
    seqs[np.arange(count), labels] = MARKER
    return Dataset(seqs, labels.astype(np.int64), length, kind="tokens")


def synthetic_splits(length: int, train_count: int, test_count: int, seed, vocab=4) -> Splits:
    ss = np.random.SeedSequence(seed)
    a, b = ss.spawn(2)
    return Splits(synthetic_position_task(length, train_count, a, vocab),
                  synthetic_position_task(length, test_count, b, vocab))
