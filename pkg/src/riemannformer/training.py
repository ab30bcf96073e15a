"""AdamW, the training/evaluation loops, metrics files and checkpoints."""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, Splits, augment_batch
from .model import Classifier, config_from_dict, decays

MAGIC = b"RFCK"
VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, params, lr=None):
        """One update from the ``.grad`` of each parameter; decay is decoupled from the moments."""
        lr = self.lr if lr is None else lr
        for p in params:
            if not np.isfinite(p.grad).all():
                raise FloatingPointError(f"non-finite gradient for parameter {p.name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            m, v = self.moments.get(p.name, (None, None))
            if m is None:
                m, v = np.zeros_like(p.data), np.zeros_like(p.data)
            g = p.grad
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.moments[p.name] = (m, v)
            data = p.data
            if self.weight_decay and decays(p.name):
                data = data * (1.0 - lr * self.weight_decay)
            p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 128
    seed: int = 0
    lr: float = 1e-3
    weight_decay: float = 0.01
    schedule: str = "cosine"
    warmup_epochs: int = 5
    subset: int = None
    augment: bool = True
    wall_clock: bool = True

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def learning_rate(cfg: TrainConfig, step: int, steps_per_epoch: int) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    if cfg.schedule == "constant":
        return cfg.lr
    total = cfg.epochs * steps_per_epoch
    warm = min(cfg.warmup_epochs * steps_per_epoch, total)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    span = max(total - warm, 1)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * (step - warm) / span))


def evaluate(model: Classifier, dataset: Dataset, batch=256) -> float:
    """Top-1 accuracy in [0, 1]."""
    if dataset.classes != model.cfg.classes:
        raise ValueError(f"model predicts {model.cfg.classes} classes, dataset has {dataset.classes}")
    if len(dataset) == 0:
        return float("nan")
    correct = 0
    for start in range(0, len(dataset), batch):
        idx = np.arange(start, min(start + batch, len(dataset)))
        logits = model(dataset.batch_inputs(idx)).data
        correct += int((logits.argmax(axis=1) == dataset.labels[idx]).sum())
    return correct / len(dataset)


@dataclass
class TrainResult:
    model: Classifier
    metrics: list
    best_test_acc: float
    steps: int


def format_metrics_line(epoch, loss, train_acc, test_acc, seconds) -> str:
    return f"{epoch}\t{loss:.10f}\t{train_acc:.6f}\t{test_acc:.6f}\t{seconds:.3f}\n"


def train(model_cfg, train_cfg: TrainConfig, splits: Splits, out_dir=None, log=None) -> TrainResult:
    """Run the full protocol; writes ``metrics.tsv``, ``best.rfck`` and ``last.rfck`` to ``out_dir``.

    Batch order and augmentation draw from one Philox stream per epoch spawned
    from ``train_cfg.seed``, so equal seeds give identical runs.
    """
    train_set = splits.train
    if train_cfg.subset is not None:
        train_set = train_set.subset(train_cfg.subset)
    if train_set.classes != model_cfg.classes:
        raise ValueError(f"model has {model_cfg.classes} classes, data has {train_set.classes}")
    root = np.random.SeedSequence(train_cfg.seed)
    init_seed, data_seed = root.spawn(2)
    model = Classifier(model_cfg, seed=init_seed)
    params = model.parameters()
    opt = AdamW(lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = math.ceil(n / train_cfg.batch)
    epoch_seeds = data_seed.spawn(train_cfg.epochs)
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.tsv")
        open(metrics_path, "w").close()
    start = time.perf_counter()
    metrics, best, step = [], -1.0, 0
    for epoch in range(train_cfg.epochs):
        rng = np.random.Generator(np.random.Philox(epoch_seeds[epoch]))
        order = rng.permutation(n)
        loss_sum, correct = 0.0, 0
        for b in range(steps_per_epoch):
            idx = order[b * train_cfg.batch:(b + 1) * train_cfg.batch]
            x = train_set.batch_inputs(idx)
            if train_set.kind == "image" and train_cfg.augment:
                x = augment_batch(x, rng)
            y = train_set.labels[idx]
            for p in params:
                p.zero_grad()
            try:
                logits = model(x)
                loss = T.cross_entropy(logits, y)
                T.backward(loss)
                opt.step(params, learning_rate(train_cfg, step, steps_per_epoch))
            except FloatingPointError as exc:
                raise TrainingDiverged(f"diverged at epoch {epoch}, step {step}: {exc}") from exc
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y).sum())
            step += 1
        try:
            test_acc = evaluate(model, splits.test) if splits.test is not None else float("nan")
        except FloatingPointError as exc:
            raise TrainingDiverged(f"diverged at epoch {epoch} during evaluation: {exc}") from exc
        seconds = time.perf_counter() - start if train_cfg.wall_clock else 0.0
        row = (epoch, loss_sum / n, correct / n, test_acc, seconds)
        metrics.append(row)
        if log is not None:
            log(f"epoch {epoch}: loss {row[1]:.4f} train {row[2]:.4f} test {row[3]:.4f}")
        if out_dir is not None:
            with open(metrics_path, "a") as fh:
                fh.write(format_metrics_line(*row))
            summary = {"epoch": epoch, "train_loss": row[1], "train_acc": row[2], "test_acc": test_acc}
            if test_acc > best:
                save_checkpoint(os.path.join(out_dir, "best.rfck"), model, step, summary, train_cfg)
            if epoch == train_cfg.epochs - 1:
                save_checkpoint(os.path.join(out_dir, "last.rfck"), model, step, summary, train_cfg)
        best = max(best, test_acc)
    return TrainResult(model, metrics, best, step)


# --- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: dict
    params: list
    step: int
    metrics: dict
    train: dict = None

    def build_model(self) -> Classifier:
        model = Classifier(config_from_dict(self.config))
        model.load_state(self.params)
        return model


def _metadata(model: Classifier, step, metrics, train_cfg) -> dict:
    return {
        "config": model.cfg.to_dict(),
        "params": [[name, list(arr.shape)] for name, arr in model.state()],
        "step": int(step),
        "metrics": metrics or {},
        "train": None if train_cfg is None else asdict(train_cfg),
    }


def save_checkpoint(path, model: Classifier, step=0, metrics=None, train_cfg=None):
    meta = json.dumps(_metadata(model, step, metrics, train_cfg), sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + bytes([VERSION]))
        fh.write(struct.pack("<I", len(meta)))
        fh.write(meta)
        for _, arr in model.state():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic at offset 0 (expected {MAGIC!r}, got {blob[:4]!r})")
    if len(blob) < 9:
        raise CheckpointError(f"{path}: truncated header at offset {len(blob)}")
    if blob[4] != VERSION:
        raise CheckpointError(f"{path}: unknown version {blob[4]} at offset 4")
    (meta_len,) = struct.unpack("<I", blob[5:9])
    end = 9 + meta_len
    if len(blob) < end:
        raise CheckpointError(f"{path}: truncated metadata at offset {len(blob)}")
    meta = json.loads(blob[9:end].decode("utf-8"))
    expected = sum(int(np.prod(shape)) for _, shape in meta["params"]) * 8
    payload = blob[end:]
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes at offset {end}, expected {expected}")
    params, off = [], 0
    for name, shape in meta["params"]:
        size = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f8", count=size, offset=off).astype(np.float64)
        params.append((name, arr.reshape(shape)))
        off += size * 8
    return Checkpoint(meta["config"], params, meta["step"], meta["metrics"], meta.get("train"))
