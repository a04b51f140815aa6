"""Mini-batch training with best-validation-loss checkpoint selection."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import AdamState, Tape, adam_step, backward
from .autodiff.ops import log_softmax
from .datagen import JetDataset
from .metrics import roc_auc
from .models import Batch, ConfigError, Model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "beam", "jet")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 10
    augment: str = "none"
    seed: int = 0
    eval_batch_size: int = 1024

    def __post_init__(self):
        if self.augment not in AUGMENTATIONS:
            raise ConfigError(f"augment must be one of {AUGMENTATIONS}")
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and patience >= 1 required")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float

    def line(self) -> str:
        return f"{self.epoch} {self.train_loss:.10g} {self.val_loss:.10g} {self.val_auc:.10g}"


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    best_params: np.ndarray | None = None
    stopped_early: bool = False


def _axis_rotations(axes: np.ndarray, rng) -> np.ndarray:
    angles = rng.uniform(0.0, 2.0 * np.pi, len(axes))
    K = np.zeros((len(axes), 3, 3))
    K[:, 0, 1], K[:, 0, 2], K[:, 1, 2] = -axes[:, 2], axes[:, 1], -axes[:, 0]
    K = K - np.swapaxes(K, 1, 2)
    s, c = np.sin(angles)[:, None, None], np.cos(angles)[:, None, None]
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def augment_batch(batch: Batch, mode: str, rng: np.random.Generator) -> Batch:
    """Random per-event rotation about the beam (z) axis or about each jet axis."""
    if mode == "none":
        return batch
    if mode == "beam":
        axes = np.broadcast_to(np.array([0.0, 0.0, 1.0]), (len(batch), 3))
    else:
        axes = batch.jhat
    return batch.rotated(_axis_rotations(axes, rng))


def evaluate(model: Model, ds: JetDataset, batch_size: int = 1024) -> tuple[np.ndarray, float]:
    """Per-event scores (logit margin signal - background) and mean cross entropy."""
    scores = np.empty(len(ds))
    total = 0.0
    for start in range(0, len(ds), batch_size):
        idx = np.arange(start, min(start + batch_size, len(ds)))
        batch = Batch.from_dataset(ds, idx)
        logits = model.logits(batch)
        lsm = log_softmax(logits)
        total += -lsm[np.arange(len(idx)), batch.label].sum()
        scores[idx] = logits[:, 1] - logits[:, 0]
    return scores, total / max(len(ds), 1)


def _safe_auc(scores, labels) -> float:
    try:
        return roc_auc(scores, labels)
    except ValueError:
        return float("nan")


def train(model: Model, train_ds: JetDataset, val_ds: JetDataset, cfg: TrainConfig,
          out_dir: Path | None = None, resume: Path | None = None,
          extra_meta: dict | None = None) -> TrainResult:
    """Train ``model`` in place and return the history.

    The model's parameters are left at the best-validation-loss epoch.  With
    ``out_dir`` the run writes ``metrics.log``, ``best.ckpt`` and ``last.ckpt``;
    ``resume`` continues from a ``last.ckpt`` with its epoch numbering.
    ``extra_meta`` is stored in every checkpoint header (e.g. the run config).
    """
    store = model.store
    adam = AdamState.for_store(store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    result = TrainResult()
    start_epoch = 1
    if resume is not None:
        ckpt_model, meta, ckpt_adam = load_checkpoint(resume)
        if ckpt_model.cfg != model.cfg:
            raise TrainingError("resume checkpoint was written for a different model config")
        store.load(ckpt_model.store.values)
        if ckpt_adam is not None:
            adam = ckpt_adam
            adam.lr = cfg.lr
        start_epoch = int(meta.get("epoch", 0)) + 1
        result.best_epoch = int(meta.get("best_epoch", -1))
        result.best_val_loss = float(meta.get("best_val_loss", math.inf))
        result.history = [EpochRecord(**r) for r in meta.get("history", [])]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    if result.best_epoch > 0 and out_dir is not None and (out_dir / "best.ckpt").exists():
        result.best_params = load_checkpoint(out_dir / "best.ckpt")[0].store.values.copy()

    bad_epochs = 0
    if result.history:
        bad_epochs = result.history[-1].epoch - result.best_epoch
    n = len(train_ds)
    for epoch in range(start_epoch, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            batch = augment_batch(Batch.from_dataset(train_ds, idx), cfg.augment, rng)
            tape = Tape()
            loss = model.loss(tape, batch)
            value = float(loss.value)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite training loss {value} at epoch {epoch}, batch starting {start}; "
                                    f"max |param| = {np.max(np.abs(store.values)):.3g}")
            backward(tape, loss)
            adam_step(adam, store)
            total += value * len(idx)
            seen += len(idx)
        val_scores, val_loss = evaluate(model, val_ds, cfg.eval_batch_size)
        if not math.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, total / max(seen, 1), val_loss, _safe_auc(val_scores, val_ds.label))
        result.history.append(rec)
        log.info("epoch %s", rec.line())
        improved = val_loss < result.best_val_loss
        if improved:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            result.best_params = store.values.copy()
            bad_epochs = 0
        else:
            bad_epochs += 1
        if out_dir is not None:
            meta = {"epoch": epoch, "best_epoch": result.best_epoch, "best_val_loss": result.best_val_loss,
                    "history": [asdict(r) for r in result.history], "train": asdict(cfg),
                    **(extra_meta or {})}
            if improved:
                save_checkpoint(out_dir / "best.ckpt", model, meta)
            save_checkpoint(out_dir / "last.ckpt", model, meta, adam)
            write_log(out_dir / "metrics.log", result.history)
        if bad_epochs >= cfg.patience:
            result.stopped_early = True
            break
    if result.best_params is not None:
        store.load(result.best_params)
    return result


def write_log(path, history: list[EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("# epoch train_loss val_loss val_auc\n")
        for rec in history:
            fh.write(rec.line() + "\n")
