"""Mini-batch training with AdamW, best-epoch selection on validation AUC,
and an exhaustive learning-rate x weight-decay grid search."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .features import EncodedBatch
from .metrics import auc
from .model import Model
from .nn import adamw_step
from .nn.params import ParameterStore

LR_GRID = (5e-4, 1e-4, 5e-5, 1e-5)
L2_GRID = (1e-5, 5e-6, 1e-6, 5e-7, 1e-7)


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 10
    lr: float = LR_GRID[0]
    weight_decay: float = L2_GRID[0]
    lr_grid: tuple[float, ...] = LR_GRID
    l2_grid: tuple[float, ...] = L2_GRID
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two rows)")
        if not self.lr_grid or not self.l2_grid:
            raise ValueError("hyperparameter grids must be non-empty")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lr_grid"], out["l2_grid"] = list(self.lr_grid), list(self.l2_grid)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        for key in ("lr_grid", "l2_grid"):
            if key in obj:
                obj[key] = tuple(float(v) for v in obj[key])
        return cls(**obj)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_auc: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord]
    best_epoch: int
    best_val_auc: float
    last_val_auc: float
    lr: float
    weight_decay: float
    seed: int
    checkpoint_path: str | None = None
    wall_clock_s: float = 0.0

    def to_dict(self) -> dict:
        out = asdict(self)
        out["epochs"] = [asdict(e) for e in self.epochs]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def epochs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_auc"])
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.train_loss), repr(e.val_auc)])
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_report.json").write_text(self.to_json() + "\n")
        (out / "train_epochs.csv").write_text(self.epochs_csv())


def batch_slices(n: int, batch_size: int, rng: np.random.Generator | None) -> list[np.ndarray]:
    """Shuffled index batches; a trailing batch of one row is merged into the
    previous batch so batch norm always sees at least two rows."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) == 1:
        last = out.pop()
        out[-1] = np.concatenate([out[-1], last])
    return out


def compute_batch_loss(model: Model, store: ParameterStore, batch: EncodedBatch, train: bool = True):
    """Mean cross-entropy and its gradients for one batch."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return model.loss_and_grads(store, batch, train)


def _cast_batch(batch: EncodedBatch, dtype) -> EncodedBatch:
    return EncodedBatch(**{k: (v.astype(dtype) if v is not None and v.dtype.kind == "f" else v)
                           for k, v in batch.__dict__.items()})


def evaluate_auc(model: Model, store: ParameterStore, batch: EncodedBatch) -> float:
    return auc(model.predict_proba(store, batch), batch.labels)


def train(model: Model, train_batch: EncodedBatch, val_batch: EncodedBatch, cfg: TrainConfig = TrainConfig(),
          *, lr: float | None = None, weight_decay: float | None = None, checkpoint_path=None,
          log=None) -> tuple[ParameterStore, TrainReport]:
    """Train from a fresh initialization; returns the best-validation-AUC
    parameters and the report.  Fully determined by ``cfg.seed``."""
    if len(train_batch) < 2 or len(val_batch) < 1:
        raise ValueError("need at least two training and one validation instance")
    lr = cfg.lr if lr is None else lr
    wd = cfg.weight_decay if weight_decay is None else weight_decay
    dtype = np.dtype(cfg.precision)
    train_batch = _cast_batch(train_batch, dtype)
    val_batch = _cast_batch(val_batch, dtype)
    t0 = time.perf_counter()
    store = model.init_params(cfg.seed, dtype)
    rng = np.random.default_rng([cfg.seed, 1])
    records, best, best_auc = [], None, -np.inf
    for epoch in range(1, cfg.epochs + 1):
        losses, sizes = [], []
        for idx in batch_slices(len(train_batch), cfg.batch_size, rng):
            b = train_batch.take(idx)
            loss, grads, res = compute_batch_loss(model, store, b)
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"loss {loss} at epoch {epoch}, step {store.step + 1}")
            adamw_step(store, grads, lr, wd)
            if res.running_stats is not None:
                store.buffers.update(res.running_stats)
            losses.append(loss)
            sizes.append(len(idx))
        train_loss = float(np.dot(losses, sizes) / np.sum(sizes))
        val_auc = evaluate_auc(model, store, val_batch)
        records.append(EpochRecord(epoch, train_loss, val_auc))
        if log:
            log(f"epoch {epoch}: loss={train_loss:.4f} val_auc={val_auc:.4f}")
        if val_auc > best_auc:
            best_auc, best = val_auc, (epoch, store.snapshot())
    best_epoch, snap = best
    store.restore(snap)
    report = TrainReport(records, best_epoch, float(best_auc), records[-1].val_auc, lr, wd, cfg.seed,
                         str(checkpoint_path) if checkpoint_path else None, time.perf_counter() - t0)
    if checkpoint_path:
        save_checkpoint(model, store, checkpoint_path,
                        extra={"lr": lr, "weight_decay": wd, "best_epoch": best_epoch, "train_seed": cfg.seed})
    return store, report


@dataclass
class GridResult:
    best_lr: float
    best_l2: float
    best_val_auc: float
    runs: list[dict] = field(default_factory=list)

    @property
    def n_runs(self) -> int:
        return len(self.runs)

    def runs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lr", "l2", "best_val_auc", "best_epoch"])
        for r in self.runs:
            w.writerow([repr(r["lr"]), repr(r["l2"]), repr(r["best_val_auc"]), r["best_epoch"]])
        return buf.getvalue()


def grid_search(model: Model, train_batch: EncodedBatch, val_batch: EncodedBatch, cfg: TrainConfig = TrainConfig(),
                log=None, trainer=train) -> GridResult:
    """Every (lr, l2) pair is trained from the same seed.  Ties in validation
    AUC go to the higher learning rate, then the higher l2."""
    runs = []
    for lr in cfg.lr_grid:
        for l2 in cfg.l2_grid:
            _, rep = trainer(model, train_batch, val_batch, cfg, lr=lr, weight_decay=l2)
            runs.append({"lr": lr, "l2": l2, "best_val_auc": rep.best_val_auc, "best_epoch": rep.best_epoch})
            if log:
                log(f"lr={lr:g} l2={l2:g}: val_auc={rep.best_val_auc:.4f}")
    best = max(runs, key=lambda r: (r["best_val_auc"], r["lr"], r["l2"]))
    return GridResult(best["lr"], best["l2"], best["best_val_auc"], runs)
