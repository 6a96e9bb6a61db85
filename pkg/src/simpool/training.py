"""Optimisation loop, cross-validation driver, and run statistics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import Dataset, kfold_split, make_batches
from .model import ModelPreset, SimPoolModel, resolve_preset
from .similarity import SimilarityConfig, preprocess_dataset

__all__ = [
    "TrainConfig",
    "EpochStats",
    "RunStats",
    "CrossValResult",
    "Adam",
    "adam_update",
    "train_run",
    "cross_validate",
    "evaluate_accuracy",
    "stats_to_csv",
    "stats_from_csv",
]

STATS_HEADER = "epoch,task_loss,le_0,le_1,lc_0,lc_1,train_acc,val_acc,clusters_0,clusters_1"


@dataclass(frozen=True)
class TrainConfig:
    """Concrete training settings; build from a preset and override."""

    preset: str = "enzymes"
    scale: float = 1.0
    assign_inputs: str = "structural"
    learning_rate: float = 1e-4
    epochs: int = 100
    batch_size: int = 20
    w_e: float = 1.0
    w_c: float = 1.0
    folds: int = 10
    seed: int = 0
    sim: SimilarityConfig = field(default_factory=SimilarityConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.w_e < 0 or self.w_c < 0:
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def from_preset(cls, name: str, scale: float = 1.0, **overrides) -> TrainConfig:
        preset = resolve_preset(name, scale=1.0)  # defaults come from the unscaled table
        base = dict(
            preset=name,
            scale=scale,
            learning_rate=preset.learning_rate,
            epochs=preset.epochs,
            w_e=preset.w_e,
            w_c=preset.w_c,
            sim=preset.sim,
        )
        base.update(overrides)
        return cls(**base)

    def model_preset(self) -> ModelPreset:
        return resolve_preset(self.preset, scale=self.scale)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["sim"] = asdict(self.sim)
        return out


@dataclass
class EpochStats:
    epoch: int
    task_loss: float
    le: tuple[float, float]
    lc: tuple[float, float]
    train_acc: float
    val_acc: float
    clusters: tuple[int, int]

    def csv_row(self) -> str:
        fields = [
            str(self.epoch),
            repr(self.task_loss),
            repr(self.le[0]),
            repr(self.le[1]),
            repr(self.lc[0]),
            repr(self.lc[1]),
            repr(self.train_acc),
            repr(self.val_acc),
            str(self.clusters[0]),
            str(self.clusters[1]),
        ]
        return ",".join(fields)


@dataclass
class RunStats:
    epochs: list[EpochStats] = field(default_factory=list)
    aborted: bool = False

    @property
    def max_val_acc(self) -> float:
        return max((e.val_acc for e in self.epochs), default=0.0)

    @property
    def best_epoch(self) -> int:
        """First epoch at which the maximum validation accuracy occurred."""
        best = self.max_val_acc
        for e in self.epochs:
            if e.val_acc == best:
                return e.epoch
        return -1


def stats_to_csv(stats: RunStats) -> str:
    lines = [STATS_HEADER]
    lines.extend(e.csv_row() for e in stats.epochs)
    return "\n".join(lines) + "\n"


def stats_from_csv(text: str) -> RunStats:
    lines = [l for l in text.strip().splitlines() if l]
    if not lines or lines[0] != STATS_HEADER:
        raise ValueError("unrecognised stats CSV header")
    stats = RunStats()
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 10:
            raise ValueError(f"malformed stats row: {line!r}")
        stats.epochs.append(
            EpochStats(
                epoch=int(parts[0]),
                task_loss=float(parts[1]),
                le=(float(parts[2]), float(parts[3])),
                lc=(float(parts[4]), float(parts[5])),
                train_acc=float(parts[6]),
                val_acc=float(parts[7]),
                clusters=(int(parts[8]), int(parts[9])),
            )
        )
    return stats


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def adam_update(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected update; mutates value/m/v in place."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    value -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over named parameter tensors; missing gradients count as zero."""

    def __init__(self, params: dict[str, ad.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for name, p in self.params.items():
            grad = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.all(np.isfinite(grad)):
                raise NumericError(f"non-finite gradient for parameter {name}")
            adam_update(
                p.values, grad, self.m[name], self.v[name],
                self.t, self.lr, self.beta1, self.beta2, self.eps,
            )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _mapped_features_for(cfg: TrainConfig, ds: Dataset, supplied):
    if cfg.assign_inputs == "node":
        return None
    if supplied is not None:
        return supplied
    return preprocess_dataset(ds, cfg.sim)


def evaluate_accuracy(model: SimPoolModel, ds: Dataset, indices, mapped=None,
                      batch_size: int = 20) -> float:
    """Fraction of correctly classified graphs among `indices`."""
    correct = 0
    total = 0
    with ad.no_grad():
        for batch in make_batches(ds, batch_size, subset=np.asarray(indices)):
            fwd = model.forward_batch(batch, mapped)
            correct += int((fwd.probs.argmax(axis=1) == batch.labels).sum())
            total += batch.size
    return correct / total if total else 0.0


def train_run(cfg: TrainConfig, ds: Dataset, fold: int = 0, mapped=None,
              progress=None) -> tuple[RunStats, SimPoolModel]:
    """Train one fold; deterministic for a fixed config and seed.

    Per epoch the stats record batch-averaged losses, training accuracy
    accumulated from the training passes themselves, validation accuracy
    from a separate pass, and the number of distinct argmax clusters used
    across all training graphs at each pooling layer. Returns the stats
    stream and the trained model.
    """
    if not 0 <= fold < cfg.folds:
        raise ValueError(f"fold {fold} outside [0, {cfg.folds})")
    splits = kfold_split(ds, cfg.folds, cfg.seed)
    train_idx, val_idx = splits[fold]
    mapped = _mapped_features_for(cfg, ds, mapped)

    model = SimPoolModel(
        cfg.model_preset(),
        feature_dim=ds.feature_dim,
        num_classes=ds.num_classes,
        assign_inputs=cfg.assign_inputs,
        seed=cfg.seed,
        sim=cfg.sim,
    )
    optimiser = Adam(model.parameters(), cfg.learning_rate)
    stats = RunStats()

    for epoch in range(cfg.epochs):
        batches = make_batches(
            ds, cfg.batch_size, shuffle_seed=cfg.seed * 1_000_003 + epoch, subset=train_idx
        )
        loss_sums = np.zeros(5)  # task, le0, le1, lc0, lc1
        correct = 0
        ids0: set[int] = set()
        ids1: set[int] = set()
        diverged = False
        for batch in batches:
            with ad.Tape() as tape:
                fwd = model.forward_batch(batch, mapped)
                total = fwd.total(cfg.w_e, cfg.w_c)
                if not np.isfinite(total.item()):
                    diverged = True
                    break
                optimiser.zero_grad()
                tape.backward(total)
            optimiser.step()
            w = batch.size
            loss_sums += w * np.array(
                [fwd.task_loss.item(), fwd.le[0].item(), fwd.le[1].item(),
                 fwd.lc[0].item(), fwd.lc[1].item()]
            )
            correct += int((fwd.probs.argmax(axis=1) == batch.labels).sum())
            ids0 |= fwd.cluster_ids[0]
            ids1 |= fwd.cluster_ids[1]
        if diverged:
            stats.aborted = True
            break
        n_train = len(train_idx)
        val_acc = evaluate_accuracy(model, ds, val_idx, mapped, cfg.batch_size)
        row = EpochStats(
            epoch=epoch,
            task_loss=float(loss_sums[0] / n_train),
            le=(float(loss_sums[1] / n_train), float(loss_sums[2] / n_train)),
            lc=(float(loss_sums[3] / n_train), float(loss_sums[4] / n_train)),
            train_acc=correct / n_train,
            val_acc=val_acc,
            clusters=(len(ids0), len(ids1)),
        )
        stats.epochs.append(row)
        if progress is not None:
            progress(row)
    return stats, model


@dataclass
class CrossValResult:
    fold_stats: list[RunStats]
    maxima: list[float]
    mean: float
    std: float
    partial: bool

    def to_dict(self) -> dict:
        return {
            "fold_maxima": self.maxima,
            "mean": self.mean,
            "std": self.std,
            "std_kind": "population",
            "partial": self.partial,
            "folds": len(self.fold_stats),
        }


def fold_aggregate(maxima) -> tuple[float, float]:
    """Mean and population standard deviation of per-fold maxima."""
    return float(np.mean(maxima)), float(np.std(maxima))


def cross_validate(cfg: TrainConfig, ds: Dataset, mapped=None, progress=None) -> CrossValResult:
    """Run every fold and aggregate the per-fold maximum accuracies."""
    if cfg.folds < 2:
        raise ValueError("cross-validation needs at least 2 folds")
    mapped = _mapped_features_for(cfg, ds, mapped)
    fold_stats = []
    for fold in range(cfg.folds):
        stats, _ = train_run(cfg, ds, fold=fold, mapped=mapped)
        fold_stats.append(stats)
        if progress is not None:
            progress(fold, stats)
    maxima = [s.max_val_acc for s in fold_stats]
    mean, std = fold_aggregate(maxima)
    return CrossValResult(
        fold_stats=fold_stats,
        maxima=maxima,
        mean=mean,
        std=std,
        partial=any(s.aborted for s in fold_stats),
    )
