"""Training loop: datasets, stratified splits, Adam, early stopping.

The loop follows a fixed recipe: shuffle the training set each epoch with a
seed derived from (run seed, epoch), walk it in mini-batches, compute mean
cross-entropy from the logits, backpropagate, and apply one Adam update per
batch. After each epoch the model is scored on the evaluation split; the
best-scoring parameters are kept and returned when patience runs out.

Everything here is deterministic given the seeds: same data + same config
produces bit-identical parameters, logs, and metrics.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import metrics as metrics_mod
from .autodiff import GradTape, Tensor
from .errors import ConfigError, ContractError, DataError, FormatError, NumericError
from .vit import Model, ModelParams, ViTConfig, forward_logits, init_params, load_weights, save_weights

CHECKPOINT_FORMAT = "tilevit-checkpoint-v1"


class LabeledDataset:
    """Immutable list of (image tensor, class index) pairs plus class names."""

    def __init__(self, items: list[tuple[Tensor, int]], class_names: list[str]):
        if not class_names:
            raise DataError("dataset needs at least one class name")
        if len(set(class_names)) != len(class_names):
            raise DataError("class names must be unique")
        for i, (tensor, label) in enumerate(items):
            if not isinstance(tensor, Tensor):
                raise DataError(f"item {i}: expected a Tensor, got {type(tensor).__name__}")
            if not 0 <= int(label) < len(class_names):
                raise DataError(f"item {i}: label {label} outside [0, {len(class_names)})")
            if tensor.shape != items[0][0].shape:
                raise DataError(
                    f"item {i}: shape {tensor.shape} differs from first item {items[0][0].shape}"
                )
        self.items = [(t, int(label)) for t, label in items]
        self.class_names = list(class_names)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def labels(self) -> np.ndarray:
        return np.array([label for _, label in self.items], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        counts = np.zeros(self.num_classes, dtype=np.int64)
        for _, label in self.items:
            counts[label] += 1
        return counts

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= len(self.items)):
            raise ContractError(f"subset indices out of range for dataset of {len(self.items)}")
        return LabeledDataset([self.items[i] for i in idx], self.class_names)


# ---------------------------------------------------------------------------
# stratified splitting


@dataclasses.dataclass
class SplitPlan:
    """Assignment of every sample to a split.

    holdout: assignments[i] is 0 (train) or 1 (test).
    kfold:   assignments[i] is the fold index in [0, k).
    """

    kind: str
    seed: int
    assignments: np.ndarray
    train_fraction: Optional[float] = None
    k: Optional[int] = None


def _per_class_shuffled_indices(labels: np.ndarray, num_classes: int, seed: int) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for c in range(num_classes):
        idx = np.flatnonzero(labels == c)
        out.append(rng.permutation(idx))
    return out


def make_holdout_plan(ds: LabeledDataset, train_fraction: float = 0.8, seed: int = 0) -> SplitPlan:
    """Per-class split: each class contributes floor(f * n_c + 0.5) samples
    to the training side, membership chosen by a seeded shuffle."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels = ds.labels()
    assignments = np.ones(len(ds), dtype=np.int64)
    for class_indices in _per_class_shuffled_indices(labels, ds.num_classes, seed):
        n_train = int(np.floor(train_fraction * class_indices.size + 0.5))
        assignments[class_indices[:n_train]] = 0
    return SplitPlan(kind="holdout", seed=seed, assignments=assignments, train_fraction=train_fraction)


def make_kfold_plan(ds: LabeledDataset, k: int, seed: int = 0) -> SplitPlan:
    """Stratified k folds via one round-robin cursor shared across classes.

    Within each class the shuffled samples are dealt to folds cursor, cursor+1,
    ... (mod k), and the cursor carries over to the next class. This keeps
    fold sizes within one of each other both per class and overall.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if k > len(ds):
        raise ConfigError(f"k={k} exceeds dataset size {len(ds)}")
    labels = ds.labels()
    assignments = np.empty(len(ds), dtype=np.int64)
    cursor = 0
    for class_indices in _per_class_shuffled_indices(labels, ds.num_classes, seed):
        for idx in class_indices:
            assignments[idx] = cursor % k
            cursor += 1
    return SplitPlan(kind="kfold", seed=seed, assignments=assignments, k=k)


def split(ds: LabeledDataset, plan: SplitPlan):
    """Materialize a plan. holdout -> (train, test); kfold -> list of
    (train, test) pairs, one per fold, fold i held out in pair i."""
    if len(plan.assignments) != len(ds):
        raise ContractError(f"plan covers {len(plan.assignments)} samples, dataset has {len(ds)}")
    if plan.kind == "holdout":
        train_idx = np.flatnonzero(plan.assignments == 0)
        test_idx = np.flatnonzero(plan.assignments == 1)
        return ds.subset(train_idx), ds.subset(test_idx)
    if plan.kind == "kfold":
        pairs = []
        for fold in range(plan.k):
            test_idx = np.flatnonzero(plan.assignments == fold)
            train_idx = np.flatnonzero(plan.assignments != fold)
            pairs.append((ds.subset(train_idx), ds.subset(test_idx)))
        return pairs
    raise ContractError(f"unknown split kind {plan.kind!r}")


def batches(ds: LabeledDataset, batch_size: int, shuffle_seed: Optional[int] = None):
    """Yield (X, y) mini-batches covering the dataset exactly once.

    X stacks the images into one (B, 3, S, S) tensor; y is the matching int
    label array. With a seed, order is a seeded permutation; otherwise
    sequential. The final batch may be short.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be positive, got {batch_size}")
    order = np.arange(len(ds))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        stacked = np.stack([ds.items[i][0].data for i in chunk])
        yield Tensor(stacked), np.array([ds.items[i][1] for i in chunk], dtype=np.int64)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood over a batch, computed from logits.

    logits: (B, C); labels: int array of shape (B,). Uses the log-sum-exp
    form with max subtraction, so extreme logits stay finite.
    """
    if logits.ndim != 2:
        raise ContractError(f"cross_entropy expects (B, C) logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if y.shape != (b,):
        raise ContractError(f"labels shape {y.shape} does not match batch {b}")
    if y.size and (y.min() < 0 or y.max() >= c):
        raise ContractError(f"labels outside [0, {c})")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(b), y]
    out = np.array(nll.mean())

    def back(g):
        soft = np.exp(z - zmax)
        soft /= soft.sum(axis=1, keepdims=True)
        soft[np.arange(b), y] -= 1.0
        return (soft * (np.asarray(g).reshape(()) / b),)

    return ad.custom_op("cross_entropy", out, (logits,), back)


# ---------------------------------------------------------------------------
# optimizer


@dataclasses.dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    freeze_backbone: bool = False
    weight_decay: float = 0.0
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.patience > self.max_epochs:
            raise ConfigError(
                f"patience {self.patience} must not exceed max_epochs {self.max_epochs}"
            )
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")
        if self.eps_adam <= 0:
            raise ConfigError(f"eps_adam must be positive, got {self.eps_adam}")
        if self.weight_decay < 0 or self.grad_clip < 0:
            raise ConfigError("weight_decay and grad_clip must be >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        fields = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return TrainConfig(**d)


class AdamState:
    """First/second moment estimates and the shared step counter."""

    def __init__(self):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update over the named gradients.

    Functional: returns fresh params and mutated state. Only names present
    in ``grads`` move, which is how backbone freezing works. If any gradient
    is non-finite the step raises NumericError before touching anything.
    """
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != parameter {name} shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    updates: dict[str, Tensor] = {}
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        step = cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
        updates[name] = Tensor(params[name].data - step, requires_grad=True)
    return params.with_updates(updates), state


class EarlyStopper:
    """Track the best evaluation accuracy; stop after ``patience`` epochs
    without strict improvement. Ties do not reset the counter."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ContractError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.best = -np.inf
        self.best_index = -1
        self.bad = 0

    def update(self, value: float, index: int) -> bool:
        """Record one epoch's score; returns True when training should stop."""
        if value > self.best:
            self.best = value
            self.best_index = index
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


# ---------------------------------------------------------------------------
# the loop


@dataclasses.dataclass
class TrainLogRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_loss: float
    eval_acc: float
    wall_ms: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "eval_loss": self.eval_loss,
            "eval_acc": self.eval_acc,
            "wall_ms": self.wall_ms,
        }


@dataclasses.dataclass
class TrainResult:
    params: ModelParams
    records: list[TrainLogRecord]
    best_epoch: int
    best_eval_acc: float
    diverged: bool
    stop_reason: str


def _batch_logits(x: Tensor, params: ModelParams, cfg: ViTConfig) -> Tensor:
    rows = [
        ad.reshape(forward_logits(Tensor(x.data[i]), params, cfg), (1, cfg.num_classes))
        for i in range(x.shape[0])
    ]
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def evaluate(ds: LabeledDataset, params: ModelParams, cfg: ViTConfig) -> tuple[float, float]:
    """(mean loss, accuracy in [0, 1]) over a dataset, without recording."""
    if len(ds) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for x, labels in batches(ds, 64):
        logits = _batch_logits(x, params, cfg)
        total_loss += cross_entropy(logits, labels).item() * labels.size
        correct += int((np.argmax(logits.data, axis=1) == labels).sum())
    return total_loss / len(ds), correct / len(ds)


def train(
    train_ds: LabeledDataset,
    eval_ds: LabeledDataset,
    model_cfg: ViTConfig,
    train_cfg: TrainConfig,
    init: Optional[ModelParams] = None,
    progress: Optional[Callable[[TrainLogRecord], None]] = None,
) -> TrainResult:
    """Run the training loop and return the best parameters seen.

    Epoch order: shuffle, optimize batch by batch, then score both splits.
    Early stopping watches evaluation accuracy with strict improvement. If a
    step produces non-finite gradients the run stops and returns the best
    parameters so far with ``diverged`` set.
    """
    if len(train_ds) == 0:
        raise DataError("training split is empty")
    if len(eval_ds) == 0:
        raise DataError("evaluation split is empty")
    if train_ds.class_names != eval_ds.class_names:
        raise DataError("train and eval splits disagree on class names")
    if model_cfg.num_classes != train_ds.num_classes:
        raise ConfigError(
            f"model has {model_cfg.num_classes} classes, dataset has {train_ds.num_classes}"
        )
    params = init if init is not None else init_params(model_cfg, seed=train_cfg.seed)
    if train_cfg.freeze_backbone:
        trainable = {"head_weight", "head_bias"}
    else:
        trainable = set(params.names())
    state = AdamState()
    stopper = EarlyStopper(train_cfg.patience)
    best_params = params
    records: list[TrainLogRecord] = []
    diverged = False
    stop_reason = "max_epochs"
    for epoch in range(train_cfg.max_epochs):
        epoch_start = time.perf_counter()
        shuffle_seed = np.random.default_rng([train_cfg.seed, epoch]).integers(0, 2**63 - 1)
        try:
            for x, labels in batches(train_ds, train_cfg.batch_size, int(shuffle_seed)):
                params.zero_grad()
                with GradTape() as tape:
                    logits = _batch_logits(x, params, model_cfg)
                    loss = cross_entropy(logits, labels)
                tape.backward(loss)
                grads: dict[str, np.ndarray] = {}
                for name, tensor in params.items():
                    if name not in trainable:
                        continue
                    g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
                    if train_cfg.weight_decay > 0.0:
                        g = g + train_cfg.weight_decay * tensor.data
                    grads[name] = g
                if train_cfg.grad_clip > 0.0:
                    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
                    if norm > train_cfg.grad_clip:
                        ratio = train_cfg.grad_clip / norm
                        grads = {name: g * ratio for name, g in grads.items()}
                params, state = adam_step(params, grads, state, train_cfg)
            train_loss, train_acc = evaluate(train_ds, params, model_cfg)
            eval_loss, eval_acc = evaluate(eval_ds, params, model_cfg)
        except NumericError:
            diverged = True
            stop_reason = "diverged"
            break
        record = TrainLogRecord(
            epoch=epoch,
            train_loss=train_loss,
            train_acc=train_acc,
            eval_loss=eval_loss,
            eval_acc=eval_acc,
            wall_ms=(time.perf_counter() - epoch_start) * 1000.0,
        )
        records.append(record)
        if progress is not None:
            progress(record)
        improved = eval_acc > stopper.best
        should_stop = stopper.update(eval_acc, epoch)
        if improved:
            best_params = params
        if should_stop:
            stop_reason = "early_stop"
            break
    if stopper.best_index < 0:
        # diverged inside the first epoch; nothing was ever scored
        return TrainResult(params, records, -1, 0.0, diverged, stop_reason)
    return TrainResult(best_params, records, stopper.best_index, float(stopper.best), diverged, stop_reason)


def run_kfold(
    ds: LabeledDataset,
    model_cfg: ViTConfig,
    train_cfg: TrainConfig,
    k: int,
    split_seed: int = 0,
    init_factory: Optional[Callable[[int], ModelParams]] = None,
    progress: Optional[Callable[[int, TrainLogRecord], None]] = None,
) -> tuple[list[TrainResult], list["metrics_mod.MetricsReport"], "metrics_mod.MetricsReport"]:
    """Train one fresh model per fold; returns per-fold results and reports
    plus the cross-fold mean report.

    ``init_factory``, when given, supplies each fold's starting parameters
    (called with the fold index); the default re-initializes from the run
    seed.
    """
    plan = make_kfold_plan(ds, k, seed=split_seed)
    results = []
    reports = []
    for fold, (fold_train, fold_test) in enumerate(split(ds, plan)):
        hook = (lambda rec, f=fold: progress(f, rec)) if progress is not None else None
        init = init_factory(fold) if init_factory is not None else None
        result = train(fold_train, fold_test, model_cfg, train_cfg, init=init, progress=hook)
        model = Model(model_cfg, params=result.params)
        reports.append(metrics_mod.report(model, fold_test))
        results.append(result)
    return results, reports, metrics_mod.mean_report(reports)


# ---------------------------------------------------------------------------
# artifacts


def write_train_log(path: str, records: list[TrainLogRecord]) -> None:
    """One JSON object per line, keys in a fixed order."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(json.dumps(record.to_dict()) + "\n")


def read_train_log(path: str) -> list[TrainLogRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
                records.append(TrainLogRecord(**d))
            except (json.JSONDecodeError, TypeError) as e:
                raise FormatError(f"{path}:{lineno}: bad log line ({e})") from e
    return records


def save_checkpoint(
    directory: str,
    params: ModelParams,
    model_cfg: ViTConfig,
    train_cfg: TrainConfig,
    epoch: int,
    eval_acc: float,
    class_names: list[str],
    split_seed: int = 0,
) -> None:
    """Write checkpoint.weights.bin plus a checkpoint.json sidecar holding
    the configs, class names, and best-epoch stats."""
    os.makedirs(directory, exist_ok=True)
    weights_name = "checkpoint.weights.bin"
    save_weights(os.path.join(directory, weights_name), params)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "weights": weights_name,
        "epoch": epoch,
        "eval_acc": eval_acc,
        "class_names": class_names,
        "model_config": model_cfg.to_dict(),
        "train_config": train_cfg.to_dict(),
        "split_seed": split_seed,
    }
    with open(os.path.join(directory, "checkpoint.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")


def load_checkpoint(directory: str) -> tuple[Model, TrainConfig, dict]:
    """Load a checkpoint directory; returns (model, train config, sidecar)."""
    sidecar_path = os.path.join(directory, "checkpoint.json")
    if not os.path.exists(sidecar_path):
        raise DataError(f"no checkpoint.json in {directory}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        try:
            sidecar = json.load(fh)
        except json.JSONDecodeError as e:
            raise FormatError(f"{sidecar_path}: bad JSON ({e})") from e
    if sidecar.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{sidecar_path}: unknown format {sidecar.get('format')!r}")
    try:
        model_cfg = ViTConfig.from_dict(sidecar["model_config"])
        train_cfg = TrainConfig.from_dict(sidecar["train_config"])
        weights_name = sidecar["weights"]
        class_names = list(sidecar["class_names"])
    except KeyError as e:
        raise FormatError(f"{sidecar_path}: missing key {e}") from e
    if model_cfg.num_classes != len(class_names):
        raise FormatError(
            f"{sidecar_path}: {len(class_names)} class names for {model_cfg.num_classes}-way model"
        )
    params = load_weights(os.path.join(directory, weights_name), cfg=model_cfg)
    return Model(model_cfg, params=params), train_cfg, sidecar
