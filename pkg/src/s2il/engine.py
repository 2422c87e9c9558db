"""Class-incremental training: task streams, per-task training and evaluation."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .distill import FDWeights, SSIMParams, baseline_fd_loss, s2il_loss
from .errors import ContractError, NumericGuardError
from .exemplar import ExemplarStore, herding_select, rebalance
from .metrics import RunRecord
from .netlib import Model, class_embeddings, extract_pooled, gradcam_importance, grow_head, lsc_loss
from .tensor import GradTape, Tensor, backward

logger = logging.getLogger(__name__)

DISTILL_MODES = ("none", "eq1", "eq2", "s2il")


# ----------------------------------------------------------------------------
# task streams


@dataclass
class TaskSpec:
    index: int
    classes: list[int]
    train_idx: np.ndarray
    test_idx: np.ndarray


@dataclass
class TaskStream:
    dataset: Dataset
    class_order: list[int]
    base: int
    increment: int
    tasks: list[TaskSpec]

    @property
    def num_increments(self) -> int:
        """T: the index of the last task (tasks run 0..T)."""
        return len(self.tasks) - 1

    def classes_upto(self, t: int) -> list[int]:
        return [c for task in self.tasks[:t + 1] for c in task.classes]

    def train_idx_upto(self, t: int) -> np.ndarray:
        return np.sort(np.concatenate([task.train_idx for task in self.tasks[:t + 1]]))

    def test_idx_upto(self, t: int) -> np.ndarray:
        return np.sort(np.concatenate([task.test_idx for task in self.tasks[:t + 1]]))


def build_stream(dataset: Dataset, base_classes: int, increment: int, class_order_seed: int = 0) -> TaskStream:
    """Split a dataset into a base task and equal-size incremental tasks.

    The class order is a seeded permutation of the dataset's class ids.
    """
    classes = dataset.classes
    n = len(classes)
    if increment < 1:
        raise ContractError("increment must be at least one class")
    if not 1 <= base_classes <= n:
        raise ContractError(f"base task needs between 1 and {n} classes, got {base_classes}")
    if (n - base_classes) % increment:
        raise ContractError(f"{n - base_classes} classes after the base task do not split into tasks of {increment}")
    order = [int(c) for c in np.random.default_rng(class_order_seed).permutation(classes)]
    groups = [order[:base_classes]]
    for start in range(base_classes, n, increment):
        groups.append(order[start:start + increment])
    tasks = []
    for t, group in enumerate(groups):
        for c in group:
            if not np.any((dataset.labels == c) & ~dataset.is_test) or not np.any((dataset.labels == c) & dataset.is_test):
                raise ContractError(f"class {c} needs at least one train and one test sample")
        tasks.append(TaskSpec(t, group, dataset.indices(group, test=False), dataset.indices(group, test=True)))
    return TaskStream(dataset, order, base_classes, increment, tasks)


def lambda_schedule(base: float, classes_seen: int, classes_new: int) -> float:
    """Distillation weight ``base * sqrt(classes_seen / classes_new)``."""
    if classes_new <= 0:
        raise ContractError("classes_new must be positive")
    if classes_seen < classes_new:
        raise ContractError("classes_seen cannot be smaller than classes_new")
    return base * math.sqrt(classes_seen / classes_new)


# ----------------------------------------------------------------------------
# optimisation


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.1
    incremental_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lambda_base: float = 4.0
    finetune_epochs: int = 10
    finetune_lr: float = 0.05
    finetune_distill: bool = True
    seed: int = 0
    distill: str = "s2il"
    oracle: bool = False
    dtype: str = "float64"
    clip_norm: float | None = None

    def __post_init__(self):
        if self.distill not in DISTILL_MODES:
            raise ContractError(f"distillation mode must be one of {DISTILL_MODES}, got {self.distill!r}")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ContractError("epoch counts cannot be negative")
        if self.batch_size < 1:
            raise ContractError("batch size must be positive")
        # lr == 0 is allowed for frozen diagnostic passes
        if self.incremental_lr is not None and self.incremental_lr < 0:
            raise ContractError("incremental learning rate must be nonnegative")
        if self.lr < 0 or self.finetune_lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ContractError("learning rates, weight decay and momentum must be nonnegative (momentum < 1)")
        if self.lambda_base < 0:
            raise ContractError("lambda base must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ContractError("clip_norm must be positive when set")


class SGD:
    """Momentum SGD with coupled weight decay (the classic formulation)."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad.data
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def clip(self, max_norm: float) -> float:
        """Rescale all gradients so their joint L2 norm is at most ``max_norm``."""
        grads = [p.grad.data for p in self.params if p.grad is not None]
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
        if norm > max_norm:
            for p in self.params:
                if p.grad is not None:
                    p.grad = Tensor._wrap(p.grad.data * (max_norm / norm))
        return norm

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * epoch / epochs))


def freeze(model: Model) -> Model:
    for p in model.parameters():
        p.requires_grad = False
    return model


# ----------------------------------------------------------------------------
# training


@dataclass
class TaskOutcome:
    model: Model
    task_acc: list[float]
    overall: float
    lam: float
    train_ids: np.ndarray
    draws: dict[int, int]
    batch_log: list[dict[str, float]] = field(default_factory=list)
    finetune_ids: np.ndarray | None = None


def _task_rng(seed: int, t: int, stage: int) -> np.random.Generator:
    return np.random.default_rng([seed, t, stage])


def _distill_term(mode: str, bundle, teacher_bundle, ssim: SSIMParams, fd_weights: FDWeights | None):
    if mode == "s2il":
        if bundle.last.shape[1] != teacher_bundle.last.shape[1]:
            raise ContractError("teacher and student last layers differ in channel count")
        return s2il_loss(bundle.last, teacher_bundle.last, ssim)
    if mode == "eq1":
        return baseline_fd_loss(bundle, teacher_bundle, None)
    if mode == "eq2":
        if fd_weights is None:
            raise ContractError("eq2 distillation needs externally supplied importance weights")
        return baseline_fd_loss(bundle, teacher_bundle, fd_weights)
    raise ContractError(f"no distillation term for mode {mode!r}")


def _fit(model: Model, teacher: Model | None, ds: Dataset, ids: np.ndarray, epochs: int, lr: float,
         cfg: TrainConfig, lam: float, ssim: SSIMParams, fd_weights: FDWeights | None,
         rng: np.random.Generator, t: int, log: list[dict[str, float]], draws: Counter) -> None:
    opt = SGD(model.parameters(), lr, cfg.momentum, cfg.weight_decay)
    use_distill = teacher is not None and lam > 0 and cfg.distill != "none"
    for epoch in range(epochs):
        opt.lr = cosine_lr(lr, epoch, epochs)
        order = rng.permutation(ids)
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            xb, yb = Tensor(ds.images[batch]), ds.labels[batch]
            draws.update(int(c) for c in yb)
            try:
                tb = teacher.forward(xb, with_head=False) if use_distill else None
                with GradTape():
                    bundle = model.forward(xb)
                    cls = lsc_loss(bundle, yb)
                    loss = cls
                    dval = 0.0
                    if use_distill:
                        dist = _distill_term(cfg.distill, bundle, tb, ssim, fd_weights)
                        dval = dist.item()
                        loss = cls + dist * lam
                if not np.isfinite(loss.item()):
                    raise NumericGuardError("non-finite loss")
                backward(loss)
            except NumericGuardError as err:
                raise NumericGuardError(
                    f"training diverged at task {t}, epoch {epoch}, batch {b} "
                    f"(sample ids {batch[:8].tolist()}...): {err}") from err
            if cfg.clip_norm is not None:
                opt.clip(cfg.clip_norm)
            opt.step()
            model.head.renormalize()
            log.append({"epoch": epoch, "batch": b, "loss": loss.item(), "cls": cls.item(), "distill": dval})


def balanced_ids(stream: TaskStream, t: int, exemplars: ExemplarStore, rng: np.random.Generator) -> np.ndarray:
    """Equal-per-class sample ids over all seen classes.

    Old classes contribute their exemplars, new classes their training data;
    every pool is cut to the smallest pool size (herding prefix for old
    classes, a seeded subsample for new ones).
    """
    ds = stream.dataset
    pools: dict[int, np.ndarray] = {}
    for c in stream.classes_upto(t - 1):
        pools[c] = np.asarray(exemplars.exemplars.get(c, []), dtype=np.int64)
    for c in stream.tasks[t].classes:
        pools[c] = np.flatnonzero((ds.labels == c) & ~ds.is_test)
    empty = [c for c, p in pools.items() if len(p) == 0]
    if empty:
        raise ContractError(f"classes {empty} have no samples for balanced fine-tuning")
    k = min(len(p) for p in pools.values())
    new = set(stream.tasks[t].classes)
    chosen = []
    for c, pool in pools.items():
        chosen.append(np.sort(rng.choice(pool, k, replace=False)) if c in new else pool[:k])
    return np.sort(np.concatenate(chosen))


def finetune_balanced(model: Model, stream: TaskStream, t: int, exemplars: ExemplarStore, cfg: TrainConfig,
                      teacher: Model | None = None, lam: float = 0.0, ssim: SSIMParams | None = None,
                      fd_weights: FDWeights | None = None,
                      log: list | None = None) -> tuple[Model, np.ndarray]:
    """Short class-balanced training pass at the fine-tune learning rate."""
    rng = _task_rng(cfg.seed, t, 1)
    ids = balanced_ids(stream, t, exemplars, rng)
    if cfg.finetune_epochs == 0:
        return model, ids
    lam = lam if cfg.finetune_distill else 0.0
    _fit(model, teacher, stream.dataset, ids, cfg.finetune_epochs, cfg.finetune_lr, cfg, lam,
         ssim or SSIMParams(), fd_weights, rng, t, log if log is not None else [], Counter())
    return model, ids


def evaluate(model: Model, stream: TaskStream, t: int, batch_size: int = 256) -> tuple[list[float], float]:
    """Accuracy on each task's test classes (tasks 0..t) and on all of them together."""
    ds = stream.dataset
    idx = stream.test_idx_upto(t)
    preds = []
    for start in range(0, len(idx), batch_size):
        batch = idx[start:start + batch_size]
        scores = model.forward(Tensor(ds.images[batch])).scores.data
        preds.append(np.asarray(model.head.class_ids)[scores.argmax(axis=1)])
    pred = np.concatenate(preds)
    truth = ds.labels[idx]
    accs = []
    for task in stream.tasks[:t + 1]:
        mask = np.isin(truth, task.classes)
        accs.append(float(np.mean(pred[mask] == truth[mask])))
    return accs, float(np.mean(pred == truth))


def train_task(model_prev: Model | None, stream: TaskStream, t: int, exemplars: ExemplarStore,
               cfg: TrainConfig, ssim: SSIMParams | None = None, fd_weights: FDWeights | None = None,
               model_spec: dict | None = None) -> TaskOutcome:
    """Train task ``t`` and evaluate on all classes seen so far.

    Task 0 starts from a seeded random model and uses only the classification
    loss. Later tasks copy ``model_prev``, imprint the new classes, and add
    ``lambda * distillation`` against a frozen copy of ``model_prev``. Oracle
    mode trains on all past training data with no distillation and no
    balanced fine-tuning.
    """
    ssim = ssim or SSIMParams()
    ds = stream.dataset
    task = stream.tasks[t]
    if t == 0:
        if model_prev is not None:
            raise ContractError("task 0 starts from a fresh model")
        model = Model.build(**(model_spec or {}), seed=cfg.seed)
        init_rng = _task_rng(cfg.seed, 0, 2)
        grow_head(model.head, task.classes, init_rng.normal(size=(len(task.classes), model.head.dim)), init_rng)
        teacher = None
    else:
        if model_prev is None:
            raise ContractError(f"task {t} needs the model from task {t - 1}")
        model = model_prev.copy()
        teacher = freeze(model_prev.copy())
        emb = class_embeddings(model, ds.images[task.train_idx], ds.labels[task.train_idx], task.classes)
        grow_head(model.head, task.classes, emb, _task_rng(cfg.seed, t, 2))

    if cfg.oracle or t == 0:
        ids = stream.train_idx_upto(t)
    else:
        missing = [c for c in stream.classes_upto(t - 1) if not exemplars.exemplars.get(c)]
        if missing:
            raise ContractError(f"no exemplars stored for classes {missing}")
        ids = np.union1d(task.train_idx, exemplars.ids(stream.classes_upto(t - 1)))

    if t == 0 or cfg.oracle or cfg.distill == "none":
        lam = 0.0
    else:
        lam = lambda_schedule(cfg.lambda_base, len(stream.classes_upto(t)), len(task.classes))

    log: list[dict[str, float]] = []
    draws: Counter = Counter()
    lr = cfg.lr if t == 0 or cfg.incremental_lr is None else cfg.incremental_lr
    _fit(model, teacher, ds, ids, cfg.epochs, lr, cfg, lam, ssim, fd_weights,
         _task_rng(cfg.seed, t, 0), t, log, draws)
    ft_ids = None
    if t > 0 and not cfg.oracle and cfg.finetune_epochs > 0:
        model, ft_ids = finetune_balanced(model, stream, t, exemplars, cfg, teacher, lam, ssim, fd_weights, log)
    accs, overall = evaluate(model, stream, t)
    return TaskOutcome(model, accs, overall, lam, ids, dict(sorted(draws.items())), log, ft_ids)


def update_exemplars(store: ExemplarStore, model: Model, stream: TaskStream, t: int,
                     normalize: bool = True) -> ExemplarStore:
    """Herd exemplars for task ``t``'s classes and re-fit every class to its quota."""
    ds = stream.dataset
    quotas = store.quotas(stream.classes_upto(t))
    for c in stream.tasks[t].classes:
        idx = np.flatnonzero((ds.labels == c) & ~ds.is_test)
        feats = extract_pooled(model, ds.images[idx])
        store.add(c, herding_select(feats, min(quotas[c], len(idx)), ids=idx, normalize=normalize))
    return rebalance(store)


# ----------------------------------------------------------------------------
# whole stream


@dataclass
class StreamResult:
    record: RunRecord
    checksums: list[str]
    model: Model
    exemplars: ExemplarStore


def run_stream(stream: TaskStream, cfg: TrainConfig, ssim: SSIMParams | None = None,
               exemplars: ExemplarStore | None = None, fd_weights: FDWeights | None = None,
               model_spec: dict | None = None, gradcam: bool = True, herding_normalize: bool = True,
               on_task: Callable[[int, Model], None] | None = None,
               base: TaskOutcome | None = None) -> StreamResult:
    """Run tasks 0..T in order and collect the accuracy matrix.

    ``base`` may carry an already trained task-0 outcome (it only depends on
    the seed, data and model settings), which is then reused instead of
    retraining; its model is not modified.
    """
    T.set_default_dtype(cfg.dtype)
    store = exemplars.copy() if exemplars is not None else ExemplarStore()
    record = RunRecord([len(task.classes) for task in stream.tasks])
    ds = stream.dataset
    base_classes = stream.tasks[0].classes
    model = None
    checksums = []
    for t in range(len(stream.tasks)):
        if t == 0 and base is not None:
            out = base
        else:
            out = train_task(model, stream, t, store, cfg, ssim, fd_weights, model_spec)
        model = out.model
        record.add_row(out.task_acc, lam=out.lam, train_samples=int(len(out.train_ids)), draws=out.draws)
        if gradcam:
            record.alphas[t] = {
                c: gradcam_importance(model, ds.images[(ds.labels == c) & ds.is_test], c).tolist()
                for c in base_classes
            }
        if not cfg.oracle:
            update_exemplars(store, model, stream, t, herding_normalize)
        checksums.append(model.checksum())
        if on_task is not None:
            on_task(t, model)
        logger.info("task %d: overall acc %.3f (lambda %.3f)", t, record.overall[-1], out.lam)
    return StreamResult(record, checksums, model, store)
