"""Masked mini-batch training, early stopping, evaluation, forgetting logs.

A group of tasks trains together by round-robin: each turn takes one batch
for one task, filters the gradients through that task's committed masks, and
updates only its slice. Optimizer moments are kept per task slice, so no
state leaks between tasks. Weights outside the group's masks are bit
identical before and after a training call, which is what makes earlier
tasks' evaluations exactly reproducible.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, StateError
from .layers import Loss
from .multitask import (
    MultitaskModel,
    assert_disjoint,
    mt_backward,
    mt_forward,
    mt_loss,
)
from .pruning import masked_gradient_filter, stored_masks
from .tensor import Rng


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    batch_size: int = 512

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise InputError(f"optimizer kind must be adam or sgd, got {self.kind!r}")
        if self.learning_rate <= 0:
            raise InputError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise InputError(f"batch size must be >= 1, got {self.batch_size}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InputError("Adam betas must lie in [0, 1)")


@dataclass
class EarlyStopConfig:
    patience: int = 3
    min_delta: float = 0.01

    def __post_init__(self):
        if self.patience < 1:
            raise InputError(f"patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise InputError(f"min_delta must be >= 0, got {self.min_delta}")


@dataclass
class EarlyStopState:
    best_loss: float = math.inf
    counter: int = 0
    stopped: bool = False


def early_stop_update(state: EarlyStopState, val_loss: float,
                      config: EarlyStopConfig) -> str:
    """Advance the plateau counter; returns "continue" or "stop".

    The best loss only moves on an improvement greater than min_delta;
    anything else counts toward patience consecutive stale epochs.
    """
    if state.best_loss - val_loss > config.min_delta:
        state.best_loss = val_loss
        state.counter = 0
    else:
        state.counter += 1
        if state.counter >= config.patience:
            state.stopped = True
            return "stop"
    return "continue"


@dataclass
class TrainSchedule:
    """Ordered task groups; a group's tasks interleave, groups run in order."""

    groups: list[list[int]]

    def __post_init__(self):
        flat = [t for g in self.groups for t in g]
        if not flat:
            raise InputError("schedule has no tasks")
        if len(set(flat)) != len(flat):
            raise InputError(f"schedule repeats tasks: {flat}")
        if any(not g for g in self.groups):
            raise InputError("schedule contains an empty group")

    def all_tasks(self) -> list[int]:
        return [t for g in self.groups for t in g]


@dataclass
class TaskData:
    task: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray | None = None
    y_test: np.ndarray | None = None
    name: str = ""


def split_validation(x, y, fraction: float, rng: Rng):
    """Seeded shuffle, then carve the validation share off the front."""
    n = len(x)
    if not 0 < fraction < 1:
        raise InputError(f"validation fraction must be in (0, 1), got {fraction}")
    n_val = max(1, int(n * fraction))
    if n_val >= n:
        raise InputError(f"{n} rows cannot spare {n_val} for validation")
    perm = rng.permutation(n)
    val, train = perm[:n_val], perm[n_val:]
    return x[train], y[train], x[val], y[val]


def _minibatches(x, y, batch_size: int, rng: Rng):
    perm = rng.permutation(len(x))
    for start in range(0, len(x), batch_size):
        idx = perm[start:start + batch_size]
        yield x[idx], y[idx]


def task_loss(model: MultitaskModel, task: int, x, y, batch_size: int = 512) -> float:
    """Mean loss over a dataset, evaluated in fixed-size chunks."""
    if len(x) == 0:
        raise InputError(f"task {task}: empty evaluation set")
    total = 0.0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start:start + batch_size], y[start:start + batch_size]
        total += mt_loss(model, xb, yb, task) * len(xb)
    return total / len(x)


class Optimizer:
    """SGD or Adam over task slices, with per-slice moment buffers."""

    def __init__(self, config: OptimizerConfig):
        self.config = config
        self._state: dict = {}

    def apply(self, model: MultitaskModel, task: int, grads) -> None:
        for slot_index, g in grads.slot_grads.items():
            slot = model.slots[slot_index]
            if "table" in g:
                self._step((slot_index, "table"), slot.table, g["table"])
                continue
            ch = slot.channel(task)
            self._step((slot_index, ch, "kernel"), slot.kernel[ch], g["kernel"])
            self._step((slot_index, ch, "bias"), slot.bias[ch], g["bias"])

    def _step(self, key, param, grad):
        cfg = self.config
        if cfg.kind == "sgd":
            param -= cfg.learning_rate * grad
            return
        st = self._state.get(key)
        if st is None:
            st = self._state[key] = {
                "m": np.zeros_like(param), "v": np.zeros_like(param), "t": 0,
            }
        st["t"] += 1
        st["m"] = cfg.beta1 * st["m"] + (1 - cfg.beta1) * grad
        st["v"] = cfg.beta2 * st["v"] + (1 - cfg.beta2) * (grad * grad)
        mhat = st["m"] / (1 - cfg.beta1 ** st["t"])
        vhat = st["v"] / (1 - cfg.beta2 ** st["t"])
        param -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.epsilon)


def _require_committed(model, group):
    for task in group:
        for slot in model.maskable_slots(task):
            if task not in slot.committed:
                raise StateError(
                    f"task {task} has no committed mask in slot {slot.index}; "
                    f"select and commit before training"
                )


def train_group(model: MultitaskModel, group, data: dict, opt: OptimizerConfig,
                stop: EarlyStopConfig, seed: int = 0,
                max_epochs: int | None = None,
                optimizer: Optimizer | None = None,
                batch_sizes: dict | None = None) -> list[dict]:
    """Train one group of tasks to their early-stop points.

    Returns the history: one record per task per epoch for train and val
    loss, plus a stop record per task. A task that stops takes no further
    batches, but its groupmates keep going until all have stopped. Passing
    an ``optimizer`` carries moment buffers in from a checkpoint; by default
    each group starts with fresh ones. ``batch_sizes`` overrides the
    optimizer batch size per task (small datasets want smaller batches).
    """
    group = [model.check_task(t) for t in group]
    if len(set(group)) != len(group):
        raise InputError(f"group repeats tasks: {group}")
    _require_committed(model, group)
    assert_disjoint(model)
    rng = Rng(seed)
    optimizer = optimizer if optimizer is not None else Optimizer(opt)
    batch_sizes = batch_sizes or {}
    masks = {t: stored_masks(model, t) for t in group}
    states = {t: EarlyStopState() for t in group}
    epoch = {t: 0 for t in group}
    losses = {t: [] for t in group}
    history: list[dict] = []

    def fresh_stream(task):
        return _minibatches(data[task].x_train, data[task].y_train,
                            batch_sizes.get(task, opt.batch_size),
                            rng.spawn(f"task{task}/epoch{epoch[task]}"))

    streams = {t: fresh_stream(t) for t in group}
    active = [t for t in group]
    while active:
        for task in list(active):
            try:
                xb, yb = next(streams[task])
            except StopIteration:
                epoch[task] += 1
                train_loss = float(np.mean(losses[task]))
                losses[task] = []
                val_loss = task_loss(model, task, data[task].x_val,
                                     data[task].y_val, opt.batch_size)
                history.append({"event": "epoch", "task": task,
                                "epoch": epoch[task], "split": "train",
                                "loss": train_loss})
                history.append({"event": "epoch", "task": task,
                                "epoch": epoch[task], "split": "val",
                                "loss": val_loss})
                decision = early_stop_update(states[task], val_loss, stop)
                if decision == "stop" or (max_epochs is not None
                                          and epoch[task] >= max_epochs):
                    reason = "early_stop" if decision == "stop" else "max_epochs"
                    history.append({"event": "stop", "task": task,
                                    "epoch": epoch[task], "reason": reason})
                    active.remove(task)
                    continue
                streams[task] = fresh_stream(task)
                xb, yb = next(streams[task])
            grads = mt_backward(model, xb, yb, task)
            filtered = masked_gradient_filter(grads, masks[task])
            optimizer.apply(model, task, filtered)
            losses[task].append(grads.loss)
    return history


@dataclass
class EvalReport:
    task: int
    kind: str  # classification | regression
    count: int
    accuracy: float | None = None
    mse: float | None = None
    f1: list[float] = field(default_factory=list)
    confusion: np.ndarray | None = None

    @property
    def metric(self) -> float:
        return self.accuracy if self.kind == "classification" else self.mse


def classification_report(y_true, y_pred, classes: int):
    """(accuracy, per-class F1, confusion[true, pred]) from label vectors."""
    confusion = np.zeros((classes, classes), dtype=int)
    for t, p in zip(y_true, y_pred):
        confusion[int(t), int(p)] += 1
    total = confusion.sum()
    accuracy = float(np.trace(confusion)) / total if total else 0.0
    f1 = []
    for c in range(classes):
        tp = confusion[c, c]
        predicted = confusion[:, c].sum()
        actual = confusion[c, :].sum()
        precision = tp / predicted if predicted else 0.0
        recall = tp / actual if actual else 0.0
        if precision + recall == 0:
            f1.append(0.0)
        else:
            f1.append(2 * precision * recall / (precision + recall))
    return accuracy, f1, confusion


def _class_labels(y, classes: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2 and y.shape[1] == classes:
        return y.argmax(axis=1)
    return y.astype(int).reshape(-1)


def predict_labels(model: MultitaskModel, task: int, x,
                   batch_size: int = 512) -> np.ndarray:
    """Predicted class ids for a classification task, chunked."""
    out = []
    kind = model.task_loss[task]
    for start in range(0, len(x), batch_size):
        scores = mt_forward(model, x[start:start + batch_size], task)
        if kind == Loss.BCE:
            out.append((scores.reshape(len(scores)) > 0).astype(int))
        else:
            out.append(scores.argmax(axis=1))
    return np.concatenate(out)


def evaluate(model: MultitaskModel, task: int, x, y,
             batch_size: int = 512) -> EvalReport:
    """Accuracy with per-class F1 for classifiers, MSE for regressors."""
    task = model.check_task(task)
    if len(x) == 0:
        raise InputError(f"task {task}: empty test set")
    kind = model.task_loss[task]
    if kind == Loss.MSE:
        total = 0.0
        for start in range(0, len(x), batch_size):
            pred = mt_forward(model, x[start:start + batch_size], task)
            diff = pred.astype(np.float64) - np.asarray(
                y[start:start + batch_size], np.float64)
            total += float((diff * diff).sum())
        mse = total / np.asarray(y).size
        return EvalReport(task=task, kind="regression", count=len(x), mse=mse)
    classes = 2 if kind == Loss.BCE else model.task_output_shape[task][0]
    y_true = _class_labels(y, classes)
    y_pred = predict_labels(model, task, x, batch_size)
    accuracy, f1, confusion = classification_report(y_true, y_pred, classes)
    return EvalReport(task=task, kind="classification", count=len(x),
                      accuracy=accuracy, f1=f1, confusion=confusion)


@dataclass
class ForgettingRow:
    after_group: int
    task: int
    test_loss: float
    test_metric: float


class ForgettingLog:
    """Append-only record of test performance after each finished group."""

    def __init__(self):
        self.rows: list[ForgettingRow] = []

    def append(self, row: ForgettingRow) -> None:
        self.rows.append(row)

    def for_task(self, task: int) -> list[ForgettingRow]:
        return [r for r in self.rows if r.task == task]


def record_forgetting(log: ForgettingLog, model: MultitaskModel,
                      after_group: int, trained_tasks, test_data: dict,
                      batch_size: int = 512) -> list[ForgettingRow]:
    """Log test loss and metric for every task trained so far."""
    added = []
    for task in trained_tasks:
        td = test_data[task]
        loss = task_loss(model, task, td.x_test, td.y_test, batch_size)
        report = evaluate(model, task, td.x_test, td.y_test, batch_size)
        row = ForgettingRow(after_group=after_group, task=task,
                            test_loss=loss, test_metric=report.metric)
        log.append(row)
        added.append(row)
    return added


def snapshot_weights(model: MultitaskModel) -> dict:
    """Deep copy of every parameter tensor, for bit-identity checks."""
    snap = {}
    for slot in model.slots:
        if slot.maskable:
            snap[slot.index] = {"kernel": slot.kernel.copy(),
                                "bias": slot.bias.copy()}
        elif slot.kind == "embedding":
            snap[slot.index] = {"table": slot.table.copy()}
    return snap
