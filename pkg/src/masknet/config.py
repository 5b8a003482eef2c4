"""Experiment configs: YAML parsing, validation, and data preparation.

A config file fully determines a run: architecture, tasks with their keep
fractions and datasets, schedule, optimizer, and seed. Validation failures
raise ConfigError with the dotted path of the offending field. The capacity
rule is checked here, before anything trains: keep fractions of the tasks
sharing a layer must sum to at most 1.
"""

import os
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import yaml

from .data import (
    BOSTON_COLUMNS,
    BOSTON_TARGET,
    DatasetSpec,
    MinMaxScaler,
    Vocab,
    area_resize,
    build_vocab,
    fit_apply_minmax,
    load_csv,
    load_idx,
    load_text_dir,
    scale_pixels,
    tokenize_pad,
)
from .errors import ConfigError, InputError
from .layers import Activation, Loss
from .multitask import SlotSpec, build_model
from .sampledata import BUILDERS, build_synthetic
from .tensor import DTYPE, Rng
from .training import (
    EarlyStopConfig,
    OptimizerConfig,
    TaskData,
    TrainSchedule,
    split_validation,
)

LAYER_KEYS = {"kind", "units", "filters", "size", "padding", "vocab", "dim",
              "activation", "tasks"}
TASK_KEYS = {"name", "p", "loss", "dataset", "batch_size"}
DATASET_KEYS = {"format", "kind", "classes", "paths", "builder", "params",
                "columns", "vocab_size", "length", "resize", "subset",
                "subset_size"}
TOP_KEYS = {"name", "seed", "out", "model", "tasks", "schedule", "optimizer",
            "early_stop", "probe_batch_size", "validation_fraction",
            "max_epochs"}


@dataclass
class TaskConfig:
    name: str
    p: float
    loss: Loss
    dataset: DatasetSpec
    batch_size: int | None = None  # overrides optimizer.batch_size


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out: str
    layers: list[SlotSpec]
    tasks: list[TaskConfig]
    schedule: TrainSchedule
    optimizer: OptimizerConfig
    early_stop: EarlyStopConfig
    probe_batch_size: int = 512
    validation_fraction: float = 0.1
    max_epochs: int | None = None


def _require(section: dict, key: str, path: str):
    if key not in section:
        raise ConfigError(f"{path}.{key}" if path else key, "missing")
    return section[key]


def _check_keys(section: dict, allowed: set, path: str):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(path or "config",
                          f"unknown keys {sorted(unknown)}; "
                          f"allowed: {sorted(allowed)}")


def _parse_layer(entry: dict, i: int, task_count: int) -> SlotSpec:
    path = f"model.layers.{i}"
    if not isinstance(entry, dict):
        raise ConfigError(path, f"expected a mapping, got {type(entry).__name__}")
    _check_keys(entry, LAYER_KEYS, path)
    kind = _require(entry, "kind", path)
    if kind not in ("dense", "conv2d", "maxpool", "flatten", "embedding"):
        raise ConfigError(f"{path}.kind", f"unknown layer kind {kind!r}")
    act_name = entry.get("activation", "identity")
    try:
        activation = Activation[str(act_name).upper()]
    except KeyError:
        raise ConfigError(f"{path}.activation",
                          f"unknown activation {act_name!r}") from None
    tasks = entry.get("tasks")
    if tasks is not None:
        tasks = tuple(int(t) for t in tasks)
        bad = [t for t in tasks if not 0 <= t < task_count]
        if bad:
            raise ConfigError(f"{path}.tasks",
                              f"task ids {bad} outside 0..{task_count - 1}")
    if kind == "dense" and int(entry.get("units", 0)) < 1:
        raise ConfigError(f"{path}.units", "dense layer needs units >= 1")
    if kind == "conv2d":
        if int(entry.get("filters", 0)) < 1:
            raise ConfigError(f"{path}.filters", "conv2d needs filters >= 1")
        size = entry.get("size", [3, 3])
        if len(size) != 2 or min(size) < 1:
            raise ConfigError(f"{path}.size", f"bad kernel size {size}")
    if kind == "embedding" and (int(entry.get("vocab", 0)) < 1
                                or int(entry.get("dim", 0)) < 1):
        raise ConfigError(f"{path}.vocab", "embedding needs vocab and dim >= 1")
    return SlotSpec(
        kind=kind,
        units=int(entry.get("units", 0)),
        filters=int(entry.get("filters", 0)),
        size=tuple(entry.get("size", (0, 0))),
        padding=entry.get("padding", "valid"),
        vocab=int(entry.get("vocab", 0)),
        dim=int(entry.get("dim", 0)),
        activation=activation,
        tasks=tasks,
    )


def _parse_dataset(entry: dict, path: str) -> DatasetSpec:
    if not isinstance(entry, dict):
        raise ConfigError(path, f"expected a mapping, got {type(entry).__name__}")
    _check_keys(entry, DATASET_KEYS, path)
    params = dict(entry.get("params", {}))
    for key in ("builder", "columns", "vocab_size", "length", "resize",
                "subset", "subset_size"):
        if key in entry:
            params[key] = entry[key]
    fmt = _require(entry, "format", path)
    if fmt == "synthetic":
        builder = params.get("builder")
        if builder not in BUILDERS:
            raise ConfigError(f"{path}.builder",
                              f"unknown builder {builder!r}; "
                              f"have {sorted(BUILDERS)}")
    try:
        return DatasetSpec(
            name=entry.get("name", ""),
            format=fmt,
            task_kind=_require(entry, "kind", path),
            classes=int(entry.get("classes", 0)),
            paths={str(k): str(v) for k, v in entry.get("paths", {}).items()},
            params=params,
        )
    except InputError as e:
        raise ConfigError(path, str(e)) from None


def _parse_task(entry: dict, i: int) -> TaskConfig:
    path = f"tasks.{i}"
    if not isinstance(entry, dict):
        raise ConfigError(path, f"expected a mapping, got {type(entry).__name__}")
    _check_keys(entry, TASK_KEYS, path)
    p = float(_require(entry, "p", path))
    if not 0 < p < 1:
        raise ConfigError(f"{path}.p",
                          f"keep fraction must lie in (0, 1), got {p}")
    loss_name = _require(entry, "loss", path)
    try:
        loss = Loss[str(loss_name).upper()]
    except KeyError:
        raise ConfigError(f"{path}.loss",
                          f"unknown loss {loss_name!r}") from None
    dataset = _parse_dataset(_require(entry, "dataset", path),
                             f"{path}.dataset")
    batch_size = entry.get("batch_size")
    if batch_size is not None and int(batch_size) < 1:
        raise ConfigError(f"{path}.batch_size",
                          f"must be >= 1, got {batch_size}")
    return TaskConfig(name=str(entry.get("name", f"task{i}")), p=p,
                      loss=loss, dataset=dataset,
                      batch_size=None if batch_size is None else int(batch_size))


def _check_capacity(layers, tasks):
    """Keep fractions of tasks sharing a layer must sum to at most 1."""
    for i, spec in enumerate(layers):
        if spec.kind not in ("dense", "conv2d"):
            continue
        routed = [t for t in range(len(tasks)) if spec.routes(t)]
        total = sum(Fraction(str(tasks[t].p)) for t in routed)
        if total > 1:
            raise ConfigError(
                "tasks",
                f"keep fractions on layer {i} sum to {float(total):g}, "
                f"violating t*p <= 1: {len(routed)} tasks cannot each keep "
                f"more than 1/{len(routed)} of a shared layer"
            )


def parse_config(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be a mapping")
    _check_keys(data, TOP_KEYS, "")
    model = _require(data, "model", "")
    if not isinstance(model, dict) or not model.get("layers"):
        raise ConfigError("model.layers", "missing or empty")
    raw_tasks = _require(data, "tasks", "")
    if not raw_tasks:
        raise ConfigError("tasks", "at least one task is required")
    tasks = [_parse_task(entry, i) for i, entry in enumerate(raw_tasks)]
    layers = [_parse_layer(entry, i, len(tasks))
              for i, entry in enumerate(model["layers"])]
    _check_capacity(layers, tasks)

    raw_schedule = _require(data, "schedule", "")
    try:
        schedule = TrainSchedule([[int(t) for t in group]
                                  for group in raw_schedule])
    except (InputError, TypeError) as e:
        raise ConfigError("schedule", str(e)) from None
    scheduled = set(schedule.all_tasks())
    expected = set(range(len(tasks)))
    if scheduled != expected:
        raise ConfigError(
            "schedule",
            f"schedule must cover every task exactly once; got {sorted(scheduled)}, "
            f"tasks are {sorted(expected)}"
        )

    try:
        optimizer = OptimizerConfig(**data.get("optimizer", {}))
    except (InputError, TypeError) as e:
        raise ConfigError("optimizer", str(e)) from None
    try:
        early_stop = EarlyStopConfig(**data.get("early_stop", {}))
    except (InputError, TypeError) as e:
        raise ConfigError("early_stop", str(e)) from None

    probe = int(data.get("probe_batch_size", 512))
    if probe < 1:
        raise ConfigError("probe_batch_size", f"must be >= 1, got {probe}")
    val_fraction = float(data.get("validation_fraction", 0.1))
    if not 0 < val_fraction < 1:
        raise ConfigError("validation_fraction",
                          f"must lie in (0, 1), got {val_fraction}")
    max_epochs = data.get("max_epochs")
    if max_epochs is not None and int(max_epochs) < 1:
        raise ConfigError("max_epochs", f"must be >= 1, got {max_epochs}")

    return ExperimentConfig(
        name=str(data.get("name", "experiment")),
        seed=int(data.get("seed", 0)),
        out=str(data.get("out", "runs/" + str(data.get("name", "run")))),
        layers=layers,
        tasks=tasks,
        schedule=schedule,
        optimizer=optimizer,
        early_stop=early_stop,
        probe_batch_size=probe,
        validation_fraction=val_fraction,
        max_epochs=None if max_epochs is None else int(max_epochs),
    )


def parse_config_text(text: str) -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError("config", f"not valid YAML: {e}") from None
    return parse_config(data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            return parse_config_text(f.read())
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}") from None


def _layer_dict(spec: SlotSpec) -> dict:
    out = {"kind": spec.kind}
    if spec.kind == "dense":
        out["units"] = spec.units
    elif spec.kind == "conv2d":
        out.update(filters=spec.filters, size=list(spec.size),
                   padding=spec.padding)
    elif spec.kind == "embedding":
        out.update(vocab=spec.vocab, dim=spec.dim)
    if spec.activation is not Activation.IDENTITY:
        out["activation"] = spec.activation.name.lower()
    if spec.tasks is not None:
        out["tasks"] = list(spec.tasks)
    return out


def _dataset_dict(spec: DatasetSpec) -> dict:
    out = {"format": spec.format, "kind": spec.task_kind}
    if spec.classes:
        out["classes"] = spec.classes
    if spec.paths:
        out["paths"] = dict(spec.paths)
    if spec.params:
        out["params"] = dict(spec.params)
    return out


def config_dict(config: ExperimentConfig) -> dict:
    return {
        "name": config.name,
        "seed": config.seed,
        "out": config.out,
        "model": {"layers": [_layer_dict(s) for s in config.layers]},
        "tasks": [{
            "name": t.name, "p": t.p, "loss": t.loss.name.lower(),
            "dataset": _dataset_dict(t.dataset),
            **({"batch_size": t.batch_size} if t.batch_size else {}),
        } for t in config.tasks],
        "schedule": [list(g) for g in config.schedule.groups],
        "optimizer": {
            "kind": config.optimizer.kind,
            "learning_rate": config.optimizer.learning_rate,
            "beta1": config.optimizer.beta1,
            "beta2": config.optimizer.beta2,
            "epsilon": config.optimizer.epsilon,
            "batch_size": config.optimizer.batch_size,
        },
        "early_stop": {"patience": config.early_stop.patience,
                       "min_delta": config.early_stop.min_delta},
        "probe_batch_size": config.probe_batch_size,
        "validation_fraction": config.validation_fraction,
        "max_epochs": config.max_epochs,
    }


def serialize_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config_dict(config), sort_keys=False)


def first_layer_kind(config: ExperimentConfig, task: int) -> str:
    for spec in config.layers:
        if spec.routes(task):
            return spec.kind
    raise ConfigError(f"tasks.{task}", "no layer routes this task")


def _resolve(path: str, data_root: str) -> str:
    full = path if os.path.isabs(path) else os.path.join(data_root, path)
    if not os.path.exists(full):
        raise InputError(f"data path does not exist: {full}")
    return full


def _class_subset(x, y, keep, limit, rng: Rng):
    """Filter to the listed classes, remap labels to 0..k-1, cap the count."""
    keep = [int(c) for c in keep]
    y = np.asarray(y).reshape(-1)
    chosen = np.isin(y, keep)
    x, y = x[chosen], y[chosen]
    remap = {c: i for i, c in enumerate(keep)}
    y = np.array([remap[int(v)] for v in y], np.int64)
    if limit and limit < len(x):
        idx = rng.choice(len(x), int(limit))
        x, y = x[idx], y[idx]
    return x, y


def _maybe_subset(x_train, y_train, x_test, y_test, params, rng: Rng,
                  name: str):
    keep = params.get("subset")
    if keep is None:
        return x_train, y_train, x_test, y_test
    limit = params.get("subset_size")
    x_train, y_train = _class_subset(x_train, y_train, keep, limit,
                                     rng.spawn(f"subset/{name}/train"))
    test_limit = None if limit is None else max(1, int(limit) // 4)
    x_test, y_test = _class_subset(x_test, y_test, keep, test_limit,
                                   rng.spawn(f"subset/{name}/test"))
    return x_train, y_train, x_test, y_test


def _image_arrays(x_train, x_test, params, flat: bool):
    x_train = scale_pixels(x_train)
    x_test = scale_pixels(x_test)
    resize = params.get("resize")
    if resize is not None:
        h, w = int(resize[0]), int(resize[1])
        x_train = area_resize(x_train[..., None], h, w)[..., 0]
        x_test = area_resize(x_test[..., None], h, w)[..., 0]
    if flat:
        return (x_train.reshape(len(x_train), -1),
                x_test.reshape(len(x_test), -1))
    return x_train[..., None], x_test[..., None]


def _targets(y_train, y_test, task: TaskConfig, path: str, stored=None):
    """Network-format targets: one-hot for CCE, (n,1) for BCE and MSE."""
    classes = task.dataset.classes
    if task.loss is Loss.CCE:
        y_train = np.asarray(y_train).astype(np.int64).reshape(-1)
        y_test = np.asarray(y_test).astype(np.int64).reshape(-1)
        eye = np.eye(classes, dtype=DTYPE)
        return eye[y_train], eye[y_test], None
    if task.loss is Loss.BCE:
        if classes != 2:
            raise ConfigError(f"{path}.loss", "bce needs exactly 2 classes")
        return (np.asarray(y_train, DTYPE).reshape(-1, 1),
                np.asarray(y_test, DTYPE).reshape(-1, 1), None)
    # regression: min-max scale targets on training statistics
    y_train = np.asarray(y_train, np.float64).reshape(-1, 1)
    y_test = np.asarray(y_test, np.float64).reshape(-1, 1)
    if stored is not None:
        scaler = MinMaxScaler.from_state(stored)
        return scaler.transform(y_train), scaler.transform(y_test), scaler
    scaled_train, scaled_test, scaler = fit_apply_minmax(y_train, y_test)
    return scaled_train, scaled_test, scaler


def _csv_columns(params: dict, path: str):
    columns = params.get("columns", "boston")
    if columns == "boston":
        return BOSTON_COLUMNS, BOSTON_TARGET
    try:
        return list(columns["features"]), str(columns["target"])
    except (KeyError, TypeError):
        raise ConfigError(f"{path}.columns",
                          "need 'boston' or {features: [...], target: ...}"
                          ) from None


def _fit_or_apply_scaler(x_train, x_test, stored):
    if stored is not None:
        scaler = MinMaxScaler.from_state(stored)
        return scaler.transform(x_train), scaler.transform(x_test), scaler
    return fit_apply_minmax(x_train, x_test)


def _fit_or_load_vocab(texts, max_size, stored):
    if stored is not None:
        return Vocab.from_state(stored)
    return build_vocab(texts, max_size)


def prepare_task(config: ExperimentConfig, task_id: int, data_root: str,
                 rng: Rng, stored: dict | None = None):
    """Load, preprocess, and split one task's data.

    Returns (TaskData, preprocess state dict). Fitted statistics come from
    the training split alone; passing ``stored`` states (from an exported
    model's header) applies those instead of refitting, which is how eval
    reproduces the training pipeline on new data.
    """
    task = config.tasks[task_id]
    spec = task.dataset
    path = f"tasks.{task_id}.dataset"
    flat = first_layer_kind(config, task_id) == "dense"
    stored = stored or {}
    state: dict = {}

    if spec.format == "synthetic":
        params = {k: v for k, v in spec.params.items()
                  if k not in ("builder", "columns", "vocab_size", "length",
                               "resize", "subset", "subset_size")}
        x_train, y_train, x_test, y_test = build_synthetic(
            spec.params["builder"], rng.spawn(f"data/{task.name}"), params)
        if isinstance(x_train, list):
            vocab = _fit_or_load_vocab(
                x_train, int(spec.params.get("vocab_size", 10000)),
                stored.get("vocab"))
            length = int(spec.params.get("length", 128))
            x_train = tokenize_pad(x_train, vocab, length)
            x_test = tokenize_pad(x_test, vocab, length)
            state["vocab"] = vocab.to_state()
        elif x_train.ndim == 3:
            x_train, y_train, x_test, y_test = _maybe_subset(
                x_train, y_train, x_test, y_test, spec.params, rng, task.name)
            x_train, x_test = _image_arrays(x_train, x_test, spec.params, flat)
        else:
            x_train, x_test, scaler = _fit_or_apply_scaler(
                x_train, x_test, stored.get("scaler"))
            state["scaler"] = scaler.to_state()
    elif spec.format == "idx":
        x_train = load_idx(_resolve(spec.paths["train_images"], data_root))
        y_train = load_idx(_resolve(spec.paths["train_labels"], data_root))
        x_test = load_idx(_resolve(spec.paths["test_images"], data_root))
        y_test = load_idx(_resolve(spec.paths["test_labels"], data_root))
        x_train, y_train, x_test, y_test = _maybe_subset(
            x_train, y_train, x_test, y_test, spec.params, rng, task.name)
        x_train, x_test = _image_arrays(x_train, x_test, spec.params, flat)
    elif spec.format == "csv":
        features, target = _csv_columns(spec.params, path)
        x_train, y_train = load_csv(_resolve(spec.paths["train"], data_root),
                                    features, target)
        x_test, y_test = load_csv(_resolve(spec.paths["test"], data_root),
                                  features, target)
        x_train, x_test, scaler = _fit_or_apply_scaler(
            x_train, x_test, stored.get("scaler"))
        state["scaler"] = scaler.to_state()
    elif spec.format == "text":
        texts_train, y_train, _ = load_text_dir(
            _resolve(spec.paths["train_dir"], data_root))
        texts_test, y_test, _ = load_text_dir(
            _resolve(spec.paths["test_dir"], data_root))
        vocab = _fit_or_load_vocab(
            texts_train, int(spec.params.get("vocab_size", 10000)),
            stored.get("vocab"))
        length = int(spec.params.get("length", 128))
        x_train = tokenize_pad(texts_train, vocab, length)
        x_test = tokenize_pad(texts_test, vocab, length)
        state["vocab"] = vocab.to_state()

    y_train, y_test, target_scaler = _targets(y_train, y_test, task, path,
                                              stored.get("target_scaler"))
    if target_scaler is not None:
        state["target_scaler"] = target_scaler.to_state()

    x_train, y_train, x_val, y_val = split_validation(
        x_train, y_train, config.validation_fraction,
        rng.spawn(f"split/{task.name}"))
    data = TaskData(task=task_id, x_train=x_train, y_train=y_train,
                    x_val=x_val, y_val=y_val, x_test=x_test, y_test=y_test,
                    name=task.name)
    return data, state


def prepare_all(config: ExperimentConfig, data_root: str):
    """(task data dict, per-task preprocess states, per-task input shapes)."""
    rng = Rng(config.seed)
    data, states, shapes = {}, {}, {}
    for t in range(len(config.tasks)):
        data[t], states[str(t)] = prepare_task(config, t, data_root, rng)
        shapes[t] = tuple(data[t].x_train.shape[1:])
    return data, states, shapes


def build_from_config(config: ExperimentConfig, input_shapes: dict):
    losses = {t: task.loss for t, task in enumerate(config.tasks)}
    return build_model(config.layers, losses, input_shapes, Rng(config.seed))
