"""Task-indexed layers with per-task binary masks.

Every maskable layer stores one kernel/bias channel per task that routes
through it, all channels copied from a single shared random draw. A task's
forward pass multiplies its channel by its mask, so weights outside the mask
can never influence that task, and weights never enter two masks (checked,
not assumed). Embedding tables are shared and unmasked.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, InputError, ShapeError, TaskError
from .layers import (
    FUSED_LOSSES,
    Activation,
    Loss,
    activation_backward,
    apply_activation,
    conv2d_backward,
    conv2d_preact,
    dense_backward,
    dense_preact,
    embedding_backward,
    embedding_forward,
    flatten_backward,
    flatten_forward,
    loss_and_grad,
    maxpool_backward,
    maxpool_forward,
    _conv_geometry,
)
from .tensor import DTYPE, Rng, glorot_uniform_init

MASKABLE_KINDS = ("dense", "conv2d")


def indicator(x) -> int:
    """1 iff x is nonzero, sign-agnostic."""
    return int(x != 0)


@dataclass
class SlotSpec:
    """One stage of the pipeline, before parameters exist.

    ``tasks=None`` routes every task through the slot; a tuple restricts it
    to those tasks (a dedicated adapter), and other tasks skip it entirely.
    """

    kind: str  # dense | conv2d | maxpool | flatten | embedding
    units: int = 0  # dense
    filters: int = 0  # conv2d
    size: tuple[int, int] = (0, 0)  # conv2d
    padding: str = "valid"  # conv2d
    vocab: int = 0  # embedding
    dim: int = 0  # embedding
    activation: Activation = Activation.IDENTITY
    tasks: tuple[int, ...] | None = None

    def routes(self, task: int) -> bool:
        return self.tasks is None or task in self.tasks


class Slot:
    """A SlotSpec with materialized parameters.

    Maskable slots hold ``kernel[C, ...]`` and ``bias[C, n]`` where C is the
    number of routed tasks; ``channel_of`` maps task id to its channel. Masks
    start all-zero: nothing is trainable until a subnetwork is committed.
    """

    def __init__(self, spec: SlotSpec, index: int):
        self.spec = spec
        self.index = index
        self.kernel = None
        self.bias = None
        self.masks = None
        self.bias_masks = None
        self.table = None  # embedding only, shared and unmasked
        self.committed: set[int] = set()
        self.channel_of: dict[int, int] = {}
        self.in_shape: tuple[int, ...] | None = None
        self.out_shape: tuple[int, ...] | None = None

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def maskable(self) -> bool:
        return self.kind in MASKABLE_KINDS

    def routes(self, task: int) -> bool:
        return self.spec.routes(task)

    def channel(self, task: int) -> int:
        try:
            return self.channel_of[task]
        except KeyError:
            raise TaskError(f"task {task} does not route through slot {self.index}")

    def task_weight_count(self) -> int:
        """Kernel entries in one task's slice (the layer's W)."""
        return int(np.prod(self.kernel.shape[1:]))

    def effective(self, task: int, override=None):
        """(kernel x mask, bias x bias_mask) for one task.

        ``override`` = (mask, bias_mask) substitutes the stored masks; the
        selection probe uses it to activate candidate weights temporarily.
        """
        ch = self.channel(task)
        mask, bmask = override if override is not None else (
            self.masks[ch], self.bias_masks[ch])
        return self.kernel[ch] * mask, self.bias[ch] * bmask


@dataclass
class DisjointnessReport:
    max_overlap: int
    violating_positions: list[tuple[int, ...]]

    @property
    def ok(self) -> bool:
        return self.max_overlap <= 1


@dataclass
class MTGradients:
    """Per-slot gradients of one task's loss w.r.t. its effective weights.

    Gradients are unfiltered; zeroing entries outside the task's mask is a
    separate, explicit step so selection can rank candidates first.
    """

    loss: float
    slot_grads: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)


class MultitaskModel:
    def __init__(self, slots, task_count, task_loss, task_input_shape,
                 task_output_shape):
        self.slots: list[Slot] = slots
        self.task_count: int = task_count
        self.task_loss: dict[int, Loss] = task_loss
        self.task_input_shape: dict[int, tuple[int, ...]] = task_input_shape
        self.task_output_shape: dict[int, tuple[int, ...]] = task_output_shape

    def tasks(self) -> range:
        return range(self.task_count)

    def check_task(self, task: int) -> int:
        task = int(task)
        if not 0 <= task < self.task_count:
            raise TaskError(f"unknown task {task}, model has {self.task_count}")
        return task

    def routed_slots(self, task: int) -> list[Slot]:
        return [s for s in self.slots if s.routes(task)]

    def maskable_slots(self, task: int | None = None) -> list[Slot]:
        out = [s for s in self.slots if s.maskable]
        if task is not None:
            out = [s for s in out if s.routes(task)]
        return out


def _init_slot(slot: Slot, in_shape, rng: Rng):
    spec = slot.spec
    c = len(slot.channel_of)
    if spec.kind == "dense":
        if len(in_shape) != 1:
            raise ShapeError(
                f"slot {slot.index}: dense needs a flat input, got {in_shape}"
            )
        m, n = in_shape[0], spec.units
        base = glorot_uniform_init((m, n), rng.spawn(f"slot{slot.index}/kernel"))
        slot.kernel = np.repeat(base[None], c, axis=0)
        slot.bias = np.zeros((c, n), DTYPE)
        slot.masks = np.zeros((c, m, n), DTYPE)
        slot.bias_masks = np.zeros((c, n), DTYPE)
        return (n,)
    if spec.kind == "conv2d":
        if len(in_shape) != 3:
            raise ShapeError(
                f"slot {slot.index}: conv2d needs h x w x c input, got {in_shape}"
            )
        s1, s2 = spec.size
        ch_in, f = in_shape[2], spec.filters
        base = glorot_uniform_init(
            (s1, s2, ch_in, f), rng.spawn(f"slot{slot.index}/kernel"))
        slot.kernel = np.repeat(base[None], c, axis=0)
        slot.bias = np.zeros((c, f), DTYPE)
        slot.masks = np.zeros((c, s1, s2, ch_in, f), DTYPE)
        slot.bias_masks = np.zeros((c, f), DTYPE)
        _, _, oh, ow = _conv_geometry(
            (1,) + tuple(in_shape), (s1, s2, ch_in, f), spec.padding)
        return (oh, ow, f)
    if spec.kind == "maxpool":
        if len(in_shape) != 3 or in_shape[0] < 2 or in_shape[1] < 2:
            raise ShapeError(
                f"slot {slot.index}: maxpool needs h x w x f with h,w >= 2, "
                f"got {in_shape}"
            )
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    if spec.kind == "embedding":
        if len(in_shape) != 1:
            raise ShapeError(
                f"slot {slot.index}: embedding needs a token sequence, got {in_shape}"
            )
        slot.table = rng.spawn(f"slot{slot.index}/table").uniform(
            -0.05, 0.05, (spec.vocab, spec.dim)).astype(DTYPE)
        return (in_shape[0], spec.dim)
    raise InputError(f"unknown slot kind {spec.kind!r}")


def build_model(specs, task_losses, task_input_shapes, rng: Rng) -> MultitaskModel:
    """Materialize a model, propagating shapes per task through its route.

    Parameters for a slot are created when the first task reaches it; every
    later task must arrive with the same shape. All channels of a slot start
    as bit-identical copies of one random draw, so each task selects its
    subnetwork out of the same underlying random network.
    """
    task_losses = {int(k): v for k, v in task_losses.items()}
    t = len(task_losses)
    if sorted(task_losses) != list(range(t)):
        raise TaskError(f"task ids must be 0..{t - 1}, got {sorted(task_losses)}")
    slots = [Slot(replace(spec), i) for i, spec in enumerate(specs)]
    for slot in slots:
        routed = [k for k in range(t) if slot.routes(k)]
        if slot.spec.tasks is not None:
            unknown = [k for k in slot.spec.tasks if not 0 <= k < t]
            if unknown:
                raise TaskError(
                    f"slot {slot.index} routes unknown tasks {unknown}")
        if not routed:
            raise TaskError(f"slot {slot.index} routes no tasks")
        slot.channel_of = {k: i for i, k in enumerate(routed)}
    out_shapes = {}
    for task in range(t):
        shape = tuple(int(d) for d in task_input_shapes[task])
        for slot in slots:
            if not slot.routes(task):
                continue
            if slot.in_shape is None:
                slot.in_shape = shape
                slot.out_shape = _init_slot(slot, shape, rng)
            elif slot.in_shape != shape:
                raise ShapeError(
                    f"slot {slot.index} built for input {slot.in_shape} but "
                    f"task {task} arrives with {shape}"
                )
            shape = slot.out_shape
        out_shapes[task] = shape
    return MultitaskModel(slots, t, task_losses,
                          {k: tuple(task_input_shapes[k]) for k in range(t)},
                          out_shapes)


def _slot_forward(slot: Slot, x, task, override, cache):
    spec = slot.spec
    if spec.kind == "dense":
        kernel, bias = slot.effective(task, override)
        z = dense_preact(x, kernel, bias)
        if cache is not None:
            cache.update(x=x, z=z, kernel=kernel)
        return apply_activation(z, spec.activation)
    if spec.kind == "conv2d":
        kernel, bias = slot.effective(task, override)
        z = conv2d_preact(x, kernel, bias, spec.padding)
        if cache is not None:
            cache.update(x=x, z=z, kernel=kernel)
        return apply_activation(z, spec.activation)
    if spec.kind == "maxpool":
        out, record = maxpool_forward(x)
        if cache is not None:
            cache.update(record=record, x_shape=x.shape)
        return out
    if spec.kind == "flatten":
        if cache is not None:
            cache.update(x_shape=np.asarray(x).shape)
        return flatten_forward(x)
    if spec.kind == "embedding":
        out = embedding_forward(x, slot.table)
        if cache is not None:
            cache.update(tokens=np.asarray(x))
        return out
    raise InputError(f"unknown slot kind {spec.kind!r}")


def _check_input(model, x, task):
    x = np.asarray(x)
    expected = model.task_input_shape[task]
    if x.shape[1:] != expected:
        raise DimensionError(
            f"task {task} expects input {expected} per row, got {x.shape[1:]}"
        )
    return x


def mt_forward(model: MultitaskModel, x, task: int, mask_override=None) -> np.ndarray:
    """Run one task through its route: act((k x mask) x_in + b x bias_mask).

    ``mask_override`` maps slot index to (mask, bias_mask) replacements.
    """
    task = model.check_task(task)
    x = _check_input(model, x, task)
    mask_override = mask_override or {}
    for slot in model.slots:
        if slot.routes(task):
            x = _slot_forward(slot, x, task, mask_override.get(slot.index), None)
    return x


def mt_forward_cached(model, x, task, mask_override=None):
    """Like mt_forward but records what mt_backward needs per slot."""
    task = model.check_task(task)
    x = _check_input(model, x, task)
    mask_override = mask_override or {}
    caches = {}
    for slot in model.slots:
        if slot.routes(task):
            cache = {}
            x = _slot_forward(slot, x, task, mask_override.get(slot.index), cache)
            caches[slot.index] = cache
    return x, caches


def task_output(model, x, task) -> np.ndarray:
    """Post-activation output (probabilities for softmax heads)."""
    return mt_forward(model, x, task)


def mt_loss(model, x, target, task, mask_override=None) -> float:
    """Scalar training loss for one task batch (no gradients)."""
    task = model.check_task(task)
    out, caches = mt_forward_cached(model, x, task, mask_override)
    head = model.routed_slots(task)[-1]
    kind = model.task_loss[task]
    if kind in FUSED_LOSSES:
        return loss_and_grad(caches[head.index]["z"], target, kind)[0]
    return loss_and_grad(out, target, kind)[0]


def mt_backward(model: MultitaskModel, x, target, task: int,
                mask_override=None) -> MTGradients:
    """Loss and gradients w.r.t. the task's effective weights, slot by slot.

    Fused losses (CCE, BCE) differentiate straight from the head's
    pre-activation. Gradients are not mask-filtered here.
    """
    task = model.check_task(task)
    mask_override = mask_override or {}
    _, caches = mt_forward_cached(model, x, task, mask_override)
    routed = model.routed_slots(task)
    head = routed[-1]
    if head.kind != "dense":
        raise ShapeError(f"task {task} route must end in a dense head, "
                         f"ends in {head.kind}")
    kind = model.task_loss[task]
    hz = caches[head.index]["z"]
    if kind in FUSED_LOSSES:
        loss, grad = loss_and_grad(hz, target, kind)
        gz = grad
    else:
        out = apply_activation(hz, head.spec.activation)
        loss, grad = loss_and_grad(out, target, kind)
        gz = activation_backward(grad, hz, head.spec.activation)
    grads = MTGradients(loss=loss)
    gk, gb, gx = dense_backward(gz, caches[head.index]["x"],
                                caches[head.index]["kernel"])
    grads.slot_grads[head.index] = {"kernel": gk, "bias": gb}
    for slot in reversed(routed[:-1]):
        cache = caches[slot.index]
        kind_ = slot.kind
        if kind_ == "dense":
            gz = activation_backward(gx, cache["z"], slot.spec.activation)
            gk, gb, gx = dense_backward(gz, cache["x"], cache["kernel"])
            grads.slot_grads[slot.index] = {"kernel": gk, "bias": gb}
        elif kind_ == "conv2d":
            gz = activation_backward(gx, cache["z"], slot.spec.activation)
            gk, gb, gx = conv2d_backward(gz, cache["x"], cache["kernel"],
                                         slot.spec.padding)
            grads.slot_grads[slot.index] = {"kernel": gk, "bias": gb}
        elif kind_ == "maxpool":
            gx = maxpool_backward(gx, cache["record"], cache["x_shape"])
        elif kind_ == "flatten":
            gx = flatten_backward(gx, cache["x_shape"])
        elif kind_ == "embedding":
            gt = embedding_backward(gx, cache["tokens"], slot.table.shape)
            grads.slot_grads[slot.index] = {"table": gt}
            gx = None
    return grads


def disjointness_check(slot: Slot) -> DisjointnessReport:
    """Eq.-style overlap audit of one maskable slot.

    At every fixed kernel position, counts the tasks whose masked weight is
    nonzero there; anything above 1 means two tasks share a weight.
    """
    if not slot.maskable:
        raise InputError(f"slot {slot.index} ({slot.kind}) carries no masks")
    active = (slot.kernel * slot.masks) != 0
    counts = active.sum(axis=0)
    max_overlap = int(counts.max()) if counts.size else 0
    violating = [tuple(int(i) for i in pos)
                 for pos in np.argwhere(counts > 1)]
    return DisjointnessReport(max_overlap=max_overlap,
                              violating_positions=violating)


def disjointness_report(model: MultitaskModel) -> dict[int, DisjointnessReport]:
    return {s.index: disjointness_check(s) for s in model.slots if s.maskable}


def assert_disjoint(model: MultitaskModel) -> None:
    for idx, report in disjointness_report(model).items():
        if not report.ok:
            from .errors import DisjointnessError
            raise DisjointnessError(
                f"slot {idx}: {len(report.violating_positions)} positions "
                f"held by more than one task (max overlap {report.max_overlap})"
            )


def active_weight_count(model: MultitaskModel) -> dict:
    """Active kernel-weight counts from the masks, per task and total."""
    per_task = {task: 0 for task in model.tasks()}
    for slot in model.slots:
        if not slot.maskable:
            continue
        for task, ch in slot.channel_of.items():
            per_task[task] += int(slot.masks[ch].sum())
    return {"per_task": per_task, "total": sum(per_task.values())}
