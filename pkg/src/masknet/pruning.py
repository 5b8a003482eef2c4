"""One-shot selection of disjoint per-task subnetworks.

For a new task: activate every never-used weight, run one labeled probe batch
through the task's route, rank the free weights by gradient magnitude, and
keep the top ceil(p * W) per layer. Committing the winners marks them used
forever, so later tasks can only draw from what remains. Selection happens
once per task, right after initialization; afterwards training may only move
weights inside the committed mask.
"""

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import (
    CapacityError,
    DimensionError,
    DisjointnessError,
    InputError,
    StateError,
    TaskError,
)
from .multitask import MTGradients, MultitaskModel, disjointness_check, mt_backward
from .tensor import DTYPE, elementwise_mul, top_k_indices


def exact_fraction(p: float) -> Fraction:
    """Read a keep fraction as the decimal literally written.

    Via str(), 0.1 means exactly 1/10, so ceil(0.1 * 250) is 25 and not the
    26 that binary float fuzz would give.
    """
    return Fraction(str(p))


def ceil_budget(p: float, w: int) -> int:
    return math.ceil(exact_fraction(p) * w)


@dataclass
class PruneConfig:
    """Per-task keep fractions plus probe settings.

    Each fraction must sit strictly inside (0, 1); fractions of tasks sharing
    a layer must sum to at most 1 (checked against a model by
    validate_capacity, since sharing depends on the architecture).
    """

    keep_fractions: dict[int, float]
    probe_batch_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if not self.keep_fractions:
            raise InputError("keep_fractions must name at least one task")
        for task, p in self.keep_fractions.items():
            frac = exact_fraction(p)
            if not 0 < frac < 1:
                raise InputError(
                    f"keep fraction for task {task} must be in (0, 1), got {p}"
                )
        if self.probe_batch_size < 1:
            raise InputError(
                f"probe_batch_size must be positive, got {self.probe_batch_size}"
            )

    def fraction_for(self, task: int) -> float:
        try:
            return self.keep_fractions[task]
        except KeyError:
            raise TaskError(f"no keep fraction configured for task {task}")


def validate_capacity(model: MultitaskModel, config: PruneConfig) -> None:
    """Reject keep fractions that cannot fit: sum of p over the tasks sharing
    any one layer must stay <= 1 (the t*p <= 1 rule when fractions are equal).
    """
    for slot in model.slots:
        if not slot.maskable:
            continue
        total = Fraction(0)
        for task in slot.channel_of:
            if task in config.keep_fractions:
                total += exact_fraction(config.keep_fractions[task])
        if total > 1:
            raise CapacityError(
                f"slot {slot.index}: keep fractions of its tasks sum to "
                f"{float(total):g} > 1; t*p <= 1 must hold on every shared layer"
            )


class AvailabilityLedger:
    """Which weight positions each maskable slot has already granted.

    Monotone by construction: positions are only ever added. The free set of
    a slot is the complement of its used set.
    """

    def __init__(self, model: MultitaskModel):
        self.used: dict[int, np.ndarray] = {
            slot.index: np.zeros(slot.kernel.shape[1:], DTYPE)
            for slot in model.slots if slot.maskable
        }

    def free_mask(self, slot_index: int) -> np.ndarray:
        return 1 - self.used[slot_index]

    def free_count(self, slot_index: int) -> int:
        return int(self.used[slot_index].size - self.used[slot_index].sum())

    def used_count(self, slot_index: int) -> int:
        return int(self.used[slot_index].sum())

    def mark_used(self, slot_index: int, mask: np.ndarray) -> None:
        used = self.used[slot_index]
        if mask.shape != used.shape:
            raise DimensionError(
                f"mask {mask.shape} does not match ledger {used.shape} "
                f"for slot {slot_index}"
            )
        if (used * mask).any():
            raise DisjointnessError(
                f"slot {slot_index}: mask touches positions already granted"
            )
        np.maximum(used, mask, out=used)


@dataclass
class PruneRecord:
    """What one slot's selection did, for the structured report."""

    task: int
    slot: int
    kind: str
    budget: int
    bias_budget: int
    threshold: float  # smallest |gradient| that made the cut
    free_before: int
    free_after: int


@dataclass
class SelectionResult:
    task: int
    masks: dict[int, tuple[np.ndarray, np.ndarray]]
    records: list[PruneRecord] = field(default_factory=list)


def rank_candidates(magnitudes: np.ndarray, free: np.ndarray,
                    budget: int) -> np.ndarray:
    """Flat indices of the top-budget free positions by magnitude.

    Used positions are sentinel-ranked below every free one, so a free weight
    with zero gradient still wins over any used weight; ties among free
    weights go to the lowest flat index.
    """
    flat_mag = magnitudes.reshape(-1)
    flat_free = free.reshape(-1)
    scored = np.where(flat_free > 0, flat_mag, -1.0)
    return top_k_indices(scored, budget)


def select_subnetwork(model: MultitaskModel, task: int, probe,
                      config: PruneConfig,
                      ledger: AvailabilityLedger) -> SelectionResult:
    """One-shot mask selection for a task from the never-used weight pool.

    ``probe`` is one labeled batch (inputs, targets) of the task's training
    data; only the first probe_batch_size rows are used. Gradients are taken
    with every free weight temporarily active and every used weight held at
    zero, then the top ceil(p * W) free weights per layer win. Bias rows are
    task-private, so their candidates are always the whole row, selected at
    the same rate.
    """
    task = model.check_task(task)
    x, y = probe
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] == 0:
        raise InputError("selection probe is empty")
    maskable = model.maskable_slots(task)
    for slot in maskable:
        if task in slot.committed:
            raise StateError(
                f"task {task} already holds a committed mask in slot {slot.index}"
            )
    x = x[:config.probe_batch_size]
    y = y[:config.probe_batch_size]
    p = config.fraction_for(task)
    override = {
        slot.index: (ledger.free_mask(slot.index),
                     np.ones(slot.bias.shape[1:], DTYPE))
        for slot in maskable
    }
    grads = mt_backward(model, x, y, task, mask_override=override)
    result = SelectionResult(task=task, masks={})
    for slot in maskable:
        w = slot.task_weight_count()
        budget = ceil_budget(p, w)
        free = ledger.free_mask(slot.index)
        free_count = ledger.free_count(slot.index)
        if budget > free_count:
            raise CapacityError(
                f"slot {slot.index}: task {task} needs {budget} weights "
                f"(p={p}, W={w}) but only {free_count} are free"
            )
        magnitudes = np.abs(grads.slot_grads[slot.index]["kernel"])
        winners = rank_candidates(magnitudes, free, budget)
        mask = np.zeros(w, DTYPE)
        mask[winners] = 1
        mask = mask.reshape(slot.kernel.shape[1:])
        n = slot.bias.shape[1]
        bias_budget = ceil_budget(p, n)
        bias_mag = np.abs(grads.slot_grads[slot.index]["bias"]).reshape(-1)
        bias_winners = top_k_indices(bias_mag, bias_budget)
        bias_mask = np.zeros(n, DTYPE)
        bias_mask[bias_winners] = 1
        result.masks[slot.index] = (mask, bias_mask)
        threshold = float(magnitudes.reshape(-1)[winners].min()) if budget else 0.0
        result.records.append(PruneRecord(
            task=task, slot=slot.index, kind=slot.kind, budget=budget,
            bias_budget=bias_budget, threshold=threshold,
            free_before=free_count, free_after=free_count - budget,
        ))
    return result


def commit_mask(model: MultitaskModel, task: int, masks,
                ledger: AvailabilityLedger) -> AvailabilityLedger:
    """Install a task's masks and mark their positions used.

    Disjointness is verified, not assumed: overlap with the ledger raises
    before anything is installed, and the per-slot overlap audit runs after.
    """
    task = model.check_task(task)
    if isinstance(masks, SelectionResult):
        masks = masks.masks
    maskable = model.maskable_slots(task)
    expected = {slot.index for slot in maskable}
    if set(masks) != expected:
        raise InputError(
            f"mask set covers slots {sorted(masks)} but task {task} "
            f"routes through maskable slots {sorted(expected)}"
        )
    for slot in maskable:
        mask, bias_mask = masks[slot.index]
        if mask.shape != slot.kernel.shape[1:]:
            raise DimensionError(
                f"slot {slot.index}: mask {mask.shape} does not match "
                f"kernel slice {slot.kernel.shape[1:]}"
            )
        if not np.isin(mask, (0, 1)).all() or not np.isin(bias_mask, (0, 1)).all():
            raise InputError(f"slot {slot.index}: masks must be binary")
        used = ledger.used[slot.index]
        if (used * mask).any():
            raise DisjointnessError(
                f"slot {slot.index}: mask for task {task} overlaps "
                f"{int((used * mask).sum())} already-used positions"
            )
    for slot in maskable:
        mask, bias_mask = masks[slot.index]
        ch = slot.channel(task)
        slot.masks[ch] = mask.astype(DTYPE)
        slot.bias_masks[ch] = bias_mask.astype(DTYPE)
        slot.committed.add(task)
        ledger.mark_used(slot.index, mask)
        report = disjointness_check(slot)
        if not report.ok:
            raise DisjointnessError(
                f"slot {slot.index}: overlap {report.max_overlap} after "
                f"committing task {task}"
            )
    return ledger


def stored_masks(model: MultitaskModel, task: int) -> dict:
    """The task's committed masks, keyed by slot, for gradient filtering."""
    task = model.check_task(task)
    return {
        slot.index: (slot.masks[slot.channel(task)],
                     slot.bias_masks[slot.channel(task)])
        for slot in model.maskable_slots(task)
    }


def masked_gradient_filter(grads: MTGradients, masks: dict) -> MTGradients:
    """Zero every gradient outside the task's mask.

    Applied to each training step's gradients so only the task's subnetwork
    can move. Embedding table gradients pass through untouched: shared tables
    are never masked.
    """
    filtered = MTGradients(loss=grads.loss)
    for slot_index, g in grads.slot_grads.items():
        if "table" in g:
            filtered.slot_grads[slot_index] = dict(g)
            continue
        if slot_index not in masks:
            raise InputError(f"no mask supplied for maskable slot {slot_index}")
        mask, bias_mask = masks[slot_index]
        filtered.slot_grads[slot_index] = {
            "kernel": elementwise_mul(g["kernel"], mask),
            "bias": elementwise_mul(g["bias"], bias_mask),
        }
    return filtered


def format_prune_report(records: list[PruneRecord]) -> str:
    lines = ["task  slot  kind     budget  bias  threshold     free before -> after"]
    for r in records:
        lines.append(
            f"{r.task:>4}  {r.slot:>4}  {r.kind:<7}  {r.budget:>6}  "
            f"{r.bias_budget:>4}  {r.threshold:<12.6g}  "
            f"{r.free_before} -> {r.free_after}"
        )
    return "\n".join(lines)
