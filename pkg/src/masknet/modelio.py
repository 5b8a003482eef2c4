"""Binary persistence for multitask models.

Two formats, both little-endian with a JSON header and a trailing 8-byte
truncated sha256 checksum:

``.smt`` (sparse multitask) keeps, per maskable layer and task, the COO
entries of the committed subnetwork: pairs of (u32 flat index, f32 value),
indices strictly increasing, kernel entries first and bias entries after at
offset kernel_size. Every mask=1 position is stored, a value that trained to
exactly zero included; the mask defines the subnetwork, not the value.
Embedding tables are shared across tasks and stored dense. Disjointness is a
file-level invariant: a kernel flat index may appear under at most one task
per layer, checked at export and again at import. Bias entries are exempt
because each task owns its bias row outright.

``.ckpt`` (dense checkpoint) stores every array needed to continue training
bit-identically: kernels, biases, masks, the availability ledger, optimizer
moment buffers, early-stop counters, and rng states.
"""

import json
import math
import os

import numpy as np

from .errors import ChecksumError, FormatError, InputError, VersionError
from .layers import Activation, Loss
from .multitask import MultitaskModel, SlotSpec, assert_disjoint, build_model
from .pruning import AvailabilityLedger
from .tensor import DTYPE, Rng
from .training import EarlyStopState, Optimizer, OptimizerConfig
from .ioutil import atomic_write_bytes, sha256_bytes

SMT_MAGIC = b"SMTF"
CKPT_MAGIC = b"MCKP"
DENSE_MAGIC = b"MDNS"
FORMAT_VERSION = 1
CHECKSUM_BYTES = 8

ENTRY_DTYPE = np.dtype([("index", "<u4"), ("value", "<f4")])


def _take(data: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(data):
        raise FormatError(
            f"truncated file: needed {count} bytes for {what} at byte {offset}, "
            f"have {len(data) - offset}"
        )
    return data[offset:offset + count]


def _frame(magic: bytes, header: dict, body: bytes) -> bytes:
    """magic | version u8 | header length u32 | header JSON | body | checksum."""
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    blob = (magic + bytes([FORMAT_VERSION])
            + len(head).to_bytes(4, "little") + head + body)
    return blob + sha256_bytes(blob)[:CHECKSUM_BYTES]


def _unframe(data: bytes, magic: bytes, kind: str):
    """Validate magic, version and checksum; return (header, body_offset)."""
    if data[:4] != magic:
        raise FormatError(
            f"not a {kind} file: expected magic {magic!r}, got {data[:4]!r}"
        )
    version = _take(data, 4, 1, "version")[0]
    if version != FORMAT_VERSION:
        raise VersionError(
            f"unsupported {kind} version {version}; this build reads version "
            f"{FORMAT_VERSION}"
        )
    if len(data) < 9 + CHECKSUM_BYTES:
        raise FormatError(f"truncated file: {len(data)} bytes is below the minimum")
    expect = data[-CHECKSUM_BYTES:]
    actual = sha256_bytes(data[:-CHECKSUM_BYTES])[:CHECKSUM_BYTES]
    if expect != actual:
        raise ChecksumError(
            f"checksum mismatch: stored {expect.hex()}, computed {actual.hex()}"
        )
    head_len = int.from_bytes(_take(data, 5, 4, "header length"), "little")
    head = _take(data, 9, head_len, "header")
    try:
        header = json.loads(head.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable header: {e}") from None
    return header, 9 + head_len


def _spec_state(spec: SlotSpec) -> dict:
    return {
        "kind": spec.kind, "units": spec.units, "filters": spec.filters,
        "size": list(spec.size), "padding": spec.padding,
        "vocab": spec.vocab, "dim": spec.dim,
        "activation": spec.activation.name.lower(),
        "tasks": None if spec.tasks is None else list(spec.tasks),
    }


def _spec_from_state(state: dict) -> SlotSpec:
    return SlotSpec(
        kind=state["kind"], units=state["units"], filters=state["filters"],
        size=tuple(state["size"]), padding=state["padding"],
        vocab=state["vocab"], dim=state["dim"],
        activation=Activation[state["activation"].upper()],
        tasks=None if state["tasks"] is None else tuple(state["tasks"]),
    )


def _model_state(model: MultitaskModel) -> dict:
    return {
        "task_count": model.task_count,
        "losses": {str(t): l.name.lower() for t, l in model.task_loss.items()},
        "input_shapes": {str(t): list(s)
                         for t, s in model.task_input_shape.items()},
        "layers": [_spec_state(slot.spec) for slot in model.slots],
        "committed": {str(slot.index): sorted(slot.committed)
                      for slot in model.slots if slot.maskable},
    }


def _model_from_state(state: dict) -> MultitaskModel:
    try:
        specs = [_spec_from_state(s) for s in state["layers"]]
        losses = {int(t): Loss[name.upper()]
                  for t, name in state["losses"].items()}
        shapes = {int(t): tuple(s) for t, s in state["input_shapes"].items()}
        committed = state["committed"]
    except (KeyError, TypeError) as e:
        raise FormatError(f"header is missing model structure: {e}") from None
    model = build_model(specs, losses, shapes, Rng(0))
    for slot in model.slots:
        if slot.maskable:
            slot.committed = set(committed.get(str(slot.index), []))
    return model


def _routed_tasks(slot):
    """Tasks through a slot, in channel order; the on-disk block order."""
    return [t for t, _ in sorted(slot.channel_of.items(), key=lambda kv: kv[1])]


def export_sparse(model: MultitaskModel, preprocess: dict | None = None) -> bytes:
    """Serialize committed subnetworks as per-task COO blocks.

    ``preprocess`` is an optional JSON-able dict (scaler and vocabulary
    states, keyed per task) carried in the header so an exported model can
    reproduce its input pipeline.
    """
    assert_disjoint(model)
    header = {"format": "smt", "model": _model_state(model)}
    if preprocess is not None:
        header["preprocess"] = preprocess
    chunks = []
    for slot in model.slots:
        if slot.kind == "embedding":
            chunks.append(slot.table.astype("<f4").tobytes())
        elif slot.maskable:
            for task in _routed_tasks(slot):
                ch = slot.channel_of[task]
                flat = np.concatenate([slot.kernel[ch].ravel(),
                                       slot.bias[ch].ravel()])
                active = np.concatenate([slot.masks[ch].ravel(),
                                         slot.bias_masks[ch].ravel()])
                idx = np.flatnonzero(active)
                entries = np.empty(idx.size, dtype=ENTRY_DTYPE)
                entries["index"] = idx
                entries["value"] = flat[idx]
                chunks.append(len(idx).to_bytes(4, "little"))
                chunks.append(entries.tobytes())
    return _frame(SMT_MAGIC, header, b"".join(chunks))


def import_sparse(data: bytes) -> MultitaskModel:
    """Rebuild an inference model from ``export_sparse`` bytes.

    The result's per-task forward passes are bit-identical to the exporting
    model's: stored values land on the same positions, masks cover exactly
    the stored entries, and everything else is zero.
    """
    header, offset = _unframe(data, SMT_MAGIC, "sparse model")
    payload = data[:len(data) - CHECKSUM_BYTES]
    model = _model_from_state(header.get("model", {}))
    for slot in model.slots:
        if slot.kind == "embedding":
            count = slot.table.size * 4
            raw = _take(payload, offset, count, f"slot {slot.index} table")
            offset += count
            slot.table[...] = np.frombuffer(raw, "<f4").reshape(slot.table.shape)
        elif slot.maskable:
            slot.kernel[...] = 0
            slot.bias[...] = 0
            slot.masks[...] = 0
            slot.bias_masks[...] = 0
            k = slot.kernel[0].size
            width = k + slot.bias[0].size
            # bias rows are per task; only kernel positions are a shared pool
            seen = np.zeros(k, bool)
            for task in _routed_tasks(slot):
                count = int.from_bytes(
                    _take(payload, offset, 4, f"slot {slot.index} entry count"),
                    "little")
                offset += 4
                raw = _take(payload, offset, count * ENTRY_DTYPE.itemsize,
                            f"slot {slot.index} task {task} entries")
                offset += count * ENTRY_DTYPE.itemsize
                entries = np.frombuffer(raw, ENTRY_DTYPE)
                idx = entries["index"].astype(np.int64)
                if idx.size and (np.diff(idx) <= 0).any():
                    raise FormatError(
                        f"slot {slot.index} task {task}: flat indices must "
                        f"be strictly increasing"
                    )
                if idx.size and idx[-1] >= width:
                    raise FormatError(
                        f"slot {slot.index} task {task}: flat index "
                        f"{int(idx[-1])} out of range for {width} weights"
                    )
                kidx = idx[idx < k]
                if seen[kidx].any():
                    dup = int(kidx[seen[kidx]][0])
                    raise FormatError(
                        f"slot {slot.index}: flat index {dup} appears under "
                        f"two tasks; stored subnetworks must be disjoint"
                    )
                seen[kidx] = True
                ch = slot.channel_of[task]
                vals = np.zeros(width, DTYPE)
                ones = np.zeros(width, DTYPE)
                vals[idx] = entries["value"]
                ones[idx] = 1.0
                slot.kernel[ch] = vals[:k].reshape(slot.kernel[ch].shape)
                slot.bias[ch] = vals[k:].reshape(slot.bias[ch].shape)
                slot.masks[ch] = ones[:k].reshape(slot.masks[ch].shape)
                slot.bias_masks[ch] = ones[k:].reshape(slot.bias_masks[ch].shape)
    if offset != len(payload):
        raise FormatError(
            f"{len(payload) - offset} unexpected bytes after the last "
            f"block at byte {offset}"
        )
    assert_disjoint(model)
    return model


def save_sparse(path, model: MultitaskModel, preprocess: dict | None = None) -> None:
    atomic_write_bytes(path, export_sparse(model, preprocess))


def load_sparse(path) -> tuple[MultitaskModel, dict]:
    """Returns (model, header); the header carries any preprocess states."""
    with open(path, "rb") as f:
        data = f.read()
    return import_sparse(data), _unframe(data, SMT_MAGIC, "sparse model")[0]


def export_dense(model: MultitaskModel) -> bytes:
    """All weights, every channel, no masks: the dedicated-network baseline.

    This is what saving t separately trained networks costs, used as the
    denominator in disk-size comparisons against one sparse multitask file.
    """
    header = {"format": "dense", "model": _model_state(model)}
    chunks = []
    for slot in model.slots:
        if slot.kind == "embedding":
            chunks.append(slot.table.astype("<f4").tobytes())
        elif slot.maskable:
            chunks.append(slot.kernel.astype("<f4").tobytes())
            chunks.append(slot.bias.astype("<f4").tobytes())
    return _frame(DENSE_MAGIC, header, b"".join(chunks))


def save_dense(path, model: MultitaskModel) -> None:
    atomic_write_bytes(path, export_dense(model))


def size_report(multitask_path, dedicated_paths) -> dict:
    """Byte sizes of one multitask file vs the sum of dedicated files."""
    multitask = os.path.getsize(multitask_path)
    dedicated = sum(os.path.getsize(p) for p in dedicated_paths)
    if dedicated == 0:
        raise InputError("dedicated files are empty; ratio is undefined")
    return {
        "multitask_bytes": multitask,
        "dedicated_bytes": dedicated,
        "ratio": multitask / dedicated,
    }


def _stop_state(state: EarlyStopState) -> dict:
    best = None if math.isinf(state.best_loss) else state.best_loss
    return {"best_loss": best, "counter": state.counter, "stopped": state.stopped}


def _stop_from_state(state: dict) -> EarlyStopState:
    best = math.inf if state["best_loss"] is None else state["best_loss"]
    return EarlyStopState(best_loss=best, counter=state["counter"],
                          stopped=state["stopped"])


class Checkpoint:
    """Everything ``load_checkpoint`` hands back."""

    def __init__(self, model, optimizer=None, ledger=None, stops=None,
                 rng_states=None, extra=None):
        self.model = model
        self.optimizer = optimizer
        self.ledger = ledger
        self.stops = stops or {}
        self.rng_states = rng_states or {}
        self.extra = extra or {}


def _checkpoint_arrays(model, optimizer, ledger):
    """Deterministically ordered (name, array) pairs for the body."""
    pairs = []
    for slot in model.slots:
        if slot.kind == "embedding":
            pairs.append((f"slot{slot.index}/table", slot.table))
        elif slot.maskable:
            pairs.append((f"slot{slot.index}/kernel", slot.kernel))
            pairs.append((f"slot{slot.index}/bias", slot.bias))
            pairs.append((f"slot{slot.index}/masks", slot.masks))
            pairs.append((f"slot{slot.index}/bias_masks", slot.bias_masks))
    if ledger is not None:
        for index in sorted(ledger.used):
            pairs.append((f"ledger/slot{index}", ledger.used[index]))
    opt_keys, opt_steps = [], []
    if optimizer is not None:
        for j, key in enumerate(sorted(optimizer._state, key=str)):
            st = optimizer._state[key]
            opt_keys.append(list(key))
            opt_steps.append(st["t"])
            pairs.append((f"opt{j}/m", st["m"]))
            pairs.append((f"opt{j}/v", st["v"]))
    return pairs, opt_keys, opt_steps


def save_checkpoint(path, model: MultitaskModel, optimizer: Optimizer | None = None,
                    ledger: AvailabilityLedger | None = None,
                    stops: dict[int, EarlyStopState] | None = None,
                    rng_states: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write a dense training checkpoint; see ``load_checkpoint``."""
    pairs, opt_keys, opt_steps = _checkpoint_arrays(model, optimizer, ledger)
    header = {
        "format": "ckpt",
        "model": _model_state(model),
        "arrays": [{"name": name, "dtype": arr.dtype.str,
                    "shape": list(arr.shape)} for name, arr in pairs],
        "optimizer": None if optimizer is None else {
            "kind": optimizer.config.kind,
            "learning_rate": optimizer.config.learning_rate,
            "beta1": optimizer.config.beta1,
            "beta2": optimizer.config.beta2,
            "epsilon": optimizer.config.epsilon,
            "batch_size": optimizer.config.batch_size,
            "keys": opt_keys,
            "steps": opt_steps,
        },
        "has_ledger": ledger is not None,
        "stops": None if stops is None else {
            str(t): _stop_state(s) for t, s in stops.items()},
        "rng": rng_states,
        "extra": extra,
    }
    body = b"".join(np.ascontiguousarray(arr).tobytes() for _, arr in pairs)
    atomic_write_bytes(path, _frame(CKPT_MAGIC, header, body))


def load_checkpoint(path) -> Checkpoint:
    """Restore a checkpoint; continued training is bit-identical.

    The model is rebuilt from the header, then every stored array replaces
    the fresh initialization byte for byte.
    """
    with open(path, "rb") as f:
        data = f.read()
    header, offset = _unframe(data, CKPT_MAGIC, "checkpoint")
    payload = data[:len(data) - CHECKSUM_BYTES]
    model = _model_from_state(header.get("model", {}))
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        raw = _take(payload, offset, count, entry["name"])
        offset += count
        arrays[entry["name"]] = np.frombuffer(raw, dtype).reshape(shape).copy()
    if offset != len(payload):
        raise FormatError("checkpoint body does not match its array table")

    for slot in model.slots:
        if slot.kind == "embedding":
            slot.table[...] = arrays[f"slot{slot.index}/table"]
        elif slot.maskable:
            slot.kernel[...] = arrays[f"slot{slot.index}/kernel"]
            slot.bias[...] = arrays[f"slot{slot.index}/bias"]
            slot.masks[...] = arrays[f"slot{slot.index}/masks"]
            slot.bias_masks[...] = arrays[f"slot{slot.index}/bias_masks"]

    ledger = None
    if header.get("has_ledger"):
        ledger = AvailabilityLedger(model)
        for index in ledger.used:
            ledger.used[index][...] = arrays[f"ledger/slot{index}"]

    optimizer = None
    if header.get("optimizer") is not None:
        opt_head = header["optimizer"]
        config = OptimizerConfig(
            kind=opt_head["kind"], learning_rate=opt_head["learning_rate"],
            beta1=opt_head["beta1"], beta2=opt_head["beta2"],
            epsilon=opt_head["epsilon"], batch_size=opt_head["batch_size"])
        optimizer = Optimizer(config)
        for j, key in enumerate(opt_head["keys"]):
            optimizer._state[tuple(key)] = {
                "m": arrays[f"opt{j}/m"], "v": arrays[f"opt{j}/v"],
                "t": opt_head["steps"][j],
            }

    stops = None
    if header.get("stops") is not None:
        stops = {int(t): _stop_from_state(s)
                 for t, s in header["stops"].items()}
    return Checkpoint(model, optimizer, ledger, stops,
                      header.get("rng"), header.get("extra"))
