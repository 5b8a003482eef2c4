"""Dataset ingestion and preprocessing: IDX images, CSV tables, raw text.

Loaders are pure functions of their files; every preprocessing statistic
(scaler ranges, vocabulary) is fitted on training data only and carried as
explicit state so exported models can reproduce it.
"""

import csv
import os
import re
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError
from .ioutil import atomic_write_bytes
from .tensor import DTYPE, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# Header contract for the 13-feature housing table; the target column
# follows the features.
BOSTON_COLUMNS = ["CRIM", "ZN", "INDUS", "CHAS", "NOX", "RM", "AGE", "DIS",
                  "RAD", "TAX", "PTRATIO", "B", "LSTAT"]
BOSTON_TARGET = "MEDV"


# --- IDX binary format (big-endian, unsigned byte payload) ---


def _read_exact(data: bytes, offset: int, count: int, what: str) -> bytes:
    if offset + count > len(data):
        raise FormatError(
            f"truncated IDX file: needed {count} bytes for {what} at byte "
            f"{offset}, file has {len(data)}"
        )
    return data[offset:offset + count]


def decode_idx(data: bytes) -> np.ndarray:
    magic = int.from_bytes(_read_exact(data, 0, 4, "magic"), "big")
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise FormatError(f"bad IDX magic 0x{magic:08x} at byte 0")
    dims = []
    offset = 4
    for i in range(ndim):
        dims.append(int.from_bytes(
            _read_exact(data, offset, 4, f"dimension {i}"), "big"))
        offset += 4
    count = int(np.prod(dims)) if dims else 0
    payload = _read_exact(data, offset, count, "payload")
    if len(data) != offset + count:
        raise FormatError(
            f"IDX file has {len(data) - offset - count} trailing bytes "
            f"at byte {offset + count}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def encode_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise InputError(f"IDX payload must be uint8, got {array.dtype}")
    if array.ndim == 3:
        magic = IDX_IMAGES_MAGIC
    elif array.ndim == 1:
        magic = IDX_LABELS_MAGIC
    else:
        raise InputError(f"IDX arrays are 3-d images or 1-d labels, "
                         f"got rank {array.ndim}")
    out = bytearray(magic.to_bytes(4, "big"))
    for d in array.shape:
        out += int(d).to_bytes(4, "big")
    out += array.tobytes()
    return bytes(out)


def load_idx(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_idx(fh.read())


def save_idx(path, array: np.ndarray) -> None:
    atomic_write_bytes(path, encode_idx(array))


# --- pixel and feature scaling ---


def scale_pixels(images) -> np.ndarray:
    return (np.asarray(images) / 255.0).astype(DTYPE)


class MinMaxScaler:
    """Per-feature (x - min) / (max - min) with train-split statistics.

    Constant features map to 0 (a warning is raised at fit time); other
    splits may scale outside [0, 1], which is fine.
    """

    def __init__(self):
        self.mins = None
        self.maxs = None

    def fit(self, x) -> "MinMaxScaler":
        x = np.asarray(x, np.float64)
        self.mins = x.min(axis=0)
        self.maxs = x.max(axis=0)
        constant = np.nonzero(self.maxs == self.mins)[0]
        if constant.size:
            warnings.warn(
                f"features {constant.tolist()} are constant in the training "
                f"split and will be scaled to 0",
                stacklevel=2,
            )
        return self

    def _span(self):
        span = self.maxs - self.mins
        return np.where(span == 0, 1.0, span)

    def transform(self, x) -> np.ndarray:
        if self.mins is None:
            raise InputError("scaler used before fitting")
        x = np.asarray(x, np.float64)
        out = (x - self.mins) / self._span()
        out[:, self.maxs == self.mins] = 0.0
        return out.astype(DTYPE)

    def inverse_transform(self, x) -> np.ndarray:
        if self.mins is None:
            raise InputError("scaler used before fitting")
        return (np.asarray(x, np.float64) * self._span() + self.mins).astype(DTYPE)

    def to_state(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_state(cls, state: dict) -> "MinMaxScaler":
        scaler = cls()
        scaler.mins = np.asarray(state["mins"], np.float64)
        scaler.maxs = np.asarray(state["maxs"], np.float64)
        return scaler


def fit_apply_minmax(train, *others):
    """Fit on the training features, scale every split with the same stats.

    Returns (scaled_train, *scaled_others, scaler).
    """
    scaler = MinMaxScaler().fit(train)
    out = [scaler.transform(train)]
    out.extend(scaler.transform(o) for o in others)
    out.append(scaler)
    return tuple(out)


# --- text: tokenizer, vocabulary, padding ---

_TOKEN_RE = re.compile(r"[\w']+")

PAD_ID = 0
UNKNOWN_ID = 1


def tokenize(text: str) -> list[str]:
    """Lowercase split on whitespace and punctuation; apostrophes stay."""
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    """Frequency-ranked token table with reserved pad (0) and unknown (1)."""

    def __init__(self, tokens: list[str]):
        self.id_of = {tok: i + 2 for i, tok in enumerate(tokens)}
        self.tokens = list(tokens)

    @property
    def size(self) -> int:
        return len(self.tokens) + 2

    def lookup(self, token: str) -> int:
        return self.id_of.get(token, UNKNOWN_ID)

    def to_state(self) -> dict:
        return {"tokens": self.tokens}

    @classmethod
    def from_state(cls, state: dict) -> "Vocab":
        return cls(state["tokens"])


def build_vocab(texts, max_size: int = 10000) -> Vocab:
    """Most frequent tokens win; ties go alphabetically. Deterministic."""
    counts: dict[str, int] = {}
    for text in texts:
        for tok in tokenize(text):
            counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(ranked[:max_size])


def tokenize_pad(texts, vocab: Vocab, length: int = 128) -> np.ndarray:
    """Token id matrix [n, length]; both padding and truncation at the end."""
    out = np.full((len(texts), length), PAD_ID, dtype=np.int32)
    for row, text in enumerate(texts):
        ids = [vocab.lookup(t) for t in tokenize(text)][:length]
        out[row, :len(ids)] = ids
    return out


# --- tabular CSV ---


def load_csv(path, feature_columns, target_column):
    """(features [n, f], targets [n, 1]) from a CSV with an exact header."""
    expected = list(feature_columns) + [target_column]
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV")
        if [h.strip() for h in header] != expected:
            raise FormatError(
                f"{path}: header {header} does not match the contract "
                f"{expected}"
            )
        features, targets = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(expected)} columns, "
                    f"got {len(row)}"
                )
            try:
                values = [float(v) for v in row]
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}")
            features.append(values[:-1])
            targets.append(values[-1:])
    if not features:
        raise FormatError(f"{path}: no data rows")
    return (np.asarray(features, DTYPE), np.asarray(targets, DTYPE))


def load_boston_csv(path):
    return load_csv(path, BOSTON_COLUMNS, BOSTON_TARGET)


# --- raw text directories (one document per file, one class per subdir) ---


def load_text_dir(root):
    """(texts, labels, class_names); classes are subdirs in sorted order."""
    root = os.fspath(root)
    classes = sorted(
        d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise InputError(f"{root}: no class subdirectories")
    texts, labels = [], []
    for label, name in enumerate(classes):
        folder = os.path.join(root, name)
        for fname in sorted(os.listdir(folder)):
            fpath = os.path.join(folder, fname)
            if not os.path.isfile(fpath):
                continue
            with open(fpath, encoding="utf-8") as fh:
                texts.append(fh.read())
            labels.append(label)
    if not texts:
        raise InputError(f"{root}: class subdirectories contain no files")
    return texts, np.asarray(labels), classes


# --- image resampling (area average, for downsizing) ---


def _overlap_matrix(src: int, dst: int) -> np.ndarray:
    """Row i holds each source cell's share of target cell i's box."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        start, end = i * scale, (i + 1) * scale
        for j in range(int(start), min(int(np.ceil(end)), src)):
            m[i, j] = min(end, j + 1) - max(start, j)
    return m / scale


def area_resize(images: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Box-average resampling of [n, h, w, c] images to [n, out_h, out_w, c]."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise InputError(f"area_resize needs n x h x w x c, got {images.shape}")
    mh = _overlap_matrix(images.shape[1], out_h)
    mw = _overlap_matrix(images.shape[2], out_w)
    out = np.einsum("ih,nhwc->niwc", mh, images.astype(np.float64))
    out = np.einsum("jw,niwc->nijc", mw, out)
    return out.astype(DTYPE)


# --- batches ---


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    task: int

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise InputError(
                f"batch inputs ({len(self.inputs)}) and targets "
                f"({len(self.targets)}) disagree"
            )


def check_labels(targets, classes: int) -> None:
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= classes):
        raise InputError(
            f"labels outside [0, {classes}): found {int(targets.min())}"
            f"..{int(targets.max())}"
        )


def batch_iterator(inputs, targets, batch_size: int, rng: Rng, task: int = 0):
    """Seeded shuffle, then consecutive batches; the last may be short."""
    n = len(inputs)
    if n == 0:
        raise InputError("cannot iterate an empty dataset")
    if batch_size < 1 or batch_size > n:
        raise InputError(f"batch size {batch_size} outside [1, {n}]")
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start:start + batch_size]
        yield Batch(inputs=inputs[idx], targets=targets[idx], task=task)


# --- dataset descriptor ---


@dataclass
class DatasetSpec:
    """Where a task's data lives and how to read it."""

    name: str
    format: str  # idx | csv | text | synthetic
    task_kind: str  # classification | regression
    classes: int = 0
    paths: dict[str, str] = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # synthetic builder knobs
    input_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.format not in ("idx", "csv", "text", "synthetic"):
            raise InputError(f"unknown dataset format {self.format!r}")
        if self.task_kind not in ("classification", "regression"):
            raise InputError(f"unknown task kind {self.task_kind!r}")
        if self.task_kind == "classification" and self.classes < 2:
            raise InputError(
                f"classification needs >= 2 classes, got {self.classes}")
        train_paths = {v for k, v in self.paths.items() if "train" in k}
        test_paths = {v for k, v in self.paths.items() if "test" in k}
        shared = train_paths & test_paths
        if shared:
            raise InputError(f"train and test share files: {sorted(shared)}")
