"""Layer forward/backward kernels: dense, conv2d, maxpool, flatten, embedding.

Everything here is a pure function of (parameters, input) plus thin layer
classes that cache what the backward pass needs. Gradients are exact analytic
forms; tests pin them against central finite differences in 64-bit.

Dtype policy: computations preserve the input dtype (float32 in production,
float64 in gradient checks); matrix products accumulate in float64 either way.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import (
    BoundsError,
    DimensionError,
    InputError,
    ShapeError,
    StateError,
    VocabularyError,
)
from .tensor import matmul


class Activation(Enum):
    RELU = "relu"
    SOFTMAX = "softmax"
    IDENTITY = "identity"


class Loss(Enum):
    CCE = "categorical_cross_entropy"
    MSE = "mean_squared_error"
    BCE = "binary_cross_entropy"


# --- activations ---


def softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def apply_activation(z: np.ndarray, act: Activation) -> np.ndarray:
    if act == Activation.RELU:
        return np.maximum(z, 0)
    if act == Activation.SOFTMAX:
        return softmax(z)
    return z


def activation_backward(grad_out: np.ndarray, z: np.ndarray, act: Activation) -> np.ndarray:
    """Push a gradient w.r.t. the activation output back to the pre-activation."""
    if act == Activation.RELU:
        return grad_out * (z > 0)
    if act == Activation.SOFTMAX:
        p = softmax(z)
        return p * (grad_out - (grad_out * p).sum(axis=-1, keepdims=True))
    return grad_out


# --- dense ---


def dense_preact(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if x.ndim != 2:
        raise DimensionError(f"dense input must be batch x features, got {x.shape}")
    if bias.ndim != 1 or kernel.ndim != 2 or bias.shape[0] != kernel.shape[1]:
        raise DimensionError(
            f"dense kernel {kernel.shape} and bias {bias.shape} do not conform"
        )
    return matmul(x, kernel) + bias


def dense_forward(x, kernel, bias, act: Activation = Activation.IDENTITY) -> np.ndarray:
    return apply_activation(dense_preact(x, kernel, bias), act)


def dense_backward(grad_z: np.ndarray, x: np.ndarray, kernel: np.ndarray):
    """Gradients for z = x @ kernel + bias given dLoss/dz.

    Returns (dKernel, dBias, dInput).
    """
    gk = matmul(x.T, grad_z)
    gb = grad_z.sum(axis=0)
    gx = matmul(grad_z, kernel.T)
    return gk, gb, gx


# --- conv2d (stride 1 cross-correlation) ---


def _same_pads(s: int) -> tuple[int, int]:
    return (s - 1) // 2, (s - 1) - (s - 1) // 2


def _conv_geometry(x_shape, kernel_shape, padding: str):
    b, h, w, c = x_shape
    s1, s2, kc, f = kernel_shape
    if kc != c:
        raise DimensionError(
            f"conv input has {c} channels but kernel expects {kc}"
        )
    if padding == "same":
        p1, p2 = _same_pads(s1), _same_pads(s2)
        oh, ow = h, w
    elif padding == "valid":
        p1, p2 = (0, 0), (0, 0)
        oh, ow = h - s1 + 1, w - s2 + 1
    else:
        raise InputError(f"padding must be 'same' or 'valid', got {padding!r}")
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"kernel {s1}x{s2} does not fit {h}x{w} input with valid padding"
        )
    return p1, p2, oh, ow


def _im2col(x: np.ndarray, s1: int, s2: int, p1, p2):
    """Return (padded input, patch matrix [b*oh*ow, s1*s2*c])."""
    xp = np.pad(x, ((0, 0), p1, p2, (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (s1, s2), axis=(1, 2))
    # win: [b, oh, ow, c, s1, s2] -> [b, oh, ow, s1, s2, c]
    b, oh, ow = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * oh * ow, -1)
    return xp, cols


def conv2d_preact(x, kernel, bias, padding: str = "valid") -> np.ndarray:
    x = np.asarray(x)
    kernel = np.asarray(kernel)
    bias = np.asarray(bias)
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(
            f"conv needs batch x h x w x c input and s1 x s2 x c x f kernel, "
            f"got {x.shape} and {kernel.shape}"
        )
    s1, s2, _, f = kernel.shape
    if bias.shape != (f,):
        raise DimensionError(f"conv bias {bias.shape} does not match {f} filters")
    p1, p2, oh, ow = _conv_geometry(x.shape, kernel.shape, padding)
    _, cols = _im2col(x, s1, s2, p1, p2)
    out = matmul(cols, kernel.reshape(-1, f)) + bias
    return out.reshape(x.shape[0], oh, ow, f)


def conv2d_forward(x, kernel, bias, padding: str = "valid",
                   act: Activation = Activation.IDENTITY) -> np.ndarray:
    return apply_activation(conv2d_preact(x, kernel, bias, padding), act)


def conv2d_backward(grad_z: np.ndarray, x: np.ndarray, kernel: np.ndarray,
                    padding: str = "valid"):
    """Gradients for the stride-1 cross-correlation given dLoss/dz.

    Returns (dKernel, dBias, dInput).
    """
    s1, s2, c, f = kernel.shape
    p1, p2, oh, ow = _conv_geometry(x.shape, kernel.shape, padding)
    b, h, w, _ = x.shape
    xp, cols = _im2col(x, s1, s2, p1, p2)
    gflat = grad_z.reshape(b * oh * ow, f)
    gk = matmul(cols.T, gflat).reshape(kernel.shape)
    gb = gflat.sum(axis=0)
    gxp = np.zeros_like(xp)
    for i in range(s1):
        for j in range(s2):
            contrib = matmul(gflat, kernel[i, j].T).reshape(b, oh, ow, c)
            gxp[:, i:i + oh, j:j + ow, :] += contrib
    gx = gxp[:, p1[0]:p1[0] + h, p2[0]:p2[0] + w, :]
    return gk, gb, gx


# --- maxpool (2x2, stride 2) ---


def _pool_windows(x: np.ndarray):
    b, h, w, f = x.shape
    oh, ow = h // 2, w // 2
    cropped = x[:, :oh * 2, :ow * 2, :]
    # Flat window order is row-major: [top-left, top-right, bottom-left,
    # bottom-right], so argmax's first-hit rule is the tie-break.
    win = cropped.reshape(b, oh, 2, ow, 2, f).transpose(0, 1, 3, 2, 4, 5)
    return win.reshape(b, oh, ow, 4, f), oh, ow


def maxpool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2/stride-2 max pooling. Returns (pooled, argmax record).

    Odd trailing rows/columns are dropped; the record holds each window's
    winning flat index (ties to the lowest) for backward routing.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise DimensionError(f"maxpool needs batch x h x w x f input, got {x.shape}")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"maxpool needs spatial dims >= 2, got {x.shape}")
    windows, _, _ = _pool_windows(x)
    record = windows.argmax(axis=3)
    out = np.take_along_axis(windows, record[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, record


def maxpool_backward(grad_out: np.ndarray, record: np.ndarray, x_shape) -> np.ndarray:
    b, h, w, f = x_shape
    oh, ow = h // 2, w // 2
    scattered = np.zeros((b, oh, ow, 4, f), dtype=grad_out.dtype)
    np.put_along_axis(scattered, record[:, :, :, None, :],
                      grad_out[:, :, :, None, :], axis=3)
    gx = np.zeros(x_shape, dtype=grad_out.dtype)
    gx[:, :oh * 2, :ow * 2, :] = (
        scattered.reshape(b, oh, ow, 2, 2, f)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(b, oh * 2, ow * 2, f)
    )
    return gx


# --- flatten ---


def flatten_forward(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return x.reshape(x.shape[0], -1)


def flatten_backward(grad_out: np.ndarray, x_shape) -> np.ndarray:
    return grad_out.reshape(x_shape)


# --- embedding ---


def embedding_forward(tokens: np.ndarray, table: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    table = np.asarray(table)
    if tokens.ndim != 2 or table.ndim != 2:
        raise DimensionError(
            f"embedding needs batch x len tokens and vocab x dim table, "
            f"got {tokens.shape} and {table.shape}"
        )
    if not np.issubdtype(tokens.dtype, np.integer):
        raise InputError(f"token ids must be integers, got dtype {tokens.dtype}")
    vocab = table.shape[0]
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab):
        bad = tokens[(tokens < 0) | (tokens >= vocab)].flat[0]
        raise VocabularyError(f"token id {bad} outside vocabulary of size {vocab}")
    return table[tokens]


def embedding_backward(grad_out: np.ndarray, tokens: np.ndarray,
                       table_shape) -> np.ndarray:
    gtable = np.zeros(table_shape, dtype=grad_out.dtype)
    np.add.at(gtable, tokens, grad_out)
    return gtable


# --- losses ---


def _as_onehot(target: np.ndarray, pred_shape) -> np.ndarray:
    target = np.asarray(target)
    if target.shape == tuple(pred_shape):
        return target
    if target.ndim == 1 and target.shape[0] == pred_shape[0]:
        if not np.issubdtype(target.dtype, np.integer):
            raise InputError(f"class targets must be integers, got {target.dtype}")
        k = pred_shape[1]
        if target.size and (target.min() < 0 or target.max() >= k):
            raise BoundsError(f"class index outside [0, {k})")
        onehot = np.zeros(pred_shape)
        onehot[np.arange(target.shape[0]), target] = 1.0
        return onehot
    raise DimensionError(
        f"targets {target.shape} do not conform to predictions {tuple(pred_shape)}"
    )


def loss_and_grad(pred: np.ndarray, target: np.ndarray,
                  kind: Loss) -> tuple[float, np.ndarray]:
    """Scalar loss and its gradient w.r.t. ``pred``.

    Cross-entropy kinds take raw scores and fuse the squashing function:
    CCE expects logits (softmax folded in, log-sum-exp with max subtraction)
    and BCE expects a single score per row (sigmoid folded in). MSE takes the
    prediction itself and averages the squared error over every element.
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if kind == Loss.MSE:
        if pred.shape != target.shape:
            raise DimensionError(
                f"MSE shapes differ: {pred.shape} vs {target.shape}"
            )
        diff = pred.astype(np.float64) - target.astype(np.float64)
        loss = float(np.mean(diff * diff))
        grad = (2.0 / diff.size) * diff
        return loss, grad.astype(pred.dtype)
    if kind == Loss.CCE:
        if pred.ndim != 2:
            raise DimensionError(f"CCE needs batch x classes logits, got {pred.shape}")
        onehot = _as_onehot(target, pred.shape)
        z = pred.astype(np.float64)
        zmax = z.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
        b = pred.shape[0]
        loss = float(np.sum(onehot * (logsumexp - z)) / b)
        grad = (np.exp(z - logsumexp) - onehot) / b
        return loss, grad.astype(pred.dtype)
    if kind == Loss.BCE:
        if pred.shape != target.shape:
            raise DimensionError(
                f"BCE shapes differ: {pred.shape} vs {target.shape}"
            )
        s = pred.astype(np.float64)
        t = target.astype(np.float64)
        loss = float(np.mean(np.maximum(s, 0) - s * t + np.log1p(np.exp(-np.abs(s)))))
        grad = (1.0 / (1.0 + np.exp(-s)) - t) / s.size
        return loss, grad.astype(pred.dtype)
    raise InputError(f"unknown loss kind {kind!r}")


FUSED_LOSSES = (Loss.CCE, Loss.BCE)


# --- layer objects ---


class Layer:
    """Base: parameterless, cache-free pass-through hooks."""

    def params(self) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray, pre_act: bool = False):
        """Return (param gradient dict, input gradient)."""
        raise NotImplementedError

    def _require(self, cache, what: str):
        if cache is None:
            raise StateError(f"backward before forward: no recorded {what}")
        return cache


class Dense(Layer):
    def __init__(self, kernel, bias, act: Activation = Activation.IDENTITY):
        self.kernel = np.asarray(kernel)
        self.bias = np.asarray(bias)
        self.act = act
        self._x = None
        self._z = None

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x, record=False):
        z = dense_preact(x, self.kernel, self.bias)
        if record:
            self._x, self._z = np.asarray(x), z
        return apply_activation(z, self.act)

    def backward(self, grad_out, pre_act=False):
        x = self._require(self._x, "input")
        gz = grad_out if pre_act else activation_backward(grad_out, self._z, self.act)
        gk, gb, gx = dense_backward(gz, x, self.kernel)
        return {"kernel": gk, "bias": gb}, gx


class Conv2D(Layer):
    def __init__(self, kernel, bias, padding: str = "valid",
                 act: Activation = Activation.IDENTITY):
        self.kernel = np.asarray(kernel)
        self.bias = np.asarray(bias)
        self.padding = padding
        self.act = act
        self._x = None
        self._z = None

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x, record=False):
        z = conv2d_preact(x, self.kernel, self.bias, self.padding)
        if record:
            self._x, self._z = np.asarray(x), z
        return apply_activation(z, self.act)

    def backward(self, grad_out, pre_act=False):
        x = self._require(self._x, "input")
        gz = grad_out if pre_act else activation_backward(grad_out, self._z, self.act)
        gk, gb, gx = conv2d_backward(gz, x, self.kernel, self.padding)
        return {"kernel": gk, "bias": gb}, gx


class MaxPool(Layer):
    def __init__(self):
        self._record = None
        self._x_shape = None

    def forward(self, x, record=False):
        out, rec = maxpool_forward(x)
        if record:
            self._record, self._x_shape = rec, np.asarray(x).shape
        return out

    def backward(self, grad_out, pre_act=False):
        rec = self._require(self._record, "argmax record")
        return {}, maxpool_backward(grad_out, rec, self._x_shape)


class Flatten(Layer):
    def __init__(self):
        self._x_shape = None

    def forward(self, x, record=False):
        x = np.asarray(x)
        if record:
            self._x_shape = x.shape
        return flatten_forward(x)

    def backward(self, grad_out, pre_act=False):
        shape = self._require(self._x_shape, "input shape")
        return {}, flatten_backward(grad_out, shape)


class Embedding(Layer):
    def __init__(self, table):
        self.table = np.asarray(table)
        self._tokens = None

    def params(self):
        return {"table": self.table}

    def forward(self, tokens, record=False):
        out = embedding_forward(tokens, self.table)
        if record:
            self._tokens = np.asarray(tokens)
        return out

    def backward(self, grad_out, pre_act=False):
        tokens = self._require(self._tokens, "token batch")
        gt = embedding_backward(grad_out, tokens, self.table.shape)
        return {"table": gt}, None  # tokens are not differentiable


@dataclass
class GradientBundle:
    """Per-layer parameter gradients plus the loss that produced them."""

    loss: float
    layer_grads: list[dict[str, np.ndarray]]
    input_grad: np.ndarray | None = None


@dataclass
class Network:
    """A plain sequential stack, used for gradient checks and small demos."""

    layers: list[Layer] = field(default_factory=list)

    def forward(self, x, record: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, record=record)
        return x

    def backward(self, target, loss_kind: Loss) -> GradientBundle:
        """Backpropagate from a loss; requires a recorded forward pass.

        Fused losses (CCE, BCE) read the head's pre-activation directly so
        the squashing function never runs unfused.
        """
        if not self.layers:
            raise StateError("network has no layers")
        head = self.layers[-1]
        if loss_kind in FUSED_LOSSES:
            z = head._require(getattr(head, "_z", None), "head pre-activation")
            loss, grad = loss_and_grad(z, target, loss_kind)
            grads, gx = head.backward(grad, pre_act=True)
        else:
            z = head._require(getattr(head, "_z", None), "head pre-activation")
            out = apply_activation(z, head.act)
            loss, grad = loss_and_grad(out, target, loss_kind)
            grads, gx = head.backward(grad)
        layer_grads = [grads]
        for layer in reversed(self.layers[:-1]):
            grads, gx = layer.backward(gx)
            layer_grads.append(grads)
        layer_grads.reverse()
        return GradientBundle(loss=loss, layer_grads=layer_grads, input_grad=gx)


def backward(network: Network, x, target, loss_kind: Loss) -> GradientBundle:
    """Forward then backward in one call; the usual training-step entry."""
    network.forward(x, record=True)
    return network.backward(target, loss_kind)
