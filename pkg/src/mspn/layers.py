"""Forward and backward kernels for every layer kind the networks use.

All kernels take batched arrays: images and feature maps are ``(N, C, H, W)``,
flat vectors are ``(N, D)``.  Each ``*_forward`` returns ``(output, cache)``
and the matching ``*_backward`` consumes that cache, so a layer object holds
no per-call state and may be shared across threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, MinWidthError
from .tensor import row_reduce, row_reduce_backward, MODES


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# -- convolution -------------------------------------------------------------

def conv_output_size(size: int, kernel: int, pad: int) -> int:
    return size + 2 * pad - kernel + 1


def conv_forward(x, weight, bias, pad=(0, 0)):
    """Stride-1 valid cross-correlation over a zero-padded input.

    The column matrix is laid out ``(C*k_h*k_w, N*H_out*W_out)`` so building
    it, and scattering its gradient back, are k_h*k_w block copies.
    """
    x = np.asarray(x)
    if x.ndim != 4:
        raise ContractError(f"conv expects (N, C, H, W), got shape {x.shape}")
    out_maps, in_maps, k_h, k_w = weight.shape
    if x.shape[1] != in_maps:
        raise ContractError(f"conv expects {in_maps} input maps, got {x.shape[1]}")
    pad_h, pad_w = pad
    n, _, h, w = x.shape
    if h + 2 * pad_h < k_h:
        raise MinWidthError(h, k_h - 2 * pad_h, where="input height")
    if w + 2 * pad_w < k_w:
        raise MinWidthError(w, k_w - 2 * pad_w)
    out_h = conv_output_size(h, k_h, pad_h)
    out_w = conv_output_size(w, k_w, pad_w)
    xt = x.transpose(1, 0, 2, 3)
    if pad_h or pad_w:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
    cols = np.empty((in_maps, k_h, k_w, n, out_h, out_w), dtype=x.dtype)
    for i in range(k_h):
        for j in range(k_w):
            cols[:, i, j] = xt[:, :, i:i + out_h, j:j + out_w]
    cols = cols.reshape(in_maps * k_h * k_w, -1)
    y = (weight.reshape(out_maps, -1) @ cols).reshape(out_maps, n, out_h, out_w)
    y += bias[:, None, None, None]
    return np.ascontiguousarray(y.transpose(1, 0, 2, 3)), (cols, (n, h, w), pad)


def conv_backward(grad_out, cache, weight):
    """Return ``(grad_in, grad_weight, grad_bias)``."""
    cols, (n, h, w), (pad_h, pad_w) = cache
    out_maps, in_maps, k_h, k_w = weight.shape
    out_h = conv_output_size(h, k_h, pad_h)
    out_w = conv_output_size(w, k_w, pad_w)
    if grad_out.shape != (n, out_maps, out_h, out_w):
        raise ContractError(
            f"conv gradient shape {grad_out.shape} != output shape {(n, out_maps, out_h, out_w)}"
        )
    g = np.ascontiguousarray(grad_out.transpose(1, 0, 2, 3)).reshape(out_maps, -1)
    grad_w = (g @ cols.T).reshape(weight.shape)
    grad_b = g.sum(axis=1)
    gcols = (weight.reshape(out_maps, -1).T @ g).reshape(in_maps, k_h, k_w, n, out_h, out_w)
    grad_x = np.zeros((in_maps, n, h + 2 * pad_h, w + 2 * pad_w), dtype=grad_out.dtype)
    for i in range(k_h):
        for j in range(k_w):
            grad_x[:, :, i:i + out_h, j:j + out_w] += gcols[:, i, j]
    grad_x = grad_x[:, :, pad_h:pad_h + h, pad_w:pad_w + w].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(grad_x), grad_w, grad_b


# -- rectifier ---------------------------------------------------------------

def relu_forward(x):
    mask = x > 0
    return np.maximum(x, 0), mask


def relu_backward(grad_out, mask):
    return grad_out * mask


# -- 2x2 max pooling ---------------------------------------------------------

def maxpool_forward(x):
    """2x2 window, stride 2; odd trailing rows/columns are dropped.

    The cache holds the winning position per window (0..3, row-major), the
    lowest position winning ties.
    """
    n, c, h, w = x.shape
    out_h, out_w = h // 2, w // 2
    if out_h < 1 or out_w < 1:
        raise MinWidthError(w if out_w < 1 else h, 2, where="pooling input")
    rows, cols = slice(0, 2 * out_h, 2), slice(0, 2 * out_w, 2)
    rows1, cols1 = slice(1, 2 * out_h, 2), slice(1, 2 * out_w, 2)
    a, b = x[:, :, rows, cols], x[:, :, rows, cols1]
    c_, d = x[:, :, rows1, cols], x[:, :, rows1, cols1]
    top_right, bottom_right = b > a, d > c_
    top, bottom = np.maximum(a, b), np.maximum(c_, d)
    use_bottom = bottom > top
    out = np.maximum(top, bottom)
    idx = np.where(use_bottom, bottom_right, top_right).view(np.int8)
    idx += use_bottom.view(np.int8) * np.int8(2)
    return out, (idx, x.shape)


def maxpool_backward(grad_out, cache):
    idx, shape = cache
    if grad_out.shape != idx.shape:
        raise ContractError(f"maxpool gradient shape {grad_out.shape} != {idx.shape}")
    out_h, out_w = idx.shape[-2:]
    grad_in = np.zeros(shape, dtype=grad_out.dtype)
    for k, (di, dj) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        np.multiply(grad_out, idx == k, out=grad_in[:, :, di:2 * out_h:2, dj:2 * out_w:2])
    return grad_in


# -- per-image standardization -----------------------------------------------

def standardize_forward(x, eps=1e-5):
    """Shift and scale every sample to zero mean and unit variance."""
    axes = tuple(range(1, x.ndim))
    mean = x.mean(axis=axes, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=axes, keepdims=True) + eps)
    y = centered * inv_std
    return y, (y, inv_std)


def standardize_backward(grad_out, cache):
    y, inv_std = cache
    axes = tuple(range(1, y.ndim))
    g_mean = grad_out.mean(axis=axes, keepdims=True)
    gy_mean = (grad_out * y).mean(axis=axes, keepdims=True)
    return inv_std * (grad_out - g_mean - y * gy_mean)


# -- fully connected ---------------------------------------------------------

def fc_forward(x, weight, bias):
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ContractError(
            f"fc expects (N, {weight.shape[1]}) flat input, got shape {x.shape}"
        )
    return x @ weight.T + bias, x


def fc_backward(grad_out, x, weight):
    if grad_out.shape != (x.shape[0], weight.shape[0]):
        raise ContractError(f"fc gradient shape {grad_out.shape} mismatches output")
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


# -- softmax + cross entropy -------------------------------------------------

def softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent_forward(logits, labels):
    """Per-sample softmax probabilities and negative log-likelihoods."""
    logits = np.asarray(logits)
    single = logits.ndim == 1
    logits2 = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = logits2.shape[1]
    if labels.shape != (logits2.shape[0],):
        raise ContractError("need exactly one label per row of logits")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes}), got {labels.tolist()}")
    shifted = logits2 - logits2.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    losses = log_z - shifted[np.arange(len(labels)), labels]
    probs = np.exp(shifted - log_z[:, None])
    if single:
        return probs[0], losses[0]
    return probs, losses


def softmax_xent_backward(probs, labels, scale=1.0):
    """Gradient of ``scale * sum(losses)`` with respect to the logits."""
    grad = np.array(probs, copy=True)
    labels = np.atleast_1d(labels)
    rows = np.atleast_2d(grad)
    rows[np.arange(len(labels)), labels] -= 1.0
    return grad * scale


# -- layer objects used by the graph ------------------------------------------

class Layer:
    """Common interface: ``forward(*xs) -> (y, cache)``,
    ``backward(g, cache) -> (grad_in, param_grads)``."""

    kind = "layer"

    def params(self) -> dict:
        return {}

    def output_shape(self, *shapes):
        return shapes[0]


@dataclass(eq=False)
class Conv(Layer):
    weight: np.ndarray
    bias: np.ndarray
    pad: tuple = (0, 0)
    kind = "conv"

    @classmethod
    def create(cls, rng, in_maps, out_maps, kernel=(3, 3), pad=(0, 0), dtype=np.float32):
        k_h, k_w = kernel
        shape = (out_maps, in_maps, k_h, k_w)
        weight = glorot_uniform(rng, shape, in_maps * k_h * k_w, out_maps * k_h * k_w, dtype)
        return cls(weight, np.zeros(out_maps, dtype=dtype), tuple(pad))

    @property
    def in_maps(self):
        return self.weight.shape[1]

    @property
    def out_maps(self):
        return self.weight.shape[0]

    @property
    def kernel(self):
        return self.weight.shape[2:]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return conv_forward(x, self.weight, self.bias, self.pad)

    def backward(self, grad, cache):
        gx, gw, gb = conv_backward(grad, cache, self.weight)
        return gx, {"weight": gw, "bias": gb}

    def output_shape(self, shape):
        c, h, w = shape
        (k_h, k_w), (p_h, p_w) = self.kernel, self.pad
        return self.out_maps, conv_output_size(h, k_h, p_h), conv_output_size(w, k_w, p_w)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        return relu_forward(x)

    def backward(self, grad, cache):
        return relu_backward(grad, cache), {}


class Standardize(Layer):
    kind = "standardize"

    def forward(self, x):
        return standardize_forward(x)

    def backward(self, grad, cache):
        return standardize_backward(grad, cache), {}


class MaxPool(Layer):
    kind = "maxpool"

    def forward(self, x):
        return maxpool_forward(x)

    def backward(self, grad, cache):
        return maxpool_backward(grad, cache), {}

    def output_shape(self, shape):
        c, h, w = shape
        return c, h // 2, w // 2


@dataclass(eq=False)
class SSP(Layer):
    """Spatially-sensitive pooling: one value per row of each map."""

    mode: str = "max"
    kind = "ssp"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown SSP mode {self.mode!r}")

    def forward(self, x):
        return row_reduce(x, self.mode)

    def backward(self, grad, cache):
        return row_reduce_backward(grad, cache), {}

    def output_shape(self, shape):
        c, h, _ = shape
        return (c * h,)


class Concat(Layer):
    kind = "concat"

    def forward(self, *xs):
        if not xs:
            raise ContractError("concat needs at least one input")
        sizes = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1), sizes

    def backward(self, grad, sizes):
        edges = np.cumsum(sizes)[:-1]
        return tuple(np.split(grad, edges, axis=-1)), {}

    def output_shape(self, *shapes):
        return (sum(s[0] for s in shapes),)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, shape):
        return grad.reshape(shape), {}

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


@dataclass(eq=False)
class FullyConnected(Layer):
    weight: np.ndarray
    bias: np.ndarray
    kind = "fc"

    @classmethod
    def create(cls, rng, in_dim, out_dim, dtype=np.float32):
        weight = glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim, dtype)
        return cls(weight, np.zeros(out_dim, dtype=dtype))

    @property
    def in_dim(self):
        return self.weight.shape[1]

    @property
    def out_dim(self):
        return self.weight.shape[0]

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        return fc_forward(x, self.weight, self.bias)

    def backward(self, grad, cache):
        gx, gw, gb = fc_backward(grad, cache, self.weight)
        return gx, {"weight": gw, "bias": gb}

    def output_shape(self, shape):
        (d,) = shape
        if d != self.in_dim:
            raise ContractError(f"fc expects {self.in_dim} inputs, upstream gives {d}")
        return (self.out_dim,)
