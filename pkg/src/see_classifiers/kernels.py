"""Dense numeric layers with hand-written forward and backward passes.

All arrays are float64. Feature maps are ``(channels, length)`` for a single
segment or ``(batch, channels, length)`` for a batch; every function accepts
either and returns the same rank it was given.

Matrix products are laid out so that each batch item goes through an identical
sequence of floating point operations regardless of the batch size. That keeps
single-segment inference bit-identical to batched evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError, TrainingError, UsageError

PROB_FLOOR = 1e-12


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (C, L) or (B, C, L) array, got shape {x.shape}")
    return x, False


def _restore(y: np.ndarray, squeezed: bool) -> np.ndarray:
    return y[0] if squeezed else y


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ConvLayerParams:
    weights: np.ndarray  # (out, in, width)
    bias: np.ndarray  # (out,)
    stride: int = 1

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_width(self) -> int:
        return self.weights.shape[2]

    @classmethod
    def init(cls, rng, in_channels: int, out_channels: int, kernel_width: int, stride: int = 1):
        fan_in = in_channels * kernel_width
        w = uniform_init(rng, (out_channels, in_channels, kernel_width), fan_in)
        b = uniform_init(rng, (out_channels,), fan_in)
        return cls(w, b, stride)

    def output_length(self, length: int) -> int:
        return conv_output_length(length, self.kernel_width, self.stride)

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


@dataclass
class DenseLayerParams:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, rng, in_dim: int, out_dim: int):
        return cls(uniform_init(rng, (out_dim, in_dim), in_dim), uniform_init(rng, (out_dim,), in_dim))

    @property
    def size(self) -> int:
        return self.weights.size + self.bias.size


def conv_output_length(length: int, width: int, stride: int = 1) -> int:
    if stride < 1 or width < 1:
        raise ShapeError(f"kernel width {width} and stride {stride} must be >= 1")
    if length < width:
        raise ShapeError(f"input length {length} shorter than window width {width}")
    return (length - width) // stride + 1


def conv1d_forward(x: np.ndarray, params: ConvLayerParams) -> np.ndarray:
    """Valid (unpadded) cross-correlation plus bias."""
    xb, squeezed = _as_batch(x)
    if xb.shape[1] != params.in_channels:
        raise ShapeError(
            f"conv input has shape {xb.shape[1:]} but layer expects "
            f"{params.in_channels} channels (weights {params.weights.shape})"
        )
    if xb.shape[2] < params.kernel_width:
        raise ShapeError(
            f"conv input has shape {xb.shape[1:]}, shorter than kernel "
            f"(weights {params.weights.shape})"
        )
    k, s = params.kernel_width, params.stride
    # (B, Cin, Lout, K) -> (B, Lout, Cin*K)
    win = sliding_window_view(xb, k, axis=2)[:, :, ::s, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(xb.shape[0], win.shape[2], -1)
    w2 = params.weights.reshape(params.out_channels, -1)
    y = np.matmul(cols, w2.T) + params.bias
    return _restore(np.ascontiguousarray(y.transpose(0, 2, 1)), squeezed)


def conv1d_backward(dy: np.ndarray, x: np.ndarray, params: ConvLayerParams):
    """Return ``(dx, dW, db)`` for :func:`conv1d_forward`."""
    dyb, squeezed = _as_batch(dy)
    xb, _ = _as_batch(x)
    k, s = params.kernel_width, params.stride
    b, cin, _ = xb.shape
    lout = dyb.shape[2]
    win = sliding_window_view(xb, k, axis=2)[:, :, ::s, :]
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(b, lout, -1)
    dw = np.tensordot(dyb, cols, axes=([0, 2], [0, 1])).reshape(params.weights.shape)
    db = dyb.sum(axis=(0, 2))
    w2 = params.weights.reshape(params.out_channels, -1)
    dcols = np.matmul(dyb.transpose(0, 2, 1), w2).reshape(b, lout, cin, k)
    dx = np.zeros_like(xb)
    for j in range(k):
        # output position l reads input position l*s + j
        dx[:, :, j : j + s * (lout - 1) + 1 : s] += dcols[:, :, :, j].transpose(0, 2, 1)
    return _restore(dx, squeezed), dw, db


def maxpool1d_forward(x: np.ndarray, width: int = 2, stride: int = 2):
    """Per-channel sliding max. Returns ``(y, argmax)`` with absolute input indices."""
    xb, squeezed = _as_batch(x)
    if width < 1 or stride < 1:
        raise ShapeError(f"pool width {width} and stride {stride} must be >= 1")
    if xb.shape[2] < width:
        raise ShapeError(f"pool width {width} exceeds input length {xb.shape[2]}")
    win = sliding_window_view(xb, width, axis=2)[:, :, ::stride, :]
    local = win.argmax(axis=3)
    y = np.take_along_axis(win, local[..., None], axis=3)[..., 0]
    idx = local + stride * np.arange(win.shape[2])
    return _restore(y, squeezed), _restore(idx, squeezed)


def maxpool1d_backward(dy: np.ndarray, argmax: np.ndarray, input_length: int) -> np.ndarray:
    dyb, squeezed = _as_batch(dy)
    idx = argmax[None] if squeezed else argmax
    dx = np.zeros(dyb.shape[:2] + (input_length,))
    b, c, _ = np.indices(dyb.shape, sparse=True)
    # overlapping windows may select the same input twice
    np.add.at(dx, (b, c, idx), dyb)
    return _restore(dx, squeezed)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(x) > 0.0, dy, 0.0)


def dense_forward(x: np.ndarray, params: DenseLayerParams) -> np.ndarray:
    """``W @ x + b`` for a vector ``(in,)`` or a batch ``(B, in)``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.in_dim:
        raise ShapeError(f"dense input dim {x.shape[-1]} != layer in_dim {params.in_dim}")
    if x.ndim == 1:
        return dense_forward(x[None], params)[0]
    # stacked (1, in) @ (in, out) products keep per-row arithmetic batch independent
    return np.matmul(x[:, None, :], params.weights.T)[:, 0, :] + params.bias


def dense_backward(dy: np.ndarray, x: np.ndarray, params: DenseLayerParams):
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return params.weights.T @ dy, np.outer(dy, x), dy.copy()
    return dy @ params.weights, dy.T @ x, dy.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting the max."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_loss(y: np.ndarray, y_hat: np.ndarray) -> float | np.ndarray:
    """``-(1/|A|) * sum_i y_i log(y_hat_i)`` with the class-count normalisation kept.

    Probabilities are clamped at 1e-12 before the log. A batch ``(B, K)`` returns
    one loss per row.
    """
    y = np.asarray(y, dtype=np.float64)
    p = np.maximum(np.asarray(y_hat, dtype=np.float64), PROB_FLOOR)
    k = y.shape[-1]
    out = -(y * np.log(p)).sum(axis=-1) / k
    return float(out) if out.ndim == 0 else out


def cross_entropy_grad_logits(y: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """Gradient of :func:`cross_entropy_loss` of ``softmax(z)`` w.r.t. ``z``.

    Exact for one-hot ``y`` as long as the clamp is inactive.
    """
    return (probs - y) / y.shape[-1]


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (num_classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, g in grads.items():
        if name not in params:
            raise UsageError(f"gradient for unknown parameter block {name!r}")
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, g in grads.items():
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(g)
            state.second_moment[name] = np.zeros_like(g)
        v = state.second_moment[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params[name] -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
