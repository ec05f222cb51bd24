"""Minimal numpy neural-network core.

Every op comes as a forward function plus an explicit backward function;
the network module chains them by hand, so it can be assembled
and trained without a general autodiff engine.

Activations use a batch-first layout ``(N, L, C)``: N samples, spectral
length L, C channels.  Tensors are plain ``numpy.ndarray`` objects.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NLL_EPS = 1e-12


def assert_finite(x: np.ndarray, what: str = "tensor") -> None:
    """Debug check: raise if ``x`` holds NaN or Inf."""
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


@dataclass(eq=False)
class Param:
    """A trainable array with its gradient and ADAM moment buffers."""

    value: np.ndarray
    name: str = ""
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0


# ---------------------------------------------------------------- size laws


def conv_out_len(length: int, k: int, stride: int = 1, padding: int = 0) -> int:
    return (length - k + 2 * padding) // stride + 1


def pool_out_len(length: int, k: int, stride: int) -> int:
    return (length - k) // stride + 1


# ---------------------------------------------------------------- conv1d


def _windows(x, k, stride, out_len):
    # (N, L, C) -> (N, out_len, C, k) view
    return sliding_window_view(x, k, axis=1)[:, ::stride][:, :out_len]


def _im2col(x, k, stride, padding, out_len):
    n, _, c_in = x.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (0, 0))) if padding else x
    return _windows(xp, k, stride, out_len).reshape(n * out_len, c_in * k)


def conv1d(x, kernels, bias, stride=1, padding=0, return_cols=False):
    """Cross-correlate ``x`` (N, L, C_in) with ``kernels`` (C_out, C_in, k).

    Out-of-range positions read as zero.  Returns (N, L', C_out) with
    ``L' = (L - k + 2*padding) // stride + 1``.  With ``return_cols`` the
    unfolded input is returned too so the backward pass can reuse it.
    """
    n, length, c_in = x.shape
    c_out, c_in_k, k = kernels.shape
    if c_in != c_in_k:
        raise ValueError(f"conv1d: input has {c_in} channels, kernels expect {c_in_k}")
    out_len = conv_out_len(length, k, stride, padding)
    if out_len < 1:
        raise ValueError(
            f"conv1d: input length {length} too short for k={k}, "
            f"stride={stride}, padding={padding}"
        )
    cols = _im2col(x, k, stride, padding, out_len)
    y = (cols @ kernels.reshape(c_out, c_in * k).T + bias).reshape(n, out_len, c_out)
    return (y, cols) if return_cols else y


def conv1d_backward(dy, x, kernels, stride=1, padding=0, cols=None, need_dx=True):
    """Gradients of :func:`conv1d` w.r.t. input, kernels and bias.

    ``dx`` is ``None`` when ``need_dx`` is false.
    """
    n, length, c_in = x.shape
    c_out, _, k = kernels.shape
    out_len = dy.shape[1]
    if cols is None:
        cols = _im2col(x, k, stride, padding, out_len)
    dy2 = dy.reshape(n * out_len, c_out)
    dbias = dy2.sum(axis=0)
    dkernels = (dy2.T @ cols).reshape(c_out, c_in, k)
    if not need_dx:
        return None, dkernels, dbias
    dcols = (dy2 @ kernels.reshape(c_out, c_in * k)).reshape(n, out_len, c_in, k)
    dxp = np.zeros((n, length + 2 * padding, c_in), dtype=dy.dtype)
    span = stride * (out_len - 1) + 1
    for j in range(k):
        dxp[:, j:j + span:stride, :] += dcols[:, :, :, j]
    return dxp[:, padding:padding + length, :], dkernels, dbias


# ---------------------------------------------------------------- pooling


def maxpool1d(x, k=2, stride=2):
    """Window maxima over the length axis; returns ``(y, argmax)``.

    ``argmax`` holds the within-window offset of each maximum; ties go to
    the lowest offset.
    """
    length = x.shape[1]
    if length < k:
        raise ValueError(f"maxpool1d: input length {length} shorter than window {k}")
    out_len = pool_out_len(length, k, stride)
    if k == stride:
        n, _, c = x.shape
        win = x[:, :out_len * k].reshape(n, out_len, k, c)
        if k == 2:
            lo, hi = win[:, :, 0, :], win[:, :, 1, :]
            idx = hi > lo
            return np.where(idx, hi, lo), idx.astype(np.intp)
        idx = win.argmax(axis=2)
        y = np.take_along_axis(win, idx[:, :, None, :], axis=2)[:, :, 0, :]
        return y, idx
    win = _windows(x, k, stride, out_len)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return y, idx


def maxpool1d_backward(dy, idx, in_len, k=2, stride=2):
    n, out_len, c = dy.shape
    dx = np.zeros((n, in_len, c), dtype=dy.dtype)
    span = stride * (out_len - 1) + 1
    for j in range(k):
        dx[:, j:j + span:stride, :] += dy * (idx == j)
    return dx


def avgpool1d_global(x):
    """Mean over the length axis: (N, L, C) -> (N, C)."""
    return x.mean(axis=1)


def avgpool1d_global_backward(dy, in_len):
    return np.repeat(dy[:, None, :] / in_len, in_len, axis=1)


# ---------------------------------------------------------------- pointwise


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return dy * (x > 0)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------- batch norm


@dataclass(eq=False)
class BatchNormState:
    gamma: Param
    beta: Param
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    epsilon: float = 1e-5

    @classmethod
    def create(cls, channels, dtype=np.float32, name="bn", momentum=0.1, epsilon=1e-5):
        if epsilon <= 0:
            raise ValueError("batch-norm epsilon must be positive")
        return cls(
            gamma=Param(np.ones(channels, dtype=dtype), f"{name}.gamma"),
            beta=Param(np.zeros(channels, dtype=dtype), f"{name}.beta"),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            momentum=momentum,
            epsilon=epsilon,
        )


def batchnorm1d(x, state: BatchNormState, train: bool):
    """Per-channel normalisation over the batch and length axes.

    Returns ``(y, cache)``; ``cache`` is ``None`` in inference mode.
    """
    gamma, beta = state.gamma.value, state.beta.value
    if not train:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        y = (x - state.running_mean) * inv_std * gamma + beta
        return y.astype(x.dtype, copy=False), None
    n = x.shape[0]
    if n < 2:
        raise ValueError("batchnorm1d: train mode needs a batch of at least 2 samples")
    count = x.shape[0] * x.shape[1]
    mean = x.mean(axis=(0, 1), dtype=np.float64)
    centred = x - mean.astype(x.dtype)
    var = np.einsum("nlc,nlc->c", centred, centred, dtype=np.float64) / count
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = centred * inv_std.astype(x.dtype)
    y = xhat * gamma + beta
    mom = state.momentum
    # running variance uses the unbiased estimate
    unbiased = var * count / max(count - 1, 1)
    state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
    state.running_var[...] = (1 - mom) * state.running_var + mom * unbiased
    return y, (xhat, inv_std.astype(x.dtype))


def batchnorm1d_backward(dy, cache, state: BatchNormState):
    """Returns ``(dx, dgamma, dbeta)`` for a train-mode forward."""
    xhat, inv_std = cache
    count = dy.shape[0] * dy.shape[1]
    dbeta = dy.sum(axis=(0, 1))
    dgamma = (dy * xhat).sum(axis=(0, 1))
    dxhat = dy * state.gamma.value
    dx = (inv_std / count) * (
        count * dxhat - dxhat.sum(axis=(0, 1)) - xhat * (dxhat * xhat).sum(axis=(0, 1))
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- linear


def linear(x, weight, bias=None):
    y = x @ weight
    if bias is not None:
        y = y + bias
    return y


def linear_backward(dy, x, weight):
    """Returns ``(dx, dweight, dbias)``."""
    return dy @ weight.T, x.T @ dy, dy.sum(axis=0)


# ---------------------------------------------------------------- loss


def nll_loss(probs, labels, eps=NLL_EPS):
    """Mean of ``-ln(p[label] + eps)`` over the batch."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    n_classes = probs.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_classes:
        raise ValueError(f"label out of range for {n_classes} classes")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.mean(np.log(picked.astype(np.float64) + eps)))


def nll_loss_backward(probs, labels, eps=NLL_EPS):
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    n = len(labels)
    dp = np.zeros_like(probs)
    rows = np.arange(n)
    dp[rows, labels] = -1.0 / ((probs[rows, labels] + eps) * n)
    return dp


# ---------------------------------------------------------------- optimiser


def adam_step(params, t, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected ADAM update (step number ``t`` >= 1); zeroes grads."""
    if t < 1:
        raise ValueError("adam step count starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = p.grad
        p.m[...] = beta1 * p.m + (1 - beta1) * g
        p.v[...] = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m.astype(np.float64) / c1
        v_hat = p.v.astype(np.float64) / c2
        p.value[...] = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)
        p.zero_grad()


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ValueError("a Param was registered twice with the optimizer")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0

    def step(self):
        self.t += 1
        adam_step(self.params, self.t, self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------- init


def uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
