"""Numerical kernels for a small 1-D CNN, forward and backward.

Feature maps are numpy arrays shaped ``(batch, channels, length)``.  The
convolution, pooling and normalization kernels also accept a single
``(channels, length)`` map and return the same rank they were given.
Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError, ShapeError

Array = np.ndarray

LOSS_CLAMP = 1e-12


def _batched(x: Array) -> Tuple[Array, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (channels, length) or (batch, channels, length), got {x.shape}")
    return x, False


def same_padding(kernel_length: int) -> Tuple[int, int]:
    """Left/right zero padding that keeps a stride-1 convolution length-preserving.

    Even kernels put the extra zero on the right.
    """
    return (kernel_length - 1) // 2, kernel_length // 2


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _im2col(x: Array, kernel_length: int) -> Array:
    n, c, length = x.shape
    left, right = same_padding(kernel_length)
    xp = np.pad(x, ((0, 0), (0, 0), (left, right)))
    win = sliding_window_view(xp, kernel_length, axis=2)  # (n, c, length, k)
    return win.transpose(0, 2, 1, 3).reshape(n, length, c * kernel_length)


def conv1d_forward(x: Array, kernels: Array, biases: Optional[Array]) -> Array:
    """Stride-1 'same' convolution (cross-correlation, as in every DL framework).

    ``kernels`` is ``(filters, in_channels, kernel_length)``; ``biases`` may be
    None for a bias-free layer.
    """
    xb, squeeze = _batched(x)
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (filters, channels, length), got {kernels.shape}")
    f, c, k = kernels.shape
    if xb.shape[1] != c:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernels expect {c}")
    if xb.shape[2] == 0:
        raise ShapeError("zero-length input")
    cols = _im2col(xb, k)
    out = cols @ kernels.reshape(f, c * k).T  # (n, length, f)
    out = out.transpose(0, 2, 1)
    if biases is not None:
        out = out + np.asarray(biases, dtype=np.float64)[None, :, None]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv1d_backward(
    upstream: Array, cached_input: Array, kernels: Array
) -> Tuple[Array, Array, Array]:
    """Gradients of a same-padded convolution w.r.t. input, kernels and biases."""
    gb, squeeze = _batched(upstream)
    xb, _ = _batched(cached_input)
    kernels = np.asarray(kernels, dtype=np.float64)
    f, c, k = kernels.shape
    n, _, length = xb.shape
    if gb.shape != (n, f, length) or xb.shape[1] != c:
        raise ShapeError(
            f"upstream {gb.shape} inconsistent with input {xb.shape} and kernels {kernels.shape}"
        )
    cols = _im2col(xb, k).reshape(n * length, c * k)
    g2 = gb.transpose(0, 2, 1).reshape(n * length, f)
    kernel_grads = (g2.T @ cols).reshape(f, c, k)
    bias_grads = gb.sum(axis=(0, 2))
    dcols = (g2 @ kernels.reshape(f, c * k)).reshape(n, length, c, k)
    left, right = same_padding(k)
    dxp = np.zeros((n, c, length + left + right))
    for j in range(k):
        dxp[:, :, j:j + length] += dcols[:, :, :, j].transpose(0, 2, 1)
    dx = dxp[:, :, left:left + length]
    dx = np.ascontiguousarray(dx)
    return (dx[0] if squeeze else dx), kernel_grads, bias_grads


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def maxpool1d(x: Array, pool_size: int) -> Tuple[Array, Array]:
    """Non-overlapping max pooling; a trailing partial window is dropped.

    Returns the pooled map and the within-window argmax (first maximum wins).
    """
    if pool_size < 1:
        raise ParameterError(f"pool_size must be >= 1, got {pool_size}")
    xb, squeeze = _batched(x)
    n, c, length = xb.shape
    out_len = length // pool_size
    win = xb[:, :, :out_len * pool_size].reshape(n, c, out_len, pool_size)
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[..., None], axis=3)[..., 0]
    if squeeze:
        return out[0], idx[0]
    return out, idx


def maxpool1d_backward(upstream: Array, argmax: Array, pool_size: int, input_length: int) -> Array:
    gb, squeeze = _batched(upstream)
    idx = argmax[None] if squeeze else argmax
    n, c, out_len = gb.shape
    win = np.zeros((n, c, out_len, pool_size))
    np.put_along_axis(win, idx[..., None], gb[..., None], axis=3)
    dx = np.zeros((n, c, input_length))
    dx[:, :, :out_len * pool_size] = win.reshape(n, c, out_len * pool_size)
    return dx[0] if squeeze else dx


# --------------------------------------------------------------------------
# dense
# --------------------------------------------------------------------------

def dense_forward(x: Array, weights: Array, biases: Optional[Array]) -> Array:
    """``out[j] = bias[j] + sum_i weights[j, i] * x[i]`` for a vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"input dimension {x.shape[-1]} != weight in-dimension {weights.shape[1]}")
    out = x @ weights.T
    if biases is not None:
        out = out + biases
    return out


def dense_backward(upstream: Array, cached_input: Array, weights: Array) -> Tuple[Array, Array, Array]:
    g = np.asarray(upstream, dtype=np.float64)
    x = np.asarray(cached_input, dtype=np.float64)
    if g.shape[-1] != weights.shape[0] or x.shape[-1] != weights.shape[1]:
        raise ShapeError("dense backward shape mismatch")
    g2 = np.atleast_2d(g)
    x2 = np.atleast_2d(x)
    return g @ weights, g2.T @ x2, g2.sum(axis=0)


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Array) -> Array:
    return np.maximum(x, 0.0)


def relu_backward(upstream: Array, cached_input: Array) -> Array:
    return upstream * (cached_input > 0)


def softmax(v: Array) -> Array:
    v = np.asarray(v, dtype=np.float64)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax_backward(upstream: Array, probs: Array) -> Array:
    """Vector-Jacobian product of softmax along the last axis."""
    dot = (upstream * probs).sum(axis=-1, keepdims=True)
    return probs * (upstream - dot)


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------

@dataclass
class BatchNormCache:
    x_hat: Array
    inv_std: Array
    gamma: Array


def batchnorm_forward(
    x: Array,
    gamma: Array,
    beta: Array,
    moving_mean: Array,
    moving_var: Array,
    *,
    epsilon: float = 1e-3,
    momentum: float = 0.99,
    training: bool = False,
) -> Tuple[Array, Optional[BatchNormCache]]:
    """Normalize every (channel, position) feature across the batch axis.

    In training mode the moving statistics are updated in place.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != gamma.shape:
        raise ShapeError(f"batch feature shape {x.shape[1:]} != gamma shape {gamma.shape}")
    if not training:
        return gamma * (x - moving_mean) / np.sqrt(moving_var + epsilon) + beta, None
    if x.shape[0] < 2:
        raise ParameterError("batch normalization in training mode needs a batch of at least 2")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + epsilon)
    x_hat = (x - mean) * inv_std
    moving_mean *= momentum
    moving_mean += (1.0 - momentum) * mean
    moving_var *= momentum
    moving_var += (1.0 - momentum) * var
    return gamma * x_hat + beta, BatchNormCache(x_hat, inv_std, gamma)


def batchnorm_backward(upstream: Array, cache: BatchNormCache) -> Tuple[Array, Array, Array]:
    g = upstream
    n = g.shape[0]
    dgamma = (g * cache.x_hat).sum(axis=0)
    dbeta = g.sum(axis=0)
    dxhat = g * cache.gamma
    dx = cache.inv_std / n * (n * dxhat - dxhat.sum(axis=0) - cache.x_hat * (dxhat * cache.x_hat).sum(axis=0))
    return dx, dgamma, dbeta


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------

def dropout(
    x: Array, rate: float, rng: Optional[np.random.Generator] = None, training: bool = False
) -> Tuple[Array, Optional[Array]]:
    """Inverted dropout.  Returns the output and the scaled keep-mask (None in inference)."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, None
    if rng is None:
        raise ParameterError("training-mode dropout needs an explicit generator")
    keep = (rng.random(np.shape(x)) >= rate) / (1.0 - rate)
    return x * keep, keep


def dropout_backward(upstream: Array, mask: Optional[Array]) -> Array:
    return upstream if mask is None else upstream * mask


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def bce_loss(
    probabilities: Array,
    labels,
    l2_lambda: float = 0.0,
    output_weights: Optional[Array] = None,
) -> Tuple[float, Array]:
    """Cross-entropy of softmax outputs plus an L2 penalty on the output weights.

    Accepts a single probability vector with an integer label, or a batch
    ``(n, classes)`` with a label array; batch losses are means.  The returned
    gradient is taken with respect to the pre-softmax logits.  The penalty's own
    weight gradient is :func:`l2_grad`.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    single = p.ndim == 1
    p2 = p[None] if single else p
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = p2.shape[0]
    picked = np.maximum(p2[np.arange(n), y], LOSS_CLAMP)
    loss = float(-np.log(picked).mean())
    if l2_lambda and output_weights is not None:
        loss += l2_lambda * float(np.sum(np.square(output_weights)))
    onehot = np.zeros_like(p2)
    onehot[np.arange(n), y] = 1.0
    grad = (p2 - onehot) / n
    return loss, (grad[0] if single else grad)


def l2_grad(weights: Array, l2_lambda: float) -> Array:
    return 2.0 * l2_lambda * weights


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: Dict[str, Array] = field(default_factory=dict)
    v: Dict[str, Array] = field(default_factory=dict)


def adam_step(params: Dict[str, Array], grads: Dict[str, Array], state: AdamState) -> Tuple[Dict[str, Array], AdamState]:
    """One bias-corrected ADAM update, applied in place to every array in ``grads``."""
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def relative_error(analytic: Array, numeric: Array) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``; 0 when both vanish."""
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b)) / scale


def numerical_gradient(f: Callable[[], float], x: Array, step: float = 1e-4) -> Array:
    """Central differences of the scalar ``f()`` w.r.t. the array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        hi = f()
        flat[i] = old - step
        lo = f()
        flat[i] = old
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def gradient_check(network, x: Array, labels: Array, *, step: float = 1e-4,
                   l2_lambda: float = 0.0, seed: int = 0) -> float:
    """Largest relative error between backprop and central differences over all trainable arrays.

    Batch normalization runs in training mode and dropout reuses one mask
    (drawn from ``seed``) for every evaluation so the loss is a smooth
    deterministic function of the parameters.  Moving statistics are restored
    afterwards.
    """
    saved = {k: v.copy() for k, v in network.params.items()}

    def loss() -> float:
        value, _ = network.loss_and_grads(x, labels, l2_lambda=l2_lambda,
                                          rng=np.random.default_rng(seed), need_grads=False)
        return value

    _, grads = network.loss_and_grads(x, labels, l2_lambda=l2_lambda, rng=np.random.default_rng(seed))
    worst = 0.0
    for name in sorted(grads):
        numeric = numerical_gradient(loss, network.params[name], step)
        err = relative_error(grads[name], numeric)
        if math.isnan(err):
            return math.inf
        worst = max(worst, err)
    for k, v in saved.items():
        network.params[k][...] = v
    return worst
