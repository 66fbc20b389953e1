"""Finite-difference checks for every layer kind and a small two-conv network."""

from __future__ import annotations

from typing import Dict, Iterable

import numpy as np

from . import tensor as T
from .model import LayerSpec, NetworkConfig, build_network

STEP = 1e-4


def toy_config(input_length: int = 12) -> NetworkConfig:
    """Two 3-tap conv layers with 2 filters each on a length-12 input."""
    return NetworkConfig(
        layers=(
            LayerSpec("input-norm"),
            LayerSpec("conv1d", kernel_length=3, filter_count=2),
            LayerSpec("relu"),
            LayerSpec("conv1d", kernel_length=3, filter_count=2),
            LayerSpec("relu"),
            LayerSpec("maxpool", pool_size=2),
            LayerSpec("flatten"),
            LayerSpec("dropout", dropout_rate=0.25),
            LayerSpec("dense", filter_count=2),
            LayerSpec("softmax"),
        ),
        input_length=input_length,
    )


def _check(f, arrays: Dict[str, np.ndarray], analytic: Dict[str, np.ndarray]) -> float:
    return max(T.relative_error(analytic[k], T.numerical_gradient(f, arrays[k], STEP)) for k in analytic)


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def check_conv(rng) -> float:
    k = int(rng.integers(1, 6))
    x = rng.normal(size=(2, 2, 7))
    w = rng.normal(size=(3, 2, k))
    b = rng.normal(size=3)
    r = rng.normal(size=(2, 3, 7))
    f = lambda: float(np.sum(T.conv1d_forward(x, w, b) * r))
    dx, dw, db = T.conv1d_backward(r, x, w)
    return _check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def check_maxpool(rng) -> float:
    pool = int(rng.integers(1, 4))
    x = rng.normal(size=(2, 3, 9))
    out, idx = T.maxpool1d(x, pool)
    r = rng.normal(size=out.shape)
    f = lambda: float(np.sum(T.maxpool1d(x, pool)[0] * r))
    return _check(f, {"x": x}, {"x": T.maxpool1d_backward(r, idx, pool, x.shape[-1])})


def check_dense(rng) -> float:
    x = rng.normal(size=(3, 5))
    w = rng.normal(size=(4, 5))
    b = rng.normal(size=4)
    r = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(T.dense_forward(x, w, b) * r))
    dx, dw, db = T.dense_backward(r, x, w)
    return _check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def check_relu(rng) -> float:
    x = _away_from_zero(rng, (3, 6))
    r = rng.normal(size=x.shape)
    f = lambda: float(np.sum(T.relu(x) * r))
    return _check(f, {"x": x}, {"x": T.relu_backward(r, x)})


def check_softmax(rng) -> float:
    v = rng.normal(size=(3, 4))
    r = rng.normal(size=(3, 4))
    f = lambda: float(np.sum(T.softmax(v) * r))
    return _check(f, {"v": v}, {"v": T.softmax_backward(r, T.softmax(v))})


def check_batchnorm(rng) -> float:
    x = rng.normal(size=(4, 2, 5))
    gamma = rng.normal(size=(2, 5))
    beta = rng.normal(size=(2, 5))
    r = rng.normal(size=x.shape)

    def f():
        out, _ = T.batchnorm_forward(x, gamma, beta, np.zeros((2, 5)), np.ones((2, 5)), training=True)
        return float(np.sum(out * r))

    _, cache = T.batchnorm_forward(x, gamma, beta, np.zeros((2, 5)), np.ones((2, 5)), training=True)
    dx, dg, db = T.batchnorm_backward(r, cache)
    return _check(f, {"x": x, "gamma": gamma, "beta": beta}, {"x": dx, "gamma": dg, "beta": db})


def check_dropout(rng) -> float:
    x = rng.normal(size=(3, 8))
    r = rng.normal(size=x.shape)
    seed = int(rng.integers(1 << 30))
    _, mask = T.dropout(x, 0.25, np.random.default_rng(seed), training=True)
    f = lambda: float(np.sum(T.dropout(x, 0.25, np.random.default_rng(seed), training=True)[0] * r))
    return _check(f, {"x": x}, {"x": T.dropout_backward(r, mask)})


def check_loss(rng) -> float:
    z = rng.normal(size=(4, 2))
    y = rng.integers(0, 2, size=4)
    f = lambda: T.bce_loss(T.softmax(z), y)[0]
    return _check(f, {"z": z}, {"z": T.bce_loss(T.softmax(z), y)[1]})


LAYER_CHECKS = {
    "conv1d": check_conv,
    "maxpool": check_maxpool,
    "dense": check_dense,
    "relu": check_relu,
    "softmax": check_softmax,
    "input-norm": check_batchnorm,
    "dropout": check_dropout,
    "loss": check_loss,
}


def check_toy_network(seed: int) -> float:
    rng = np.random.default_rng(seed)
    net = build_network(toy_config(), seed)
    # zero biases put dead-input positions exactly on the ReLU kink; perturb
    # them (and the normalization affine) so the loss is smooth at the probe point
    for name in ("norm1.gamma", "norm1.beta", "conv1.bias", "conv2.bias", "dense1.bias"):
        net.params[name] += rng.normal(scale=0.1, size=net.params[name].shape)
    x = rng.normal(size=(4, 1, 12))
    y = np.array([0, 1, 0, 1])
    return T.gradient_check(net, x, y, step=STEP, l2_lambda=1e-3, seed=seed)


def run_suite(seeds: Iterable[int]) -> Dict[str, float]:
    """Worst relative error per layer kind, plus ``"network"`` for the toy net."""
    worst: Dict[str, float] = {}
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for kind, check in LAYER_CHECKS.items():
            worst[kind] = max(worst.get(kind, 0.0), check(rng))
        worst["network"] = max(worst.get("network", 0.0), check_toy_network(seed))
    return worst
