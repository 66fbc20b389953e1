"""Gradual magnitude pruning and binarized-weight training.

Both act on a :class:`~somnnet.model.Network`'s parameter dict and leave the
layer stack untouched.  Prunable arrays are conv kernels and dense weights;
biases and normalization parameters are never masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError, TrainingError
from .model import Network, TrainingHook

MAX_SPARSITY = 0.95

LatentWeights = Dict[str, np.ndarray]


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5 + 1e-9))


def prune_count(sparsity: float, prunable: int) -> int:
    """Number of weights zeroed at ``sparsity``."""
    return round_half_up(sparsity * prunable)


def _check_sparsity(sparsity: float) -> None:
    if not 0.0 <= sparsity <= MAX_SPARSITY:
        raise ParameterError(f"sparsity must be in [0, {MAX_SPARSITY}], got {sparsity}")


@dataclass
class SparsityMask:
    masks: Dict[str, np.ndarray]  # True = kept
    target_sparsity: float
    begin_step: int = 0
    end_step: int = 0
    current_step: int = 0

    @property
    def prunable_count(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def zero_count(self) -> int:
        return int(sum(m.size - np.count_nonzero(m) for m in self.masks.values()))


def compute_prune_mask(params: Dict[str, np.ndarray], sparsity: float,
                       names: Optional[Sequence[str]] = None) -> SparsityMask:
    """Global magnitude mask zeroing the ``round(sparsity * N)`` smallest weights.

    ``names`` defaults to every ``*.kernel``/``*.weight`` array in insertion
    (layer) order.  Equal magnitudes are masked in (layer, flat index) order.
    """
    _check_sparsity(sparsity)
    if isinstance(params, Network):
        names = names or params.prunable_names
        params = params.params
    if names is None:
        names = [n for n in params if n.endswith(".kernel") or n.endswith(".weight")]
    flat = np.concatenate([np.abs(params[n]).ravel() for n in names])
    k = prune_count(sparsity, flat.size)
    keep = np.ones(flat.size, dtype=bool)
    keep[np.argsort(flat, kind="stable")[:k]] = False
    masks, offset = {}, 0
    for n in names:
        size = params[n].size
        masks[n] = keep[offset:offset + size].reshape(params[n].shape)
        offset += size
    return SparsityMask(masks, sparsity)


def pruning_schedule(begin_step: int, end_step: int, final_sparsity: float, current_step: int) -> float:
    """Cubic ramp from 0 at ``begin_step`` to ``final_sparsity`` at ``end_step``."""
    if begin_step >= end_step:
        raise ParameterError(f"pruning interval must satisfy begin < end, got [{begin_step}, {end_step}]")
    _check_sparsity(final_sparsity)
    if current_step <= begin_step:
        return 0.0
    if current_step >= end_step:
        return final_sparsity
    t = (current_step - begin_step) / (end_step - begin_step)
    return final_sparsity * (1.0 - (1.0 - t) ** 3)


def apply_mask_in_training(params: Dict[str, np.ndarray], mask: SparsityMask,
                           grads: Optional[Dict[str, np.ndarray]] = None):
    """Zero masked weights (in place) and, if given, their gradients."""
    for name, m in mask.masks.items():
        if params[name].shape != m.shape:
            raise ShapeError(f"mask for {name!r} has shape {m.shape}, parameter {params[name].shape}")
        params[name] *= m
        if grads is not None and name in grads:
            grads[name] = grads[name] * m
    return params, grads


class PruningHook(TrainingHook):
    """Recomputes the global magnitude mask along the cubic schedule during ``fit``.

    The mask is frozen once ``end_step`` is reached; only epochs finishing after
    that are eligible as the kept snapshot.
    """

    def __init__(self, final_sparsity: float, begin_step: int, end_step: int, frequency: int = 1):
        _check_sparsity(final_sparsity)
        if begin_step >= end_step:
            raise ParameterError("pruning interval must satisfy begin < end")
        self.final_sparsity = final_sparsity
        self.begin_step = begin_step
        self.end_step = end_step
        self.frequency = max(1, frequency)
        self.mask: Optional[SparsityMask] = None
        self._frozen = False

    def before_step(self, network: Network, step: int) -> None:
        if self._frozen:
            return
        due = step >= self.end_step or (step >= self.begin_step and (step - self.begin_step) % self.frequency == 0)
        if due:
            s = pruning_schedule(self.begin_step, self.end_step, self.final_sparsity, step)
            self.mask = compute_prune_mask(network.params, s, network.prunable_names)
            self.mask.begin_step, self.mask.end_step, self.mask.current_step = self.begin_step, self.end_step, step
            self._frozen = step >= self.end_step
        if self.mask is not None:
            apply_mask_in_training(network.params, self.mask)

    def after_grads(self, network, grads, step):
        if self.mask is not None:
            apply_mask_in_training(network.params, self.mask, grads)

    def after_step(self, network, step):
        # ADAM momentum would otherwise revive masked weights
        if self.mask is not None:
            apply_mask_in_training(network.params, self.mask)

    def snapshot_ready(self, step: int) -> bool:
        return self._frozen

    def state(self):
        if self.mask is None:
            return {}
        return {f"mask/{n}": m.astype(np.float64) for n, m in self.mask.masks.items()}

    def load_state(self, arrays):
        masks = {k[len("mask/"):]: v != 0 for k, v in arrays.items() if k.startswith("mask/")}
        if masks:
            self.mask = SparsityMask(masks, self.final_sparsity, self.begin_step, self.end_step, self.end_step)
            self._frozen = True


# ----------------------------------------------------------------------
# binarization
# ----------------------------------------------------------------------

def binary_sign(x: np.ndarray) -> np.ndarray:
    """sign() with sign(0) = +1."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


def binarize_weights(network: Network, layers: Optional[Iterable[str]] = None):
    """Binarized copy of ``network`` plus the latent real weights it trains through.

    Conv kernels and dense weights of the selected layers (all by default)
    become ±1 and lose their biases; normalization parameters stay real.
    Latent weights start as the current weights clipped to [-1, 1].
    """
    layers = set(network.weight_layers if layers is None else layers)
    params: Dict[str, np.ndarray] = {}
    latent: LatentWeights = {}
    for name, arr in network.params.items():
        layer, part = name.split(".", 1)
        if layer in layers and part == "bias":
            continue
        if layer in layers and part in ("kernel", "weight"):
            latent[name] = np.clip(arr, -1.0, 1.0).astype(np.float64)
            params[name] = binary_sign(latent[name])
        else:
            params[name] = arr.copy()
    binary = Network(network.config, params, binarized_layers=layers | set(network.binarized_layers))
    return binary, latent


class BinarizeHook(TrainingHook):
    """Straight-through training: forward/backward on sign(latent), ADAM on latent."""

    def __init__(self, latent: LatentWeights):
        self.latent = latent

    def before_step(self, network, step):
        for name, w in self.latent.items():
            network.params[name] = binary_sign(w)

    def optimizer_targets(self, network):
        return self.latent

    def after_step(self, network, step):
        for name, w in self.latent.items():
            np.clip(w, -1.0, 1.0, out=w)
            network.params[name] = binary_sign(w)

    def state(self):
        return {f"latent/{n}": w for n, w in self.latent.items()}

    def load_state(self, arrays):
        for k, v in arrays.items():
            if k.startswith("latent/"):
                self.latent[k[len("latent/"):]] = np.asarray(v, dtype=np.float64).copy()


def binary_train_step(network: Network, latent: LatentWeights, batch, state: T.AdamState,
                      *, l2_lambda: float = 0.0, rng: Optional[np.random.Generator] = None) -> float:
    """One straight-through step on ``batch = (windows, labels)``; returns the loss."""
    hook = BinarizeHook(latent)
    hook.before_step(network, state.step_count)
    x, y = batch
    loss, grads = network.loss_and_grads(x, y, l2_lambda=l2_lambda, rng=rng or np.random.default_rng(0))
    if not math.isfinite(loss):
        raise TrainingError("non-finite loss during binarized training")
    targets = dict(network.params)
    targets.update(latent)
    T.adam_step(targets, grads, state)
    hook.after_step(network, state.step_count)
    return loss
