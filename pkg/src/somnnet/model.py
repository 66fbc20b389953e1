"""SomnNET: layer stack description, parameter store, inference and training loop."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .errors import ConfigError, ParameterError, ShapeError, TrainingError

log = logging.getLogger(__name__)

LAYER_KINDS = ("input-norm", "conv1d", "relu", "maxpool", "flatten", "dropout", "dense", "softmax")

NON_APNEIC = 0
APNEIC = 1

BN_EPSILON = 1e-3
BN_MOMENTUM = 0.99
L2_LAMBDA = 1e-3


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel_length: Optional[int] = None
    filter_count: Optional[int] = None
    pool_size: Optional[int] = None
    dropout_rate: Optional[float] = None
    padding: Optional[str] = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv1d":
            if not self.kernel_length or self.kernel_length < 1 or not self.filter_count or self.filter_count < 1:
                raise ConfigError("conv1d needs a positive kernel_length and filter_count")
            if self.padding not in (None, "same"):
                raise ConfigError("conv1d supports only same padding (stride 1)")
            object.__setattr__(self, "padding", "same")
        if self.kind == "dense" and (not self.filter_count or self.filter_count < 1):
            raise ConfigError("dense needs a positive filter_count")
        if self.kind == "maxpool" and (not self.pool_size or self.pool_size < 1):
            raise ConfigError("maxpool needs a positive pool_size")
        if self.kind == "dropout" and not (self.dropout_rate is not None and 0.0 <= self.dropout_rate < 1.0):
            raise ConfigError("dropout needs a rate in [0, 1)")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class NetworkConfig:
    layers: Tuple[LayerSpec, ...]
    input_length: int = 88
    input_channels: int = 1
    class_count: int = 2

    def to_dict(self) -> dict:
        return {
            "input_length": self.input_length,
            "input_channels": self.input_channels,
            "class_count": self.class_count,
            "layers": [spec.to_dict() for spec in self.layers],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkConfig":
        return cls(
            layers=tuple(LayerSpec(**spec) for spec in data["layers"]),
            input_length=int(data["input_length"]),
            input_channels=int(data["input_channels"]),
            class_count=int(data["class_count"]),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()

    def plan(self) -> List["LayerPlan"]:
        return compile_plan(self)


@dataclass
class LayerPlan:
    spec: LayerSpec
    name: str
    in_shape: Tuple[int, ...]
    out_shape: Tuple[int, ...]

    @property
    def kind(self) -> str:
        return self.spec.kind


def compile_plan(config: NetworkConfig) -> List[LayerPlan]:
    """Resolve layer names and per-layer shapes, checking the stack is consistent."""
    shape: Tuple[int, ...] = (config.input_channels, config.input_length)
    counters: Dict[str, int] = {}
    short = {"input-norm": "norm", "conv1d": "conv", "dense": "dense"}
    plan = []
    for spec in config.layers:
        name = spec.kind
        if spec.kind in short:
            counters[spec.kind] = counters.get(spec.kind, 0) + 1
            name = f"{short[spec.kind]}{counters[spec.kind]}"
        if spec.kind == "conv1d":
            if len(shape) != 2:
                raise ConfigError("conv1d must come before flatten")
            out = (spec.filter_count, shape[1])
        elif spec.kind == "maxpool":
            if len(shape) != 2:
                raise ConfigError("maxpool must come before flatten")
            out = (shape[0], shape[1] // spec.pool_size)
            if out[1] == 0:
                raise ConfigError("maxpool reduces the sequence to zero length")
        elif spec.kind == "flatten":
            out = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise ConfigError("dense must follow flatten")
            out = (spec.filter_count,)
        elif spec.kind == "input-norm":
            if len(shape) != 2:
                raise ConfigError("input-norm operates on a feature map")
            out = shape
        else:
            out = shape
        plan.append(LayerPlan(spec, name, shape, out))
        shape = out
    if shape != (config.class_count,):
        raise ConfigError(f"network output shape {shape} != ({config.class_count},)")
    if not config.layers or config.layers[-1].kind != "softmax":
        raise ConfigError("the stack must end with softmax")
    return plan


def reference_config() -> NetworkConfig:
    """The reconstructed SomnNET stack for 11 s windows at 8 Hz."""
    return NetworkConfig(
        layers=(
            LayerSpec("input-norm"),
            LayerSpec("conv1d", kernel_length=25, filter_count=6),
            LayerSpec("relu"),
            LayerSpec("conv1d", kernel_length=10, filter_count=50),
            LayerSpec("relu"),
            LayerSpec("maxpool", pool_size=2),
            LayerSpec("conv1d", kernel_length=15, filter_count=30),
            LayerSpec("relu"),
            LayerSpec("maxpool", pool_size=2),
            LayerSpec("flatten"),
            LayerSpec("dropout", dropout_rate=0.25),
            LayerSpec("dense", filter_count=2),
            LayerSpec("softmax"),
        ),
        input_length=88,
        input_channels=1,
        class_count=2,
    )


@dataclass
class ForwardCache:
    entries: List[tuple] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


class Network:
    """A layer stack plus its named parameter arrays.

    ``params`` maps ``"<layer>.<array>"`` to float64 arrays.  Layers listed in
    ``binarized_layers`` carry ±1 weights and no bias entry.
    """

    def __init__(self, config: NetworkConfig, params: Dict[str, np.ndarray],
                 binarized_layers: Sequence[str] = ()):
        self.config = config
        self.plan = compile_plan(config)
        self.params = params
        self.binarized_layers = frozenset(binarized_layers)
        self.observer = None
        self._check_params()

    def _check_params(self):
        for name, shape in self.expected_shapes().items():
            if name not in self.params:
                raise ShapeError(f"missing parameter {name!r}")
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name!r} has shape {self.params[name].shape}, expected {shape}")

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        for layer in self.plan:
            if layer.kind == "input-norm":
                for part in ("gamma", "beta", "moving_mean", "moving_var"):
                    shapes[f"{layer.name}.{part}"] = layer.in_shape
            elif layer.kind == "conv1d":
                shapes[f"{layer.name}.kernel"] = (layer.spec.filter_count, layer.in_shape[0], layer.spec.kernel_length)
                if layer.name not in self.binarized_layers:
                    shapes[f"{layer.name}.bias"] = (layer.spec.filter_count,)
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weight"] = (layer.spec.filter_count, layer.in_shape[0])
                if layer.name not in self.binarized_layers:
                    shapes[f"{layer.name}.bias"] = (layer.spec.filter_count,)
        return shapes

    @property
    def weight_layers(self) -> List[str]:
        return [layer.name for layer in self.plan if layer.kind in ("conv1d", "dense")]

    @property
    def prunable_names(self) -> List[str]:
        """Conv kernels and dense weights, in layer order."""
        return [n for n in self.expected_shapes() if n.endswith(".kernel") or n.endswith(".weight")]

    @property
    def trainable_names(self) -> List[str]:
        return [n for n in self.expected_shapes() if not n.endswith(".moving_mean") and not n.endswith(".moving_var")]

    @property
    def output_layer(self) -> str:
        return [layer.name for layer in self.plan if layer.kind == "dense"][-1]

    def parameter_count(self, include_moving: bool = False) -> int:
        names = self.expected_shapes() if include_moving else self.trainable_names
        return int(sum(self.params[n].size for n in names))

    # ------------------------------------------------------------------
    def _as_batch(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        c, length = self.config.input_channels, self.config.input_length
        if x.ndim == 1:
            x = x[None, None, :]
        elif x.ndim == 2 and c == 1:
            x = x[:, None, :]
        if x.ndim != 3 or x.shape[1:] != (c, length):
            raise ShapeError(f"expected windows of shape ({c}, {length}), got {x.shape}")
        return x

    def forward(self, x, *, training: bool = False, rng: Optional[np.random.Generator] = None,
                observer=None) -> Tuple[np.ndarray, ForwardCache]:
        """Run the stack; returns class probabilities ``(batch, classes)`` and the cache.

        ``observer(layer_name, weights)`` (or ``self.observer``) is called with
        the exact weight array each conv/dense layer multiplies by.
        """
        observer = observer or self.observer
        h = self._as_batch(x)
        p = self.params
        cache = ForwardCache()
        for layer in self.plan:
            name, kind = layer.name, layer.kind
            if kind == "input-norm":
                out, bn = T.batchnorm_forward(
                    h, p[f"{name}.gamma"], p[f"{name}.beta"], p[f"{name}.moving_mean"],
                    p[f"{name}.moving_var"], epsilon=BN_EPSILON, momentum=BN_MOMENTUM, training=training)
                cache.entries.append((bn,))
            elif kind == "conv1d":
                w = p[f"{name}.kernel"]
                if observer is not None:
                    observer(name, w)
                out = T.conv1d_forward(h, w, p.get(f"{name}.bias"))
                cache.entries.append((h,))
            elif kind == "relu":
                out = T.relu(h)
                cache.entries.append((h,))
            elif kind == "maxpool":
                out, idx = T.maxpool1d(h, layer.spec.pool_size)
                cache.entries.append((idx, h.shape[-1]))
            elif kind == "flatten":
                out = h.reshape(h.shape[0], -1)
                cache.entries.append((h.shape,))
            elif kind == "dropout":
                out, mask = T.dropout(h, layer.spec.dropout_rate, rng, training)
                cache.entries.append((mask,))
            elif kind == "dense":
                w = p[f"{name}.weight"]
                if observer is not None:
                    observer(name, w)
                out = T.dense_forward(h, w, p.get(f"{name}.bias"))
                cache.entries.append((h,))
            else:  # softmax
                cache.logits = h
                out = T.softmax(h)
                cache.entries.append((out,))
            cache.outputs.append(out)
            h = out
        return h, cache

    def backward(self, cache: ForwardCache, dlogits: np.ndarray) -> Dict[str, np.ndarray]:
        """Backpropagate a gradient taken w.r.t. the pre-softmax logits."""
        grads: Dict[str, np.ndarray] = {}
        g = dlogits
        p = self.params
        for layer, entry in zip(reversed(self.plan), reversed(cache.entries)):
            name, kind = layer.name, layer.kind
            if kind == "softmax":
                continue
            if kind == "dense":
                g, grads[f"{name}.weight"], db = T.dense_backward(g, entry[0], p[f"{name}.weight"])
                if f"{name}.bias" in p:
                    grads[f"{name}.bias"] = db
            elif kind == "dropout":
                g = T.dropout_backward(g, entry[0])
            elif kind == "flatten":
                g = g.reshape(entry[0])
            elif kind == "maxpool":
                g = T.maxpool1d_backward(g, entry[0], layer.spec.pool_size, entry[1])
            elif kind == "relu":
                g = T.relu_backward(g, entry[0])
            elif kind == "conv1d":
                g, grads[f"{name}.kernel"], db = T.conv1d_backward(g, entry[0], p[f"{name}.kernel"])
                if f"{name}.bias" in p:
                    grads[f"{name}.bias"] = db
            elif kind == "input-norm":
                if entry[0] is None:
                    raise ParameterError("backward through batch normalization needs a training-mode forward")
                g, grads[f"{name}.gamma"], grads[f"{name}.beta"] = T.batchnorm_backward(g, entry[0])
        return grads

    def loss_and_grads(self, x, labels, *, l2_lambda: float = L2_LAMBDA,
                       rng: Optional[np.random.Generator] = None, need_grads: bool = True):
        probs, cache = self.forward(x, training=True, rng=rng)
        out_w = self.params[f"{self.output_layer}.weight"]
        loss, dlogits = T.bce_loss(probs, labels, l2_lambda, out_w)
        if not need_grads:
            return loss, None
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss; first offending layer: {first_nonfinite_layer(self, cache)}")
        grads = self.backward(cache, dlogits)
        if l2_lambda:
            grads[f"{self.output_layer}.weight"] = grads[f"{self.output_layer}.weight"] + T.l2_grad(out_w, l2_lambda)
        return loss, grads

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()}, self.binarized_layers)


def first_nonfinite_layer(network: Network, cache: ForwardCache) -> str:
    for layer, out in zip(network.plan, cache.outputs):
        if not np.all(np.isfinite(out)):
            return layer.name
    for name, arr in network.params.items():
        if not np.all(np.isfinite(arr)):
            return name.split(".")[0]
    return "loss"


def init_params(config: NetworkConfig, seed: int) -> Dict[str, np.ndarray]:
    """LeCun uniform fan-in initialization, limit sqrt(3 / fan_in); zero biases; identity normalization."""
    rng = np.random.default_rng(seed)
    params: Dict[str, np.ndarray] = {}
    for layer in compile_plan(config):
        if layer.kind == "input-norm":
            params[f"{layer.name}.gamma"] = np.ones(layer.in_shape)
            params[f"{layer.name}.beta"] = np.zeros(layer.in_shape)
            params[f"{layer.name}.moving_mean"] = np.zeros(layer.in_shape)
            params[f"{layer.name}.moving_var"] = np.ones(layer.in_shape)
        elif layer.kind == "conv1d":
            f, c, k = layer.spec.filter_count, layer.in_shape[0], layer.spec.kernel_length
            limit = math.sqrt(3.0 / (c * k))
            params[f"{layer.name}.kernel"] = rng.uniform(-limit, limit, size=(f, c, k))
            params[f"{layer.name}.bias"] = np.zeros(f)
        elif layer.kind == "dense":
            out, fan_in = layer.spec.filter_count, layer.in_shape[0]
            limit = math.sqrt(3.0 / fan_in)
            params[f"{layer.name}.weight"] = rng.uniform(-limit, limit, size=(out, fan_in))
            params[f"{layer.name}.bias"] = np.zeros(out)
    return params


def build_network(config: NetworkConfig, seed: int = 0) -> Network:
    return Network(config, init_params(config, seed))


def build_reference_network(seed: int = 0) -> Network:
    return build_network(reference_config(), seed)


# ----------------------------------------------------------------------
# inference
# ----------------------------------------------------------------------

def forward(network: Network, window) -> np.ndarray:
    """Class probabilities for one window (inference mode)."""
    window = np.asarray(window, dtype=np.float64)
    expected = network.config.input_length * network.config.input_channels
    if window.size != expected:
        raise ShapeError(f"window must have {expected} samples, got {window.size}")
    probs, _ = network.forward(window.reshape(1, network.config.input_channels, -1))
    return probs[0]


def predict_proba(network: Network, windows, batch_size: int = 1024) -> np.ndarray:
    windows = np.asarray(windows, dtype=np.float64)
    if len(windows) == 0:
        return np.zeros((0, network.config.class_count))
    parts = [network.forward(windows[i:i + batch_size])[0] for i in range(0, len(windows), batch_size)]
    return np.concatenate(parts)


def predict_label(probabilities) -> np.ndarray | int:
    """Argmax decision; an exact tie goes to non-apneic (class 0)."""
    p = np.asarray(probabilities, dtype=np.float64)
    labels = (p[..., APNEIC] > p[..., NON_APNEIC]).astype(np.int64)
    return int(labels) if labels.ndim == 0 else labels


# ----------------------------------------------------------------------
# training
# ----------------------------------------------------------------------

@dataclass
class TrainReport:
    train_loss: List[float] = field(default_factory=list)
    val_accuracy: List[float] = field(default_factory=list)
    best_epoch: int = 0  # 1-based; 0 means no eligible epoch
    test_metrics: Optional[dict] = None

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
            "test_metrics": self.test_metrics,
        }


def select_best_epoch(val_accuracy: Sequence[float], eligible: Optional[Sequence[bool]] = None) -> int:
    """1-based index of the highest validation accuracy, earliest on ties; 0 if none eligible."""
    best, best_acc = 0, -math.inf
    for i, acc in enumerate(val_accuracy):
        if eligible is not None and not eligible[i]:
            continue
        if acc > best_acc:
            best, best_acc = i + 1, acc
    return best


class TrainingHook:
    """Extension points used by the compression schedules.  All no-ops here."""

    def before_step(self, network: Network, step: int) -> None:
        pass

    def optimizer_targets(self, network: Network) -> Dict[str, np.ndarray]:
        """Arrays the optimizer should update instead of the same-named parameters."""
        return {}

    def after_grads(self, network: Network, grads: Dict[str, np.ndarray], step: int) -> None:
        pass

    def after_step(self, network: Network, step: int) -> None:
        pass

    def snapshot_ready(self, step: int) -> bool:
        return True

    def state(self) -> Dict[str, np.ndarray]:
        """Extra named arrays to persist in checkpoints (e.g. ``mask/...``)."""
        return {}

    def load_state(self, arrays: Dict[str, np.ndarray]) -> None:
        pass


def fit(network: Network, train_set, val_set, *, epochs: int = 100, batch_size: int = 128,
        seed: int = 0, l2_lambda: float = L2_LAMBDA, learning_rate: float = 1e-3,
        hooks: Sequence[TrainingHook] = ()):
    """Train with ADAM, keeping the weights from the best validation epoch.

    ``train_set`` and ``val_set`` are ``(windows, labels)`` pairs.  Returns the
    best-epoch :class:`~somnnet.checkpoint.Checkpoint` and a :class:`TrainReport`;
    ``network`` is left holding the best weights.
    """
    from .checkpoint import Checkpoint

    x_train, y_train = (np.asarray(a) for a in train_set)
    x_val, y_val = (np.asarray(a) for a in val_set)
    if len(x_train) == 0 or len(x_val) == 0:
        raise ParameterError("training and validation sets must be non-empty")
    if len(np.unique(y_train)) < 2:
        raise ParameterError("training set must contain both classes")
    if len(x_train) < 2:
        raise ParameterError("training needs at least two windows")
    x_train = network._as_batch(x_train)
    x_val = network._as_batch(x_val)

    rng = np.random.default_rng(seed)
    opt = T.AdamState(learning_rate=learning_rate)
    report = TrainReport()
    best_acc = -math.inf
    best: Optional[Checkpoint] = None
    eligible: List[bool] = []
    step = 0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x_train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue
            for h in hooks:
                h.before_step(network, step)
            loss, grads = network.loss_and_grads(x_train[idx], y_train[idx], l2_lambda=l2_lambda, rng=rng)
            for h in hooks:
                h.after_grads(network, grads, step)
            targets = dict(network.params)
            for h in hooks:
                targets.update(h.optimizer_targets(network))
            T.adam_step(targets, grads, opt)
            for h in hooks:
                h.after_step(network, step)
            losses.append(loss)
            step += 1
        acc = float(np.mean(predict_label(predict_proba(network, x_val)) == y_val))
        report.train_loss.append(float(np.mean(losses)))
        report.val_accuracy.append(acc)
        ready = all(h.snapshot_ready(step) for h in hooks)
        eligible.append(ready)
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, report.train_loss[-1], acc)
        if ready and acc > best_acc:
            best_acc = acc
            best = Checkpoint.from_network(network, hooks=hooks, metadata={})
            best.metadata.update({"best_epoch": epoch, "best_val_accuracy": acc})
    report.best_epoch = select_best_epoch(report.val_accuracy, eligible)
    if best is None:
        best = Checkpoint.from_network(network, hooks=hooks, metadata={"best_epoch": 0, "best_val_accuracy": None})
    best.metadata.update({"epochs_run": epochs, "seed": seed})
    best.restore_into(network, hooks=hooks)
    return best, report
