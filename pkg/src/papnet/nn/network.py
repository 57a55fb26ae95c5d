"""Network assembly from declarative specs, weight initialization and the loss."""
from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from ..errors import CheckpointError, ConfigError, NumericError, ShapeError
from .layers import Conv2d, FullyConnected, Layer, SoftmaxOutput, layer_from_spec

OUTPUT_WIDTHS = (2, 7)
INPUT_CHANNELS = (3, 5)


class Network:
    """Ordered layer stack built from a NetworkSpec document.

    Parameters live in the layers; :meth:`parameters` and :meth:`gradients`
    expose them under dotted names such as ``conv1.weight`` or
    ``inc/0/b1.bias`` for layers inside a concat branch.
    """

    def __init__(self, spec: dict, layers: list[Layer], shapes: list[tuple]):
        self.spec = spec
        self.layers = layers
        self.shapes = shapes
        self.input_shape = tuple(spec["input"])
        self.debug = bool(os.environ.get("PAPNET_DEBUG"))
        self._trained_forward = False
        self.input_grad: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def channels(self) -> int:
        return self.input_shape[2]

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        for layer in self.layers:
            yield from layer.named_layers()

    def param_layers(self) -> list[tuple[str, Layer]]:
        """Layers that own parameters, in forward order."""
        return [(n, l) for n, l in self.named_layers() if l.params]

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, l in self.param_layers() for k, v in l.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": l.grads[k] for n, l in self.param_layers() for k in l.params}

    def set_parameters(self, values: dict[str, np.ndarray]) -> None:
        for n, layer in self.param_layers():
            for k, cur in layer.params.items():
                key = f"{n}.{k}"
                if key not in values:
                    raise CheckpointError(f"missing parameter {key}")
                v = np.asarray(values[key], dtype=np.float32)
                if v.shape != cur.shape:
                    raise CheckpointError(f"layer '{n}': {k} has shape {v.shape}, network expects {cur.shape}")
                layer.params[k] = v.copy()

    def clone(self) -> "Network":
        other = build_network(self.spec)
        other.set_parameters(self.parameters())
        return other

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(f"input batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        for name, layer in zip((l.name for l in self.layers), self.layers):
            x = layer.forward(x, train)
            if self.debug and not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activation after layer '{name}'")
        self._trained_forward = train
        return x

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        if not self._trained_forward:
            raise RuntimeError("backward requires a preceding forward(train=True)")
        g = np.asarray(dlogits, dtype=np.float32)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        return self.gradients()

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.forward(x, train=False))


def _chain(layers: list[Layer], in_shape: tuple) -> list[tuple]:
    shapes = []
    shape = in_shape
    for i, layer in enumerate(layers):
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            prev = shapes[-1] if shapes else in_shape
            raise ShapeError(f"layer {i} ({layer.kind}) on input {tuple(prev)}: {exc}") from None
        shapes.append(tuple(shape))
    return shapes


def build_network(spec: dict | str | Path, *, strict: bool = True) -> Network:
    """Allocate a zero-initialised network from a spec dict or JSON file.

    ``strict`` enforces the task constraints: 3 or 5 input channels and a
    final ``softmax_output`` of width 2 or 7.
    """
    if isinstance(spec, (str, Path)):
        spec = json.loads(Path(spec).read_text())
    spec = copy.deepcopy(spec)
    try:
        in_shape = tuple(int(v) for v in spec["input"])
        layer_specs = spec["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeError(f"network spec needs 'input' [H, W, C] and 'layers': {exc}") from None
    if len(in_shape) != 3:
        raise ShapeError(f"input must be [H, W, C], got {list(in_shape)}")
    if not layer_specs:
        raise ShapeError("network spec has no layers")
    if strict and in_shape[2] not in INPUT_CHANNELS:
        raise ShapeError(f"input channels must be 3 or 5, got {in_shape[2]}")

    layers = [layer_from_spec(s, f"{s.get('kind', 'layer')}{i}") for i, s in enumerate(layer_specs)]
    names = [n for l in layers for n, _ in l.named_layers()]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise ShapeError(f"duplicate layer names: {dupes}")
    shapes = _chain(layers, in_shape)
    if strict:
        if not isinstance(layers[-1], SoftmaxOutput):
            raise ShapeError("last layer must be softmax_output")
        if shapes[-1][0] not in OUTPUT_WIDTHS:
            raise ShapeError(f"output width must be 2 or 7, got {shapes[-1][0]}")
    shape = in_shape
    for layer, out in zip(layers, shapes):
        layer.allocate(shape)
        shape = out
    spec["input"] = list(in_shape)
    spec["layers"] = [l.to_spec() for l in layers]
    return Network(spec, layers, shapes)


# ---------------------------------------------------------------------------
# Initialization


@dataclass(frozen=True)
class InitPolicy:
    """How to initialise weights.

    ``scratch``: every layer Gaussian. ``transfer``: the first conv and the last
    ``n_random_fc`` dense layers are Gaussian, everything else is copied from
    ``checkpoint``. ``gaussian_std`` is a fixed std, or ``"he"`` for
    sqrt(2 / fan_in) per layer.
    """

    mode: str = "scratch"
    checkpoint: str | None = None
    n_random_fc: int = 1
    gaussian_std: float | str = 0.01

    def __post_init__(self):
        if self.mode not in ("scratch", "transfer"):
            raise ConfigError(f"init mode must be scratch or transfer, got {self.mode!r}")
        if self.mode == "transfer" and not self.checkpoint:
            raise ConfigError("transfer init needs a checkpoint path")
        if self.n_random_fc < 0:
            raise ConfigError("n_random_fc must be >= 0")
        if not (self.gaussian_std == "he" or (isinstance(self.gaussian_std, (int, float)) and self.gaussian_std > 0)):
            raise ConfigError("gaussian_std must be a positive number or 'he'")


def random_init_layers(net: Network, n_random_fc: int) -> list[str]:
    """Names of the first conv layer and the last ``n_random_fc`` dense layers."""
    named = net.param_layers()
    chosen = []
    convs = [n for n, l in named if isinstance(l, Conv2d)]
    if convs:
        chosen.append(convs[0])
    dense = [n for n, l in named if isinstance(l, FullyConnected)]
    if n_random_fc:
        chosen.extend(dense[-n_random_fc:])
    return chosen


def _gaussian_fill(layer: Layer, std: float | str, rng: np.random.Generator) -> None:
    w = layer.params["weight"]
    fan_in = int(np.prod(w.shape[:-1]))
    sigma = np.sqrt(2.0 / fan_in) if std == "he" else float(std)
    layer.params["weight"] = (rng.standard_normal(w.shape) * sigma).astype(np.float32)
    layer.params["bias"] = np.zeros_like(layer.params["bias"])


def init_weights(net: Network, policy: InitPolicy, rng: np.random.Generator) -> Network:
    named = net.param_layers()
    if policy.mode == "scratch":
        for _, layer in named:
            _gaussian_fill(layer, policy.gaussian_std, rng)
        return net

    from .checkpoint import load_checkpoint

    source = load_checkpoint(policy.checkpoint).parameters
    random_set = set(random_init_layers(net, policy.n_random_fc))
    for name, layer in named:
        if name in random_set:
            _gaussian_fill(layer, policy.gaussian_std, rng)
            continue
        for k, cur in layer.params.items():
            key = f"{name}.{k}"
            if key not in source:
                raise CheckpointError(f"layer '{name}': {key} not in checkpoint {policy.checkpoint}")
            if source[key].shape != cur.shape:
                raise CheckpointError(
                    f"layer '{name}': checkpoint {k} shape {source[key].shape} != network {cur.shape}"
                )
            layer.params[k] = source[key].astype(np.float32, copy=True)
    return net


# ---------------------------------------------------------------------------
# Loss


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient (softmax - onehot) / B."""
    labels = np.asarray(labels, dtype=np.int64)
    b, n = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n:
        raise ValueError(f"labels must lie in [0, {n})")
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    grad = np.exp(z - logsum[:, None])
    grad[rows, labels] -= 1.0
    return loss, (grad / b).astype(np.float32)
