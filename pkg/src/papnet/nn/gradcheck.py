"""Central finite-difference check of every layer kind.

For each kind, random configurations are drawn and the analytic gradients of
a scalar objective (a fixed random projection of the layer output, or the
softmax cross-entropy for ``softmax_output``) are compared against central
differences taken on the float32 forward pass.

Error per tensor is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``;
a configuration's error is the worst tensor (inputs and every parameter).
Inputs are drawn away from the non-differentiable points of ReLU and max
pooling so that a step of ``eps`` never crosses a kink.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .layers import (
    Concat,
    Conv2d,
    FullyConnected,
    GlobalAvgPool,
    Layer,
    MaxPool2d,
    ReLU,
    SoftmaxOutput,
)
from .network import loss_softmax_xent

EPS = 1e-2
TOLERANCE = 1e-3
KINDS = ("conv2d", "maxpool", "relu", "fc", "concat", "global_avg_pool", "softmax_output")


def _spaced(rng, shape, step=0.05):
    """Distinct values at least ``step`` apart, randomly arranged."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * step
    return rng.permutation(vals).reshape(shape).astype(np.float32)


def _away_from_zero(rng, shape, margin=0.1):
    mag = rng.uniform(margin, 1.0, shape)
    return (mag * rng.choice([-1.0, 1.0], shape)).astype(np.float32)


def _fill(layer: Layer, rng) -> None:
    for _, l in layer.named_layers():
        for k, v in l.params.items():
            l.params[k] = rng.standard_normal(v.shape).astype(np.float32) * np.float32(0.5)


def _random_case(kind: str, rng: np.random.Generator):
    """(layer, input) pair for one random configuration of ``kind``."""
    b = int(rng.integers(1, 3))
    if kind == "conv2d":
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k))
        h, w = int(rng.integers(k, k + 4)), int(rng.integers(k, k + 4))
        layer = Conv2d("conv", int(rng.integers(1, 4)), k, s, p)
        shape = (h, w, int(rng.integers(1, 4)))
        x = rng.standard_normal((b,) + shape).astype(np.float32)
    elif kind == "maxpool":
        k = int(rng.integers(2, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, k))
        layer = MaxPool2d("pool", k, s, p)
        shape = (int(rng.integers(k, k + 4)), int(rng.integers(k, k + 4)), int(rng.integers(1, 3)))
        x = _spaced(rng, (b,) + shape)
    elif kind == "relu":
        layer = ReLU("relu")
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        x = _away_from_zero(rng, (b,) + shape)
    elif kind == "fc":
        layer = FullyConnected("fc", int(rng.integers(1, 6)))
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 3)))
        x = rng.standard_normal((b,) + shape).astype(np.float32)
    elif kind == "global_avg_pool":
        layer = GlobalAvgPool("gap")
        shape = (int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
        x = rng.standard_normal((b,) + shape).astype(np.float32)
    elif kind == "concat":
        branches = [
            [Conv2d("c1", int(rng.integers(1, 4)), 1)],
            [Conv2d("c3", int(rng.integers(1, 4)), 3, 1, 1)],
            [MaxPool2d("mp", 3, 1, 1)],
        ]
        if rng.random() < 0.5:
            branches.append([])  # identity branch
        layer = Concat("cat", branches)
        shape = (int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(1, 3)))
        x = _spaced(rng, (b,) + shape)
    elif kind == "softmax_output":
        layer = SoftmaxOutput("out", int(rng.choice([2, 7])))
        shape = (int(rng.integers(1, 8)),)
        x = rng.standard_normal((b,) + shape).astype(np.float32)
    else:
        raise ValueError(f"unknown layer kind {kind!r}")
    layer.output_shape(shape)
    layer.allocate(shape)
    _fill(layer, rng)
    return layer, x


def _objective(layer: Layer, kind: str, rng: np.random.Generator, out_shape):
    if kind == "softmax_output":
        labels = rng.integers(0, out_shape[1], out_shape[0])

        def f(y):
            return loss_softmax_xent(y, labels)

        return f
    proj = rng.standard_normal(out_shape)

    def f(y):
        return float(np.sum(y.astype(np.float64) * proj)), proj.astype(np.float32)

    return f


def _rel_err(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(float(np.abs(a).max(initial=0)), float(np.abs(n).max(initial=0)))
    if scale == 0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def _numeric(arr: np.ndarray, evaluate, eps: float, max_coords: int, rng) -> tuple[np.ndarray, np.ndarray]:
    flat = arr.reshape(-1)
    idx = np.arange(flat.size)
    if flat.size > max_coords:
        idx = np.sort(rng.choice(flat.size, max_coords, replace=False))
    out = np.empty(idx.size, np.float64)
    for j, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + np.float32(eps)
        hi, up = evaluate(), float(flat[i])
        flat[i] = orig - np.float32(eps)
        lo, down = evaluate(), float(flat[i])
        flat[i] = orig
        out[j] = (hi - lo) / (up - down)
    return idx, out


def check_case(layer: Layer, x: np.ndarray, kind: str, rng: np.random.Generator,
               eps: float = EPS, max_coords: int = 256) -> float:
    y = layer.forward(x, train=True)
    f = _objective(layer, kind, rng, y.shape)
    _, dy = f(y)
    dx = layer.backward(dy)
    analytic = {"input": dx}
    targets = {"input": x}
    for name, l in layer.named_layers():
        for k in l.params:
            analytic[f"{name}.{k}"] = l.grads[k]
            targets[f"{name}.{k}"] = l.params[k]

    def evaluate():
        return f(layer.forward(x, train=False))[0]

    worst = 0.0
    for key, arr in targets.items():
        idx, num = _numeric(arr, evaluate, eps, max_coords, rng)
        worst = max(worst, _rel_err(analytic[key].reshape(-1)[idx].astype(np.float64), num))
    return worst


@dataclass
class GradcheckResult:
    kind: str
    max_rel_err: float
    configs: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < TOLERANCE


def run_gradcheck(n_configs: int = 20, seed: int = 0, kinds=KINDS, eps: float = EPS) -> list[GradcheckResult]:
    results = []
    for kind in kinds:
        t0 = time.perf_counter()
        worst = 0.0
        for c in range(n_configs):
            rng = np.random.default_rng([seed, KINDS.index(kind), c])
            layer, x = _random_case(kind, rng)
            worst = max(worst, check_case(layer, x, kind, rng, eps))
        results.append(GradcheckResult(kind, worst, n_configs, time.perf_counter() - t0))
    return results
