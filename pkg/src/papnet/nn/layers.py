"""Layer kinds with exact reverse-mode gradients.

Activations are NHWC float32. Convolution is cross-correlation computed by
im2col + matmul; weights are stored as (k, k, C_in, C_out).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

Shape = tuple  # (H, W, C) for feature maps, (D,) for flat vectors


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape

    def allocate(self, in_shape: Shape) -> None:
        """Create zero parameters for the given input shape."""

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise RuntimeError(f"{self.name}: backward called without a training-mode forward")
        return self._cache

    def to_spec(self) -> dict:
        return {"kind": self.kind, "name": self.name}

    def named_layers(self, prefix: str = ""):
        yield prefix + self.name, self


def _pad_hw(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(B, Ho, Wo, C, k, k) view of k x k windows."""
    return sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def _out_hw(h: int, w: int, k: int, stride: int, pad: int, who: str) -> tuple[int, int]:
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise ShapeError(f"layer '{who}': kernel {k} larger than padded input {hp}x{wp}")
    return (hp - k) // stride + 1, (wp - k) // stride + 1


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, name: str, out_ch: int, kernel: int, stride: int = 1, pad: int = 0):
        super().__init__(name)
        if out_ch <= 0 or kernel <= 0 or stride <= 0 or pad < 0:
            raise ShapeError(f"layer '{name}': invalid conv2d hyperparameters")
        self.out_ch, self.kernel, self.stride, self.pad = out_ch, kernel, stride, pad

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer '{self.name}': conv2d needs an H x W x C input, got {in_shape}")
        ho, wo = _out_hw(in_shape[0], in_shape[1], self.kernel, self.stride, self.pad, self.name)
        return (ho, wo, self.out_ch)

    def allocate(self, in_shape):
        k = self.kernel
        self.params = {
            "weight": np.zeros((k, k, in_shape[2], self.out_ch), np.float32),
            "bias": np.zeros(self.out_ch, np.float32),
        }

    def forward(self, x, train=False):
        w, b = self.params["weight"], self.params["bias"]
        k, s = self.kernel, self.stride
        if x.shape[3] != w.shape[2]:
            raise ShapeError(f"layer '{self.name}': expected {w.shape[2]} input channels, got {x.shape[3]}")
        xp = _pad_hw(x, self.pad)
        win = _windows(xp, k, s)  # B Ho Wo C k k
        bsz, ho, wo = win.shape[:3]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, k * k * w.shape[2])
        y = cols @ w.reshape(-1, self.out_ch) + b
        if train:
            self._cache = (x.shape, xp.shape, cols, ho, wo)
        return y.reshape(bsz, ho, wo, self.out_ch)

    def backward(self, dy):
        x_shape, xp_shape, cols, ho, wo = self._need_cache()
        w = self.params["weight"]
        k, s, p = self.kernel, self.stride, self.pad
        dy2 = dy.reshape(-1, self.out_ch)
        self.grads = {"weight": (cols.T @ dy2).reshape(w.shape), "bias": dy2.sum(axis=0)}
        dcols = (dy2 @ w.reshape(-1, self.out_ch).T).reshape(x_shape[0], ho, wo, k, k, x_shape[3])
        dxp = np.zeros(xp_shape, dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp

    def to_spec(self):
        return {**super().to_spec(), "out_ch": self.out_ch, "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


class MaxPool2d(Layer):
    """Max pooling; ties go to the first window element in row-major order."""

    kind = "maxpool"

    def __init__(self, name: str, kernel: int, stride: int | None = None, pad: int = 0):
        super().__init__(name)
        self.kernel = kernel
        self.stride = stride or kernel
        self.pad = pad
        if kernel <= 0 or self.stride <= 0 or not 0 <= pad < kernel:
            raise ShapeError(f"layer '{name}': invalid maxpool hyperparameters")

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer '{self.name}': maxpool needs an H x W x C input, got {in_shape}")
        ho, wo = _out_hw(in_shape[0], in_shape[1], self.kernel, self.stride, self.pad, self.name)
        return (ho, wo, in_shape[2])

    def forward(self, x, train=False):
        k = self.kernel
        xp = _pad_hw(x, self.pad, -np.inf)
        win = _windows(xp, k, self.stride)
        flat = win.reshape(win.shape[:4] + (k * k,))
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (x.shape, xp.shape, arg)
        return y

    def backward(self, dy):
        x_shape, xp_shape, arg = self._need_cache()
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = arg.shape[1:3]
        dxp = np.zeros(xp_shape, dy.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                dxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += np.where(hit, dy, 0)
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp

    def to_spec(self):
        return {**super().to_spec(), "kernel": self.kernel, "stride": self.stride, "pad": self.pad}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, train=False):
        mask = x > 0
        if train:
            self._cache = mask
        return np.where(mask, x, np.float32(0)).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._need_cache(), dy, 0).astype(dy.dtype, copy=False)


class FullyConnected(Layer):
    """Dense layer over the flattened (C-order) input."""

    kind = "fc"

    def __init__(self, name: str, out_dim: int):
        super().__init__(name)
        if out_dim <= 0:
            raise ShapeError(f"layer '{name}': out_dim must be positive")
        self.out_dim = out_dim

    def output_shape(self, in_shape):
        return (self.out_dim,)

    def allocate(self, in_shape):
        self.params = {
            "weight": np.zeros((int(np.prod(in_shape)), self.out_dim), np.float32),
            "bias": np.zeros(self.out_dim, np.float32),
        }

    def forward(self, x, train=False):
        w = self.params["weight"]
        x2 = x.reshape(x.shape[0], -1)
        if x2.shape[1] != w.shape[0]:
            raise ShapeError(f"layer '{self.name}': expected {w.shape[0]} inputs, got {x2.shape[1]}")
        if train:
            self._cache = (x.shape, x2)
        return x2 @ w + self.params["bias"]

    def backward(self, dy):
        x_shape, x2 = self._need_cache()
        w = self.params["weight"]
        self.grads = {"weight": x2.T @ dy, "bias": dy.sum(axis=0)}
        return (dy @ w.T).reshape(x_shape)

    def to_spec(self):
        return {**super().to_spec(), "out_dim": self.out_dim}


class SoftmaxOutput(FullyConnected):
    """Final dense layer producing class logits; softmax is applied by the loss."""

    kind = "softmax_output"

    def __init__(self, name: str, n_classes: int):
        super().__init__(name, n_classes)

    @property
    def n_classes(self) -> int:
        return self.out_dim

    def to_spec(self):
        return {"kind": self.kind, "name": self.name, "n_classes": self.out_dim}


class GlobalAvgPool(Layer):
    kind = "global_avg_pool"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"layer '{self.name}': global_avg_pool needs an H x W x C input")
        return (in_shape[2],)

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.mean(axis=(1, 2), dtype=np.float32)

    def backward(self, dy):
        b, h, w, c = self._need_cache()
        return np.broadcast_to(dy[:, None, None, :] / np.float32(h * w), (b, h, w, c)).copy()


class Concat(Layer):
    """Parallel branches on one input, concatenated along channels.

    An empty branch passes its input through unchanged.
    """

    kind = "concat"

    def __init__(self, name: str, branches: list[list[Layer]]):
        super().__init__(name)
        if not branches:
            raise ShapeError(f"layer '{name}': concat needs at least one branch")
        self.branches = branches
        self._widths: list[int] = []

    def output_shape(self, in_shape):
        outs = []
        for bi, branch in enumerate(self.branches):
            shape = in_shape
            for layer in branch:
                shape = layer.output_shape(shape)
            outs.append(shape)
        if any(len(s) != 3 for s in outs) or len({s[:2] for s in outs}) != 1:
            raise ShapeError(f"layer '{self.name}': branch output shapes disagree: {outs}")
        self._widths = [s[2] for s in outs]
        return outs[0][:2] + (sum(self._widths),)

    def allocate(self, in_shape):
        for branch in self.branches:
            shape = in_shape
            for layer in branch:
                layer.allocate(shape)
                shape = layer.output_shape(shape)

    def forward(self, x, train=False):
        outs = []
        for branch in self.branches:
            y = x
            for layer in branch:
                y = layer.forward(y, train)
            outs.append(y)
        if train:
            self._cache = [o.shape[3] for o in outs]
        return np.concatenate(outs, axis=3)

    def backward(self, dy):
        widths = self._need_cache()
        dx = None
        start = 0
        for branch, width in zip(self.branches, widths):
            g = dy[..., start : start + width]
            start += width
            for layer in reversed(branch):
                g = layer.backward(g)
            dx = g if dx is None else dx + g
        return dx

    def named_layers(self, prefix: str = ""):
        yield prefix + self.name, self
        for bi, branch in enumerate(self.branches):
            for layer in branch:
                yield from layer.named_layers(f"{prefix}{self.name}/{bi}/")

    def to_spec(self):
        return {
            "kind": self.kind,
            "name": self.name,
            "branches": [[layer.to_spec() for layer in branch] for branch in self.branches],
        }


LAYER_KINDS = ("conv2d", "maxpool", "relu", "fc", "concat", "global_avg_pool", "softmax_output")
RESERVED_KINDS = ("batch_norm",)


def layer_from_spec(spec: dict, default_name: str) -> Layer:
    kind = spec.get("kind")
    name = spec.get("name") or default_name
    try:
        if kind == "conv2d":
            return Conv2d(name, int(spec["out_ch"]), int(spec["kernel"]), int(spec.get("stride", 1)), int(spec.get("pad", 0)))
        if kind == "maxpool":
            return MaxPool2d(name, int(spec["kernel"]), int(spec.get("stride", spec["kernel"])), int(spec.get("pad", 0)))
        if kind == "relu":
            return ReLU(name)
        if kind == "fc":
            return FullyConnected(name, int(spec["out_dim"]))
        if kind == "softmax_output":
            return SoftmaxOutput(name, int(spec["n_classes"]))
        if kind == "global_avg_pool":
            return GlobalAvgPool(name)
        if kind == "concat":
            branches = [
                [layer_from_spec(s, f"{kind}{j}") for j, s in enumerate(branch)]
                for branch in spec["branches"]
            ]
            return Concat(name, branches)
    except KeyError as exc:
        raise ShapeError(f"layer '{name}' ({kind}): missing field {exc}") from None
    if kind in RESERVED_KINDS:
        raise ShapeError(f"layer '{name}': kind {kind!r} is reserved and not supported yet")
    raise ShapeError(f"layer '{name}': unknown kind {kind!r}")
