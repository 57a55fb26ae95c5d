"""Shipped NetworkSpec presets.

``cellnet-s`` and ``cellnet-i`` are desk-scale nets; ``alexnet-t`` only shows
that the AlexNet-T layout (fc6/fc7 = 1024/256) is expressible, it is far too
large to train here.
"""
from __future__ import annotations

from ..errors import ConfigError


def cellnet_s(size: int, channels: int, n_classes: int) -> dict:
    return {
        "name": "cellnet-s",
        "input": [size, size, channels],
        "layers": [
            {"kind": "conv2d", "name": "conv1", "out_ch": 16, "kernel": 5, "stride": 2, "pad": 2},
            {"kind": "relu", "name": "relu1"},
            {"kind": "maxpool", "name": "pool1", "kernel": 2, "stride": 2},
            {"kind": "conv2d", "name": "conv2", "out_ch": 32, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu", "name": "relu2"},
            {"kind": "maxpool", "name": "pool2", "kernel": 2, "stride": 2},
            {"kind": "conv2d", "name": "conv3", "out_ch": 32, "kernel": 3, "stride": 1, "pad": 1},
            {"kind": "relu", "name": "relu3"},
            {"kind": "global_avg_pool", "name": "gap"},
            {"kind": "fc", "name": "fc1", "out_dim": 32},
            {"kind": "relu", "name": "relu4"},
            {"kind": "softmax_output", "name": "out", "n_classes": n_classes},
        ],
    }


def cellnet_i(size: int, channels: int, n_classes: int) -> dict:
    """cellnet-s with its middle conv replaced by one inception-style block."""
    return {
        "name": "cellnet-i",
        "input": [size, size, channels],
        "layers": [
            {"kind": "conv2d", "name": "conv1", "out_ch": 16, "kernel": 5, "stride": 2, "pad": 2},
            {"kind": "relu", "name": "relu1"},
            {"kind": "maxpool", "name": "pool1", "kernel": 2, "stride": 2},
            {
                "kind": "concat",
                "name": "inc",
                "branches": [
                    [{"kind": "conv2d", "name": "b1x1", "out_ch": 8, "kernel": 1},
                     {"kind": "relu", "name": "b1relu"}],
                    [{"kind": "conv2d", "name": "b3x3", "out_ch": 16, "kernel": 3, "pad": 1},
                     {"kind": "relu", "name": "b3relu"}],
                    [{"kind": "conv2d", "name": "b5x5", "out_ch": 8, "kernel": 5, "pad": 2},
                     {"kind": "relu", "name": "b5relu"}],
                    [{"kind": "maxpool", "name": "bpool", "kernel": 3, "stride": 1, "pad": 1},
                     {"kind": "conv2d", "name": "bproj", "out_ch": 8, "kernel": 1},
                     {"kind": "relu", "name": "bprelu"}],
                ],
            },
            {"kind": "maxpool", "name": "pool2", "kernel": 2, "stride": 2},
            {"kind": "global_avg_pool", "name": "gap"},
            {"kind": "fc", "name": "fc1", "out_dim": 32},
            {"kind": "relu", "name": "relu4"},
            {"kind": "softmax_output", "name": "out", "n_classes": n_classes},
        ],
    }


def alexnet_t(size: int, channels: int, n_classes: int) -> dict:
    conv = lambda name, c, k, s=1, p=0: {"kind": "conv2d", "name": name, "out_ch": c, "kernel": k, "stride": s, "pad": p}
    relu = lambda name: {"kind": "relu", "name": name}
    pool = lambda name: {"kind": "maxpool", "name": name, "kernel": 3, "stride": 2}
    return {
        "name": "alexnet-t",
        "input": [size, size, channels],
        "layers": [
            conv("conv1", 96, 11, 4), relu("relu1"), pool("pool1"),
            conv("conv2", 256, 5, 1, 2), relu("relu2"), pool("pool2"),
            conv("conv3", 384, 3, 1, 1), relu("relu3"),
            conv("conv4", 384, 3, 1, 1), relu("relu4"),
            conv("conv5", 256, 3, 1, 1), relu("relu5"), pool("pool5"),
            {"kind": "fc", "name": "fc6", "out_dim": 1024}, relu("relu6"),
            {"kind": "fc", "name": "fc7", "out_dim": 256}, relu("relu7"),
            {"kind": "softmax_output", "name": "fc8", "n_classes": n_classes},
        ],
    }


PRESETS = {"cellnet-s": cellnet_s, "cellnet-i": cellnet_i, "alexnet-t": alexnet_t}


def preset_spec(name: str, size: int, channels: int, n_classes: int) -> dict:
    try:
        return PRESETS[name](size, channels, n_classes)
    except KeyError:
        raise ConfigError(f"unknown network preset {name!r}; choose from {sorted(PRESETS)}") from None
