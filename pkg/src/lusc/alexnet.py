"""Eight-layer AlexNet: five convolutions, three fully connected layers.

Layer geometry follows the published layer table.  The table lists no
padding, but its output sizes force pad 2 on Conv2 and pad 1 on Conv3-5, so
those are fixed here.  No local response normalization, no grouped
convolutions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, conv_output_size
from .nn import Conv, Dense, Model

# (name, filters, kernel, stride, pad); pools are (name, window, stride)
CONV_LAYOUT = [
    ("conv1", 96, 11, 4, 0),
    ("pool1", 3, 2),
    ("conv2", 256, 5, 1, 2),
    ("pool2", 3, 2),
    ("conv3", 384, 3, 1, 1),
    ("conv4", 384, 3, 1, 1),
    ("conv5", 256, 3, 1, 1),
    ("pool5", 3, 2),
]
FC_WIDTH = 4096


@dataclass(frozen=True)
class AlexNetConfig:
    num_classes: int
    dropout_rate: float = 0.5
    width_scale: float = 1.0
    input_size: int = 227

    def scaled(self, n: int) -> int:
        return int(round(n * self.width_scale))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 < self.width_scale <= 1.0:
            raise ValueError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        for n in (96, 256, 384, FC_WIDTH):
            if self.scaled(n) < 1:
                raise ValueError(f"width_scale {self.width_scale} rounds the {n}-wide layer to zero")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        # shape_trace raises if the input is too small for pool5
        shape_trace(self)


def shape_trace(config: AlexNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape of every layer, from the size algebra alone (no tensors)."""
    h = config.input_size
    c = 3
    trace: list[tuple[str, tuple[int, ...]]] = [("input", (h, h, c))]
    for entry in CONV_LAYOUT:
        if entry[0].startswith("conv"):
            name, filters, k, s, p = entry
            if h + 2 * p < k:
                raise ValueError(f"input {config.input_size} too small: {name} sees {h}x{h}")
            h, c = conv_output_size(h, k, s, p), config.scaled(filters)
        else:
            name, w, s = entry
            if h < w:
                raise ValueError(f"input {config.input_size} too small: {name} sees {h}x{h}")
            h = conv_output_size(h, w, s)
        trace.append((name, (h, h, c)))
    trace += [
        ("fc6", (config.scaled(FC_WIDTH),)),
        ("fc7", (config.scaled(FC_WIDTH),)),
        ("fc8", (config.num_classes,)),
    ]
    return trace


class _Pool:
    def __init__(self, window: int, stride: int):
        self.window, self.stride = window, stride

    def params(self):
        return []

    def __call__(self, x: Tensor) -> Tensor:
        return ad.maxpool2d(x, self.window, self.stride)


class AlexNet(Model):
    arch = "alexnet"

    def __init__(self, config: AlexNetConfig, init_seed: int = 0):
        config.validate()
        self.config = config
        rng = np.random.default_rng(init_seed)
        self.features: list[tuple[str, object]] = []
        cin = 3
        for entry in CONV_LAYOUT:
            if entry[0].startswith("conv"):
                name, filters, k, s, p = entry
                cout = config.scaled(filters)
                self.features.append((name, Conv(name, k, cin, cout, s, p, rng)))
                cin = cout
            else:
                name, w, s = entry
                self.features.append((name, _Pool(w, s)))
        h5 = shape_trace(config)[8][1]
        flat = h5[0] * h5[1] * h5[2]
        width = config.scaled(FC_WIDTH)
        self.fc6 = Dense("fc6", flat, width, rng)
        self.fc7 = Dense("fc7", width, width, rng)
        self.fc8 = Dense("fc8", width, config.num_classes, rng)
        self.layers = [layer for _, layer in self.features] + [self.fc6, self.fc7, self.fc8]
        self._finish(dropout_seed=init_seed + 1)

    @property
    def input_shape(self):
        return (self.config.input_size, self.config.input_size, 3)

    def forward(self, x: Tensor, mode: str = "eval", trace: list | None = None) -> Tensor:
        self._check_input(x)
        train = mode == "train"
        rate = self.config.dropout_rate
        for name, layer in self.features:
            x = layer(x)
            if name.startswith("conv"):
                x = ad.relu(x)
            if trace is not None:
                trace.append((name, x.shape[1:]))
        x = ad.flatten(x)
        for fc in (self.fc6, self.fc7):
            x = ad.dropout(ad.relu(fc(x)), rate, train, self.rng)
            if trace is not None:
                trace.append((fc.name, x.shape[1:]))
        x = self.fc8(x)
        if trace is not None:
            trace.append(("fc8", x.shape[1:]))
        return x

    def trace(self, batch: int = 1) -> list[tuple[str, tuple[int, ...]]]:
        """Run an eval forward on zeros and record every layer's output shape."""
        rec: list = [("input", self.input_shape)]
        with ad.no_grad():
            self.forward(Tensor(np.zeros((batch,) + self.input_shape, dtype=self._params[0].dtype)), "eval", rec)
        return rec


def build_alexnet(config: AlexNetConfig, init_seed: int = 0) -> AlexNet:
    return AlexNet(config, init_seed)
