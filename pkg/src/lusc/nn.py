"""Parameter containers shared by the two model families."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MODES = ("train", "eval")


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def param(data: np.ndarray, name: str) -> Tensor:
    return Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)


class Conv:
    def __init__(self, name: str, k: int, cin: int, cout: int, stride: int, pad: int, rng: np.random.Generator):
        self.name, self.k, self.stride, self.pad = name, k, stride, pad
        self.weight = param(he_uniform(rng, (k, k, cin, cout), k * k * cin), f"{name}.weight")
        self.bias = param(np.zeros(cout), f"{name}.bias")

    def params(self):
        return [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Dense:
    def __init__(self, name: str, fin: int, fout: int, rng: np.random.Generator, bias: bool = True):
        self.name = name
        self.weight = param(he_uniform(rng, (fin, fout), fin), f"{name}.weight")
        self.bias = param(np.zeros(fout), f"{name}.bias") if bias else None

    def params(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        y = ad.matmul(x, self.weight)
        return y if self.bias is None else y + self.bias


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.gain = param(np.ones(dim), f"{name}.gain")
        self.shift = param(np.zeros(dim), f"{name}.shift")

    def params(self):
        return [self.gain, self.shift]

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layernorm(x, self.gain, self.shift, self.eps)


class Model:
    """Ordered set of named parameters plus a forward contract.

    Subclasses set ``self.config`` (a dataclass) and ``self.layers`` before
    calling :meth:`_finish`.
    """

    arch: str = "model"

    def _finish(self, dropout_seed: int) -> None:
        self._params = [p for layer in self.layers for p in layer.params()]
        self.rng = np.random.default_rng(dropout_seed)

    def parameters(self) -> list[Tensor]:
        return list(self._params)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self._params:
            yield p.name, p

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params)

    def reseed_dropout(self, seed) -> None:
        self.rng = np.random.default_rng(seed)

    def astype(self, dtype) -> "Model":
        """Cast all parameters in place (double precision is for gradient checks)."""
        for p in self._params:
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self) -> None:
        for p in self._params:
            p.grad = None

    def get_state(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self._params]

    def set_state(self, arrays: list[np.ndarray]) -> None:
        if len(arrays) != len(self._params):
            raise ValueError(f"state has {len(arrays)} arrays, model has {len(self._params)}")
        for p, a in zip(self._params, arrays):
            if a.shape != p.shape:
                raise ValueError(f"{p.name}: shape {a.shape} does not match {p.shape}")
            p.data = np.array(a, dtype=p.data.dtype)

    def describe(self) -> dict:
        """Architecture description; dropout rate is a training knob and excluded."""
        cfg = {k: v for k, v in dataclasses.asdict(self.config).items() if k != "dropout_rate"}
        return {
            "arch": self.arch,
            "config": cfg,
            "params": [[p.name, list(p.shape)] for p in self._params],
        }

    def fingerprint(self) -> bytes:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    @property
    def input_shape(self) -> tuple[int, int, int]:
        raise NotImplementedError

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ad.ShapeError(
                f"{self.arch} expects input B x {' x '.join(map(str, self.input_shape))}, got {x.shape}"
            )

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        raise NotImplementedError

    def __call__(self, x, mode: str = "eval") -> Tensor:
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        x = ad.as_tensor(x)
        dtype = self._params[0].dtype
        if x.dtype != dtype:
            x = Tensor(x.data.astype(dtype))
        return self.forward(x, mode)
