"""Bottleneck adapters and the frozen/trainable parameter partition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .numerics import RegistryError, ShapeError, Tensor, add, linear, relu

POLICIES = ("frozen-with-adapters", "fully-unfrozen-no-adapters", "text-only-no-visual")

ADAPTER_TAG = ".adapter_"
VISUAL_PREFIX = "visual."


@dataclass
class BottleneckAdapter:
    """Residual ``x + up(relu(down(x)))`` with width ``d_model // reduction``."""

    down_w: Tensor
    down_b: Tensor
    up_w: Tensor
    up_b: Tensor

    @property
    def d_model(self) -> int:
        return self.down_w.shape[0]

    @property
    def width(self) -> int:
        return self.down_w.shape[1]

    @classmethod
    def init(cls, d_model: int, reduction: int, rng: np.random.Generator,
             scale: float = 0.02) -> "BottleneckAdapter":
        if reduction <= 0 or d_model % reduction:
            raise ValueError(f"reduction factor {reduction} must divide d_model={d_model}")
        width = d_model // reduction
        return cls(
            Tensor(rng.normal(0.0, scale, (d_model, width))),
            Tensor(np.zeros(width)),
            Tensor(np.zeros((width, d_model))),
            Tensor(np.zeros(d_model)),
        )

    def arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.down.w": self.down_w.data, f"{prefix}.down.b": self.down_b.data,
                f"{prefix}.up.w": self.up_w.data, f"{prefix}.up.b": self.up_b.data}


def adapter_forward(x: Tensor, adapter: BottleneckAdapter) -> Tensor:
    if x.shape[-1] != adapter.d_model:
        raise ShapeError(f"adapter expects last axis {adapter.d_model}, got input {x.shape}")
    h = relu(linear(x, adapter.down_w, adapter.down_b))
    return add(x, linear(h, adapter.up_w, adapter.up_b))


def adapter_width(d_model: int, reduction: int) -> int:
    if reduction <= 0 or d_model % reduction:
        raise ValueError(f"reduction factor {reduction} must divide d_model={d_model}")
    return d_model // reduction


class ParameterRegistry(Mapping[str, Tensor]):
    """Named parameters, each flagged frozen or trainable.

    Trainable tensors have ``requires_grad`` set; frozen ones never do, so
    they never enter a tape and never reach an optimiser.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, value, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise RegistryError(f"duplicate parameter {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.array(value, dtype=np.float64))
        t.name = name
        t.requires_grad = not frozen
        self._params[name] = t
        self._frozen[name] = frozen
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if not self._frozen[n]}

    def frozen(self) -> dict[str, Tensor]:
        return {n: t for n, t in self._params.items() if self._frozen[n]}

    def count(self, trainable: bool | None = None) -> int:
        return sum(t.data.size for n, t in self._params.items()
                   if trainable is None or self._frozen[n] != trainable)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load(self, arrays: Mapping[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name not in self._params:
                raise RegistryError(f"unknown parameter {name!r}")
            if arr.shape != self._params[name].shape:
                raise RegistryError(f"shape mismatch for {name}: {arr.shape} vs {self._params[name].shape}")
            self._params[name].data = np.array(arr, dtype=np.float64)

    def adapter(self, prefix: str) -> BottleneckAdapter | None:
        key = f"{prefix}.down.w"
        if key not in self._params:
            return None
        p = self._params
        return BottleneckAdapter(p[key], p[f"{prefix}.down.b"], p[f"{prefix}.up.w"], p[f"{prefix}.up.b"])


def is_adapter(name: str) -> bool:
    return ADAPTER_TAG in name


def is_visual(name: str) -> bool:
    return name.startswith(VISUAL_PREFIX)


def partition_parameters(model_params: Mapping[str, np.ndarray], policy: str = "frozen-with-adapters"
                         ) -> ParameterRegistry:
    """Build a registry from raw arrays under a freezing policy.

    ``frozen-with-adapters``: adapters and visual projections train, all else frozen.
    ``fully-unfrozen-no-adapters``: adapters dropped, everything trains.
    ``text-only-no-visual``: visual projections dropped, only adapters train.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown freeze policy {policy!r}; expected one of {POLICIES}")
    reg = ParameterRegistry()
    for name, arr in model_params.items():
        arr = np.array(arr, dtype=np.float64)
        if policy == "frozen-with-adapters":
            reg.add(name, arr, frozen=not (is_adapter(name) or is_visual(name)))
        elif policy == "fully-unfrozen-no-adapters":
            if not is_adapter(name):
                reg.add(name, arr, frozen=False)
        else:
            if not is_visual(name):
                reg.add(name, arr, frozen=not is_adapter(name))
    return reg
