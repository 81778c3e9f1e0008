"""Shared-MLP layers built on :mod:`pointseg.tensor`."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ArgumentError, ShapeError
from .tensor import Tensor

LEAKY_SLOPE = 0.2
ACTIVATIONS = ("leaky_relu", "none")


@dataclass
class MlpParams:
    weight: Tensor  # d_in x d_out
    bias: Optional[Tensor] = None  # d_out

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def tensors(self):
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"bias shape {self.bias.shape} vs weight {self.weight.shape}")
        if not np.isfinite(self.weight.data).all() or (
            self.bias is not None and not np.isfinite(self.bias.data).all()
        ):
            raise ArgumentError("MLP parameters must be finite")


def init_mlp(rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True,
             dtype=np.float64) -> MlpParams:
    """Uniform(-1/sqrt(d_in), 1/sqrt(d_in)) weights, zero bias."""
    bound = 1.0 / np.sqrt(d_in)
    w = Tensor(rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None
    return MlpParams(w, b)


def shared_mlp(x, p: MlpParams, activation: str = "leaky_relu", slope: float = LEAKY_SLOPE) -> Tensor:
    """Affine map over the last axis, shared by every leading index, then activation."""
    if activation not in ACTIVATIONS:
        raise ArgumentError(f"unknown activation {activation!r}")
    y = T.affine(x, p.weight, p.bias)
    if activation == "leaky_relu":
        y = T.leaky_relu(y, slope)
    return y
