"""Stationary ARD kernels and mean functions.

Hyperparameters are held in constrained form here (variance, lengthscales);
layers store their logarithms and exponentiate on the tape.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

FAMILIES = ("squared_exponential", "matern52")

# sqrt is not differentiable at 0; coincident points are clamped here.
_MIN_SQUARED_DISTANCE = 1e-36


@dataclass
class KernelParams:
    family: str
    variance: ad.Node
    lengthscales: ad.Node

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; choose from {FAMILIES}")
        self.variance = ad.as_node(self.variance)
        self.lengthscales = ad.as_node(self.lengthscales)
        if self.lengthscales.ndim != 1:
            raise ad.ShapeError("KernelParams", "lengthscales must be a vector")
        if np.any(self.variance.value <= 0) or np.any(self.lengthscales.value <= 0):
            raise ValueError("kernel variance and lengthscales must be positive")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.shape[0]


def _check_inputs(params: KernelParams, *xs: ad.Node) -> None:
    for x in xs:
        if x.ndim != 2 or x.shape[1] != params.input_dim:
            raise ad.ShapeError(
                "kernel",
                f"inputs of shape {x.shape} do not match {params.input_dim} lengthscales",
            )


def scaled_squared_distance(params: KernelParams, x1, x2) -> ad.Node:
    """Pairwise ``sum_d ((x1_d - x2_d) / l_d)^2`` via the expanded square, clamped at 0."""
    x1, x2 = ad.as_node(x1), ad.as_node(x2)
    _check_inputs(params, x1, x2)
    a = x1 / params.lengthscales
    b = x2 / params.lengthscales
    sq_a = ad.reshape(ad.sum(ad.square(a), axis=1), (a.shape[0], 1))
    sq_b = ad.reshape(ad.sum(ad.square(b), axis=1), (1, b.shape[0]))
    ones_a = np.ones((1, b.shape[0]))
    ones_b = np.ones((a.shape[0], 1))
    r2 = sq_a @ ones_a + ones_b @ sq_b - 2.0 * (a @ b.T)
    return ad.clamp_min(r2, 0.0)


def _profile(family: str, r2: ad.Node) -> ad.Node:
    if family == "squared_exponential":
        return ad.exp(-0.5 * r2)
    s = math.sqrt(5.0) * ad.sqrt(ad.clamp_min(r2, _MIN_SQUARED_DISTANCE))
    return (1.0 + s + ad.square(s) / 3.0) * ad.exp(-s)


def kernel_matrix(params: KernelParams, x1, x2=None) -> ad.Node:
    """Covariance matrix between the rows of ``x1`` and ``x2``."""
    x1 = ad.as_node(x1)
    x2 = x1 if x2 is None else ad.as_node(x2)
    if x1.shape[0] == 0 or x2.shape[0] == 0:
        _check_inputs(params, x1, x2)
        return ad.constant(np.zeros((x1.shape[0], x2.shape[0])))
    r2 = scaled_squared_distance(params, x1, x2)
    return params.variance * _profile(params.family, r2)


def kernel_diag(params: KernelParams, x) -> ad.Node:
    """``k(x_i, x_i)`` for every row; constant for stationary kernels."""
    x = ad.as_node(x)
    _check_inputs(params, x)
    return params.variance * np.ones(x.shape[0])


@dataclass
class MeanFunction:
    """Zero mean, or ``X @ weights + bias``."""

    kind: str = "zero"
    weights: ad.Node | None = None
    bias: ad.Node | None = None
    output_dim: int | None = None

    def __post_init__(self):
        if self.kind == "zero":
            if self.weights is not None or self.bias is not None:
                raise ValueError("zero mean function takes no parameters")
        elif self.kind == "linear":
            if self.weights is None or self.bias is None:
                raise ValueError("linear mean function needs weights and bias")
            self.weights = ad.as_node(self.weights)
            self.bias = ad.as_node(self.bias)
            if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
                raise ad.ShapeError(
                    "MeanFunction",
                    f"weights {self.weights.shape} and bias {self.bias.shape} disagree",
                )
            self.output_dim = self.weights.shape[1]
        else:
            raise ValueError(f"unknown mean function {self.kind!r}")


def mean_apply(mf: MeanFunction, x, output_dim: int | None = None) -> ad.Node:
    x = ad.as_node(x)
    if mf.kind == "zero":
        width = output_dim if output_dim is not None else mf.output_dim
        if width is None:
            raise ValueError("zero mean function needs an output width")
        return ad.constant(np.zeros((x.shape[0], width)))
    if x.ndim != 2 or x.shape[1] != mf.weights.shape[0]:
        raise ad.ShapeError("mean_apply", f"inputs {x.shape} do not match weights {mf.weights.shape}")
    return x @ mf.weights + mf.bias
