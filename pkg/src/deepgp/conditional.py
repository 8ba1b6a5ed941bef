"""Sparse variational posterior over a layer of GP outputs.

For inducing inputs Z with q(u) = N(m, S) per output, the predictive
marginals at new inputs are

    mean = k_u(x)^T K_uu^{-1} m
    cov  = k(x, x) + k_u(x)^T K_uu^{-1} (S - K_uu) K_uu^{-1} k_u(x)

In the whitened parametrisation u = L v with K_uu = L L^T and q(v) = N(m, S).
All outputs share Z and the kernel; each has its own m and S.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import autodiff as ad
from .gaussian import DEFAULT_JITTER, JitterPolicy, cholesky_with_jitter
from .kernels import KernelParams, kernel_diag, kernel_matrix

# Round-off tolerance for predictive variances; anything more negative is a bug.
VARIANCE_TOLERANCE = 1e-12


@dataclass
class InducingState:
    """Z (M x D), q_mu (M x W) and one M x M lower-triangular q_sqrt per output."""

    Z: ad.Node
    q_mu: ad.Node
    q_sqrt: Sequence[ad.Node]
    whitened: bool = True

    def __post_init__(self):
        self.Z = ad.as_node(self.Z)
        self.q_mu = ad.as_node(self.q_mu)
        self.q_sqrt = [ad.as_node(s) for s in self.q_sqrt]
        m = self.Z.shape[0]
        if m < 1 or self.q_mu.shape[0] != m or self.q_mu.ndim != 2:
            raise ad.ShapeError("InducingState", f"Z {self.Z.shape} and q_mu {self.q_mu.shape} disagree")
        if len(self.q_sqrt) != self.q_mu.shape[1] or any(s.shape != (m, m) for s in self.q_sqrt):
            raise ad.ShapeError("InducingState", f"need {self.q_mu.shape[1]} square roots of shape {(m, m)}")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def num_outputs(self) -> int:
        return self.q_mu.shape[1]


@dataclass
class ConditionalOutput:
    mean: ad.Node
    var: ad.Node | None = None
    cov: list[ad.Node] | None = None


class ConditionalError(ad.NotPositiveDefiniteError):
    pass


def _clamp_variance(var: ad.Node) -> ad.Node:
    lowest = var.value.min(initial=0.0)
    if lowest < -VARIANCE_TOLERANCE:
        raise FloatingPointError(f"negative predictive variance {lowest:.3e}")
    if lowest < 0:
        return ad.clamp_min(var, 0.0)
    return var


def conditional(
    Xnew,
    state: InducingState,
    kernel: KernelParams,
    full_cov: bool = False,
    jitter: JitterPolicy = DEFAULT_JITTER,
    name: str = "layer",
) -> ConditionalOutput:
    """Predictive mean (N x W) and variances (N x W) or W full N x N covariances.

    The mean function is not included.
    """
    Xnew = ad.as_node(Xnew)
    try:
        Kuu = kernel_matrix(kernel, state.Z)
        Lk, _ = cholesky_with_jitter(Kuu, jitter, what=f"K_uu of {name}")
    except ad.NotPositiveDefiniteError as exc:
        raise ConditionalError(f"{name}: {exc}") from None
    Kuf = kernel_matrix(kernel, state.Z, Xnew)
    A = ad.solve_triangular(Lk, Kuf, lower=True)
    if not state.whitened:
        # Project onto K_uu^{-1} k_u(x) for the unwhitened form.
        B = ad.solve_triangular(ad.transpose(Lk), A, lower=False)
    else:
        B = A

    mean = ad.matmul(ad.transpose(B), state.q_mu)

    if full_cov:
        Kff = kernel_matrix(kernel, Xnew)
        base = Kff - ad.matmul(ad.transpose(A), A)
        covs = []
        for w in range(state.num_outputs):
            LtB = ad.matmul(ad.transpose(state.q_sqrt[w]), B)
            covs.append(base + ad.matmul(ad.transpose(LtB), LtB))
        return ConditionalOutput(mean=mean, cov=covs)

    n = Xnew.shape[0]
    base = kernel_diag(kernel, Xnew) - ad.sum(ad.square(A), axis=0)
    columns = []
    for w in range(state.num_outputs):
        LtB = ad.matmul(ad.transpose(state.q_sqrt[w]), B)
        var_w = base + ad.sum(ad.square(LtB), axis=0)
        columns.append(ad.reshape(var_w, (n, 1)))
    var = columns[0] if len(columns) == 1 else ad.concat(columns, axis=1)
    return ConditionalOutput(mean=mean, var=_clamp_variance(var))
