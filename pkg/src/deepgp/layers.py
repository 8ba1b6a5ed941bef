"""Stackable Bayesian layers.

A layer owns its trainable parameters as plain float64 arrays in
``layer.params`` (unconstrained: positive quantities are stored as logs).
``forward`` receives those parameters as tape nodes so that the caller
controls what gets differentiated, and returns the layer's value together
with its KL contribution to the objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping

import numpy as np

from . import autodiff as ad
from .conditional import InducingState, conditional
from .gaussian import (
    FullGaussian,
    cholesky_with_jitter,
    gaussian_variational_expectation,
    kl_diagonal,
    kl_general,
    kl_whitened,
    reparam_sample,
)
from .kernels import FAMILIES, KernelParams, MeanFunction, kernel_matrix, mean_apply


@dataclass
class GaussianMarginals:
    """Per-point means and variances, both N x W."""

    mean: ad.Node
    var: ad.Node


@dataclass
class LayerOutput:
    value: ad.Node | GaussianMarginals
    kl: ad.Node
    # True when ``kl`` is a sum over the presented datapoints rather than a global term.
    local: bool = False


class Layer:
    kind: str = ""

    def __init__(self, name: str):
        self.name = name
        self.params: dict[str, np.ndarray] = {}

    def output_width(self, input_width: int) -> int:
        raise NotImplementedError

    def config(self) -> dict[str, Any]:
        raise NotImplementedError

    def forward(
        self,
        h: ad.Node,
        p: Mapping[str, ad.Node],
        rng,
        *,
        training: bool = True,
        indices: np.ndarray | None = None,
        num_samples: int = 1,
        marginals: bool = False,
    ) -> LayerOutput:
        raise NotImplementedError

    def nodes(self) -> dict[str, ad.Node]:
        """Current parameters as constants, for evaluation outside training."""
        return {k: ad.constant(v) for k, v in self.params.items()}

    def _check_input(self, h: ad.Node, width: int) -> None:
        if h.ndim != 2 or h.shape[1] != width:
            raise ad.ShapeError(self.name, f"expected inputs with {width} columns, got {h.shape}")


def _strict_lower_mask(m: int) -> np.ndarray:
    return np.tril(np.ones((m, m)), k=-1)


class GPLayer(Layer):
    """One multi-output sparse variational GP: f(h) for W outputs sharing Z and the kernel.

    The variational square roots are stored as a strictly lower part
    (``q_sqrt_lower``, W x M x M, upper entries unused) and a log diagonal
    (``q_sqrt_log_diag``, W x M), which keeps every diagonal positive.
    """

    kind = "gp"

    def __init__(
        self,
        input_dim: int,
        output_dim: int,
        num_inducing: int,
        kernel: str = "squared_exponential",
        mean_function: str = "zero",
        whitened: bool = True,
        name: str = "gp",
    ):
        super().__init__(name)
        if min(input_dim, output_dim, num_inducing) < 1:
            raise ValueError(f"{name}: input_dim, output_dim and num_inducing must be >= 1")
        if kernel not in FAMILIES:
            raise ValueError(f"{name}: unknown kernel {kernel!r}")
        if mean_function not in ("zero", "linear"):
            raise ValueError(f"{name}: unknown mean function {mean_function!r}")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.num_inducing = num_inducing
        self.kernel = kernel
        self.mean_function = mean_function
        self.whitened = whitened
        d, w, m = input_dim, output_dim, num_inducing
        self.params = {
            "Z": np.zeros((m, d)),
            "q_mu": np.zeros((m, w)),
            "q_sqrt_lower": np.zeros((w, m, m)),
            "q_sqrt_log_diag": np.zeros((w, m)),
            "log_variance": np.zeros(()),
            "log_lengthscales": np.zeros(d),
        }
        if mean_function == "linear":
            self.params["mean_weights"] = np.zeros((d, w))
            self.params["mean_bias"] = np.zeros(w)
        self._mask = _strict_lower_mask(m)
        self._eye = np.eye(m)

    def output_width(self, input_width: int) -> int:
        if input_width != self.input_dim:
            raise ad.ShapeError(self.name, f"expects {self.input_dim} inputs, got {input_width}")
        return self.output_dim

    def config(self) -> dict[str, Any]:
        return {
            "type": self.kind,
            "name": self.name,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "num_inducing": self.num_inducing,
            "kernel": self.kernel,
            "mean_function": self.mean_function,
            "whitened": self.whitened,
        }

    def set_q_sqrt(self, q_sqrt: np.ndarray) -> None:
        """Store W lower-triangular square roots with positive diagonals."""
        q_sqrt = np.asarray(q_sqrt, dtype=np.float64)
        diag = np.diagonal(q_sqrt, axis1=1, axis2=2)
        if np.any(diag <= 0):
            raise ValueError(f"{self.name}: q_sqrt diagonals must be positive")
        self.params["q_sqrt_lower"] = q_sqrt * self._mask
        self.params["q_sqrt_log_diag"] = np.log(diag)

    def q_sqrt_value(self) -> np.ndarray:
        return self.params["q_sqrt_lower"] * self._mask + self._eye * np.exp(self.params["q_sqrt_log_diag"])[:, None, :]

    def kernel_params(self, p: Mapping[str, ad.Node]) -> KernelParams:
        return KernelParams(self.kernel, ad.exp(p["log_variance"]), ad.exp(p["log_lengthscales"]))

    def mean_fn(self, p: Mapping[str, ad.Node]) -> MeanFunction:
        if self.mean_function == "linear":
            return MeanFunction("linear", p["mean_weights"], p["mean_bias"])
        return MeanFunction("zero", output_dim=self.output_dim)

    def inducing_state(self, p: Mapping[str, ad.Node]) -> InducingState:
        m, w = self.num_inducing, self.output_dim
        roots = []
        for i in range(w):
            lower = ad.reshape(ad.slice_axis(p["q_sqrt_lower"], i, i + 1, axis=0), (m, m))
            log_diag = ad.reshape(ad.slice_axis(p["q_sqrt_log_diag"], i, i + 1, axis=0), (m,))
            roots.append(lower * self._mask + self._eye * ad.exp(log_diag))
        return InducingState(p["Z"], p["q_mu"], roots, whitened=self.whitened)

    def kl(self, p: Mapping[str, ad.Node], state: InducingState | None = None, kernel: KernelParams | None = None) -> ad.Node:
        state = state or self.inducing_state(p)
        prior_chol = None
        if not self.whitened:
            kernel = kernel or self.kernel_params(p)
            prior_chol, _ = cholesky_with_jitter(kernel_matrix(kernel, state.Z), what=f"K_uu of {self.name}")
        total = None
        m = self.num_inducing
        for i in range(self.output_dim):
            q = FullGaussian(ad.reshape(ad.slice_axis(state.q_mu, i, i + 1, axis=1), (m,)), state.q_sqrt[i])
            term = kl_whitened(q) if self.whitened else kl_general(q, prior_chol)
            total = term if total is None else total + term
        return total

    def forward(self, h, p, rng, *, training=True, indices=None, num_samples=1, marginals=False) -> LayerOutput:
        h = ad.as_node(h)
        self._check_input(h, self.input_dim)
        kernel = self.kernel_params(p)
        state = self.inducing_state(p)
        cond = conditional(h, state, kernel, name=self.name)
        mean = cond.mean + mean_apply(self.mean_fn(p), h, self.output_dim)
        kl = self.kl(p, state, kernel)
        if marginals:
            return LayerOutput(GaussianMarginals(mean, cond.var), kl)
        noise = rng.standard_normal(mean.shape)
        return LayerOutput(reparam_sample(mean, cond.var, noise), kl)


class LatentVariableLayer(Layer):
    """Concatenates a per-datapoint latent vector w_i onto the inputs.

    Training draws w_i from its own diagonal Gaussian posterior (one set of
    parameters per datapoint); prediction draws w from the N(0, I) prior.
    """

    kind = "latent"

    def __init__(self, input_dim: int, latent_dim: int, num_data: int, name: str = "latent"):
        super().__init__(name)
        if min(input_dim, latent_dim, num_data) < 1:
            raise ValueError(f"{name}: input_dim, latent_dim and num_data must be >= 1")
        self.input_dim = input_dim
        self.latent_dim = latent_dim
        self.num_data = num_data
        self.params = {
            "means": np.zeros((num_data, latent_dim)),
            "log_vars": np.zeros((num_data, latent_dim)),
        }

    def output_width(self, input_width: int) -> int:
        if input_width != self.input_dim:
            raise ad.ShapeError(self.name, f"expects {self.input_dim} inputs, got {input_width}")
        return self.input_dim + self.latent_dim

    def config(self) -> dict[str, Any]:
        return {
            "type": self.kind,
            "name": self.name,
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "num_data": self.num_data,
        }

    def forward(self, h, p, rng, *, training=True, indices=None, num_samples=1, marginals=False) -> LayerOutput:
        h = ad.as_node(h)
        self._check_input(h, self.input_dim)
        n = h.shape[0]
        noise = rng.standard_normal((n, self.latent_dim))
        if not training:
            return LayerOutput(ad.concat([h, noise], axis=1), ad.constant(0.0))
        if indices is None:
            raise ValueError(f"{self.name}: training mode needs datapoint indices")
        indices = np.asarray(indices)
        if indices.shape != (n,):
            raise ad.ShapeError(self.name, f"need one index per row, got {indices.shape} for {n} rows")
        if indices.size and (indices.min() < 0 or indices.max() >= self.num_data):
            raise IndexError(f"{self.name}: datapoint index out of range [0, {self.num_data})")
        select = np.zeros((n, self.num_data))
        select[np.arange(n), indices] = 1.0
        means = select @ p["means"]
        log_vars = select @ p["log_vars"]
        w = reparam_sample(means, ad.exp(log_vars), noise)
        return LayerOutput(ad.concat([h, w], axis=1), kl_diagonal(means, log_vars), local=True)


class BayesianDenseLayer(Layer):
    """Dense layer with a factorised Gaussian posterior over weights and a N(0, 1) prior.

    One weight matrix is sampled per propagated sample; rows are grouped into
    ``num_samples`` contiguous blocks.
    """

    kind = "dense"
    ACTIVATIONS = ("identity", "tanh")

    def __init__(self, input_dim: int, output_dim: int, activation: str = "identity", name: str = "dense"):
        super().__init__(name)
        if min(input_dim, output_dim) < 1:
            raise ValueError(f"{name}: input_dim and output_dim must be >= 1")
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"{name}: unknown activation {activation!r}")
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.activation = activation
        self.params = {
            "weight_means": np.zeros((input_dim, output_dim)),
            "weight_log_vars": np.zeros((input_dim, output_dim)),
            "bias": np.zeros(output_dim),
        }

    def output_width(self, input_width: int) -> int:
        if input_width != self.input_dim:
            raise ad.ShapeError(self.name, f"expects {self.input_dim} inputs, got {input_width}")
        return self.output_dim

    def config(self) -> dict[str, Any]:
        return {
            "type": self.kind,
            "name": self.name,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "activation": self.activation,
        }

    def forward(self, h, p, rng, *, training=True, indices=None, num_samples=1, marginals=False) -> LayerOutput:
        h = ad.as_node(h)
        self._check_input(h, self.input_dim)
        n = h.shape[0]
        if n % num_samples:
            raise ad.ShapeError(self.name, f"{n} rows do not split into {num_samples} samples")
        block = n // num_samples
        variances = ad.exp(p["weight_log_vars"])
        outputs = []
        for s in range(num_samples):
            noise = rng.standard_normal((self.input_dim, self.output_dim))
            weights = reparam_sample(p["weight_means"], variances, noise)
            rows = h if num_samples == 1 else ad.slice_axis(h, s * block, (s + 1) * block, axis=0)
            out = rows @ weights + p["bias"]
            outputs.append(ad.tanh(out) if self.activation == "tanh" else out)
        value = outputs[0] if num_samples == 1 else ad.concat(outputs, axis=0)
        return LayerOutput(value, kl_diagonal(p["weight_means"], p["weight_log_vars"]))


class GaussianLikelihood:
    """y = f + e, e ~ N(0, noise_var), with ``log_noise_var`` trainable."""

    name = "likelihood"

    def __init__(self, noise_var: float = 1.0):
        if noise_var <= 0:
            raise ValueError("noise variance must be positive")
        self.params = {"log_noise_var": np.asarray(np.log(noise_var))}

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.params["log_noise_var"]))

    def nodes(self) -> dict[str, ad.Node]:
        return {k: ad.constant(v) for k, v in self.params.items()}

    def loss(self, marginals: GaussianMarginals, Y, p: Mapping[str, ad.Node] | None = None) -> ad.Node:
        """Negative data-fit: -sum of closed-form expected log densities."""
        p = p or self.nodes()
        return gaussian_likelihood_loss(marginals, Y, ad.exp(p["log_noise_var"]))


def gaussian_likelihood_loss(marginals: GaussianMarginals, Y, noise_var) -> ad.Node:
    Y = ad.as_node(Y)
    if Y.shape != marginals.mean.shape:
        raise ad.ShapeError("likelihood", f"targets {Y.shape} do not match predictions {marginals.mean.shape}")
    return -ad.sum(gaussian_variational_expectation(Y, marginals.mean, marginals.var, noise_var))


LAYER_TYPES = {cls.kind: cls for cls in (GPLayer, LatentVariableLayer, BayesianDenseLayer)}


def layer_from_config(config: Mapping[str, Any]) -> Layer:
    config = dict(config)
    kind = config.pop("type")
    try:
        cls = LAYER_TYPES[kind]
    except KeyError:
        raise ValueError(f"unknown layer type {kind!r}") from None
    return cls(**config)


def infer_output_width(layers, input_width: int) -> int:
    """Output width of a stack, from the layer configurations alone."""
    for layer in layers:
        input_width = layer.output_width(input_width)
    return input_width
