"""Deep GP composition F(x) = f_L(... f_1(x)), its ELBO, and prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import scipy.cluster.vq
from scipy.special import logsumexp

from . import autodiff as ad
from .gaussian import LOG_2PI
from .layers import (
    BayesianDenseLayer,
    GaussianLikelihood,
    GaussianMarginals,
    GPLayer,
    Layer,
    LatentVariableLayer,
    infer_output_width,
    layer_from_config,
)

# Upper bound on tiled rows pushed through the stack in one prediction pass.
MAX_PREDICT_ROWS = 200_000


class DGPModel:
    """An ordered stack of layers plus a Gaussian likelihood.

    Parameters are addressed as ``"<layer name>/<param>"`` and
    ``"likelihood/log_noise_var"``.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        likelihood: GaussianLikelihood,
        num_data: int,
        num_mc_samples: int = 1,
    ):
        if not layers:
            raise ValueError("a model needs at least one layer")
        if num_mc_samples < 1:
            raise ValueError("num_mc_samples must be >= 1")
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names) or "likelihood" in names:
            raise ValueError(f"layer names must be unique and not 'likelihood': {names}")
        self.layers = list(layers)
        self.likelihood = likelihood
        self.num_data = int(num_data)
        self.num_mc_samples = int(num_mc_samples)
        self.input_dim = layers[0].input_dim
        self.output_dim = infer_output_width(self.layers, self.input_dim)

    # -- parameters -----------------------------------------------------------

    def _owners(self):
        yield from self.layers
        yield self.likelihood

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{owner.name}/{k}": v for owner in self._owners() for k, v in owner.params.items()}

    def set_parameters(self, values: Mapping[str, np.ndarray]) -> None:
        owners = {owner.name: owner for owner in self._owners()}
        for key, value in values.items():
            owner_name, _, local = key.partition("/")
            owner = owners.get(owner_name)
            if owner is None or local not in owner.params:
                raise KeyError(f"unknown parameter {key!r}")
            current = owner.params[local]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != current.shape:
                raise ad.ShapeError("set_parameters", f"{key}: expected {current.shape}, got {value.shape}")
            owner.params[local] = value.copy()

    def split(self, p: Mapping[str, ad.Node] | None) -> dict[str, dict[str, ad.Node]]:
        """Group full-name nodes per owner, filling gaps with constants."""
        p = p or {}
        out = {}
        for owner in self._owners():
            own = {}
            for k, v in owner.params.items():
                node = p.get(f"{owner.name}/{k}")
                own[k] = node if node is not None else ad.constant(v)
            out[owner.name] = own
        return out

    @property
    def has_latent(self) -> bool:
        return any(isinstance(layer, LatentVariableLayer) for layer in self.layers)

    def config(self) -> dict[str, Any]:
        return {
            "layers": [layer.config() for layer in self.layers],
            "num_data": self.num_data,
            "num_mc_samples": self.num_mc_samples,
        }

    @classmethod
    def from_config(cls, config: Mapping[str, Any]) -> "DGPModel":
        layers = [layer_from_config(c) for c in config["layers"]]
        return cls(layers, GaussianLikelihood(), config["num_data"], config["num_mc_samples"])

    # -- propagation ----------------------------------------------------------

    def propagate(
        self,
        X,
        rng,
        p: Mapping[str, ad.Node] | None = None,
        *,
        training: bool,
        indices: np.ndarray | None = None,
        num_samples: int = 1,
    ):
        """Push rows through the stack; the last layer returns marginals.

        Returns (final marginals, per-layer outputs).
        """
        groups = self.split(p)
        h = ad.as_node(X)
        outputs = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            out = layer.forward(
                h,
                groups[layer.name],
                rng,
                training=training,
                indices=indices,
                num_samples=num_samples,
                marginals=i == last,
            )
            outputs.append(out)
            h = out.value
        final = outputs[-1].value
        if not isinstance(final, GaussianMarginals):
            final = GaussianMarginals(final, ad.constant(np.zeros(final.shape)))
        return final, outputs


@dataclass
class ElboTerms:
    elbo: ad.Node
    data_fit: ad.Node  # batch data-fit averaged over MC samples, before minibatch scaling
    kl_global: ad.Node
    kl_local: ad.Node  # per-datapoint KLs of the batch, before minibatch scaling
    scale: float


def elbo_terms(
    model: DGPModel,
    X,
    Y,
    rng,
    p: Mapping[str, ad.Node] | None = None,
    indices: np.ndarray | None = None,
) -> ElboTerms:
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    batch = X.shape[0]
    if batch == 0:
        raise ValueError("empty batch")
    if Y.shape != (batch, model.output_dim):
        raise ad.ShapeError("elbo", f"targets {Y.shape} do not match ({batch}, {model.output_dim})")
    if indices is None:
        if model.has_latent and batch != model.num_data:
            raise ValueError("minibatches need datapoint indices for latent-variable layers")
        indices = np.arange(batch)
    s = model.num_mc_samples
    tiled_x = np.tile(X, (s, 1))
    tiled_y = np.tile(Y, (s, 1))
    tiled_idx = np.tile(np.asarray(indices), s)
    groups = model.split(p)
    marginals, outputs = model.propagate(tiled_x, rng, p, training=True, indices=tiled_idx, num_samples=s)
    data_fit = -model.likelihood.loss(marginals, tiled_y, groups["likelihood"]) / float(s)
    kl_global = ad.constant(0.0)
    kl_local = ad.constant(0.0)
    for out in outputs:
        if out.local:
            kl_local = kl_local + out.kl / float(s)
        else:
            kl_global = kl_global + out.kl
    scale = model.num_data / batch
    value = scale * (data_fit - kl_local) - kl_global
    return ElboTerms(value, data_fit, kl_global, kl_local, scale)


def elbo(model: DGPModel, X, Y, rng, p=None, indices=None) -> ad.Node:
    """Stochastic estimate of the evidence lower bound for one (mini)batch.

    The data-fit uses the final layer's closed-form Gaussian expectation,
    averaged over ``model.num_mc_samples`` propagations and scaled by
    N / batch size; global KL terms enter unscaled.
    """
    return elbo_terms(model, X, Y, rng, p, indices).elbo


@dataclass
class PredictiveMixture:
    """Equal-weight Gaussian mixture over S propagated samples.

    ``mean``/``var`` are the mixture moments of y (noise included);
    ``sample_means``/``sample_vars`` are the S x N x P latent components.
    """

    mean: np.ndarray
    var: np.ndarray
    sample_means: np.ndarray
    sample_vars: np.ndarray
    noise_var: float


def predict(model: DGPModel, X, num_samples: int = 100, rng=None) -> PredictiveMixture:
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ad.ShapeError("predict", f"inputs {X.shape} do not have {model.input_dim} columns")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = X.shape[0]
    chunk = max(1, min(num_samples, MAX_PREDICT_ROWS // max(n, 1)))
    means, variances = [], []
    with ad.no_grad():
        done = 0
        while done < num_samples:
            s = min(chunk, num_samples - done)
            marginals, _ = model.propagate(np.tile(X, (s, 1)), rng, training=False, num_samples=s)
            means.append(marginals.mean.value.reshape(s, n, -1))
            variances.append(marginals.var.value.reshape(s, n, -1))
            done += s
    sample_means = np.concatenate(means, axis=0)
    sample_vars = np.concatenate(variances, axis=0)
    noise = model.likelihood.noise_var
    mix_mean = sample_means.mean(axis=0)
    mix_var = sample_vars.mean(axis=0) + ((sample_means - mix_mean) ** 2).mean(axis=0) + noise
    return PredictiveMixture(mix_mean, mix_var, sample_means, sample_vars, noise)


@dataclass(frozen=True)
class Standardizer:
    """Affine map between standardised and original units."""

    mean: np.ndarray
    std: np.ndarray

    def forward(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def inverse_var(self, var: np.ndarray) -> np.ndarray:
        return var * self.std**2


def mixture_metrics(mixture: PredictiveMixture, Y: np.ndarray, scaler: Standardizer | None = None) -> dict[str, float]:
    """RMSE of the mixture mean and NLPD of Y under the mixture.

    With ``scaler``, predictions are mapped back to original units and ``Y`` is
    taken to be in original units already.
    """
    Y = np.asarray(Y, dtype=np.float64)
    means = mixture.sample_means
    variances = mixture.sample_vars + mixture.noise_var
    mix_mean = mixture.mean
    if scaler is not None:
        means = scaler.inverse(means)
        variances = scaler.inverse_var(variances)
        mix_mean = scaler.inverse(mix_mean)
    if Y.shape != mix_mean.shape:
        raise ad.ShapeError("evaluate", f"targets {Y.shape} do not match predictions {mix_mean.shape}")
    rmse = float(np.sqrt(np.mean((mix_mean - Y) ** 2)))
    log_components = -0.5 * (LOG_2PI + np.log(variances) + (Y - means) ** 2 / variances)
    per_sample = log_components.sum(axis=2)  # S x N, outputs are independent given a sample
    log_density = logsumexp(per_sample, axis=0) - np.log(per_sample.shape[0])
    return {"rmse": rmse, "nlpd": float(-log_density.mean())}


def evaluate(model: DGPModel, X, Y, num_samples: int = 100, rng=None, scaler: Standardizer | None = None) -> dict[str, float]:
    return mixture_metrics(predict(model, X, num_samples, rng), Y, scaler)


# -- construction from data ---------------------------------------------------


def _projection(X: np.ndarray, width: int) -> np.ndarray:
    d = X.shape[1]
    if width == d:
        return np.eye(d)
    if width < d:
        _, _, vt = np.linalg.svd(X, full_matrices=False)
        return vt[:width].T.copy()
    return np.concatenate([np.eye(d), np.zeros((d, width - d))], axis=1)


def _inducing_inputs(H: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = H.shape[0]
    if n < m:
        extra = H[rng.integers(0, n, size=m - n)] + 1e-2 * rng.standard_normal((m - n, H.shape[1]))
        return np.concatenate([H, extra], axis=0)
    seed = int(rng.integers(0, 2**31 - 1))
    centroids, _ = scipy.cluster.vq.kmeans2(H, m, minit="++", seed=seed)
    return centroids


def build_model(
    X: np.ndarray,
    Y: np.ndarray,
    layer_specs: Iterable[Mapping[str, Any]],
    rng: np.random.Generator,
    num_mc_samples: int = 1,
) -> DGPModel:
    """Create and initialise a stack for data ``X`` (N x D) and ``Y`` (N x P).

    Each spec is a dict with ``type`` in {gp, latent, dense} plus the
    layer's own options; input widths are inferred and the final GP layer's
    output width defaults to (and must equal) P.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n, width = X.shape
    specs = [dict(s) for s in layer_specs]
    if not specs:
        raise ValueError("no layers specified")
    H = X
    layers: list[Layer] = []
    for i, spec in enumerate(specs):
        kind = spec.pop("type")
        final = i == len(specs) - 1
        name = spec.pop("name", f"{kind}{i}")
        if kind == "gp":
            out_dim = int(spec.pop("output_dim", Y.shape[1] if final else width))
            if final and out_dim != Y.shape[1]:
                raise ValueError(f"{name}: final output_dim {out_dim} does not match {Y.shape[1]} target column(s)")
            spec.setdefault("mean_function", "zero" if final else "linear")
            layer = GPLayer(width, out_dim, name=name, **spec)
            m = layer.num_inducing
            layer.params["Z"] = _inducing_inputs(H, m, rng)
            scale = 1.0 if final else 1e-5
            layer.set_q_sqrt(np.tile(scale * np.eye(m), (out_dim, 1, 1)))
            proj = _projection(H, out_dim)
            if layer.mean_function == "linear":
                layer.params["mean_weights"] = proj.copy()
            H = H @ proj
        elif kind == "latent":
            layer = LatentVariableLayer(width, int(spec.pop("latent_dim")), n, name=name, **spec)
            layer.params["log_vars"][:] = np.log(1e-2)
            H = np.concatenate([H, rng.standard_normal((n, layer.latent_dim))], axis=1)
        elif kind == "dense":
            layer = BayesianDenseLayer(width, int(spec.pop("output_dim")), name=name, **spec)
            limit = np.sqrt(6.0 / (layer.input_dim + layer.output_dim))
            layer.params["weight_means"] = rng.uniform(-limit, limit, (layer.input_dim, layer.output_dim))
            layer.params["weight_log_vars"][:] = np.log(1e-4)
            H = H @ layer.params["weight_means"]
            if layer.activation == "tanh":
                H = np.tanh(H)
        else:
            raise ValueError(f"unknown layer type {kind!r}")
        width = layer.output_width(width)
        layers.append(layer)
    if not isinstance(layers[-1], GPLayer):
        raise ValueError("the final layer must be a GP layer")
    y_var = float(np.mean(np.var(Y, axis=0))) if n > 1 else 1.0
    likelihood = GaussianLikelihood(0.01 * y_var if y_var > 0 else 0.01)
    return DGPModel(layers, likelihood, n, num_mc_samples)
