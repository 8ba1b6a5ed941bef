"""Small model builders shared by the model, training and acceptance tests."""

import numpy as np

from deepgp import autodiff as ad
from deepgp.layers import GaussianLikelihood, GPLayer
from deepgp.model import DGPModel, build_model, elbo
from deepgp.training import make_rng

LATENT_DGP_SPECS = [
    {"type": "latent", "latent_dim": 1},
    {"type": "gp", "output_dim": 2, "num_inducing": 4},
    {"type": "gp", "num_inducing": 4},
]


def single_gp_model(X, Y, lengthscale=0.5, variance=1.0, noise_var=0.05):
    """One whitened GP layer with Z = X and fixed hyperparameters."""
    n, d = X.shape
    layer = GPLayer(d, Y.shape[1], n, name="gp")
    layer.params["Z"] = X.copy()
    layer.params["log_lengthscales"] = np.full(d, np.log(lengthscale))
    layer.params["log_variance"] = np.asarray(np.log(variance))
    layer.set_q_sqrt(np.tile(np.eye(n), (Y.shape[1], 1, 1)))
    return DGPModel([layer], GaussianLikelihood(noise_var), n)


def latent_dgp(seed=0, n=16, d=2, perturb=0.1):
    """Latent layer + GP (W=2) + GP (W=1) on random data, parameters nudged off their init."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, d))
    Y = np.sin(X.sum(1, keepdims=True)) + 0.1 * rng.standard_normal((n, 1))
    model = build_model(X, Y, LATENT_DGP_SPECS, make_rng(seed, "init"))
    if perturb:
        model.set_parameters({k: v + perturb * rng.standard_normal(v.shape) for k, v in model.parameters().items()})
    return model, X, Y


def negative_elbo_fn(model, X, Y, seed=0):
    """-ELBO as a function of named parameter nodes, with the MC noise fixed by ``seed``."""

    def objective(p):
        return -elbo(model, X, Y, make_rng(seed, "sampling"), p)

    return objective


def elbo_value(model, X, Y, rng, indices=None):
    with ad.no_grad():
        return float(elbo(model, X, Y, rng, indices=indices).value)
