import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepgp import autodiff as ad
from deepgp.gaussian import FullGaussian, gaussian_variational_expectation, kl_whitened
from deepgp.gradcheck import check_gradients
from deepgp.kernels import KernelParams, kernel_diag, kernel_matrix
from deepgp.layers import (
    BayesianDenseLayer,
    GaussianLikelihood,
    GaussianMarginals,
    GPLayer,
    LatentVariableLayer,
    gaussian_likelihood_loss,
    infer_output_width,
    layer_from_config,
)
from oracles import ZeroNoise


def gp_layer(d=2, w=2, m=5, seed=0, **kwargs):
    rng = np.random.default_rng(seed)
    layer = GPLayer(d, w, m, **kwargs)
    layer.params["Z"] = rng.uniform(-1, 1, (m, d))
    return layer


def randomise(layer, seed=1):
    rng = np.random.default_rng(seed)
    m = layer.num_inducing
    layer.params["q_mu"] = rng.standard_normal(layer.params["q_mu"].shape)
    layer.set_q_sqrt([np.tril(rng.uniform(-0.3, 0.3, (m, m)), -1) + np.diag(rng.uniform(0.3, 1.2, m)) for _ in range(layer.output_dim)])
    layer.params["log_lengthscales"] = rng.uniform(-0.3, 0.3, layer.input_dim)
    return layer


# -- GP layer ------------------------------------------------------------------


def test_gp_layer_at_prior_returns_prior_marginals_and_zero_kl():
    layer = gp_layer()
    layer.set_q_sqrt(np.stack([np.eye(5)] * 2))
    H = np.random.default_rng(2).standard_normal((7, 2))
    out = layer.forward(H, layer.nodes(), None, marginals=True)
    assert np.array_equal(out.value.mean.value, np.zeros((7, 2)))
    prior = kernel_diag(KernelParams("squared_exponential", 1.0, np.ones(2)), H).value
    np.testing.assert_allclose(out.value.var.value, np.tile(prior[:, None], (1, 2)), atol=1e-8)
    assert float(out.kl) == 0.0


def test_gp_layer_sample_with_zero_noise_equals_marginal_mean():
    layer = randomise(gp_layer(mean_function="linear"))
    layer.params["mean_weights"] = np.array([[1.0, 0.5], [0.0, -1.0]])
    H = np.random.default_rng(3).standard_normal((4, 2))
    marg = layer.forward(H, layer.nodes(), None, marginals=True)
    sample = layer.forward(H, layer.nodes(), ZeroNoise())
    assert np.array_equal(sample.value.value, marg.value.mean.value)


def test_gp_layer_kl_is_sum_of_per_output_kls():
    layer = randomise(gp_layer(w=3))
    roots = layer.q_sqrt_value()
    expected = sum(float(kl_whitened(FullGaussian(layer.params["q_mu"][:, i], roots[i]))) for i in range(3))
    out = layer.forward(np.zeros((1, 2)), layer.nodes(), None, marginals=True)
    assert float(out.kl) == pytest.approx(expected, rel=1e-14)


def test_gp_layer_marginals_consume_no_randomness():
    layer = randomise(gp_layer())
    rng = np.random.default_rng(4)
    state = rng.bit_generator.state
    layer.forward(np.zeros((3, 2)), layer.nodes(), rng, marginals=True)
    assert rng.bit_generator.state == state


def test_unwhitened_gp_layer_kl_zero_at_prior():
    layer = gp_layer(whitened=False, w=1, m=4)
    kp = KernelParams("squared_exponential", 1.0, np.ones(2))
    L = np.linalg.cholesky(kernel_matrix(kp, layer.params["Z"]).value + 1e-6 * np.eye(4))
    layer.set_q_sqrt(L[None])
    assert abs(float(layer.kl(layer.nodes()))) < 1e-10


def test_q_sqrt_parametrisation_roundtrip():
    layer = randomise(gp_layer())
    roots = layer.q_sqrt_value()
    assert np.all(np.triu(roots, 1) == 0)
    with pytest.raises(ValueError):
        layer.set_q_sqrt(-np.stack([np.eye(5)] * 2))


# -- latent variable layer -----------------------------------------------------


def test_latent_layer_widths_and_prior_kl():
    layer = LatentVariableLayer(3, 2, num_data=10)
    H = np.ones((4, 3))
    out = layer.forward(H, layer.nodes(), np.random.default_rng(0), indices=np.array([0, 3, 3, 9]))
    assert out.value.shape == (4, 5) and out.local
    assert np.array_equal(out.value.value[:, :3], H)
    assert float(out.kl) == 0.0
    assert layer.output_width(3) == 5


def test_latent_layer_kl_example():
    layer = LatentVariableLayer(1, 2, num_data=3)
    layer.params["means"][1] = [1.0, 0.0]
    out = layer.forward(np.zeros((1, 1)), layer.nodes(), np.random.default_rng(0), indices=np.array([1]))
    assert float(out.kl) == 0.5


def test_latent_layer_predict_mode_draws_from_prior():
    layer = LatentVariableLayer(1, 1, num_data=3)
    layer.params["means"][:] = 100.0
    out = layer.forward(np.zeros((20000, 1)), layer.nodes(), np.random.default_rng(1), training=False)
    w = out.value.value[:, 1]
    assert float(out.kl) == 0.0
    assert abs(w.mean()) < 4 / np.sqrt(20000) and abs(w.var() - 1) < 0.05


def test_latent_layer_errors():
    layer = LatentVariableLayer(1, 1, num_data=3)
    with pytest.raises(IndexError):
        layer.forward(np.zeros((1, 1)), layer.nodes(), np.random.default_rng(0), indices=np.array([3]))
    with pytest.raises(IndexError):
        layer.forward(np.zeros((1, 1)), layer.nodes(), np.random.default_rng(0), indices=np.array([-1]))
    with pytest.raises(ValueError):
        layer.forward(np.zeros((1, 1)), layer.nodes(), np.random.default_rng(0))


# -- Bayesian dense layer ------------------------------------------------------


def test_dense_layer_at_prior_has_zero_kl_and_random_weights():
    layer = BayesianDenseLayer(2, 3)
    H = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = layer.forward(H, layer.nodes(), np.random.default_rng(0))
    assert float(out.kl) == 0.0
    # With H = I the output rows are the sampled weight rows themselves.
    expected = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_allclose(out.value.value, expected, rtol=1e-15)


def test_dense_layer_zero_noise_is_deterministic():
    layer = BayesianDenseLayer(2, 2, activation="tanh")
    rng = np.random.default_rng(5)
    layer.params["weight_means"] = rng.standard_normal((2, 2))
    layer.params["bias"] = rng.standard_normal(2)
    H = rng.standard_normal((3, 2))
    out = layer.forward(H, layer.nodes(), ZeroNoise())
    np.testing.assert_allclose(out.value.value, np.tanh(H @ layer.params["weight_means"] + layer.params["bias"]), rtol=1e-15)


def test_dense_layer_kl_example():
    layer = BayesianDenseLayer(1, 1)
    layer.params["weight_means"][:] = 1.0
    assert float(layer.forward(np.zeros((1, 1)), layer.nodes(), ZeroNoise()).kl) == 0.5


def test_dense_layer_samples_one_weight_matrix_per_block():
    layer = BayesianDenseLayer(1, 1)
    out = layer.forward(np.ones((6, 1)), layer.nodes(), np.random.default_rng(0), num_samples=3)
    v = out.value.value[:, 0]
    assert v[0] == v[1] and v[2] == v[3] and v[4] == v[5]
    assert len({v[0], v[2], v[4]}) == 3
    with pytest.raises(ad.ShapeError):
        layer.forward(np.ones((5, 1)), layer.nodes(), np.random.default_rng(0), num_samples=3)


# -- likelihood ----------------------------------------------------------------


def test_likelihood_loss_examples():
    marg = GaussianMarginals(ad.constant([[0.3]]), ad.constant([[0.0]]))
    assert float(gaussian_likelihood_loss(marg, [[0.3]], 1.0)) == pytest.approx(0.91894, abs=1e-5)
    rng = np.random.default_rng(6)
    mean, var, Y = rng.standard_normal((4, 2)), rng.uniform(0.1, 1, (4, 2)), rng.standard_normal((4, 2))
    one = float(gaussian_likelihood_loss(GaussianMarginals(ad.constant(mean), ad.constant(var)), Y, 0.3))
    two = float(
        gaussian_likelihood_loss(
            GaussianMarginals(ad.constant(np.vstack([mean, mean])), ad.constant(np.vstack([var, var]))),
            np.vstack([Y, Y]),
            0.3,
        )
    )
    assert two == pytest.approx(2 * one, rel=1e-14)
    pointwise = sum(
        -float(gaussian_variational_expectation(Y[i, j], mean[i, j], var[i, j], 0.3)) for i in range(4) for j in range(2)
    )
    assert one == pytest.approx(pointwise, rel=1e-13)
    with pytest.raises(ad.ShapeError):
        gaussian_likelihood_loss(GaussianMarginals(ad.constant(mean), ad.constant(var)), Y[:, :1], 0.3)


def test_likelihood_noise_parametrisation():
    lik = GaussianLikelihood(0.25)
    assert lik.noise_var == pytest.approx(0.25, rel=1e-15)
    with pytest.raises(ValueError):
        GaussianLikelihood(0.0)


# -- stacks --------------------------------------------------------------------


layer_spec = st.one_of(
    st.tuples(st.just("gp"), st.integers(1, 3), st.integers(1, 4)),
    st.tuples(st.just("latent"), st.integers(1, 2), st.just(0)),
    st.tuples(st.just("dense"), st.integers(1, 3), st.sampled_from(["identity", "tanh"])),
)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.lists(layer_spec, min_size=1, max_size=4), st.integers(1, 3), st.integers(0, 1000))
def test_stack_shapes_follow_the_declared_inference(d, specs, num_samples, seed):
    n_data = 5
    width, layers = d, []
    for i, (kind, size, extra) in enumerate(specs):
        if kind == "gp":
            layers.append(GPLayer(width, size, extra, name=f"l{i}"))
        elif kind == "latent":
            layers.append(LatentVariableLayer(width, size, n_data, name=f"l{i}"))
        else:
            layers.append(BayesianDenseLayer(width, size, extra, name=f"l{i}"))
        width = layers[-1].output_width(width)
    rng = np.random.default_rng(seed)
    h = ad.constant(np.tile(rng.standard_normal((n_data, d)), (num_samples, 1)))
    indices = np.tile(np.arange(n_data), num_samples)
    for layer in layers:
        h = layer.forward(h, layer.nodes(), rng, indices=indices, num_samples=num_samples).value
    assert h.shape == (n_data * num_samples, infer_output_width(layers, d))


def test_layer_config_roundtrip():
    for layer in (gp_layer(mean_function="linear", kernel="matern52"), LatentVariableLayer(2, 1, 7), BayesianDenseLayer(2, 4, "tanh")):
        clone = layer_from_config(layer.config())
        assert clone.config() == layer.config()
        assert {k: v.shape for k, v in clone.params.items()} == {k: v.shape for k, v in layer.params.items()}
    with pytest.raises(ValueError):
        layer_from_config({"type": "conv"})


def test_width_mismatch_is_a_shape_error():
    with pytest.raises(ad.ShapeError):
        infer_output_width([GPLayer(2, 1, 3)], 3)
    with pytest.raises(ad.ShapeError):
        GPLayer(2, 1, 3).forward(np.zeros((4, 3)), GPLayer(2, 1, 3).nodes(), None, marginals=True)


# -- gradients -----------------------------------------------------------------


@pytest.mark.parametrize("whitened", [True, False])
def test_gp_layer_gradients(whitened):
    layer = randomise(gp_layer(m=4, mean_function="linear", kernel="matern52", whitened=whitened))
    layer.params["mean_weights"] = np.random.default_rng(7).standard_normal((2, 2))
    H = np.random.default_rng(8).standard_normal((3, 2))
    noise = np.random.default_rng(9).standard_normal((3, 2))

    class Fixed:
        def standard_normal(self, size=None):
            return noise

    def f(p):
        out = layer.forward(p["H"], p, Fixed())
        return ad.sum(ad.square(out.value)) + out.kl

    report = check_gradients(f, {**layer.params, "H": H})
    assert report.passed, report.summary()


def test_latent_and_dense_layer_gradients():
    latent = LatentVariableLayer(2, 2, num_data=4)
    dense = BayesianDenseLayer(4, 3, activation="tanh")
    rng = np.random.default_rng(10)
    latent.params = {"means": rng.standard_normal((4, 2)), "log_vars": rng.uniform(-1, 0, (4, 2))}
    dense.params = {
        "weight_means": rng.standard_normal((4, 3)),
        "weight_log_vars": rng.uniform(-2, 0, (4, 3)),
        "bias": rng.standard_normal(3),
    }
    H = rng.standard_normal((3, 2))
    indices = np.array([2, 0, 2])

    def f(p):
        noise = np.random.default_rng(11)
        a = latent.forward(H, {k: p[f"l/{k}"] for k in latent.params}, noise, indices=indices)
        b = dense.forward(a.value, {k: p[f"d/{k}"] for k in dense.params}, noise)
        return ad.sum(b.value) + a.kl + b.kl

    params = {f"l/{k}": v for k, v in latent.params.items()} | {f"d/{k}": v for k, v in dense.params.items()}
    report = check_gradients(f, params)
    assert report.passed, report.summary()


def test_likelihood_gradients():
    lik = GaussianLikelihood(0.3)
    rng = np.random.default_rng(12)
    Y = rng.standard_normal((5, 1))

    def f(p):
        return lik.loss(GaussianMarginals(p["mean"], p["var"]), Y, p)

    report = check_gradients(f, {"mean": rng.standard_normal((5, 1)), "var": rng.uniform(0.1, 1, (5, 1)), **lik.params})
    assert report.passed, report.summary()
