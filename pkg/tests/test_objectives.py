import math

import numpy as np
import pytest
import torch

from lvmgp.diffcore import (DTYPE, ConfigurationError, MlpSpec, ParamStore,
                            grad_params, make_generator)
from lvmgp.encoder import EncoderNets
from lvmgp.gp_prior import SEKernelSpec
from lvmgp.objectives import (DataBatch, LambdaDecoderSpec, LvmGpModel,
                              ResidualForm, canonical_order, gaussian_loglik,
                              prepare_dataset)
from lvmgp.operator_decoder import NoiseHead, QuadratureGrid
from lvmgp.problems import PROBLEM_NAMES, generate_dataset, make_problem
from lvmgp.trainer_cli import ExperimentConfig, build_model, uniform_points


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def force_confident(model, store):
    d = model.encoder_nets.conf.depth
    with torch.no_grad():
        store[f"enc.conf.W{d}"].zero_()
        store[f"enc.conf.b{d}"].fill_(50.0)


def tiny_model(problem="nlpoisson1d_inverse", **kw):
    over = dict(width=12, depth=2, kl_terms=16, quad_nodes=12, latent_dim=6,
                lam_width=4)
    over.update(kw)
    cfg = ExperimentConfig(problem=problem, **over).resolved()
    return build_model(cfg)


# ---------------------------------------------------------------------------
# log-likelihood terms

def test_loglik_exact_match_per_datum():
    val = gaussian_loglik(t([1.3]), t([[1.3]]), t(1.0))
    assert float(val) == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-14)


def test_loglik_sigma_doubling_identity():
    # doubling sigma at matched residual r changes the term by
    # -ln 2 + r^2 (1/(2 s^2) - 1/(8 s^2))
    r, s = 0.7, 0.25
    a = gaussian_loglik(t([r]), t([[0.0]]), t(s))
    b = gaussian_loglik(t([r]), t([[0.0]]), t(2 * s))
    expect = -math.log(2.0) + r * r * (1 / (2 * s * s) - 1 / (8 * s * s))
    assert float(b - a) == pytest.approx(expect, rel=1e-12)


def test_canonical_order_invariant_to_permutation():
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (10, 2))
    y = rng.uniform(-1, 1, 10)
    perm = rng.permutation(10)
    a = canonical_order(x, y)
    b = canonical_order(x[perm], y[perm])
    assert np.array_equal(x[a], x[perm][b])
    assert np.array_equal(y[a], y[perm][b])


def test_permuting_sensors_leaves_loss_bits_identical():
    spec, model = tiny_model()
    store = model.init_params(0)
    ds = generate_dataset(spec, 3, "0.01")
    omega = model.sample_draws(2, make_generator(1, "om"))
    lb1 = model.data_nll_terms(store, prepare_dataset(ds), omega)
    rng = np.random.default_rng(5)
    for name, (x, y) in list(ds.fields.items()):
        perm = rng.permutation(len(y))
        ds.fields[name] = (x[perm], y[perm])
    lb2 = model.data_nll_terms(store, prepare_dataset(ds), omega)
    for key, v1 in lb1.data_terms().items():
        v2 = lb2.data_terms()[key]
        assert float(v1.detach()) == float(v2.detach())


def test_confident_model_identical_across_draws():
    spec, model = tiny_model()
    store = model.init_params(0)
    force_confident(model, store)
    data = prepare_dataset(generate_dataset(spec, 0, "0.01"))
    lb1 = model.data_nll_terms(store, data, model.sample_draws(1, make_generator(2, "a")))
    lb100 = model.data_nll_terms(store, data, model.sample_draws(100, make_generator(3, "b")))
    for key, v1 in lb1.data_terms().items():
        assert float(v1.detach()) == pytest.approx(
            float(lb100.data_terms()[key].detach()), rel=1e-13)


def test_beta_zero_total_is_sum_of_data_terms():
    spec, model = tiny_model()
    store = model.init_params(0)
    data = prepare_dataset(generate_dataset(spec, 0, "0.01"))
    omega = model.sample_draws(2, make_generator(4, "c"))
    reg_x = uniform_points(spec.domain, 8, make_generator(5, "d"))
    lb = model.total_objective(store, data, omega, reg_x, beta=0.0)
    total = sum(float(v.detach()) for v in lb.data_terms().values())
    assert float(lb.total.detach()) == pytest.approx(total, rel=1e-14)
    assert lb.reg is not None  # still tracked for logging


def test_no_lambda_observations_term_absent():
    spec, model = tiny_model()
    store = model.init_params(0)
    data = prepare_dataset(generate_dataset(spec, 0, "0.01"))
    omega = model.sample_draws(2, make_generator(6, "e"))
    lb = model.data_nll_terms(store, data, omega)
    assert lb.data_lam is None
    assert set(lb.data_terms()) == {"u", "f", "b"}


def test_lambda_observation_term_present():
    spec, model = tiny_model()
    model.noise_heads["lam"] = NoiseHead("lam", "scalar", 0.05)
    store = model.init_params(0)
    ds = generate_dataset(spec, 0, "0.01")
    ds.fields["lam"] = (np.array([[0.0], [0.2]]), np.array([0.69, 0.71]))
    data = prepare_dataset(ds)
    omega = model.sample_draws(2, make_generator(7, "f"))
    lb = model.data_nll_terms(store, data, omega)
    assert lb.data_lam is not None and math.isfinite(float(lb.data_lam.detach()))


def test_field_mode_lambda_decoder():
    spec, model = tiny_model()
    model.lam = LambdaDecoderSpec("field", MlpSpec(6, 1, 4, 1, "tanh"), n_out=1)
    store = model.init_params(0)
    kl = model.expansion(store)
    omega = model.sample_draws(3, make_generator(8, "g"))
    x = t([[0.1], [0.5]])
    vals = model.lambda_values(store, kl, omega, x=x)
    assert vals.shape == (3, 2, 1)
    jet = model.lambda_field_jet(store, kl, omega, x)
    assert jet.value.shape == (3, 2, 1)


def test_lambda_constant_mode_one_scalar_per_draw():
    spec, model = tiny_model()
    store = model.init_params(0)
    kl = model.expansion(store)
    omega = model.sample_draws(5, make_generator(9, "h"))
    vals = model.lambda_values(store, kl, omega)
    assert vals.shape == (5, 1)


def test_full_objective_gradient_matches_directional_fd():
    # desk-scale variant of the gradient-fidelity acceptance check
    spec, model = tiny_model("poisson1d", width=10, kl_terms=12, quad_nodes=10,
                             latent_dim=4)
    store = model.init_params(1)
    data = prepare_dataset(generate_dataset(spec, 1, "0.01"))
    omega = model.sample_draws(3, make_generator(10, "i"))
    reg_x = uniform_points(spec.domain, 8, make_generator(11, "j"))

    def loss():
        return -model.total_objective(store, data, omega, reg_x).total

    grads = grad_params(loss(), store)
    theta = store.flatten()
    rng = np.random.default_rng(12)
    for _ in range(3):
        v = rng.standard_normal(theta.size)
        v /= np.linalg.norm(v)
        gv, off = 0.0, 0
        for name in store.names():
            n = store[name].numel()
            gv += float((grads[name].reshape(-1) * t(v[off:off + n])).sum())
            off += n
        h = 1e-6
        store.load_flat(theta + h * v)
        lp = float(loss().detach())
        store.load_flat(theta - h * v)
        lm = float(loss().detach())
        store.load_flat(theta)
        fd = (lp - lm) / (2 * h)
        assert abs(gv - fd) / max(abs(fd), 1e-10) < 1e-4


def test_predict_stats_confident_model_zero_epistemic():
    spec, model = tiny_model()
    store = model.init_params(0)
    force_confident(model, store)
    x = np.linspace(-0.7, 0.7, 11)[:, None]
    stats = model.predict_stats(store, x, 16, make_generator(13, "k"))
    _, epi, total = stats["u"]
    assert float(epi.abs().max()) == 0.0
    from lvmgp.operator_decoder import noise_sigma
    sigma_u = float(noise_sigma(store, model.noise_heads["u"]).detach())
    assert torch.allclose(total, torch.full_like(total, sigma_u))


def test_predict_stats_needs_two_draws():
    spec, model = tiny_model()
    store = model.init_params(0)
    with pytest.raises(ConfigurationError):
        model.predict_stats(store, np.zeros((1, 1)), 1, make_generator(0, "l"))


def test_deeponet_variant_behind_same_interface():
    spec, model = tiny_model(decoder="deeponet", deeponet_anchors=8,
                             deeponet_features=8)
    store = model.init_params(0)
    data = prepare_dataset(generate_dataset(spec, 0, "0.01"))
    omega = model.sample_draws(2, make_generator(14, "m"))
    lb = model.data_nll_terms(store, data, omega)
    assert all(math.isfinite(float(v.detach())) for v in lb.data_terms().values())
    force_confident(model, store)
    x = np.linspace(-0.7, 0.7, 7)[:, None]
    stats = model.predict_stats(store, x, 8, make_generator(15, "n"))
    assert float(stats["u"][1].abs().max()) == 0.0


def test_model_configuration_errors():
    spec = make_problem("poisson1d")
    nets = EncoderNets(4, MlpSpec(1, 4, 8, 1, out="sigmoid"), MlpSpec(1, 4, 8, 1))
    grid = QuadratureGrid.build(spec.domain, (8,))
    kernel = SEKernelSpec(1.0, 1, 4)
    with pytest.raises(ConfigurationError):
        LvmGpModel(residual=spec.residual, domain=spec.domain, encoder_nets=nets,
                   grid=grid, kernel_spec=kernel, kl_terms=8, decoder="banana")
    with pytest.raises(ConfigurationError):
        LvmGpModel(residual=spec.residual, domain=spec.domain, encoder_nets=nets,
                   grid=grid, kernel_spec=kernel, kl_terms=8,
                   corr_length_learnable=True, reg_mode="independent")
    with pytest.raises(ConfigurationError):
        LambdaDecoderSpec("constant", head=None)
