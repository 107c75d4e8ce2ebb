import math

import numpy as np
import pytest
import torch

from lvmgp.diffcore import (DTYPE, Jet, MlpSpec, ParamStore, grad_params,
                            make_generator)
from lvmgp.encoder import (EncoderNets, confidence, encode_jet, encode_values,
                           encoder_init, feature, latent_dist,
                           latent_kl_correlated, latent_kl_independent)
from lvmgp.gp_prior import SEKernelSpec, build_kl, path_jet, sample_omega, se_kernel


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def make_encoder(dz=3, seed=0, conf_bias=None, feat_value=None):
    nets = EncoderNets(dz,
                       conf=MlpSpec(1, dz, width=8, depth=1, out="sigmoid"),
                       feat=MlpSpec(1, dz, width=8, depth=1))
    store = ParamStore()
    encoder_init(store, nets, make_generator(seed, "enc"))
    with torch.no_grad():
        if conf_bias is not None:
            store["enc.conf.W1"].zero_()
            store["enc.conf.b1"].fill_(conf_bias)
        if feat_value is not None:
            store["enc.feat.W1"].zero_()
            store["enc.feat.b1"].fill_(feat_value)
    return nets, store


def gp_jet_at(x, dz, seed=1, corr=1.0):
    kl = build_kl(SEKernelSpec(corr, 1, dz), 32)
    omega = sample_omega(kl, 1, make_generator(seed, "gp"))
    jet = path_jet(kl, omega, x)
    return Jet(jet.value[0], jet.grad[0], jet.hess[0])


def test_confident_encoder_ignores_prior():
    # logit +50 saturates the sigmoid to exactly 1.0 in float64
    nets, store = make_encoder(conf_bias=50.0)
    x = t([[0.2], [0.6]])
    prior = gp_jet_at(x, 3)
    jet = encode_jet(store, nets, x, prior)
    other = encode_jet(store, nets, x, gp_jet_at(x, 3, seed=99))
    assert torch.equal(jet.value, other.value)
    assert torch.equal(jet.hess, other.hess)
    feat = feature(store, nets, x)
    assert torch.allclose(jet.value, feat.detach(), atol=0)


def test_unconfident_encoder_passes_prior_through():
    nets, store = make_encoder(conf_bias=-50.0)
    x = t([[0.1]])
    prior = gp_jet_at(x, 3)
    jet = encode_jet(store, nets, x, prior)
    assert torch.allclose(jet.value, prior.value, atol=1e-18)
    assert torch.allclose(jet.grad, prior.grad, atol=1e-18)


def test_half_confidence_arithmetic():
    nets, store = make_encoder(dz=1, conf_bias=0.0, feat_value=2.0)
    x = t([[0.3]])
    prior = Jet(t([[1.0]]), t([[[0.7]]]), t([[[0.0]]]))
    jet = encode_jet(store, nets, x, prior)
    # m = 0.5 constant, feat = 2 constant: value 0.5*2 + 0.5*1 = 1.5
    assert torch.allclose(jet.value, t([[1.5]]), atol=1e-15)
    # grad = 0.5 * feat' + 0.5 * prior' = 0.5 * 0.7
    assert torch.allclose(jet.grad, t([[[0.35]]]), atol=1e-15)


def test_encode_values_matches_jet_values():
    nets, store = make_encoder(dz=4, seed=3)
    x = t([[0.25], [0.5]])
    prior = gp_jet_at(x, 4, seed=5)
    jet = encode_jet(store, nets, x, Jet(prior.value[None], prior.grad[None],
                                         prior.hess[None]))
    vals = encode_values(store, nets, x, prior.value[None])
    assert torch.allclose(jet.value, vals, atol=1e-15)


def test_latent_dist_std_is_one_minus_m():
    nets, store = make_encoder(dz=2, seed=4)
    x = t([[0.4], [0.9]])
    dist = latent_dist(store, nets, x)
    m = confidence(store, nets, x)
    assert torch.allclose(dist.std, 1.0 - m)
    assert torch.allclose(dist.mean, m * feature(store, nets, x))


def test_encode_jet_matches_finite_differences():
    nets, store = make_encoder(dz=3, seed=6)
    kl = build_kl(SEKernelSpec(0.8, 1, 3), 32)
    omega = sample_omega(kl, 2, make_generator(7, "fd"))
    x = t([[0.15]])

    def values(pts):
        prior = path_jet(kl, omega, pts)
        return encode_values(store, nets, pts, prior.value).detach()

    jet = encode_jet(store, nets, x, path_jet(kl, omega, x))
    h = 1e-5
    vp, vm, v0 = values(x + h), values(x - h), values(x)
    assert torch.allclose(jet.grad[:, :, 0], (vp - vm) / (2 * h), atol=1e-8)
    assert torch.allclose(jet.hess[:, :, 0], (vp - 2 * v0 + vm) / h ** 2, atol=1e-4)


# ---------------------------------------------------------------------------
# regularizers

def test_kl_zero_when_unconfident():
    nets, store = make_encoder(dz=3, conf_bias=-50.0)
    kl = latent_kl_independent(store, nets, t([[0.1], [0.5]]))
    assert abs(float(kl.detach())) < 1e-5


def test_kl_saturated_confidence_clamped_finite():
    nets, store = make_encoder(dz=2, conf_bias=50.0, feat_value=0.0)
    kl = latent_kl_independent(store, nets, t([[0.3]]))
    val = float(kl.detach())
    assert math.isfinite(val) and val > 20.0


def test_kl_closed_form_single_component():
    nets, store = make_encoder(dz=1, conf_bias=0.0, feat_value=2.0)
    kl = latent_kl_independent(store, nets, t([[0.0]]))
    assert float(kl.detach()) == pytest.approx(math.log(2.0) + 0.125, abs=1e-5)


def test_kl_matches_monte_carlo_log_ratio():
    # oracle: single-sample estimator of the divergence, averaged over draws
    nets, store = make_encoder(dz=3, seed=8)
    x = t([[0.2], [-0.4], [0.7]])
    m = confidence(store, nets, x).detach()
    mu = (m * feature(store, nets, x)).detach()
    std = 1.0 - m
    n = 100000
    gen = make_generator(9, "mc")
    z = mu[None] + std[None] * torch.randn(n, *mu.shape, generator=gen, dtype=DTYPE)
    logq = (-0.5 * math.log(2 * math.pi) - torch.log(std[None])
            - (z - mu[None]) ** 2 / (2 * std[None] ** 2)).sum(-1)
    loge = (-0.5 * math.log(2 * math.pi) - z ** 2 / 2).sum(-1)
    ratio = (logq - loge).mean(0)                    # per point
    se = (logq - loge).std(0) / math.sqrt(n)
    ours = float(latent_kl_independent(store, nets, x).detach())
    oracle = float(ratio.mean())
    tol = 3.0 * float((se / len(x)).norm())
    assert abs(ours - oracle) <= tol


def test_correlated_kl_zero_at_zero_confidence():
    # correlation length chosen so the kernel matrix is well conditioned and
    # the identity holds to solver roundoff
    nets, store = make_encoder(dz=2, conf_bias=-50.0)
    x = torch.linspace(-1.0, 1.0, 12, dtype=DTYPE)[:, None]
    k_mat = se_kernel(0.3, x)
    val = float(latent_kl_correlated(store, nets, x, k_mat).detach())
    assert abs(val) < 1e-9


def test_correlated_kl_identity_matrix_equals_mean_independent():
    nets, store = make_encoder(dz=3, seed=10)
    x = t([[0.1], [0.4], [-0.2], [0.6]])
    corr = latent_kl_correlated(store, nets, x, torch.eye(4, dtype=DTYPE))
    indep = latent_kl_independent(store, nets, x)
    assert float((corr - indep).abs().detach()) < 1e-10


def test_correlated_kl_single_point_unit_kernel():
    nets, store = make_encoder(dz=2, seed=11)
    x = t([[0.33]])
    corr = latent_kl_correlated(store, nets, x, torch.ones(1, 1, dtype=DTYPE))
    indep = latent_kl_independent(store, nets, x)
    assert float((corr - indep).abs().detach()) < 1e-10


def test_correlated_kl_saturated_confidence_finite():
    nets, store = make_encoder(dz=2, conf_bias=50.0)
    x = t([[0.1], [0.2]])
    val = float(latent_kl_correlated(store, nets, x, se_kernel(1.0, x)).detach())
    assert math.isfinite(val) and val > 5.0


@pytest.mark.parametrize("mode", ["independent", "correlated"])
def test_regularizer_gradients_match_fd(mode):
    nets, store = make_encoder(dz=2, seed=12)
    x = t([[0.2], [-0.3], [0.55]])
    k_mat = se_kernel(0.9, x)

    def loss_fn():
        if mode == "independent":
            return latent_kl_independent(store, nets, x)
        return latent_kl_correlated(store, nets, x, k_mat)

    grads = grad_params(loss_fn(), store)
    theta = store.flatten()
    rng = np.random.default_rng(13)
    v = rng.standard_normal(theta.size)
    v /= np.linalg.norm(v)
    gv = 0.0
    offset = 0
    for name in store.names():
        n = store[name].numel()
        gv += float((grads[name].reshape(-1)
                     * t(v[offset:offset + n])).sum())
        offset += n
    h = 1e-6
    store.load_flat(theta + h * v)
    lp = float(loss_fn().detach())
    store.load_flat(theta - h * v)
    lm = float(loss_fn().detach())
    store.load_flat(theta)
    assert gv == pytest.approx((lp - lm) / (2 * h), rel=1e-5, abs=1e-9)
