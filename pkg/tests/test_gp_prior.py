import math

import numpy as np
import pytest
import torch

from lvmgp.diffcore import DTYPE, ConfigurationError, NumericError, make_generator
from lvmgp.gp_prior import (GpDraw, SEKernelSpec, build_joint_cov, build_kl,
                            deriv_cov, jittered_cholesky, path_jet,
                            reconstruct_kernel, sample_joint, sample_omega,
                            sample_path_jet, se_kernel)


def t(x):
    return torch.as_tensor(x, dtype=DTYPE)


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        SEKernelSpec(corr_length=-1.0)
    with pytest.raises(ConfigurationError):
        SEKernelSpec(corr_length=1.0, dim=3)
    with pytest.raises(ConfigurationError):
        build_kl(SEKernelSpec(1.0), 0)


def test_kernel_basic_properties():
    spec = SEKernelSpec(0.8)
    x = torch.linspace(-1, 1, 9, dtype=DTYPE)[:, None]
    k = se_kernel(spec.corr_length, x)
    assert torch.allclose(torch.diag(k), torch.ones(9, dtype=DTYPE))
    assert torch.allclose(k, k.T)
    assert float(k.max()) <= 1.0 + 1e-15


def test_kl_coefficients_match_formulas():
    # corr length 0.5 -> period 1, ratio 0.5
    kl = build_kl(SEKernelSpec(0.5), 8)
    ratio = 0.5
    expect_lead = math.sqrt(math.sqrt(math.pi) * ratio / 2.0)
    assert float(kl.coeffs[0]) == pytest.approx(expect_lead, rel=1e-12)
    expect_z2 = math.sqrt(math.sqrt(math.pi) * ratio) * math.exp(
        -(math.pi * ratio) ** 2 / 8.0)
    assert float(kl.coeffs[1]) == pytest.approx(expect_z2, rel=1e-12)
    # even index -> sine, odd index -> cosine
    assert bool(kl.is_sin[1]) and not bool(kl.is_sin[2])
    assert float(kl.freqs[1]) == pytest.approx(math.pi / 1.0)


def test_leading_term_is_constant_in_x():
    kl = build_kl(SEKernelSpec(0.5), 4)
    omega = torch.zeros(1, 1, 4, dtype=DTYPE)
    omega[0, 0, 0] = 1.0
    jet = path_jet(kl, omega, t([[0.1], [0.7], [-0.3]]))
    assert torch.allclose(jet.value[0, :, 0],
                          torch.full((3,), float(kl.coeffs[0]), dtype=DTYPE))
    assert torch.all(jet.grad == 0)


def test_zero_draw_gives_zero_path():
    kl = build_kl(SEKernelSpec(1.0), 16)
    draw = GpDraw(kl, torch.zeros(2, 16, dtype=DTYPE))
    jet = sample_path_jet(draw, t([[0.2], [0.5]]))
    assert torch.all(jet.value == 0) and torch.all(jet.hess == 0)


def test_single_cos_term_eigenfunction_identity():
    kl = build_kl(SEKernelSpec(0.5), 8)
    omega = torch.zeros(1, 8, dtype=DTYPE)
    omega[0, 2] = 1.3          # third term: cosine with frequency pi/period
    draw = GpDraw(kl, omega)
    jet = sample_path_jet(draw, t([[0.21], [0.43]]))
    freq = float(kl.freqs[2])
    assert torch.allclose(jet.hess[:, 0, :], -freq ** 2 * jet.value,
                          rtol=1e-12)


def test_path_reproducible_for_fixed_draw():
    kl = build_kl(SEKernelSpec(1.0), 32)
    draw = GpDraw(kl, sample_omega(kl, 1, make_generator(0, "p"))[0])
    x = t([[0.1], [0.6]])
    j1, j2 = sample_path_jet(draw, x), sample_path_jet(draw, x)
    assert torch.equal(j1.value, j2.value) and torch.equal(j1.hess, j2.hess)


def test_mercer_reconstruction_error_non_increasing():
    # The expansion converges to the periodic extension of the kernel, so the
    # error vs the true kernel decreases monotonically until it reaches the
    # aliasing floor exp(-(2*period - max|x-x'|)^2 / corr^2) and stays there.
    spec = SEKernelSpec(1.0)
    x = torch.linspace(-0.5, 0.5, 17, dtype=DTYPE)[:, None]
    exact = se_kernel(spec.corr_length, x)
    floor = math.exp(-(2 * 2.0 - 1.0) ** 2 / spec.corr_length ** 2)
    errs = []
    for n in (2, 4, 8, 16, 32, 64):
        recon = reconstruct_kernel(build_kl(spec, n), x)
        errs.append(float((recon - exact).abs().max()))
    for a, b in zip(errs, errs[1:]):
        assert b <= a + 1e-12 or b <= 1.5 * floor
    assert errs[-1] < 2e-4


def test_empirical_covariance_matches_kernel():
    spec = SEKernelSpec(1.0, dim=1, out_dim=20)
    kl = build_kl(spec, 64)
    x = torch.linspace(-1, 1, 21, dtype=DTYPE)[:, None]
    omega = sample_omega(kl, 10000, make_generator(5, "cov"))
    vals = path_jet(kl, omega, x).value
    emp = torch.einsum("jpz,jqz->pq", vals, vals) / (10000 * 20)
    err = float((emp - se_kernel(spec.corr_length, x)).abs().max())
    assert err < 0.05


def test_derivative_variance_matches_kernel_curvature():
    # Var(dz) = sigma^2/l^2, via 10^5 draws at two points
    spec = SEKernelSpec(1.0, out_dim=1)
    kl = build_kl(spec, 64)
    omega = sample_omega(kl, 100000, make_generator(6, "dv"))
    jet = path_jet(kl, omega, t([[0.1], [0.45]]))
    var = jet.grad[:, :, 0, 0].var(dim=0, correction=1)
    expect = 1.0 / spec.lengthscale ** 2
    assert float((var - expect).abs().max() / expect) < 0.05


def test_2d_tensor_basis_covariance_and_derivatives():
    spec = SEKernelSpec(1.0, dim=2, out_dim=10)
    kl = build_kl(spec, 12)
    pts = t([[0.1, -0.2], [0.4, 0.3], [-0.5, 0.5], [0.0, 0.0]])
    omega = sample_omega(kl, 20000, make_generator(7, "2d"))
    jet = path_jet(kl, omega, pts)
    vals = jet.value
    emp = torch.einsum("jpz,jqz->pq", vals, vals) / (20000 * 10)
    exact = se_kernel(spec.corr_length, pts)
    assert float((emp - exact).abs().max()) < 0.05
    # basis derivatives are exact for a fixed draw
    draw = GpDraw(kl, omega[0])
    h = 1e-5
    for k in range(2):
        dx = torch.zeros_like(pts)
        dx[:, k] = h
        vp = sample_path_jet(draw, pts + dx).value
        vm = sample_path_jet(draw, pts - dx).value
        v0 = sample_path_jet(draw, pts).value
        j = sample_path_jet(draw, pts)
        assert torch.allclose(j.grad[:, k], (vp - vm) / (2 * h), atol=1e-7)
        assert torch.allclose(j.hess[:, k], (vp - 2 * v0 + vm) / h ** 2, atol=1e-4)


# ---------------------------------------------------------------------------
# derivative-kernel blocks and joint sampling

def _fd_kernel_block(spec, a, b, x, y, h=1e-3):
    """Independent oracle: central finite differences of the kernel."""
    def k(xx, yy):
        return float(se_kernel(spec.corr_length, t([[xx]]), t([[yy]]))[0, 0])

    if (a, b) == (0, 0):
        return k(x, y)
    if (a, b) == (1, 0):
        return (k(x + h, y) - k(x - h, y)) / (2 * h)
    if (a, b) == (0, 1):
        return (k(x, y + h) - k(x, y - h)) / (2 * h)
    if (a, b) == (1, 1):
        return (k(x + h, y + h) - k(x + h, y - h)
                - k(x - h, y + h) + k(x - h, y - h)) / (4 * h * h)
    if (a, b) == (2, 0):
        return (k(x + h, y) - 2 * k(x, y) + k(x - h, y)) / h ** 2
    if (a, b) == (0, 2):
        return (k(x, y + h) - 2 * k(x, y) + k(x, y - h)) / h ** 2
    if (a, b) == (2, 2):
        vals = [[k(x + i * h, y + j * h) for j in (-1, 0, 1)] for i in (-1, 0, 1)]
        row = [(vals[0][j] - 2 * vals[1][j] + vals[2][j]) / h ** 2 for j in range(3)]
        return (row[0] - 2 * row[1] + row[2]) / h ** 2
    raise AssertionError


@pytest.mark.parametrize("a,b", [(0, 0), (1, 0), (0, 1), (1, 1), (2, 0),
                                 (0, 2), (2, 2)])
def test_deriv_cov_matches_finite_differences(a, b):
    spec = SEKernelSpec(0.9)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, y = rng.uniform(-1, 1, 2)
        ours = float(deriv_cov(spec, a, b, [x], [y])[0, 0])
        oracle = _fd_kernel_block(spec, a, b, x, y)
        assert ours == pytest.approx(oracle, rel=1e-4, abs=1e-6)


def test_deriv_cov_against_sympy():
    sympy = pytest.importorskip("sympy")
    xs, ys, ls = sympy.symbols("x y l", positive=True)
    kern = sympy.exp(-(xs - ys) ** 2 / (2 * ls ** 2))
    spec = SEKernelSpec(1.3)
    pts = [(-0.4, 0.2), (0.1, 0.1), (0.8, -0.6)]
    for a in range(3):
        for b in range(3):
            expr = sympy.diff(kern, xs, a, ys, b)
            fn = sympy.lambdify((xs, ys, ls), expr, "numpy")
            for x, y in pts:
                ours = float(deriv_cov(spec, a, b, [x], [y])[0, 0])
                assert ours == pytest.approx(
                    float(fn(x, y, spec.lengthscale)), rel=1e-10, abs=1e-12)


def test_joint_cov_single_point_blocks():
    spec = SEKernelSpec(1.0)
    cov = build_joint_cov(spec, [0.3], [0.3])
    sl = cov.slices()
    m = cov.matrix
    l2 = spec.lengthscale ** 2
    assert float(m[sl["value_f"], sl["value_f"]][0, 0]) == pytest.approx(1.0)
    # even kernel: value and first derivative uncorrelated at the same point
    assert float(m[sl["value_f"], sl["grad_f"]][0, 0]) == pytest.approx(0.0, abs=1e-12)
    assert float(m[sl["grad_f"], sl["grad_f"]][0, 0]) == pytest.approx(1.0 / l2)
    assert float(m[sl["hess_f"], sl["hess_f"]][0, 0]) == pytest.approx(3.0 / l2 ** 2)


def test_joint_sampling_variances():
    spec = SEKernelSpec(1.0)
    cov = build_joint_cov(spec, [0.1], [0.1, 0.4])
    samples = sample_joint(cov, make_generator(8, "joint"), 100000)
    sl = cov.slices()
    l2 = spec.lengthscale ** 2
    var = samples.var(dim=0, correction=1)
    assert float((var[sl["value_f"]] - 1.0).abs().max()) < 0.05
    assert float(((var[sl["grad_f"]] - 1 / l2) / (1 / l2)).abs().max()) < 0.05
    assert float(((var[sl["hess_f"]] - 3 / l2 ** 2) / (3 / l2 ** 2)).abs().max()) < 0.05


def test_far_separated_points_uncorrelated():
    spec = SEKernelSpec(0.3)
    cov = build_joint_cov(spec, [-10.0], [10.0])
    sl = cov.slices()
    assert float(cov.matrix[sl["value_u"], sl["value_f"]].abs().max()) < 1e-12
    n = 20000
    samples = sample_joint(cov, make_generator(9, "far"), n)
    corr = float(np.corrcoef(samples[:, 0].numpy(), samples[:, 1].numpy())[0, 1])
    assert abs(corr) < 3.0 / math.sqrt(n)


def test_joint_sampler_agrees_with_expansion_sampler():
    spec = SEKernelSpec(1.0, out_dim=1)
    kl = build_kl(spec, 64)
    pts = [0.15, 0.5]
    omega = sample_omega(kl, 100000, make_generator(10, "агree"))
    jets = path_jet(kl, omega, t([[p] for p in pts]))
    cov = build_joint_cov(spec, [], pts)
    samples = sample_joint(cov, make_generator(11, "agree2"), 100000)
    sl = cov.slices()
    pairs = [
        (jets.value[:, :, 0].var(0, correction=1), samples[:, sl["value_f"]].var(0, correction=1)),
        (jets.grad[:, :, 0, 0].var(0, correction=1), samples[:, sl["grad_f"]].var(0, correction=1)),
        (jets.hess[:, :, 0, 0].var(0, correction=1), samples[:, sl["hess_f"]].var(0, correction=1)),
    ]
    for kl_var, joint_var in pairs:
        ratio = (kl_var / joint_var).numpy()
        assert np.all(np.abs(ratio - 1.0) < 0.05)


def test_jitter_escalation_handles_duplicates():
    spec = SEKernelSpec(1.0)
    cov = build_joint_cov(spec, [0.2, 0.2], [0.2])
    assert cov.jitter > 0


def test_jittered_cholesky_failure_raises():
    with pytest.raises(NumericError):
        jittered_cholesky(-torch.eye(3, dtype=DTYPE))
