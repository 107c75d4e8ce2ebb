"""Squared-exponential GP prior with paths sampled jointly with their first
and second spatial derivatives.

Two samplers are provided.  The training path uses a truncated sine/cosine
eigenexpansion whose basis derivatives are analytic, so a sampled path is a
smooth deterministic function of its coefficient draw.  The validation path
samples function values and derivatives directly from the joint Gaussian
with derivative-kernel covariance blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .diffcore import (DTYPE, ConfigurationError, Jet, NumericError, as_tensor)


@dataclass(frozen=True)
class SEKernelSpec:
    """Isotropic squared-exponential kernel with unit signal variance.

    Parameterized by the correlation length ``corr_length``; the equivalent
    lengthscale of k(x,x') = exp(-|x-x'|^2 / (2 l^2)) is l = corr_length/sqrt(2).
    In 2D the kernel is the per-coordinate product, which gives the same
    isotropic exponential.
    """

    corr_length: float
    dim: int = 1
    out_dim: int = 1
    variance: float = 1.0

    def __post_init__(self):
        if not self.corr_length > 0:
            raise ConfigurationError("corr_length must be positive")
        if self.dim not in (1, 2):
            raise ConfigurationError("input dim must be 1 or 2")
        if self.out_dim < 1:
            raise ConfigurationError("out_dim must be >= 1")

    @property
    def lengthscale(self) -> float:
        return self.corr_length / math.sqrt(2.0)


def se_kernel(corr_length, x, y=None) -> torch.Tensor:
    """Kernel matrix exp(-||x-y||^2 / corr_length^2); accepts a tensor
    corr_length so the result stays differentiable in the hyperparameter."""
    x = as_tensor(x)
    y = x if y is None else as_tensor(y)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    sq = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    cl = corr_length if torch.is_tensor(corr_length) else as_tensor(corr_length)
    return torch.exp(-sq / cl ** 2)


# ---------------------------------------------------------------------------
# eigenexpansion sampler

@dataclass
class KLExpansion:
    """Truncated expansion of the prior on each input coordinate.

    Per dimension, term j (1-based) has frequency floor(j/2)*pi/period and
    coefficient (sqrt(pi)*L/2)^(1/2) for j=1, (sqrt(pi)*L)^(1/2) *
    exp(-(floor(j/2)*pi*L)^2/8) for j>1, with period = max(1, 2*corr_length)
    and L = corr_length/period.  Even j uses sine, odd j cosine.  In 2D the
    basis is the tensor product of the per-dimension bases.
    """

    spec: SEKernelSpec
    n_terms: int                 # per input dimension
    coeffs: torch.Tensor         # [n_terms]
    freqs: torch.Tensor          # [n_terms]
    is_sin: torch.Tensor         # bool [n_terms]

    @property
    def n_total(self) -> int:
        return self.n_terms ** self.spec.dim

    def omega_shape(self, n_draws: int) -> tuple[int, int, int]:
        return (n_draws, self.spec.out_dim, self.n_total)


def build_kl(spec: SEKernelSpec, n_terms: int, corr_length=None) -> KLExpansion:
    """Build the truncated expansion; pass a tensor ``corr_length`` to keep
    coefficients differentiable in a learnable correlation length."""
    if n_terms < 1:
        raise ConfigurationError("n_terms must be >= 1")
    cl = corr_length if corr_length is not None else spec.corr_length
    cl = cl if torch.is_tensor(cl) else as_tensor(float(cl))
    if not torch.all(cl > 0):
        raise ConfigurationError("corr_length must be positive")
    period = torch.clamp(2.0 * cl, min=1.0)
    ratio = cl / period
    j = torch.arange(1, n_terms + 1)
    k = torch.div(j, 2, rounding_mode="floor").to(DTYPE)
    lead = (math.sqrt(math.pi) * ratio / 2.0) ** 0.5
    tail = (math.sqrt(math.pi) * ratio) ** 0.5 * torch.exp(
        -(k * math.pi * ratio) ** 2 / 8.0)
    coeffs = torch.where(j == 1, lead, tail) * math.sqrt(spec.variance)
    freqs = k * math.pi / period
    is_sin = (j % 2 == 0)
    return KLExpansion(spec, n_terms, coeffs, freqs, is_sin)


def _basis_1d(kl: KLExpansion, x: torch.Tensor):
    """Scaled basis values and derivatives on one coordinate: [P, n_terms]."""
    arg = x[:, None] * kl.freqs[None, :]
    s, c = torch.sin(arg), torch.cos(arg)
    phi = torch.where(kl.is_sin, s, c)
    dphi = torch.where(kl.is_sin, c, -s) * kl.freqs
    d2phi = -phi * kl.freqs ** 2
    return kl.coeffs * phi, kl.coeffs * dphi, kl.coeffs * d2phi


@dataclass
class BasisProducts:
    """Coefficient-scaled basis matrices at fixed points: each [P, n_total]."""

    value: torch.Tensor
    grad: list[torch.Tensor]     # one per input coordinate
    hess: list[torch.Tensor]


def basis_products(kl: KLExpansion, x) -> BasisProducts:
    x = as_tensor(x)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[-1] != kl.spec.dim:
        raise ConfigurationError("point dim does not match kernel spec")
    if kl.spec.dim == 1:
        v, d, h = _basis_1d(kl, x[:, 0])
        return BasisProducts(v, [d], [h])
    v1, d1, h1 = _basis_1d(kl, x[:, 0])
    v2, d2, h2 = _basis_1d(kl, x[:, 1])
    pair = lambda a, b: (a[:, :, None] * b[:, None, :]).reshape(x.shape[0], -1)
    return BasisProducts(pair(v1, v2),
                         [pair(d1, v2), pair(v1, d2)],
                         [pair(h1, v2), pair(v1, h2)])


def _contract(mat: torch.Tensor, omega: torch.Tensor) -> torch.Tensor:
    """[P, n] x [J, dz, n] -> [J, P, dz]."""
    j, dz, n = omega.shape
    out = mat @ omega.reshape(j * dz, n).transpose(0, 1)
    return out.reshape(-1, j, dz).permute(1, 0, 2)


def products_jet(bp: BasisProducts, omega: torch.Tensor) -> Jet:
    value = _contract(bp.value, omega)
    grad = torch.stack([_contract(g, omega) for g in bp.grad], dim=-2)
    hess = torch.stack([_contract(h, omega) for h in bp.hess], dim=-2)
    return Jet(value, grad, hess)


def sample_omega(kl: KLExpansion, n_draws: int, gen: torch.Generator) -> torch.Tensor:
    return torch.randn(kl.omega_shape(n_draws), generator=gen, dtype=DTYPE)


@dataclass
class GpDraw:
    """One sampled path: a deterministic function of its coefficient draw."""

    expansion: KLExpansion
    omega: torch.Tensor          # [out_dim, n_total]


def sample_draw(kl: KLExpansion, gen: torch.Generator) -> GpDraw:
    return GpDraw(kl, sample_omega(kl, 1, gen)[0])


def sample_path_jet(draw: GpDraw, x) -> Jet:
    """Evaluate the path of one draw at points x; batch shape [P], width out_dim."""
    bp = basis_products(draw.expansion, x)
    jet = products_jet(bp, draw.omega[None])
    return Jet(jet.value[0], jet.grad[0], jet.hess[0])


def path_jet(kl: KLExpansion, omega: torch.Tensor, x) -> Jet:
    """Batched path jets for omega of shape [J, out_dim, n_total]."""
    return products_jet(basis_products(kl, x), omega)


def reconstruct_kernel(kl: KLExpansion, x, y=None) -> torch.Tensor:
    """Truncated reconstruction sum_n coef_n^2 q_n(x) q_n(y)."""
    bx = basis_products(kl, x).value
    by = bx if y is None else basis_products(kl, y).value
    return bx @ by.transpose(0, 1)


# ---------------------------------------------------------------------------
# joint sampling of values and derivatives (validation path, 1D)

def _hermite(r: int, t: torch.Tensor) -> torch.Tensor:
    if r == 0:
        return torch.ones_like(t)
    if r == 1:
        return t
    if r == 2:
        return t * t - 1.0
    if r == 3:
        return t ** 3 - 3.0 * t
    if r == 4:
        return t ** 4 - 6.0 * t * t + 3.0
    raise ConfigurationError("derivative order beyond 2 is not supported")


def deriv_cov(spec: SEKernelSpec, a: int, b: int, x, y) -> torch.Tensor:
    """Cov(d^a z(x), d^b z(y)) for the 1D kernel, via
    (-1)^a * l^-(a+b) * He_{a+b}(delta/l) * k(delta)."""
    if spec.dim != 1:
        raise ConfigurationError("joint derivative covariance is 1D only")
    x = as_tensor(x).reshape(-1)
    y = as_tensor(y).reshape(-1)
    l = spec.lengthscale
    delta = x[:, None] - y[None, :]
    base = spec.variance * torch.exp(-delta ** 2 / (2.0 * l * l))
    return (-1.0) ** a * l ** (-(a + b)) * _hermite(a + b, delta / l) * base


def jittered_cholesky(mat: torch.Tensor, start: float = 1e-10,
                      factor: float = 10.0, max_jitter: float = 1e-4):
    """Cholesky with escalating diagonal jitter; returns (L, jitter_used)."""
    eye = torch.eye(mat.shape[-1], dtype=mat.dtype)
    jitter = start
    while jitter <= max_jitter:
        try:
            return torch.linalg.cholesky(mat + jitter * eye), jitter
        except Exception:
            jitter *= factor
    raise NumericError(f"Cholesky failed up to jitter {max_jitter:g}")


@dataclass
class JointDerivCov:
    """Joint covariance over [z(X_u); z(X_f); dz(X_f); d2z(X_f)]."""

    spec: SEKernelSpec
    x_u: torch.Tensor
    x_f: torch.Tensor
    matrix: torch.Tensor
    chol: torch.Tensor
    jitter: float

    def slices(self) -> dict[str, slice]:
        nu, nf = len(self.x_u), len(self.x_f)
        return {
            "value_u": slice(0, nu),
            "value_f": slice(nu, nu + nf),
            "grad_f": slice(nu + nf, nu + 2 * nf),
            "hess_f": slice(nu + 2 * nf, nu + 3 * nf),
        }


def build_joint_cov(spec: SEKernelSpec, x_u, x_f) -> JointDerivCov:
    x_u = as_tensor(x_u).reshape(-1)
    x_f = as_tensor(x_f).reshape(-1)
    blocks_x = [(0, x_u), (0, x_f), (1, x_f), (2, x_f)]
    rows = []
    for a, xa in blocks_x:
        rows.append(torch.cat([deriv_cov(spec, a, b, xa, xb) for b, xb in blocks_x],
                              dim=1))
    mat = torch.cat(rows, dim=0)
    mat = 0.5 * (mat + mat.transpose(0, 1))
    chol, jitter = jittered_cholesky(mat)
    return JointDerivCov(spec, x_u, x_f, mat, chol, jitter)


def sample_joint(cov: JointDerivCov, gen: torch.Generator,
                 n_draws: int = 1) -> torch.Tensor:
    """Stacked samples [n_draws, N_u + 3*N_f] from the joint Gaussian."""
    z = torch.randn(n_draws, cov.matrix.shape[0], generator=gen, dtype=DTYPE)
    return z @ cov.chol.transpose(0, 1)
