"""Confidence-gated encoder: latent(x) = m(x) * feat(x) + (1 - m(x)) * prior(x).

m is a sigmoid-valued network, so for a fixed x the latent is Gaussian with
mean m*feat and componentwise standard deviation (1 - m).  Two divergence
penalties against the prior keep m from saturating: a pointwise closed-form
Gaussian KL, and a batch form that accounts for spatial correlation through
the prior kernel.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffcore import (ConfigurationError, Jet, MlpSpec, ParamStore,
                       as_tensor, mlp_forward, mlp_init, mlp_jet)
from .gp_prior import jittered_cholesky

SIGMA_FLOOR = 1e-6   # affine floor on (1 - m): keeps logs finite while
                     # preserving the penalty direction when m saturates


@dataclass(frozen=True)
class EncoderNets:
    latent_dim: int
    conf: MlpSpec     # confidence m(x), sigmoid output in [0,1]^latent_dim
    feat: MlpSpec     # deterministic feature feat(x)

    def __post_init__(self):
        if self.conf.out_dim != self.latent_dim or self.feat.out_dim != self.latent_dim:
            raise ConfigurationError("encoder output dims must equal latent_dim")
        if self.conf.out != "sigmoid":
            raise ConfigurationError("confidence net needs a sigmoid output")


def encoder_init(store: ParamStore, nets: EncoderNets, gen) -> None:
    mlp_init(store, "enc.conf", nets.conf, gen)
    mlp_init(store, "enc.feat", nets.feat, gen)


def confidence(store: ParamStore, nets: EncoderNets, x) -> torch.Tensor:
    return mlp_forward(store, "enc.conf", nets.conf, as_tensor(x))


def feature(store: ParamStore, nets: EncoderNets, x) -> torch.Tensor:
    return mlp_forward(store, "enc.feat", nets.feat, as_tensor(x))


def encode_values(store: ParamStore, nets: EncoderNets, x,
                  prior_values: torch.Tensor) -> torch.Tensor:
    """Latent values at x for prior path values of shape [J, P, dz]."""
    m = confidence(store, nets, x)
    return m * feature(store, nets, x) + (1.0 - m) * prior_values


def encode_jet(store: ParamStore, nets: EncoderNets, x, prior_jet: Jet) -> Jet:
    """Latent jet combining the two products through the Leibniz rule."""
    m = mlp_jet(store, "enc.conf", nets.conf, as_tensor(x))
    feat = mlp_jet(store, "enc.feat", nets.feat, as_tensor(x))
    one_minus_m = Jet(1.0 - m.value, -m.grad, -m.hess)
    return m * feat + one_minus_m * prior_jet


@dataclass
class LatentDist:
    """Pointwise latent distribution: mean m*feat, std (1 - m) per component."""

    mean: torch.Tensor
    std: torch.Tensor


def latent_dist(store: ParamStore, nets: EncoderNets, x) -> LatentDist:
    m = confidence(store, nets, x)
    return LatentDist(mean=m * feature(store, nets, x), std=1.0 - m)


def latent_kl_independent(store: ParamStore, nets: EncoderNets, x) -> torch.Tensor:
    """Exact KL(N(m*feat, diag(1-m)^2) || N(0, I)) averaged over the batch.

    Per component: -log(1-m) + ((1-m)^2 + (m*feat)^2 - 1)/2, summed over
    latent components; (1-m) is floored to keep the value finite when the
    confidence saturates.
    """
    m = confidence(store, nets, x)
    mu = m * feature(store, nets, x)
    std = SIGMA_FLOOR + (1.0 - m)
    kl = -torch.log(std) + (std * std + mu * mu - 1.0) / 2.0
    return kl.sum(-1).mean()


def latent_kl_correlated(store: ParamStore, nets: EncoderNets, x,
                         kernel_matrix: torch.Tensor) -> torch.Tensor:
    """Batch KL against the correlated prior N(0, K) at B points.

    Per latent component, with D = diag(1 - m(x_i)) and v = m*feat stacked
    over points:  (1/2B) [ -2 log det D - B + tr(K^{-1} D K D) + v^T K^{-1} v ],
    summed over components.  K is jittered as needed; the same jittered matrix
    is used on both sides so the value vanishes identically at m = 0.
    """
    x = as_tensor(x)
    b = x.shape[0]
    m = confidence(store, nets, x)                     # [B, dz]
    v = m * feature(store, nets, x)
    d = SIGMA_FLOOR + (1.0 - m)
    chol, jitter = jittered_cholesky(kernel_matrix)
    kj = kernel_matrix + jitter * torch.eye(b, dtype=kernel_matrix.dtype)
    kinv = torch.cholesky_inverse(chol)
    w = kinv * kj                                      # elementwise
    trace = torch.einsum("bz,bc,cz->z", d, w, d)
    solve = torch.cholesky_solve(v, chol)
    quad = (v * solve).sum(0)
    logdet = torch.log(d).sum(0)
    per_component = (-2.0 * logdet - b + trace + quad) / (2.0 * b)
    return per_component.sum()
