"""Integral-operator decoder mapping the latent field to the predicted mean.

Each inner layer applies act(W z(x) + b + sum_q w_hat_q(x) V z(x_q)) where
w_hat are self-normalized Gaussian attention weights over a fixed quadrature
grid; the final layer is affine.  Spatial jets propagate through the layers
analytically (the attention weights are a softmax over smooth logits), so
residual derivatives are exact.  A branch/trunk head is available as an
alternative decoder behind the same interface.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffcore import (DTYPE, ConfigurationError, Jet, MlpSpec, ParamStore,
                       STD_GROUP, ScalarJet, activation_triple, as_tensor,
                       mlp_forward, mlp_init, mlp_jet)

WIDTH_RAW_MIN = 1e-3
WIDTH_RAW_MAX = math.pi / 2.0 - 1e-3


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform tensor grid with trapezoidal weights; sum(weights) = |domain|."""

    nodes: torch.Tensor       # [Q, d]
    weights: torch.Tensor     # [Q]
    counts: tuple[int, ...]

    @staticmethod
    def build(domain, counts) -> "QuadratureGrid":
        domain = [tuple(map(float, ab)) for ab in domain]
        counts = tuple(int(c) for c in counts)
        if len(domain) != len(counts) or any(c < 2 for c in counts):
            raise ConfigurationError("need >= 2 quadrature nodes per dimension")
        axes, axis_w = [], []
        for (lo, hi), n in zip(domain, counts):
            axes.append(torch.linspace(lo, hi, n, dtype=DTYPE))
            w = torch.full((n,), (hi - lo) / (n - 1), dtype=DTYPE)
            w[0] *= 0.5
            w[-1] *= 0.5
            axis_w.append(w)
        if len(axes) == 1:
            nodes = axes[0][:, None]
            weights = axis_w[0]
        else:
            g1, g2 = torch.meshgrid(axes[0], axes[1], indexing="ij")
            nodes = torch.stack([g1.reshape(-1), g2.reshape(-1)], dim=-1)
            weights = (axis_w[0][:, None] * axis_w[1][None, :]).reshape(-1)
        return QuadratureGrid(nodes, weights, counts)

    @property
    def log_weights(self) -> torch.Tensor:
        return torch.log(self.weights)


def attention_weights(alpha, targets: torch.Tensor, grid: QuadratureGrid,
                      derivs: bool = False):
    """Self-normalized Gaussian weights w_hat_q(x) and, optionally, their
    first and second derivatives in x.

    The weights are softmax over logits l_q = log w_q - alpha ||x - x_q||^2,
    so with g_q = dl_q/dx_k:  dw_q = w_q (g_q - mean), and because d2l_q/dx_k^2
    is the same constant for all q:  d2w_q = w_q ((g_q - mean)^2 - var),
    with mean/var taken under the weights themselves.
    """
    targets = as_tensor(targets)
    if targets.shape[-1] != grid.nodes.shape[-1]:
        raise ConfigurationError("target dim does not match grid dim")
    if grid.nodes.shape[0] == 0:
        raise ConfigurationError("empty quadrature grid")
    diff = targets[:, None, :] - grid.nodes[None, :, :]        # [P, Q, d]
    logits = grid.log_weights[None, :] - alpha * (diff ** 2).sum(-1)
    w = torch.softmax(logits, dim=-1)                          # [P, Q]
    if not derivs:
        return w, None, None
    g = -2.0 * alpha * diff                                    # [P, Q, d]
    g_mean = torch.einsum("pq,pqd->pd", w, g)
    gc = g - g_mean[:, None, :]
    g_var = torch.einsum("pq,pqd->pd", w, gc * gc)
    dw = w[:, :, None] * gc
    d2w = w[:, :, None] * (gc * gc - g_var[:, None, :])
    return w, dw, d2w


def _mix(mat: torch.Tensor, stack: torch.Tensor) -> torch.Tensor:
    """[P, Q] x [J, Q, n] -> [J, P, n]."""
    j, q, n = stack.shape
    out = mat @ stack.permute(1, 0, 2).reshape(q, j * n)
    return out.reshape(-1, j, n).permute(1, 0, 2)


@dataclass(frozen=True)
class IntegralDecoderSpec:
    latent_dim: int
    n_layers: int = 4          # input + (n_layers - 2) integral layers + affine
    activation: str = "mish"

    def __post_init__(self):
        if self.n_layers < 2:
            raise ConfigurationError("decoder needs at least 2 layers")

    def inner_layers(self) -> range:
        return range(2, self.n_layers)


def integral_decoder_init(store: ParamStore, name: str,
                          spec: IntegralDecoderSpec, gen) -> None:
    dz = spec.latent_dim
    scale = 1.0 / math.sqrt(dz)
    for i in spec.inner_layers():
        store.add(f"{name}.lin{i}", torch.randn(dz, dz, generator=gen, dtype=DTYPE) * scale)
        store.add(f"{name}.bias{i}", torch.zeros(dz, dtype=DTYPE))
        store.add(f"{name}.mix{i}", torch.randn(dz, dz, generator=gen, dtype=DTYPE) * scale)
        store.add(f"{name}.width_raw{i}", torch.tensor(math.pi / 4.0, dtype=DTYPE))
    store.add(f"{name}.lin_out", torch.randn(1, dz, generator=gen, dtype=DTYPE) * scale)
    store.add(f"{name}.bias_out", torch.zeros(1, dtype=DTYPE))


def project_widths(store: ParamStore, name: str, spec: IntegralDecoderSpec) -> None:
    """Clamp the raw kernel widths back into (0, pi/2) after an update."""
    with torch.no_grad():
        for i in spec.inner_layers():
            store[f"{name}.width_raw{i}"].clamp_(WIDTH_RAW_MIN, WIDTH_RAW_MAX)


def layer_forward_jet(store: ParamStore, name: str, i: int,
                      spec: IntegralDecoderSpec, grid: QuadratureGrid,
                      node_values: torch.Tensor,
                      targets=None, target_jet: Jet | None = None,
                      target_values: torch.Tensor | None = None):
    """One inner layer applied to node values [J, Q, dz] and, optionally,
    to target jets or target values.  Returns the updated tuple
    (node_values, target_jet, target_values); all inputs are pre-layer."""
    lin = store[f"{name}.lin{i}"]
    bias = store[f"{name}.bias{i}"]
    mix = store[f"{name}.mix{i}"]
    alpha = torch.tan(store[f"{name}.width_raw{i}"])
    mixed = node_values @ mix.transpose(0, 1)                  # [J, Q, dz]

    new_jet = None
    new_tv = None
    if target_jet is not None:
        w, dw, d2w = attention_weights(alpha, targets, grid, derivs=True)
        pre = Jet(
            target_jet.value @ lin.transpose(0, 1) + bias + _mix(w, mixed),
            target_jet.grad @ lin.transpose(0, 1)
            + torch.stack([_mix(dw[:, :, k], mixed) for k in range(dw.shape[-1])], dim=-2),
            target_jet.hess @ lin.transpose(0, 1)
            + torch.stack([_mix(d2w[:, :, k], mixed) for k in range(d2w.shape[-1])], dim=-2),
        )
        new_jet = pre.chain(spec.activation)
    if target_values is not None:
        w, _, _ = attention_weights(alpha, targets, grid)
        pre_v = target_values @ lin.transpose(0, 1) + bias + _mix(w, mixed)
        new_tv = activation_triple(spec.activation, pre_v)[0]

    w_nodes, _, _ = attention_weights(alpha, grid.nodes, grid)
    pre_nodes = node_values @ lin.transpose(0, 1) + bias + _mix(w_nodes, mixed)
    new_nodes = activation_triple(spec.activation, pre_nodes)[0]
    return new_nodes, new_jet, new_tv


def decode_features_jet(store: ParamStore, name: str, spec: IntegralDecoderSpec,
                        grid: QuadratureGrid, node_latents: torch.Tensor,
                        targets, target_latent_jet: Jet):
    """Run the inner layers; returns (node features [J, Q, dz], target
    feature jet).  The solution readout and any unknown-coefficient head both
    consume these shared features."""
    nodes_v = node_latents
    jet = target_latent_jet
    for i in spec.inner_layers():
        nodes_v, jet, _ = layer_forward_jet(
            store, name, i, spec, grid, nodes_v, targets=targets, target_jet=jet)
    return nodes_v, jet


def decode_features_values(store: ParamStore, name: str,
                           spec: IntegralDecoderSpec, grid: QuadratureGrid,
                           node_latents: torch.Tensor, targets=None,
                           target_latents: torch.Tensor | None = None):
    """Value-only inner layers; returns (node features, target features)."""
    nodes_v = node_latents
    tv = target_latents
    for i in spec.inner_layers():
        nodes_v, _, tv = layer_forward_jet(
            store, name, i, spec, grid, nodes_v, targets=targets,
            target_values=tv)
    return nodes_v, tv


def readout_values(store: ParamStore, name: str, features: torch.Tensor) -> torch.Tensor:
    out = features @ store[f"{name}.lin_out"].transpose(0, 1) + store[f"{name}.bias_out"]
    return out[..., 0]


def readout_jet(store: ParamStore, name: str, feature_jet: Jet) -> ScalarJet:
    out = feature_jet.linear(store[f"{name}.lin_out"], store[f"{name}.bias_out"])
    return ScalarJet.from_jet(out)


def decode_mean_jet(store: ParamStore, name: str, spec: IntegralDecoderSpec,
                    grid: QuadratureGrid, node_latents: torch.Tensor,
                    targets, target_latent_jet: Jet) -> ScalarJet:
    """Run the stack on latent jets at targets; returns the scalar mean jet
    with value [J, P], grad/hess [J, P, d]."""
    _, jet = decode_features_jet(store, name, spec, grid, node_latents,
                                 targets, target_latent_jet)
    return readout_jet(store, name, jet)


def decode_mean_values(store: ParamStore, name: str, spec: IntegralDecoderSpec,
                       grid: QuadratureGrid, node_latents: torch.Tensor,
                       targets, target_latents: torch.Tensor) -> torch.Tensor:
    """Value-only decode at targets; returns [J, P]."""
    _, tv = decode_features_values(store, name, spec, grid, node_latents,
                                   targets, target_latents)
    return readout_values(store, name, tv)


# ---------------------------------------------------------------------------
# branch/trunk decoder variant

@dataclass(frozen=True)
class DeepOnetSpec:
    latent_dim: int
    anchors: torch.Tensor          # [p, d] fixed evaluation points
    feat_dim: int = 64
    width: int = 64
    depth: int = 3
    activation: str = "mish"

    @property
    def n_anchors(self) -> int:
        return self.anchors.shape[0]

    def branch_spec(self) -> MlpSpec:
        return MlpSpec(self.n_anchors * self.latent_dim, self.feat_dim,
                       self.width, self.depth, self.activation)

    def trunk_spec(self) -> MlpSpec:
        return MlpSpec(self.latent_dim, self.feat_dim,
                       self.width, self.depth, self.activation)

    @staticmethod
    def uniform_anchors(domain, n: int) -> torch.Tensor:
        if len(domain) == 1:
            lo, hi = domain[0]
            return torch.linspace(float(lo), float(hi), n, dtype=DTYPE)[:, None]
        side = max(2, int(round(math.sqrt(n))))
        g = [torch.linspace(float(lo), float(hi), side, dtype=DTYPE)
             for lo, hi in domain]
        g1, g2 = torch.meshgrid(g[0], g[1], indexing="ij")
        return torch.stack([g1.reshape(-1), g2.reshape(-1)], dim=-1)


def deeponet_init(store: ParamStore, name: str, spec: DeepOnetSpec, gen) -> None:
    mlp_init(store, f"{name}.branch", spec.branch_spec(), gen)
    mlp_init(store, f"{name}.trunk", spec.trunk_spec(), gen)


def decode_deeponet_values(store: ParamStore, name: str, spec: DeepOnetSpec,
                           anchor_latents: torch.Tensor,
                           target_latents: torch.Tensor) -> torch.Tensor:
    """anchor_latents [J, p, dz], target_latents [J, P, dz] -> [J, P]."""
    j = anchor_latents.shape[0]
    b = mlp_forward(store, f"{name}.branch", spec.branch_spec(),
                    anchor_latents.reshape(j, -1))             # [J, h]
    t = mlp_forward(store, f"{name}.trunk", spec.trunk_spec(), target_latents)
    return torch.einsum("jh,jph->jp", b, t)


def decode_deeponet_jet(store: ParamStore, name: str, spec: DeepOnetSpec,
                        anchor_latents: torch.Tensor,
                        target_latent_jet: Jet) -> ScalarJet:
    """Spatial jet flows only through the trunk; anchors are constants in x."""
    j = anchor_latents.shape[0]
    b = mlp_forward(store, f"{name}.branch", spec.branch_spec(),
                    anchor_latents.reshape(j, -1))             # [J, h]
    t = mlp_jet(store, f"{name}.trunk", spec.trunk_spec(), target_latent_jet)
    b_exp = b[:, None, :]
    return ScalarJet((b_exp * t.value).sum(-1),
                     (b_exp[:, :, None, :] * t.grad).sum(-1),
                     (b_exp[:, :, None, :] * t.hess).sum(-1))


# ---------------------------------------------------------------------------
# observation noise

def softplus_inverse(y: float) -> float:
    if y <= 0:
        raise ConfigurationError("noise scale must be positive")
    return y + math.log(-math.expm1(-y))


@dataclass(frozen=True)
class NoiseHead:
    """Positive noise scale for one observed field: a softplus-parameterized
    learnable scalar, a softplus-output network of x, or a predetermined
    constant.  Never differentiated spatially."""

    field: str
    kind: str = "scalar"        # "scalar" | "mlp" | "fixed"
    init: float = 0.1
    net: MlpSpec | None = None

    def __post_init__(self):
        if self.kind not in ("scalar", "mlp", "fixed"):
            raise ConfigurationError(f"unknown noise head kind {self.kind!r}")
        if self.kind == "mlp" and (self.net is None or self.net.out != "softplus"):
            raise ConfigurationError("heteroscedastic noise needs a softplus net")
        if self.init <= 0:
            raise ConfigurationError("noise scale must be positive")


def noise_init(store: ParamStore, head: NoiseHead, gen) -> None:
    name = f"noise.{head.field}"
    if head.kind == "scalar":
        store.add(f"{name}.raw", torch.tensor(softplus_inverse(head.init), dtype=DTYPE),
                  STD_GROUP)
    elif head.kind == "mlp":
        mlp_init(store, name, head.net, gen, STD_GROUP)
        with torch.no_grad():
            store[f"{name}.b{head.net.depth}"].fill_(softplus_inverse(head.init))


def noise_sigma(store: ParamStore, head: NoiseHead, x=None) -> torch.Tensor:
    name = f"noise.{head.field}"
    if head.kind == "fixed":
        return torch.tensor(head.init, dtype=DTYPE)
    if head.kind == "scalar":
        return torch.nn.functional.softplus(store[f"{name}.raw"])
    return mlp_forward(store, name, head.net, as_tensor(x))[..., 0]


def sample_output(mu_value: torch.Tensor, sigma: torch.Tensor,
                  omega_out: torch.Tensor) -> torch.Tensor:
    """One conditional-Gaussian sample: mu + sigma * omega_out."""
    return mu_value + sigma * omega_out
