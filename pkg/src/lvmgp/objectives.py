"""Training objective: Gaussian data log-likelihoods for the observed fields,
PDE residual and boundary means obtained from spatial jets of the decoded
mean, the latent regularizers, and the unknown-coefficient decoder for
inverse problems."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from . import encoder as enc
from . import gp_prior as gp
from . import operator_decoder as od
from .diffcore import (DTYPE, ConfigurationError, Jet, MlpSpec, ParamStore,
                       ScalarJet, as_tensor, make_generator, mlp_forward,
                       mlp_init, mlp_jet)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ResidualForm:
    """Differential operator acting on (u, du, d2u) and an optional unknown
    coefficient; the boundary operator is the Dirichlet trace."""

    mean_f: Callable          # (u_jet, lam, x) -> [J, P]
    needs_lambda: bool = False

    @staticmethod
    def boundary(values: torch.Tensor) -> torch.Tensor:
        return values


@dataclass(frozen=True)
class LambdaDecoderSpec:
    """Unknown-coefficient decoder.

    mode 'known': the coefficient is a fixed constant baked into the residual
    form.  mode 'constant': a head applied to the latent field, integrated
    over the domain, one vector per draw.  mode 'field': the head evaluated
    pointwise."""

    mode: str = "known"
    head: MlpSpec | None = None
    n_out: int = 1

    def __post_init__(self):
        if self.mode not in ("known", "constant", "field"):
            raise ConfigurationError(f"unknown lambda decoder mode {self.mode!r}")
        if self.mode != "known" and self.head is None:
            raise ConfigurationError("lambda decoder needs a head network")


@dataclass
class LossBreakdown:
    data_u: torch.Tensor | None = None
    data_f: torch.Tensor | None = None
    data_b: torch.Tensor | None = None
    data_lam: torch.Tensor | None = None
    reg: torch.Tensor | None = None
    beta: float = 0.0
    total: torch.Tensor | None = None

    def data_terms(self):
        return {k: v for k, v in (("u", self.data_u), ("f", self.data_f),
                                  ("b", self.data_b), ("lam", self.data_lam))
                if v is not None}

    def to_floats(self) -> dict[str, float]:
        out = {}
        for key in ("data_u", "data_f", "data_b", "data_lam", "reg", "total"):
            v = getattr(self, key)
            out[key] = float(v.detach()) if v is not None else float("nan")
        out["beta"] = self.beta
        return out


def gaussian_loglik(y: torch.Tensor, mu: torch.Tensor, sigma) -> torch.Tensor:
    """Mean Gaussian log-density over sensors and draws."""
    r = y - mu
    return (-0.5 * LOG_2PI - torch.log(sigma) - r * r / (2.0 * sigma * sigma)).mean()


def canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sensor ordering independent of input permutation (coords, then value)."""
    keys = [y] + [x[:, k] for k in range(x.shape[1])][::-1]
    return np.lexsort(keys)


@dataclass
class DataBatch:
    """Canonically ordered training tensors with the decoded fields' sensor
    locations concatenated for a single joint decode per step."""

    fields: dict[str, tuple[torch.Tensor, torch.Tensor]]
    points: torch.Tensor | None = None
    slices: dict[str, slice] | None = None

    def __post_init__(self):
        if self.points is None:
            xs, self.slices, start = [], {}, 0
            for name in ("u", "b", "f"):
                if name in self.fields:
                    x = self.fields[name][0]
                    xs.append(x)
                    self.slices[name] = slice(start, start + x.shape[0])
                    start += x.shape[0]
            self.points = torch.cat(xs, dim=0) if xs else None

    def __contains__(self, name):
        return name in self.fields

    def __getitem__(self, name):
        return self.fields[name]


def prepare_dataset(dataset) -> DataBatch:
    """Torch tensors per field in canonical order; fixes the reduction order
    so permuting sensor rows leaves every loss term bit-identical."""
    out = {}
    for field, (x, y) in dataset.fields.items():
        idx = canonical_order(np.asarray(x), np.asarray(y))
        out[field] = (as_tensor(np.asarray(x)[idx]), as_tensor(np.asarray(y)[idx]))
    return DataBatch(out)


class LvmGpModel:
    """Latent-GP model with a confidence-gated encoder and operator decoder."""

    def __init__(self, *, residual: ResidualForm, domain,
                 encoder_nets: enc.EncoderNets, grid: od.QuadratureGrid,
                 kernel_spec: gp.SEKernelSpec, kl_terms: int,
                 decoder: str = "integral",
                 integral_spec: od.IntegralDecoderSpec | None = None,
                 deeponet_spec: od.DeepOnetSpec | None = None,
                 lam: LambdaDecoderSpec = LambdaDecoderSpec(),
                 lam_bias_init: float = 0.0,
                 noise_heads: dict[str, od.NoiseHead] | None = None,
                 beta: float = 0.01, reg_mode: str = "independent",
                 corr_length_learnable: bool = False):
        if decoder not in ("integral", "deeponet"):
            raise ConfigurationError(f"unknown decoder variant {decoder!r}")
        if decoder == "integral" and integral_spec is None:
            integral_spec = od.IntegralDecoderSpec(encoder_nets.latent_dim)
        if decoder == "deeponet" and deeponet_spec is None:
            raise ConfigurationError("deeponet decoder needs a spec")
        if reg_mode not in ("independent", "correlated"):
            raise ConfigurationError(f"unknown regularizer mode {reg_mode!r}")
        if corr_length_learnable and reg_mode != "correlated":
            raise ConfigurationError(
                "a learnable correlation length requires the correlated regularizer")
        if kernel_spec.out_dim != encoder_nets.latent_dim:
            raise ConfigurationError("prior out_dim must equal latent_dim")
        self.residual = residual
        self.domain = [tuple(map(float, ab)) for ab in domain]
        self.encoder_nets = encoder_nets
        self.grid = grid
        self.kernel_spec = kernel_spec
        self.kl_terms = int(kl_terms)
        self.decoder = decoder
        self.integral_spec = integral_spec
        self.deeponet_spec = deeponet_spec
        self.lam = lam
        self.lam_bias_init = float(lam_bias_init)
        self.noise_heads = dict(noise_heads or {})
        self.beta = float(beta)
        self.reg_mode = reg_mode
        self.corr_length_learnable = bool(corr_length_learnable)
        self._basis_cache: dict = {}

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> ParamStore:
        store = ParamStore()
        gen = make_generator(seed, "params")
        enc.encoder_init(store, self.encoder_nets, gen)
        if self.decoder == "integral":
            od.integral_decoder_init(store, "dec", self.integral_spec, gen)
        else:
            od.deeponet_init(store, "dec", self.deeponet_spec, gen)
        if self.lam.mode != "known":
            mlp_init(store, "lam", self.lam.head, gen)
            with torch.no_grad():
                store[f"lam.b{self.lam.head.depth}"].fill_(self.lam_bias_init)
        for head in self.noise_heads.values():
            od.noise_init(store, head, gen)
        if self.corr_length_learnable:
            store.add("gp.corr_raw",
                      od.softplus_inverse(self.kernel_spec.corr_length))
        return store

    def corr_length(self, store: ParamStore):
        if self.corr_length_learnable:
            return torch.nn.functional.softplus(store["gp.corr_raw"])
        return self.kernel_spec.corr_length

    def expansion(self, store: ParamStore) -> gp.KLExpansion:
        cl = self.corr_length(store)
        return gp.build_kl(self.kernel_spec, self.kl_terms,
                           cl if torch.is_tensor(cl) else None)

    def project_params(self, store: ParamStore) -> None:
        if self.decoder == "integral":
            od.project_widths(store, "dec", self.integral_spec)

    def sample_draws(self, n_draws: int, gen) -> torch.Tensor:
        n_total = self.kl_terms ** self.kernel_spec.dim
        return torch.randn(n_draws, self.encoder_nets.latent_dim, n_total,
                           generator=gen, dtype=DTYPE)

    # -- latent field -------------------------------------------------------

    def _products(self, kl: gp.KLExpansion, x, key=None) -> gp.BasisProducts:
        if key is not None and not self.corr_length_learnable:
            full_key = (key, x.data_ptr(), tuple(x.shape), float(x.sum()))
            bp = self._basis_cache.get(full_key)
            if bp is None:
                bp = gp.basis_products(kl, x)
                self._basis_cache[full_key] = bp
            return bp
        return gp.basis_products(kl, x)

    def latent_values(self, store, kl, omega, x, key=None) -> torch.Tensor:
        prior = gp._contract(self._products(kl, x, key).value, omega)
        return enc.encode_values(store, self.encoder_nets, x, prior)

    def latent_jet(self, store, kl, omega, x, key=None) -> Jet:
        prior = gp.products_jet(self._products(kl, x, key), omega)
        return enc.encode_jet(store, self.encoder_nets, x, prior)

    def node_latents(self, store, kl, omega) -> torch.Tensor:
        return self.latent_values(store, kl, omega, self.grid.nodes, key="nodes")

    # -- decoded fields -----------------------------------------------------

    def features_jet(self, store, kl, omega, x, key=None):
        """Decoder trunk pass: (latent values at the quadrature nodes, feature
        jet at x).  The readout consumes the features; the unknown-coefficient
        head reads the node latents."""
        tj = self.latent_jet(store, kl, omega, x, key)
        if self.decoder == "integral":
            node_lat = self.node_latents(store, kl, omega)
            _, feat_jet = od.decode_features_jet(store, "dec", self.integral_spec,
                                                 self.grid, node_lat, x, tj)
            return node_lat, feat_jet
        trunk = self.deeponet_spec.trunk_spec()
        node_lat = None
        if self.lam.mode != "known":
            node_lat = self.node_latents(store, kl, omega)
        return node_lat, mlp_jet(store, "dec.trunk", trunk, tj)

    def features_values(self, store, kl, omega, x=None, key=None):
        """Value-only variant of features_jet; x may be omitted when only the
        node features are needed."""
        if self.decoder == "integral":
            node_lat = self.node_latents(store, kl, omega)
            tl = None
            if x is not None:
                tl = self.latent_values(store, kl, omega, x, key)
            _, tv = od.decode_features_values(store, "dec", self.integral_spec,
                                              self.grid, node_lat, x, tl)
            return node_lat, tv
        trunk = self.deeponet_spec.trunk_spec()
        node_lat = None
        if self.lam.mode != "known":
            node_lat = self.node_latents(store, kl, omega)
        tv = None
        if x is not None:
            tl = self.latent_values(store, kl, omega, x, key)
            tv = mlp_forward(store, "dec.trunk", trunk, tl)
        return node_lat, tv

    def _branch(self, store, kl, omega) -> torch.Tensor:
        anchors = self.deeponet_spec.anchors
        al = self.latent_values(store, kl, omega, anchors, key="anchors")
        return mlp_forward(store, "dec.branch", self.deeponet_spec.branch_spec(),
                           al.reshape(al.shape[0], -1))

    def _readout_values(self, store, kl, omega, features) -> torch.Tensor:
        if self.decoder == "integral":
            return od.readout_values(store, "dec", features)
        b = self._branch(store, kl, omega)
        return torch.einsum("jh,jph->jp", b, features)

    def _readout_jet(self, store, kl, omega, feature_jet: Jet) -> ScalarJet:
        if self.decoder == "integral":
            return od.readout_jet(store, "dec", feature_jet)
        b = self._branch(store, kl, omega)[:, None, :]
        return ScalarJet((b * feature_jet.value).sum(-1),
                         (b[:, :, None, :] * feature_jet.grad).sum(-1),
                         (b[:, :, None, :] * feature_jet.hess).sum(-1))

    def mu_u_values(self, store, kl, omega, x, key=None) -> torch.Tensor:
        _, tv = self.features_values(store, kl, omega, x, key)
        return self._readout_values(store, kl, omega, tv)

    def mu_u_jet(self, store, kl, omega, x, key=None) -> ScalarJet:
        _, tfj = self.features_jet(store, kl, omega, x, key)
        return self._readout_jet(store, kl, omega, tfj)

    def lambda_from_features(self, store, node_latents) -> torch.Tensor | None:
        """Constant mode: the head applied to the latent field at the
        quadrature nodes, integrated over the domain; [J, n_out]."""
        if self.lam.mode == "known":
            return None
        vals = mlp_forward(store, "lam", self.lam.head, node_latents)
        return torch.einsum("q,jqn->jn", self.grid.weights, vals)

    def lambda_values(self, store, kl, omega, x=None) -> torch.Tensor | None:
        """Constant mode: [J, n_out]; field mode: pointwise head values at x,
        [J, P, n_out]."""
        if self.lam.mode == "known":
            return None
        if self.lam.mode == "field":
            _, tv = self.features_values(store, kl, omega, x)
            return mlp_forward(store, "lam", self.lam.head, tv)
        node_feat, _ = self.features_values(store, kl, omega)
        return self.lambda_from_features(store, node_feat)

    def lambda_field_jet(self, store, kl, omega, x) -> Jet:
        if self.lam.mode != "field":
            raise ConfigurationError("lambda decoder is not in field mode")
        _, tfj = self.features_jet(store, kl, omega, x)
        return mlp_jet(store, "lam", self.lam.head, tfj)

    def confidence_values(self, store, x) -> torch.Tensor:
        return enc.confidence(store, self.encoder_nets, as_tensor(x))

    def _sigma(self, store, field, x) -> torch.Tensor:
        head = self.noise_heads.get(field)
        if head is None:
            raise ConfigurationError(f"no noise head for field {field!r}")
        return od.noise_sigma(store, head, x)

    # -- losses ---------------------------------------------------------------

    def data_nll_terms(self, store: ParamStore, data,
                       omega: torch.Tensor) -> LossBreakdown:
        if isinstance(data, dict):
            data = DataBatch(data)
        kl = self.expansion(store)
        lb = LossBreakdown(beta=self.beta)
        # one shared trunk pass over every decoded-field sensor location
        node_feat, tfj = self.features_jet(store, kl, omega, data.points,
                                           key="data")
        joint = self._readout_jet(store, kl, omega, tfj)
        if "u" in data:
            x, y = data["u"]
            mu = joint.value[:, data.slices["u"]]
            lb.data_u = gaussian_loglik(y, mu, self._sigma(store, "u", x))
        if "b" in data:
            x, y = data["b"]
            mu = self.residual.boundary(joint.value[:, data.slices["b"]])
            lb.data_b = gaussian_loglik(y, mu, self._sigma(store, "b", x))
        if "f" in data:
            x, y = data["f"]
            sl = data.slices["f"]
            u_jet = ScalarJet(joint.value[:, sl], joint.grad[:, sl], joint.hess[:, sl])
            lam = None
            if self.residual.needs_lambda:
                if self.lam.mode == "field":
                    lam = mlp_forward(store, "lam", self.lam.head,
                                      tfj.value[:, sl])
                else:
                    lam = self.lambda_from_features(store, node_feat)
            mu_f = self.residual.mean_f(u_jet, lam, x)
            lb.data_f = gaussian_loglik(y, mu_f, self._sigma(store, "f", x))
        if "lam" in data:
            x, y = data["lam"]
            if self.lam.mode == "field":
                mu = self.lambda_values(store, kl, omega, x=x)[..., 0]
            else:
                mu = self.lambda_from_features(store, node_feat)
                mu = mu[:, None, 0].expand(-1, x.shape[0])
            lb.data_lam = gaussian_loglik(y, mu, self._sigma(store, "lam", x))
        return lb

    def regularizer(self, store: ParamStore, reg_x: torch.Tensor) -> torch.Tensor:
        if self.reg_mode == "independent":
            return enc.latent_kl_independent(store, self.encoder_nets, reg_x)
        k_mat = gp.se_kernel(self.corr_length(store), reg_x)
        return enc.latent_kl_correlated(store, self.encoder_nets, reg_x, k_mat)

    def total_objective(self, store: ParamStore, data,
                        omega: torch.Tensor, reg_x: torch.Tensor | None,
                        beta: float | None = None) -> LossBreakdown:
        """Objective to maximize: sum of data log-likelihood terms minus
        beta times the latent regularizer."""
        lb = self.data_nll_terms(store, data, omega)
        lb.beta = self.beta if beta is None else float(beta)
        total = sum(lb.data_terms().values())
        if reg_x is not None and lb.beta != 0.0:
            lb.reg = self.regularizer(store, reg_x)
            total = total - lb.beta * lb.reg
        elif reg_x is not None:
            with torch.no_grad():
                lb.reg = self.regularizer(store, reg_x)
        lb.total = total
        return lb

    # -- prediction -----------------------------------------------------------

    def predict_stats(self, store: ParamStore, x, n_draws: int, gen,
                      want=("u", "f"), chunk: int = 64) -> dict:
        """Per-point mean / epistemic std / total std for the decoded fields,
        and mean/std over draws for a constant unknown coefficient."""
        if n_draws < 2:
            raise ConfigurationError("prediction needs at least 2 draws")
        x = as_tensor(x)
        need_f = "f" in want
        need_lam = self.lam.mode == "constant" and "lam" in want
        mu_u, mu_f, lam_draws = [], [], []
        with torch.no_grad():
            kl = self.expansion(store)
            done = 0
            while done < n_draws:
                j = min(chunk, n_draws - done)
                omega = self.sample_draws(j, gen)
                lam = None
                if need_f:
                    node_feat, tfj = self.features_jet(store, kl, omega, x)
                    u_jet = self._readout_jet(store, kl, omega, tfj)
                    if self.residual.needs_lambda:
                        if self.lam.mode == "field":
                            lam = mlp_forward(store, "lam", self.lam.head,
                                              tfj.value)
                        else:
                            lam = self.lambda_from_features(store, node_feat)
                    mu_u.append(u_jet.value)
                    mu_f.append(self.residual.mean_f(u_jet, lam, x))
                else:
                    node_feat, tv = self.features_values(store, kl, omega, x)
                    mu_u.append(self._readout_values(store, kl, omega, tv))
                if need_lam:
                    if lam is None or self.lam.mode == "field":
                        lam = self.lambda_from_features(store, node_feat)
                    lam_draws.append(lam)
                done += j
            out = {}
            out["u"] = self._field_stats(store, "u", x, torch.cat(mu_u, dim=0))
            if need_f:
                out["f"] = self._field_stats(store, "f", x, torch.cat(mu_f, dim=0))
            if need_lam:
                lam_all = torch.cat(lam_draws, dim=0)    # [M, n]
                out["lam"] = (lam_all.mean(0), lam_all.std(0, correction=1))
        return out

    def _field_stats(self, store, field, x, draws: torch.Tensor):
        mean = draws.mean(0)
        epi = draws.std(0, correction=1)
        if field in self.noise_heads:
            sigma = self._sigma(store, field, x)
        else:
            sigma = torch.zeros((), dtype=DTYPE)
        total = torch.sqrt(epi * epi + sigma * sigma)
        return mean, epi, total
