"""Numeric core: named parameter store, forward spatial jets, Mish MLPs, Adam.

Parameter gradients come from reverse-mode accumulation over float64 torch
tensors.  Spatial derivatives up to second order are carried explicitly as
jets (value, d/dx_k, d^2/dx_k^2 per input coordinate) so PDE residuals are
exact functions of the parameters; mixed spatial partials are not tracked.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np
import torch

DTYPE = torch.float64

MEAN_GROUP = "mean"
STD_GROUP = "std"
GROUPS = (MEAN_GROUP, STD_GROUP)


class ConfigurationError(ValueError):
    """Invalid model or experiment configuration."""


class TrainingError(RuntimeError):
    """Optimization failure (non-finite loss, divergence)."""


class NumericError(RuntimeError):
    """Numeric routine failure (e.g. Cholesky after max jitter)."""


def derive_seed(seed: int, *tags) -> int:
    """Deterministic child seed from a master seed and a tag path."""
    key = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def make_generator(seed: int, *tags) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *tags))
    return gen


def as_tensor(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# parameter store

class ParamStore:
    """Named flat float64 parameter arrays, each tagged 'mean' or 'std'.

    Entries are leaf tensors with requires_grad=True; the store is treated as
    immutable during loss evaluation and mutated only by the optimizer.
    """

    def __init__(self):
        self._entries: dict[str, torch.Tensor] = {}
        self._groups: dict[str, str] = {}

    def add(self, name: str, value, group: str = MEAN_GROUP) -> torch.Tensor:
        if name in self._entries:
            raise ConfigurationError(f"duplicate parameter entry {name!r}")
        if group not in GROUPS:
            raise ConfigurationError(f"unknown parameter group {group!r}")
        t = as_tensor(value).detach().clone().requires_grad_(True)
        self._entries[name] = t
        self._groups[name] = group
        return t

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def group(self, name: str) -> str:
        return self._groups[name]

    def group_names(self, group: str) -> list[str]:
        return [n for n in self._entries if self._groups[n] == group]

    def n_scalars(self) -> int:
        return sum(t.numel() for t in self._entries.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [t.detach().numpy().ravel() for t in self._entries.values()]
        ) if self._entries else np.zeros(0)

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars():
            raise ConfigurationError("flat vector size mismatch")
        i = 0
        with torch.no_grad():
            for t in self._entries.values():
                n = t.numel()
                t.copy_(as_tensor(vec[i:i + n]).reshape(t.shape))
                i += n

    def state_arrays(self) -> dict[str, tuple[np.ndarray, str]]:
        return {n: (t.detach().numpy().copy(), self._groups[n])
                for n, t in self._entries.items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for name, (arr, _group) in arrays.items():
            if name not in self._entries:
                raise ConfigurationError(f"unknown parameter entry {name!r}")
            with torch.no_grad():
                self._entries[name].copy_(as_tensor(arr))

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for n, t in self._entries.items():
            out.add(n, t.detach().clone(), self._groups[n])
        return out


# ---------------------------------------------------------------------------
# scalar activations with first and second derivatives

def _softplus(x):
    return torch.nn.functional.softplus(x)


def mish(x):
    return x * torch.tanh(_softplus(x))


def _mish_triple(x):
    # m(x) = x*tanh(s), s = softplus(x); s' = sigmoid(x)
    sig = torch.sigmoid(x)
    t = torch.tanh(_softplus(x))
    dt = (1.0 - t * t) * sig                      # d tanh(s)/dx
    d2t = (1.0 - t * t) * sig * (1.0 - sig) - 2.0 * t * dt * sig
    return x * t, t + x * dt, 2.0 * dt + x * d2t


def _tanh_triple(x):
    t = torch.tanh(x)
    return t, 1.0 - t * t, -2.0 * t * (1.0 - t * t)


def _sigmoid_triple(x):
    s = torch.sigmoid(x)
    d = s * (1.0 - s)
    return s, d, d * (1.0 - 2.0 * s)


def _softplus_triple(x):
    s = torch.sigmoid(x)
    return _softplus(x), s, s * (1.0 - s)


def _identity_triple(x):
    z = torch.zeros_like(x)
    return x, torch.ones_like(x), z


def _square_triple(x):
    return x * x, 2.0 * x, torch.full_like(x, 2.0)


ACTIVATIONS = {
    "mish": _mish_triple,
    "tanh": _tanh_triple,
    "sigmoid": _sigmoid_triple,
    "softplus": _softplus_triple,
    "identity": _identity_triple,
    "square": _square_triple,
}


def activation_triple(name: str, x):
    try:
        return ACTIVATIONS[name](x)
    except KeyError:
        raise ConfigurationError(f"unknown activation {name!r}") from None


# ---------------------------------------------------------------------------
# spatial jets

@dataclass
class Jet:
    """Field value with first and pure second spatial derivatives.

    value: [..., n]; grad, hess: [..., d, n] where grad[..., k, :] holds
    d/dx_k and hess[..., k, :] holds d^2/dx_k^2.  Batch dimensions broadcast.
    """

    value: torch.Tensor
    grad: torch.Tensor
    hess: torch.Tensor

    @property
    def dim(self) -> int:
        return self.grad.shape[-2]

    @staticmethod
    def seed(x: torch.Tensor) -> "Jet":
        """Jet of the identity map at input points x with shape [..., d]."""
        x = as_tensor(x)
        d = x.shape[-1]
        eye = torch.eye(d, dtype=DTYPE).expand(*x.shape[:-1], d, d)
        return Jet(x, eye.clone(), torch.zeros_like(eye))

    @staticmethod
    def const(value: torch.Tensor, dim: int) -> "Jet":
        value = as_tensor(value)
        z = torch.zeros(*value.shape[:-1], dim, value.shape[-1], dtype=DTYPE)
        return Jet(value, z, z.clone())

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value + other.value, self.grad + other.grad,
                       self.hess + other.hess)
        return Jet(self.value + other, self.grad, self.hess)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            return Jet(self.value - other.value, self.grad - other.grad,
                       self.hess - other.hess)
        return Jet(self.value - other, self.grad, self.hess)

    def __mul__(self, other):
        if isinstance(other, Jet):
            sv = self.value.unsqueeze(-2)
            ov = other.value.unsqueeze(-2)
            return Jet(
                self.value * other.value,
                self.grad * ov + sv * other.grad,
                self.hess * ov + 2.0 * self.grad * other.grad + sv * other.hess,
            )
        return Jet(self.value * other, self.grad * other, self.hess * other)

    __rmul__ = __mul__

    def __neg__(self):
        return Jet(-self.value, -self.grad, -self.hess)

    def linear(self, weight: torch.Tensor, bias=None) -> "Jet":
        """Apply y = x @ weight.T (+ bias) through the jet."""
        wt = weight.transpose(-1, -2)
        value = self.value @ wt
        if bias is not None:
            value = value + bias
        return Jet(value, self.grad @ wt, self.hess @ wt)

    def chain(self, activation: str) -> "Jet":
        """Componentwise smooth scalar function through the jet chain rule."""
        f, d1, d2 = activation_triple(activation, self.value)
        d1 = d1.unsqueeze(-2)
        return Jet(f, d1 * self.grad,
                   d2.unsqueeze(-2) * self.grad * self.grad + d1 * self.hess)

    def narrow(self, start: int, length: int) -> "Jet":
        return Jet(self.value[..., start:start + length],
                   self.grad[..., start:start + length],
                   self.hess[..., start:start + length])


@dataclass
class ScalarJet:
    """Jet of a scalar field: value [...], grad and hess [..., d] where the
    last axis indexes the input coordinate."""

    value: torch.Tensor
    grad: torch.Tensor
    hess: torch.Tensor

    @staticmethod
    def from_jet(jet: Jet, index: int = 0) -> "ScalarJet":
        return ScalarJet(jet.value[..., index],
                         jet.grad[..., index], jet.hess[..., index])

    def laplacian(self) -> torch.Tensor:
        return self.hess.sum(-1)


# ---------------------------------------------------------------------------
# fully-connected networks

@dataclass(frozen=True)
class MlpSpec:
    in_dim: int
    out_dim: int
    width: int = 64
    depth: int = 3            # number of hidden layers
    hidden: str = "mish"
    out: str = "identity"

    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.in_dim] + [self.width] * self.depth + [self.out_dim]
        return list(zip(dims[:-1], dims[1:]))


def mlp_init(store: ParamStore, name: str, spec: MlpSpec,
             gen: torch.Generator, group: str = MEAN_GROUP) -> None:
    """Fan-in scaled Gaussian weights, zero biases."""
    for i, (din, dout) in enumerate(spec.layer_dims()):
        w = torch.randn(dout, din, generator=gen, dtype=DTYPE) / math.sqrt(din)
        store.add(f"{name}.W{i}", w, group)
        store.add(f"{name}.b{i}", torch.zeros(dout, dtype=DTYPE), group)


def _check_input(spec: MlpSpec, x: torch.Tensor) -> None:
    if x.shape[-1] != spec.in_dim:
        raise ConfigurationError(
            f"input dim {x.shape[-1]} does not match network input {spec.in_dim}")


def mlp_forward(store: ParamStore, name: str, spec: MlpSpec,
                x: torch.Tensor) -> torch.Tensor:
    x = as_tensor(x)
    _check_input(spec, x)
    h = x
    n_layers = spec.depth + 1
    for i in range(n_layers):
        h = h @ store[f"{name}.W{i}"].transpose(-1, -2) + store[f"{name}.b{i}"]
        act = spec.hidden if i < spec.depth else spec.out
        if act != "identity":
            h = activation_triple(act, h)[0]
    return h


def mlp_jet(store: ParamStore, name: str, spec: MlpSpec, x) -> Jet:
    """Forward jet of the network; x is raw coordinates or an input jet."""
    jet = x if isinstance(x, Jet) else Jet.seed(as_tensor(x))
    _check_input(spec, jet.value)
    n_layers = spec.depth + 1
    for i in range(n_layers):
        jet = jet.linear(store[f"{name}.W{i}"], store[f"{name}.b{i}"])
        act = spec.hidden if i < spec.depth else spec.out
        if act != "identity":
            jet = jet.chain(act)
    return jet


# ---------------------------------------------------------------------------
# gradients and Adam

def grad_params(loss: torch.Tensor, store: ParamStore,
                names: list[str] | None = None,
                diagnostics: str = "") -> dict[str, torch.Tensor]:
    """Reverse-mode gradient of a scalar loss for the named entries."""
    if not torch.isfinite(loss):
        raise TrainingError(
            f"non-finite loss {float(loss.detach())!r} {diagnostics}".strip())
    names = list(names) if names is not None else store.names()
    params = [store[n] for n in names]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    return {n: (g if g is not None else torch.zeros_like(p))
            for n, p, g in zip(names, params, grads)}


@dataclass
class AdamState:
    base_lr: float
    decay: float = 1.0
    decay_interval: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def lr(self) -> float:
        if self.decay_interval:
            return self.base_lr * self.decay ** (self.step // self.decay_interval)
        return self.base_lr


def adam_step(state: AdamState, store: ParamStore,
              grads: dict[str, torch.Tensor],
              freeze: frozenset | set = frozenset()) -> None:
    """One Adam update in place; groups named in `freeze` stay untouched."""
    lr = state.lr()
    t = state.step + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, g in grads.items():
            if store.group(name) in freeze:
                continue
            p = store[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))
    state.step += 1
