"""Benchmark suite: PDE definitions, exact solutions, sensor layouts, and
noisy data generation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .diffcore import (ConfigurationError, DTYPE, NumericError, ScalarJet,
                       as_tensor)
from .objectives import ResidualForm

SOURCE_AMPLITUDES = (2.0, -3.0, 0.5)
SOURCE_WIDTH = 0.15
SOURCE_CENTERS = ((0.3, 0.3), (0.75, 0.75), (0.2, 0.7))
SOURCE_DIFFUSION = 0.02
SOURCE_REF_N = 101


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    dim: int
    domain: tuple
    mode: str                    # forward | inverse | extrapolation
    residual: ResidualForm
    exact_u: Callable            # [P, d] -> [P]
    exact_f: Callable            # [P, d] -> [P]
    exact_jet: Callable | None   # [P, d] -> Jet (value/grad/hess [P(,d)])
    layout: Callable             # rng -> dict[field, np.ndarray [n, d]]
    noise_cases: dict            # case name -> {field: scale}
    lam_true: tuple | None = None
    lam_dim: int = 0

    def sensor_counts(self, seed: int = 0) -> dict[str, int]:
        rng = np.random.default_rng(seed)
        return {f: len(x) for f, x in self.layout(rng).items()}

    def case_scales(self, noise_case: str) -> dict[str, float]:
        if noise_case == "none":
            first = next(iter(self.noise_cases.values()))
            return {f: 0.0 for f in first}
        try:
            return dict(self.noise_cases[noise_case])
        except KeyError:
            raise ConfigurationError(
                f"unknown noise case {noise_case!r} for {self.name}") from None


@dataclass
class SensorDataset:
    problem: str
    noise_case: str
    seed: int
    fields: dict[str, tuple[np.ndarray, np.ndarray]]

    def counts(self) -> dict[str, int]:
        return {f: len(y) for f, (_, y) in self.fields.items()}

    def to_csv(self, path) -> None:
        dim = next(iter(self.fields.values()))[0].shape[1]
        cols = ["field"] + [f"x{k + 1}" for k in range(dim)] + ["value"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for name, (x, y) in self.fields.items():
                for xi, yi in zip(x, y):
                    w.writerow([name] + [repr(float(c)) for c in xi]
                               + [repr(float(yi))])

    @staticmethod
    def from_csv(path, problem: str = "", noise_case: str = "",
                 seed: int = -1) -> "SensorDataset":
        rows: dict[str, list] = {}
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            dim = len(header) - 2
            for row in reader:
                rows.setdefault(row[0], []).append(
                    ([float(c) for c in row[1:1 + dim]], float(row[-1])))
        fields = {}
        for name, items in rows.items():
            fields[name] = (np.array([p for p, _ in items], dtype=np.float64),
                            np.array([v for _, v in items], dtype=np.float64))
        return SensorDataset(problem, noise_case, seed, fields)


def _linspace(lo, hi, n) -> np.ndarray:
    return np.linspace(lo, hi, n, dtype=np.float64)[:, None]


def _grid2(coords1, coords2) -> np.ndarray:
    g1, g2 = np.meshgrid(coords1, coords2, indexing="ij")
    return np.stack([g1.ravel(), g2.ravel()], axis=-1)


# ---------------------------------------------------------------------------
# exact fields

def _sin3_jet(x: torch.Tensor) -> ScalarJet:
    t = 6.0 * x[:, 0]
    s, c = torch.sin(t), torch.cos(t)
    u = s ** 3
    du = 18.0 * s * s * c
    d2u = 216.0 * s * c * c - 108.0 * s ** 3
    return ScalarJet(u, du[:, None], d2u[:, None])


def _porous_jet(x: torch.Tensor) -> ScalarJet:
    r = 20.0
    arg = r * (x[:, 0] - 0.5)
    denom = math.cosh(r / 2.0)
    u = 1.0 - torch.cosh(arg) / denom
    du = -r * torch.sinh(arg) / denom
    d2u = -r * r * torch.cosh(arg) / denom
    return ScalarJet(u, du[:, None], d2u[:, None])


def _sinpi2_jet(x: torch.Tensor) -> ScalarJet:
    s1, c1 = torch.sin(math.pi * x[:, 0]), torch.cos(math.pi * x[:, 0])
    s2, c2 = torch.sin(math.pi * x[:, 1]), torch.cos(math.pi * x[:, 1])
    u = s1 * s2
    grad = torch.stack([math.pi * c1 * s2, math.pi * s1 * c2], dim=-1)
    hess = torch.stack([-math.pi ** 2 * u, -math.pi ** 2 * u], dim=-1)
    return ScalarJet(u, grad, hess)


def gaussian_sources(x: torch.Tensor, centers: torch.Tensor) -> torch.Tensor:
    """Sum of three Gaussian bumps at points x [P, 2]; centers is either a
    global [..., 6] vector (returns [..., P]) or a pointwise field [J, P, 6]
    evaluated at x (returns [J, P])."""
    amps = as_tensor(SOURCE_AMPLITUDES)
    if centers.ndim == 3 and centers.shape[1] == x.shape[0]:
        c = centers.reshape(*centers.shape[:-1], 3, 2)
        d2 = ((x[None, :, None, :] - c) ** 2).sum(-1)          # [J, P, 3]
        return (amps * torch.exp(-0.5 * d2 / SOURCE_WIDTH ** 2)).sum(-1)
    c = centers.reshape(*centers.shape[:-1], 1, 3, 2)
    d2 = ((x[:, None, :] - c) ** 2).sum(-1)
    return (amps * torch.exp(-0.5 * d2 / SOURCE_WIDTH ** 2)).sum(-1)


def source6d_f1(x: torch.Tensor) -> torch.Tensor:
    return 0.1 * torch.sin(math.pi * x[:, 0]) * torch.sin(math.pi * x[:, 1])


# ---------------------------------------------------------------------------
# finite-difference reference solve for the source-inversion benchmark

def fd_poisson_dirichlet(n: int, rhs: Callable, coeff: float = 1.0):
    """Second-order solve of -coeff * Laplace(u) = rhs on the unit square
    with zero Dirichlet boundary; returns (axis [n], u [n, n])."""
    from scipy import sparse
    from scipy.sparse.linalg import spsolve

    if n < 3:
        raise ConfigurationError("grid too small")
    axis = np.linspace(0.0, 1.0, n)
    h = axis[1] - axis[0]
    m = n - 2
    main = sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(m, m))
    eye = sparse.identity(m)
    lap = (sparse.kron(main, eye) + sparse.kron(eye, main)) / h ** 2
    interior = _grid2(axis[1:-1], axis[1:-1])
    b = np.asarray(rhs(as_tensor(interior)), dtype=np.float64)
    sol = spsolve((coeff * lap).tocsc(), b)
    if not np.all(np.isfinite(sol)):
        raise NumericError("finite-difference solve returned non-finite values")
    u = np.zeros((n, n))
    u[1:-1, 1:-1] = sol.reshape(m, m)
    return axis, u


_SOURCE_REF_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def reference_u_source6d(n: int = SOURCE_REF_N):
    """Gridded reference solution of the source benchmark."""
    if n not in _SOURCE_REF_CACHE:
        centers = as_tensor(np.array(SOURCE_CENTERS).ravel())

        def rhs(x):
            return source6d_f1(x) + gaussian_sources(x, centers)

        _SOURCE_REF_CACHE[n] = fd_poisson_dirichlet(n, rhs, SOURCE_DIFFUSION)
    return _SOURCE_REF_CACHE[n]


def bilinear_interp(axis: np.ndarray, grid: np.ndarray, pts: torch.Tensor) -> torch.Tensor:
    p = np.clip(np.asarray(pts, dtype=np.float64), axis[0], axis[-1])
    h = axis[1] - axis[0]
    i = np.clip(((p[:, 0] - axis[0]) / h).astype(int), 0, len(axis) - 2)
    j = np.clip(((p[:, 1] - axis[0]) / h).astype(int), 0, len(axis) - 2)
    tx = (p[:, 0] - axis[i]) / h
    ty = (p[:, 1] - axis[j]) / h
    vals = (grid[i, j] * (1 - tx) * (1 - ty) + grid[i + 1, j] * tx * (1 - ty)
            + grid[i, j + 1] * (1 - tx) * ty + grid[i + 1, j + 1] * tx * ty)
    return as_tensor(vals)


# ---------------------------------------------------------------------------
# registry

def _poisson1d() -> ProblemSpec:
    lam = 0.01

    def mean_f(u: ScalarJet, _lam, _x):
        return lam * u.hess[..., 0]

    def exact_u(x):
        return _sin3_jet(as_tensor(x)).value

    def exact_f(x):
        return mean_f(_sin3_jet(as_tensor(x)), None, None)

    def layout(_rng):
        return {"f": _linspace(-0.7, 0.7, 32), "b": np.array([[-0.7], [0.7]])}

    return ProblemSpec(
        name="poisson1d", dim=1, domain=((-0.7, 0.7),), mode="forward",
        residual=ResidualForm(mean_f),
        exact_u=exact_u, exact_f=exact_f,
        exact_jet=lambda x: _sin3_jet(as_tensor(x)),
        layout=layout,
        noise_cases={"0.01": {"f": 0.01, "b": 0.01},
                     "0.1": {"f": 0.1, "b": 0.1}})


def _porous1d() -> ProblemSpec:
    nu_e, nu, phi, perm, g = 1e-3, 1e-3, 0.4, 1e-3, 1.0

    def mean_f(u: ScalarJet, _lam, _x):
        return -(nu_e / phi) * u.hess[..., 0] + (nu / perm) * u.value

    def exact_u(x):
        return _porous_jet(as_tensor(x)).value

    def exact_f(x):
        x = as_tensor(x)
        return torch.full((x.shape[0],), g, dtype=DTYPE)

    def layout(_rng):
        return {"f": _linspace(0.0, 1.0, 16), "b": np.array([[0.0], [1.0]])}

    return ProblemSpec(
        name="porous1d", dim=1, domain=((0.0, 1.0),), mode="forward",
        residual=ResidualForm(mean_f),
        exact_u=exact_u, exact_f=exact_f,
        exact_jet=lambda x: _porous_jet(as_tensor(x)),
        layout=layout,
        noise_cases={"0.01": {"f": 0.01, "b": 0.01},
                     "0.1": {"f": 0.1, "b": 0.1}})


def _scalar_lam(lam):
    # [J, P, 1] pointwise field -> [J, P]; [J, 1], [n], or plain scalars
    # broadcast as-is
    if torch.is_tensor(lam) and lam.ndim == 3:
        return lam[..., 0]
    return lam


def _nlpoisson_mean_f(u: ScalarJet, lam, _x):
    return 0.01 * u.hess[..., 0] + _scalar_lam(lam) * torch.tanh(u.value)


def _nlpoisson1d_inverse() -> ProblemSpec:
    lam_true = 0.7

    def exact_u(x):
        return _sin3_jet(as_tensor(x)).value

    def exact_f(x):
        return _nlpoisson_mean_f(_sin3_jet(as_tensor(x)), lam_true, None)

    def layout(_rng):
        return {"f": _linspace(-0.7, 0.7, 32),
                "u": _linspace(-0.7, 0.7, 8)[1:-1],
                "b": np.array([[-0.7], [0.7]])}

    return ProblemSpec(
        name="nlpoisson1d_inverse", dim=1, domain=((-0.7, 0.7),), mode="inverse",
        residual=ResidualForm(_nlpoisson_mean_f, needs_lambda=True),
        exact_u=exact_u, exact_f=exact_f,
        exact_jet=lambda x: _sin3_jet(as_tensor(x)),
        layout=layout,
        noise_cases={"0.01": {"f": 0.01, "u": 0.01, "b": 0.01},
                     "0.1": {"f": 0.1, "u": 0.1, "b": 0.1}},
        lam_true=(lam_true,), lam_dim=1)


def _nlpoisson1d_extrap() -> ProblemSpec:
    base = _nlpoisson1d_inverse()

    def layout(_rng):
        return {"f": _linspace(-0.7, 0.7, 40), "u": _linspace(-0.7, 0.0, 4)}

    return ProblemSpec(
        name="nlpoisson1d_extrap", dim=1, domain=((-0.7, 0.7),),
        mode="extrapolation",
        residual=base.residual, exact_u=base.exact_u, exact_f=base.exact_f,
        exact_jet=base.exact_jet, layout=layout,
        noise_cases={"0.01": {"f": 0.01, "u": 0.01}},
        lam_true=(0.7,), lam_dim=1)


def _diffreact2d_inverse() -> ProblemSpec:
    k, lam_true = 0.01, 1.0

    def mean_f(u: ScalarJet, lam, _x):
        return (k * (u.hess[..., 0] + u.hess[..., 1])
                + _scalar_lam(lam) * u.value ** 2)

    def exact_u(x):
        return _sinpi2_jet(as_tensor(x)).value

    def exact_f(x):
        return mean_f(_sinpi2_jet(as_tensor(x)), lam_true, None)

    def layout(_rng):
        interior_u = np.linspace(-1.0, 1.0, 12)[1:-1]
        interior_f = np.linspace(-1.0, 1.0, 24)[1:-1]
        edge = np.linspace(-1.0, 1.0, 25)
        ones = np.ones_like(edge)
        boundary = np.concatenate([
            np.stack([edge, -ones], axis=-1), np.stack([edge, ones], axis=-1),
            np.stack([-ones, edge], axis=-1), np.stack([ones, edge], axis=-1)])
        return {"u": _grid2(interior_u, interior_u),
                "f": _grid2(interior_f, interior_f),
                "b": boundary}

    return ProblemSpec(
        name="diffreact2d_inverse", dim=2, domain=((-1.0, 1.0), (-1.0, 1.0)),
        mode="inverse",
        residual=ResidualForm(mean_f, needs_lambda=True),
        exact_u=exact_u, exact_f=exact_f,
        exact_jet=lambda x: _sinpi2_jet(as_tensor(x)),
        layout=layout,
        noise_cases={"0.01": {"f": 0.01, "u": 0.01, "b": 0.01},
                     "0.1": {"f": 0.1, "u": 0.1, "b": 0.1}},
        lam_true=(lam_true,), lam_dim=1)


def _source6d_inverse() -> ProblemSpec:
    centers_true = tuple(np.array(SOURCE_CENTERS).ravel())

    def mean_f(u: ScalarJet, lam, x):
        # observed field is f1 = -coeff * Laplace(u) - f2(x; centers)
        return (-SOURCE_DIFFUSION * (u.hess[..., 0] + u.hess[..., 1])
                - gaussian_sources(x, lam))

    def exact_u(x):
        axis, grid = reference_u_source6d()
        return bilinear_interp(axis, grid, as_tensor(x))

    def exact_f(x):
        return source6d_f1(as_tensor(x))

    def layout(rng):
        return {"u": rng.uniform(0.0, 1.0, size=(1000, 2)),
                "f": rng.uniform(0.0, 1.0, size=(200, 2))}

    return ProblemSpec(
        name="source6d_inverse", dim=2, domain=((0.0, 1.0), (0.0, 1.0)),
        mode="inverse",
        residual=ResidualForm(mean_f, needs_lambda=True),
        exact_u=exact_u, exact_f=exact_f, exact_jet=None,
        layout=layout,
        noise_cases={"default": {"u": 0.1, "f": 0.01}},
        lam_true=centers_true, lam_dim=6)


_REGISTRY = {
    "poisson1d": _poisson1d,
    "porous1d": _porous1d,
    "nlpoisson1d_inverse": _nlpoisson1d_inverse,
    "nlpoisson1d_extrap": _nlpoisson1d_extrap,
    "diffreact2d_inverse": _diffreact2d_inverse,
    "source6d_inverse": _source6d_inverse,
}

PROBLEM_NAMES = tuple(_REGISTRY)


def make_problem(name: str) -> ProblemSpec:
    try:
        return _REGISTRY[name]()
    except KeyError:
        raise ConfigurationError(f"unknown problem {name!r}") from None


def generate_dataset(spec: ProblemSpec, seed: int, noise_case: str) -> SensorDataset:
    """Sensors per the layout rule, exact field values, i.i.d. Gaussian noise
    at the stated scales.  Bit-identical for a fixed seed."""
    scales = spec.case_scales(noise_case)
    layout_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1a70]))
    noise_rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0e15]))
    points = spec.layout(layout_rng)
    fields = {}
    for name in sorted(points):
        x = np.asarray(points[name], dtype=np.float64)
        exact = spec.exact_u if name in ("u", "b") else spec.exact_f
        y = np.asarray(exact(as_tensor(x)), dtype=np.float64)
        scale = scales.get(name, 0.0)
        if scale > 0.0:
            y = y + scale * noise_rng.standard_normal(y.shape)
        fields[name] = (x, y)
    return SensorDataset(spec.name, noise_case, seed, fields)


def operator_exactness(spec: ProblemSpec, n: int = 201) -> float:
    """Max abs deviation of the operator applied to the exact solution's jets
    from the exact forcing, on a validation grid (analytic problems)."""
    if spec.exact_jet is None:
        raise ConfigurationError(f"{spec.name} has no analytic solution")
    if spec.dim == 1:
        (lo, hi), = spec.domain
        x = as_tensor(_linspace(lo, hi, n))
    else:
        side = int(math.sqrt(n)) + 1
        axes = [np.linspace(lo, hi, side) for lo, hi in spec.domain]
        x = as_tensor(_grid2(axes[0], axes[1]))
    jet = spec.exact_jet(x)
    jet = ScalarJet(jet.value[None], jet.grad[None], jet.hess[None])
    lam = as_tensor([spec.lam_true]) if spec.lam_true is not None else None
    f = spec.residual.mean_f(jet, lam, x)
    return float((f[0] - spec.exact_f(x)).abs().max())
