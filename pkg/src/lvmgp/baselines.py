"""Deterministic physics-informed baseline and its deep-ensemble aggregation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import (AdamState, ConfigurationError, DTYPE, MlpSpec,
                       ParamStore, ScalarJet, TrainingError, adam_step,
                       as_tensor, grad_params, make_generator, mlp_forward,
                       mlp_init, mlp_jet)
from .objectives import prepare_dataset
from .problems import ProblemSpec, SensorDataset


@dataclass(frozen=True)
class PinnConfig:
    width: int = 50
    depth: int = 2
    activation: str = "tanh"
    steps: int = 10000
    lr: float = 1e-3
    decay: float = 0.7
    decay_interval: int = 1000
    w_r: float = 1.0
    w_b: float = 1.0
    w_d: float = 1.0
    weight_decay: float = 0.0
    lam_init: float | None = None   # default: zeros (0.5 for source centers)


@dataclass
class PinnModel:
    problem: ProblemSpec
    config: PinnConfig
    store: ParamStore
    net: MlpSpec
    losses: dict = field(default_factory=dict)

    def u_values(self, x) -> torch.Tensor:
        return mlp_forward(self.store, "pinn", self.net, as_tensor(x))[..., 0]

    def u_jet(self, x) -> ScalarJet:
        return ScalarJet.from_jet(mlp_jet(self.store, "pinn", self.net, as_tensor(x)))

    def lam_value(self) -> np.ndarray | None:
        if "pinn.lam" not in self.store:
            return None
        return self.store["pinn.lam"].detach().numpy().copy()


def _pinn_loss(store, net, problem, data, cfg) -> torch.Tensor:
    loss = torch.zeros((), dtype=DTYPE)
    if "f" in data and cfg.w_r:
        x, y = data["f"]
        jet = mlp_jet(store, "pinn", net, x)
        u = ScalarJet.from_jet(jet)
        lam = store["pinn.lam"] if "pinn.lam" in store else None
        r = problem.residual.mean_f(u, lam, x) - y
        loss = loss + cfg.w_r * 0.5 * (r * r).sum()
    if "b" in data and cfg.w_b:
        x, y = data["b"]
        r = mlp_forward(store, "pinn", net, x)[..., 0] - y
        loss = loss + cfg.w_b * 0.5 * (r * r).sum()
    if "u" in data and cfg.w_d:
        x, y = data["u"]
        r = mlp_forward(store, "pinn", net, x)[..., 0] - y
        loss = loss + cfg.w_d * 0.5 * (r * r).sum()
    if cfg.weight_decay:
        penalty = sum((store[n] * store[n]).sum()
                      for n in store.names() if n != "pinn.lam")
        loss = loss + cfg.weight_decay * penalty
    return loss


def train_pinn(problem: ProblemSpec, dataset: SensorDataset,
               config: PinnConfig = PinnConfig(), seed: int = 0) -> PinnModel:
    """Adam minimization of the weighted residual/boundary/data squares."""
    net = MlpSpec(problem.dim, 1, config.width, config.depth, config.activation)
    store = ParamStore()
    gen = make_generator(seed, "pinn")
    mlp_init(store, "pinn", net, gen)
    if problem.residual.needs_lambda:
        init = config.lam_init
        if init is None:
            init = 0.5 if problem.name == "source6d_inverse" else 0.0
        store.add("pinn.lam", torch.full((problem.lam_dim,), float(init), dtype=DTYPE))
    data = prepare_dataset(dataset)
    adam = AdamState(config.lr, config.decay, config.decay_interval)
    first = last = None
    for step in range(config.steps):
        loss = _pinn_loss(store, net, problem, data, config)
        grads = grad_params(loss, store, diagnostics=f"(baseline step {step})")
        adam_step(adam, store, grads)
        if step == 0:
            first = float(loss.detach())
        last = float(loss.detach())
    return PinnModel(problem, config, store, net,
                     losses={"first": first, "last": last})


@dataclass
class EnsembleRun:
    problem: str
    member_seeds: list[int]
    grid: np.ndarray
    mean_u: np.ndarray
    std_u: np.ndarray
    member_u: np.ndarray                  # [members, P]
    lam_mean: np.ndarray | None = None
    lam_std: np.ndarray | None = None
    member_lam: np.ndarray | None = None
    failed_members: list[int] = field(default_factory=list)


def run_ensemble(problem: ProblemSpec, dataset: SensorDataset,
                 config: PinnConfig, master_seed: int,
                 eval_grid, n_members: int = 20,
                 max_failures: int = 2,
                 member_seeds: list[int] | None = None) -> EnsembleRun:
    """Independently initialized members trained on one shared dataset;
    aggregation is the pointwise sample mean/std across members."""
    eval_grid = np.asarray(eval_grid, dtype=np.float64)
    if member_seeds is not None:
        seeds = [int(s) for s in member_seeds]
    else:
        seeds = [int(s) for s in
                 np.random.SeedSequence(master_seed).generate_state(n_members)]
    outputs, lams, failed = [], [], []
    for k, seed in enumerate(seeds):
        try:
            model = train_pinn(problem, dataset, config, seed)
        except TrainingError:
            failed.append(k)
            if len(failed) > max_failures:
                raise TrainingError(
                    f"{len(failed)} ensemble members diverged") from None
            continue
        with torch.no_grad():
            outputs.append(model.u_values(eval_grid).numpy())
        lam = model.lam_value()
        if lam is not None:
            lams.append(lam)
    member_u = np.stack(outputs)
    run = EnsembleRun(problem.name, seeds, eval_grid,
                      member_u.mean(0), member_u.std(0, ddof=1), member_u,
                      failed_members=failed)
    if lams:
        member_lam = np.stack(lams)
        run.lam_mean = member_lam.mean(0)
        run.lam_std = member_lam.std(0, ddof=1)
        run.member_lam = member_lam
    return run
