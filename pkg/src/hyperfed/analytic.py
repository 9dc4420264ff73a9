"""Two-group training dynamics on a 2-D toy task.

All benign clients are collapsed into one group minimising a main-task
loss, all malicious clients into a second group minimising a backdoor
loss. Both groups branch from the shared global parameters each round,
take their local SGD steps, and the server recombines the deltas:

    theta_t = theta_{t-1} + (1 - alpha) * delta_benign + alpha * delta_malicious

with delta = theta_local - theta_{t-1}. The malicious learning rate is
coupled to the benign one by a relative factor beta.

Main task: inputs uniform on [-1, 1]^2, label 1 iff x2 > x1.
Backdoor task: inputs in the triangle 0 <= x2 <= x1 <= 1 (all of which the
main rule labels 0), forced to class 1.

``avg_malicious_loss`` tracks the backdoor-group loss on a fixed held-out
set over a number of rounds; ``sweep_surface`` evaluates it over a grid of
two named hyperparameters, which is the basis of the loss-surface heatmaps.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation, DivergenceError
from .models import Dataset, DiagonalLinearNetwork, SgdConfig, local_train
from .seeding import stream

__all__ = [
    "GroupHyper",
    "TwoGroupState",
    "SurfaceGrid",
    "gen_main_dataset",
    "gen_backdoor_dataset",
    "main_label",
    "default_group_hyper",
    "apply_axis",
    "simulate_round",
    "avg_malicious_loss",
    "sweep_surface",
    "write_surface_csv",
    "AXIS_NAMES",
]

BACKDOOR_CLASS = 1

# Axes understood by sweep_surface / apply_axis.
AXIS_NAMES = (
    "eta_b", "beta", "mu_b", "mu_m", "lambda_b", "lambda_m",
    "E_b", "E_m", "B_b", "B_m",
)


def main_label(x1, x2):
    """Ground-truth main-task label: 1 iff x2 > x1."""
    return (np.asarray(x2) > np.asarray(x1)).astype(np.int64)


def gen_main_dataset(n: int, rng: np.random.Generator) -> Dataset:
    """n points uniform on [-1, 1]^2 with the diagonal label rule."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    X = rng.uniform(-1.0, 1.0, size=(n, 2))
    return Dataset(X, main_label(X[:, 0], X[:, 1]))


def gen_backdoor_dataset(n: int, rng: np.random.Generator) -> Dataset:
    """n points with x1 ~ U[0,1], x2 ~ U[0, x1], all labelled the target class."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    x1 = rng.uniform(0.0, 1.0, size=n)
    x2 = x1 * rng.uniform(0.0, 1.0, size=n)
    return Dataset(np.column_stack([x1, x2]), np.full(n, BACKDOOR_CLASS))


@dataclass(frozen=True)
class GroupHyper:
    """Hyperparameters of the benign and malicious groups.

    ``beta`` is the relative malicious learning rate; ``malicious.eta`` must
    equal ``beta * benign.eta``. ``alpha`` is the malicious weight in the
    recombination. The threat model caps alpha at 0.5; values above that are
    accepted here (the combination is symmetric) and rejected at config level.
    """

    benign: SgdConfig
    malicious: SgdConfig
    alpha: float
    beta: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractViolation(f"alpha must be in [0, 1], got {self.alpha}")
        if self.beta <= 0:
            raise ContractViolation(f"beta must be > 0, got {self.beta}")
        if abs(self.malicious.eta - self.beta * self.benign.eta) > 1e-12:
            raise ContractViolation(
                "malicious.eta must equal beta * benign.eta "
                f"({self.malicious.eta} != {self.beta} * {self.benign.eta})"
            )


def default_group_hyper(eta_b: float = 0.1, beta: float = 1.0, alpha: float = 0.05,
                        mu: float = 0.9, weight_decay: float = 5e-4,
                        epochs: int = 2, batch_size: int = 64) -> GroupHyper:
    """Both groups at the common default instantiation (E=2, B=64, mu=0.9, wd=5e-4)."""
    benign = SgdConfig(eta_b, mu, weight_decay, epochs, batch_size)
    malicious = replace(benign, eta=beta * eta_b)
    return GroupHyper(benign, malicious, alpha, beta)


def apply_axis(hyper: GroupHyper, name: str, value) -> GroupHyper:
    """Return a copy of ``hyper`` with one named hyperparameter replaced.

    Changing eta_b rescales the malicious eta too (beta stays fixed);
    changing beta rescales only the malicious eta.
    """
    b, m = hyper.benign, hyper.malicious
    if name == "eta_b":
        b = replace(b, eta=float(value))
        m = replace(m, eta=hyper.beta * float(value))
        return GroupHyper(b, m, hyper.alpha, hyper.beta)
    if name == "beta":
        m = replace(m, eta=float(value) * b.eta)
        return GroupHyper(b, m, hyper.alpha, float(value))
    field_by_axis = {
        "mu_b": ("benign", "mu"), "mu_m": ("malicious", "mu"),
        "lambda_b": ("benign", "weight_decay"), "lambda_m": ("malicious", "weight_decay"),
        "E_b": ("benign", "epochs"), "E_m": ("malicious", "epochs"),
        "B_b": ("benign", "batch_size"), "B_m": ("malicious", "batch_size"),
    }
    if name not in field_by_axis:
        raise ConfigurationError(f"unknown sweep axis {name!r}; expected one of {AXIS_NAMES}")
    side, field = field_by_axis[name]
    cast = int if field in ("epochs", "batch_size") else float
    if side == "benign":
        b = replace(b, **{field: cast(value)})
    else:
        m = replace(m, **{field: cast(value)})
    return GroupHyper(b, m, hyper.alpha, hyper.beta)


@dataclass
class TwoGroupState:
    """Shared global parameters plus per-group momentum buffers (zero between rounds)."""

    theta: np.ndarray
    round: int = 0
    v_b: np.ndarray | None = None
    v_m: np.ndarray | None = None

    def __post_init__(self):
        if self.v_b is None:
            self.v_b = np.zeros_like(self.theta)
        if self.v_m is None:
            self.v_m = np.zeros_like(self.theta)


def simulate_round(model, state: TwoGroupState, hyper: GroupHyper,
                   benign_data: Dataset, malicious_data: Dataset,
                   rng: np.random.Generator) -> TwoGroupState:
    """Advance the two-group recursion by one round.

    Both groups start from the shared theta with zeroed momentum, run their
    local steps, and the new global parameters are the (1-alpha, alpha)
    weighted recombination of the two deltas.
    """
    if np.any(state.v_b) or np.any(state.v_m):
        raise ContractViolation("group velocities must be zero at round start")
    rng_b, rng_m = rng.spawn(2)
    branch = model.copy()
    branch.params = state.theta.copy()
    delta_b = local_train(branch, benign_data, hyper.benign, rng_b)
    branch.params = state.theta.copy()
    delta_m = local_train(branch, malicious_data, hyper.malicious, rng_m)
    theta = state.theta + (1.0 - hyper.alpha) * delta_b + hyper.alpha * delta_m
    return TwoGroupState(theta=theta, round=state.round + 1)


def _dataset_loss(model, theta: np.ndarray, data: Dataset) -> float:
    probe = model.copy()
    probe.params = theta.copy()
    loss, _ = probe.loss_and_grad(data.inputs, data.labels.astype(np.float64))
    return loss


LOSS_BLOWUP = 1e8  # a round loss beyond this counts as divergence


def avg_malicious_loss(hyper: GroupHyper, rounds: int = 200, model=None,
                       seed: int = 0, train_size: int = 64,
                       eval_size: int = 1024, mix_ratio: float = 0.0) -> float:
    """Mean backdoor-group loss over ``rounds`` rounds from a fresh start.

    The loss is evaluated on a fixed held-out backdoor set after every
    round. Returns NaN as the divergence marker if any round produces
    non-finite parameters or the loss passes the blow-up guard.
    ``mix_ratio`` optionally replaces that fraction of the malicious
    training set with main-task samples (default: pure backdoor data).
    ``train_size`` is the per-group dataset size; the default equals the
    default batch size, making each local epoch one full-batch step.
    """
    if rounds < 1:
        raise ContractViolation("rounds must be >= 1")
    if not 0.0 <= mix_ratio <= 1.0:
        raise ContractViolation("mix_ratio must be in [0, 1]")
    data_rng = stream(seed, "analytic-data")
    benign_data = gen_main_dataset(train_size, data_rng)
    malicious_data = gen_backdoor_dataset(train_size, data_rng)
    if mix_ratio > 0.0:
        n_mix = int(mix_ratio * train_size)
        if n_mix:
            mixed = gen_main_dataset(n_mix, data_rng)
            malicious_data = Dataset(
                np.vstack([malicious_data.inputs[: train_size - n_mix], mixed.inputs]),
                np.concatenate([malicious_data.labels[: train_size - n_mix], mixed.labels]),
            )
    held_out = gen_backdoor_dataset(eval_size, data_rng)

    if model is None:
        model = DiagonalLinearNetwork(2)
    state = TwoGroupState(theta=model.params.copy())
    total = 0.0
    for t in range(1, rounds + 1):
        try:
            state = simulate_round(model, state, hyper, benign_data, malicious_data,
                                   stream(seed, "analytic-round", t))
        except DivergenceError:
            return math.nan
        loss = _dataset_loss(model, state.theta, held_out)
        if not math.isfinite(loss) or loss > LOSS_BLOWUP:
            return math.nan
        total += loss
    return total / rounds


@dataclass
class SurfaceGrid:
    """Loss values over a 2-D hyperparameter grid; NaN cells diverged."""

    axis1_name: str
    axis1_values: list
    axis2_name: str
    axis2_values: list
    values: np.ndarray  # shape (len(axis1), len(axis2))

    def diverged(self) -> np.ndarray:
        return ~np.isfinite(self.values)


def sweep_surface(axis1_name: str, axis1_values, axis2_name: str, axis2_values,
                  base: GroupHyper, rounds: int = 200, seed: int = 0,
                  model=None, train_size: int = 64) -> SurfaceGrid:
    """Evaluate avg_malicious_loss over the Cartesian grid of two axes.

    Every cell sees the same datasets, initialisation and shuffle streams
    (all derived from the master seed), so cells differ only through their
    hyperparameters. Cells share no mutable state and may be evaluated in
    any order, or in parallel, with bit-identical results.
    """
    ax1 = list(axis1_values)
    ax2 = list(axis2_values)
    if not ax1 or not ax2:
        raise ConfigurationError("sweep axes must be non-empty")
    for name in (axis1_name, axis2_name):
        if name not in AXIS_NAMES:
            raise ConfigurationError(f"unknown sweep axis {name!r}; expected one of {AXIS_NAMES}")
    values = np.empty((len(ax1), len(ax2)))
    for i, v1 in enumerate(ax1):
        for j, v2 in enumerate(ax2):
            hyper = apply_axis(apply_axis(base, axis1_name, v1), axis2_name, v2)
            values[i, j] = avg_malicious_loss(
                hyper, rounds=rounds, model=None if model is None else model.copy(),
                seed=seed, train_size=train_size,
            )
    return SurfaceGrid(axis1_name, ax1, axis2_name, ax2, values)


def write_surface_csv(grid: SurfaceGrid, path) -> None:
    """Long-form CSV: axis1_value, axis2_value, avg_malicious_loss, diverged_flag."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([grid.axis1_name, grid.axis2_name, "avg_malicious_loss", "diverged"])
        for i, v1 in enumerate(grid.axis1_values):
            for j, v2 in enumerate(grid.axis2_values):
                val = grid.values[i, j]
                diverged = not math.isfinite(val)
                writer.writerow([v1, v2, "NA" if diverged else repr(float(val)), int(diverged)])
