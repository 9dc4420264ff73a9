"""Malicious-client behaviour: dirty-label trigger poisoning.

The trigger stamps chosen input coordinates to fixed values (set-to
semantics, hence idempotent). A malicious client poisons a fraction of its
local data -- stamping the trigger and relabelling to the target class --
then trains with its own hyperparameters. Its learning rate is coupled to
the scheduled benign one through the relative factor beta. An optional
model-replacement scaling multiplies the delta, divided across the
attackers active in the round.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractViolation
from .models import Dataset, SgdConfig, local_train

__all__ = [
    "TriggerSpec",
    "AttackConfig",
    "apply_trigger",
    "poison_dataset",
    "malicious_sgd_at",
    "malicious_update",
]


@dataclass(frozen=True)
class TriggerSpec:
    """Sparse set of (coordinate index, stamped value) pairs."""

    assignments: tuple[tuple[int, float], ...]

    def __post_init__(self):
        cleaned = tuple((int(i), float(v)) for i, v in self.assignments)
        if len({i for i, _ in cleaned}) != len(cleaned):
            raise ContractViolation("trigger indices must be distinct")
        object.__setattr__(self, "assignments", cleaned)

    @classmethod
    def stamp(cls, index: int, value: float) -> "TriggerSpec":
        return cls(((index, value),))


def apply_trigger(inputs: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Stamped copy of a single input or an input batch; the original is untouched."""
    arr = np.array(inputs, dtype=np.float64, copy=True)
    dim = arr.shape[-1]
    for idx, value in trigger.assignments:
        if not 0 <= idx < dim:
            raise ContractViolation(f"trigger index {idx} out of range for dimension {dim}")
        arr[..., idx] = value
    return arr


@dataclass(frozen=True)
class AttackConfig:
    """Dirty-label attack parameters and the malicious training overrides.

    ``malicious_sgd.eta`` is a placeholder: the effective learning rate each
    round is beta times the scheduled benign rate (see malicious_sgd_at).
    """

    trigger: TriggerSpec
    target_class: int
    poison_fraction: float
    malicious_sgd: SgdConfig
    beta: float = 1.0
    scaling: float | None = None
    window: tuple[int, int] = (1, 0)  # empty window by default

    def __post_init__(self):
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ContractViolation("poison_fraction must be in [0, 1]")
        if self.beta <= 0:
            raise ContractViolation("beta must be > 0")
        if self.scaling is not None and self.scaling <= 0:
            raise ContractViolation("scaling must be > 0 when set")

    def active_at(self, round_index: int) -> bool:
        a_s, a_e = self.window
        return a_s <= round_index <= a_e


def poison_dataset(dataset: Dataset, attack: AttackConfig,
                   rng: np.random.Generator) -> Dataset:
    """Stamp and relabel floor(poison_fraction * n) uniformly chosen samples."""
    n = len(dataset)
    n_poison = int(attack.poison_fraction * n)
    if n_poison == 0:
        return dataset
    chosen = rng.choice(n, size=n_poison, replace=False)
    inputs = dataset.inputs.copy()
    labels = dataset.labels.copy()
    inputs[chosen] = apply_trigger(inputs[chosen], attack.trigger)
    labels[chosen] = attack.target_class
    return Dataset(inputs, labels)


def malicious_sgd_at(attack: AttackConfig, benign_eta: float) -> SgdConfig:
    """Malicious config for a round where the scheduled benign rate is ``benign_eta``."""
    return replace(attack.malicious_sgd, eta=attack.beta * benign_eta)


def malicious_update(model, dataset: Dataset, attack: AttackConfig,
                     benign_eta: float, active_malicious_count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Poisoned local training, optionally scaled for model replacement.

    When scaling is configured the delta is multiplied by
    scaling / active_malicious_count so that several simultaneous attackers
    jointly apply the same boost a single one would.
    """
    if active_malicious_count < 1:
        raise ContractViolation("active_malicious_count must be >= 1")
    poisoned = poison_dataset(dataset, attack, rng)
    delta = local_train(model, poisoned, malicious_sgd_at(attack, benign_eta), rng)
    if attack.scaling is not None:
        delta = delta * (attack.scaling / active_malicious_count)
    return delta
