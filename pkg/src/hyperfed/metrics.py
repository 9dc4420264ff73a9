"""Accuracy metrics: main-task accuracy, backdoor accuracy, lifespan, phase averages."""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .models import Dataset

__all__ = [
    "MetricConfig",
    "PhaseAverages",
    "predict_classes",
    "mta",
    "bda",
    "span",
    "phase_averages",
]


@dataclass(frozen=True)
class MetricConfig:
    """Lifespan threshold (default 0.5 for the 50% lifespan) and attack end round."""

    span_threshold: float = 0.5
    attack_end_round: int = 0

    def __post_init__(self):
        if not 0.0 <= self.span_threshold <= 1.0:
            raise ContractViolation("span_threshold must be in [0, 1]")


def predict_classes(model, inputs: np.ndarray) -> np.ndarray:
    """Argmax class of the two-class sigmoid model: 1 iff logit > 0."""
    return (model.logits(np.asarray(inputs, dtype=np.float64)) > 0.0).astype(np.int64)


def mta(model, test_set: Dataset) -> float:
    """Fraction of clean samples classified correctly."""
    if len(test_set) == 0:
        raise ContractViolation("test set must be non-empty")
    return float(np.mean(predict_classes(model, test_set.inputs) == test_set.labels))


def bda(model, triggered_inputs: np.ndarray, target_class: int) -> float:
    """Fraction of already-triggered inputs classified as the target class."""
    triggered_inputs = np.asarray(triggered_inputs, dtype=np.float64)
    if len(triggered_inputs) == 0:
        raise ContractViolation("backdoor set must be non-empty")
    return float(np.mean(predict_classes(model, triggered_inputs) == target_class))


def _as_round_map(series) -> dict[int, float]:
    if isinstance(series, Mapping):
        return {int(t): float(v) for t, v in series.items()}
    # plain sequences are read as rounds 1..n, matching the engine's round log
    return {t + 1: float(v) for t, v in enumerate(series)}


def span(bda_series, cfg: MetricConfig) -> int:
    """Rounds after the attack end during which the backdoor stays above threshold.

    Returns max{t : bda_t > threshold, t > t0} - t0, or 0 when no round after
    t0 exceeds the threshold. Values at or before t0 are ignored, and gaps do
    not matter: the last exceedance counts.
    """
    series = _as_round_map(bda_series)
    t0 = cfg.attack_end_round
    over = [t for t, v in series.items() if t > t0 and v > cfg.span_threshold]
    return max(over) - t0 if over else 0


@dataclass(frozen=True)
class PhaseAverages:
    """Mean MTA/BDA during the attack window and (starred) after it."""

    mta: float
    bda: float
    mta_post: float | None
    bda_post: float | None


def phase_averages(logs, window: tuple[int, int]) -> PhaseAverages:
    """Average the per-round metrics over the attack phase and the post phase.

    ``logs`` is a sequence of objects with ``round``, ``mta`` and ``bda``
    attributes. The post-attack values are None (not zero) when no round
    lies beyond the window.
    """
    a_s, a_e = window
    rounds = [log.round for log in logs]
    if not rounds or a_s < min(rounds) or a_e > max(rounds) or a_s > a_e:
        raise ContractViolation(f"window {window} outside logged rounds")
    during = [log for log in logs if a_s <= log.round <= a_e]
    after = [log for log in logs if log.round > a_e]
    mta_during = float(np.mean([log.mta for log in during]))
    bda_during = float(np.mean([log.bda for log in during]))
    if after:
        return PhaseAverages(
            mta_during, bda_during,
            float(np.mean([log.mta for log in after])),
            float(np.mean([log.bda for log in after])),
        )
    return PhaseAverages(mta_during, bda_during, None, None)
