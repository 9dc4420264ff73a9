"""Server-side aggregation rules.

FedAvg plus four robust rules behind one interface: Krum, Multi-Krum,
Bulyan and FoolsGold. All operate on flat update deltas. Tie-breaks go to
the lowest client id everywhere so aggregation is order-independent.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractViolation

__all__ = [
    "Update",
    "FoolsGoldState",
    "fedavg",
    "krum",
    "multikrum",
    "bulyan",
    "foolsgold",
    "Aggregator",
    "make_aggregator",
    "AGGREGATOR_NAMES",
]

AGGREGATOR_NAMES = ("none", "krum", "multikrum", "bulyan", "foolsgold")


@dataclass(frozen=True)
class Update:
    """One client's contribution: flat delta plus its local dataset size."""

    client_id: int
    delta: np.ndarray
    n_samples: int = 1

    def __post_init__(self):
        object.__setattr__(self, "delta", np.asarray(self.delta, dtype=np.float64))
        if not np.all(np.isfinite(self.delta)):
            raise ContractViolation(f"update from client {self.client_id} is non-finite")


def fedavg(updates: list[Update]) -> np.ndarray:
    """Dataset-size weighted mean of the deltas.

    Accumulation runs in client-id order so the result is bit-identical
    under any input permutation.
    """
    if not updates:
        raise ContractViolation("fedavg requires at least one update")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.n_samples for u in ordered)
    out = np.zeros_like(ordered[0].delta)
    for u in ordered:
        out += (u.n_samples / total) * u.delta
    return out


def _krum_scores(deltas: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances to the n - f - 2 nearest other updates.

    The neighbour count is clamped at zero so the Bulyan selection loop can
    keep scoring as its candidate set shrinks below the standalone Krum
    bound; with zero neighbours every score is 0 and the id tie-break decides.
    """
    n = len(deltas)
    sq = np.sum((deltas[:, None, :] - deltas[None, :, :]) ** 2, axis=2)
    k = max(n - f - 2, 0)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(sq[i], i))
        scores[i] = others[:k].sum()
    return scores


def krum(updates: list[Update], f: int) -> Update:
    """Select the update closest (in summed squared distance) to its peers."""
    n = len(updates)
    if n < 2 * f + 3:
        raise ConfigurationError(f"krum requires at least 2f+3 = {2 * f + 3} updates, got {n}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    deltas = np.stack([u.delta for u in ordered])
    scores = _krum_scores(deltas, f)
    best = min(range(n), key=lambda i: (scores[i], ordered[i].client_id))
    return ordered[best]


def multikrum(updates: list[Update], f: int, m: int | None = None) -> np.ndarray:
    """Unweighted mean of the m lowest-scoring updates (default m = n - f)."""
    n = len(updates)
    if n < 2 * f + 3:
        raise ConfigurationError(f"multikrum requires at least 2f+3 = {2 * f + 3} updates, got {n}")
    if m is None:
        m = n - f
    if not 1 <= m <= n:
        raise ConfigurationError(f"m must be in [1, {n}], got {m}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    deltas = np.stack([u.delta for u in ordered])
    scores = _krum_scores(deltas, f)
    ranked = sorted(range(n), key=lambda i: (scores[i], ordered[i].client_id))
    return deltas[ranked[:m]].mean(axis=0)


def bulyan(updates: list[Update], f: int) -> np.ndarray:
    """Krum-based selection followed by a median-centred trimmed mean.

    Selection: repeatedly pick the Krum winner from the remaining updates
    until n - 2f are selected. Aggregation: per coordinate, average the
    beta = n - 4f selected values closest to the coordinate-wise median,
    breaking distance ties by smaller absolute value, then by client id.
    """
    n = len(updates)
    if n < 4 * f + 3:
        raise ConfigurationError(f"bulyan requires at least 4f+3 = {4 * f + 3} updates, got {n}")
    remaining = sorted(updates, key=lambda u: u.client_id)
    selected: list[Update] = []
    while len(selected) < n - 2 * f:
        deltas = np.stack([u.delta for u in remaining])
        scores = _krum_scores(deltas, f)
        best = min(range(len(remaining)), key=lambda i: (scores[i], remaining[i].client_id))
        selected.append(remaining.pop(best))

    sel = np.stack([u.delta for u in selected])
    sel_ids = np.array([u.client_id for u in selected])
    beta = n - 4 * f
    median = np.median(sel, axis=0)
    out = np.empty(sel.shape[1])
    for coord in range(sel.shape[1]):
        col = sel[:, coord]
        order = sorted(
            range(len(col)),
            key=lambda i: (abs(col[i] - median[coord]), abs(col[i]), sel_ids[i]),
        )
        out[coord] = col[order[:beta]].mean()
    return out


@dataclass
class FoolsGoldState:
    """Per-client historical aggregates plus the weights of the last round.

    ``history`` accumulates every delta a client has ever submitted;
    ``weights`` holds the re-weighting coefficients (in [0, 1]) computed for
    the clients of the most recent round.
    """

    history: dict[int, np.ndarray] = field(default_factory=dict)
    weights: dict[int, float] = field(default_factory=dict)

    def copy(self) -> "FoolsGoldState":
        return FoolsGoldState({cid: vec.copy() for cid, vec in self.history.items()},
                              dict(self.weights))


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0  # all-zero history carries no direction information
    return float(a @ b / (na * nb))


def foolsgold(updates: list[Update],
              state: FoolsGoldState) -> tuple[np.ndarray, FoolsGoldState]:
    """Similarity-based re-weighting that suppresses colluding clients.

    Historical aggregates are updated first; weights are then recomputed
    from scratch every round: pairwise cosine similarity of the aggregates,
    pardoning of clients whose peak similarity is dominated by another
    client's, 1 - max similarity, rescale by the maximum, and a logit
    transform clipped to [0, 1]. Returns the weight-normalised combination
    and the new state.
    """
    if not updates:
        raise ContractViolation("foolsgold requires at least one update")
    new_state = state.copy()
    for u in updates:
        if u.client_id in new_state.history:
            new_state.history[u.client_id] = new_state.history[u.client_id] + u.delta
        else:
            new_state.history[u.client_id] = u.delta.copy()

    ordered = sorted(updates, key=lambda u: u.client_id)
    n = len(ordered)
    if n == 1:
        new_state.weights = {ordered[0].client_id: 1.0}
        return ordered[0].delta.copy(), new_state

    hist = [new_state.history[u.client_id] for u in ordered]
    cs = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            cs[i, j] = cs[j, i] = _cosine(hist[i], hist[j])
    v = cs.max(axis=1)

    for i in range(n):
        for j in range(n):
            if i != j and v[j] > v[i] and v[j] > 0:
                cs[i, j] *= v[i] / v[j]

    weights = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    top = weights.max()
    if top > 0:
        weights = weights / top
    with np.errstate(divide="ignore"):
        logits = np.where(weights >= 1.0, np.inf,
                          np.where(weights <= 0.0, -np.inf,
                                   np.log(weights / (1.0 - weights)) + 0.5))
    weights = np.clip(logits, 0.0, 1.0)
    new_state.weights = {u.client_id: float(w) for u, w in zip(ordered, weights)}

    total = weights.sum()
    if total == 0.0:
        return np.zeros_like(ordered[0].delta), new_state
    combined = np.zeros_like(ordered[0].delta)
    for w, u in zip(weights, ordered):
        combined += w * u.delta
    return combined / total, new_state


class Aggregator:
    """Aggregation rule selected by name; FoolsGold carries state across rounds."""

    def __init__(self, name: str, f: int = 0, m: int | None = None):
        if name not in AGGREGATOR_NAMES:
            raise ConfigurationError(
                f"unknown aggregator {name!r}; expected one of {AGGREGATOR_NAMES}"
            )
        self.name = name
        self.f = f
        self.m = m
        self._fg_state = FoolsGoldState()

    def aggregate(self, updates: list[Update]) -> np.ndarray:
        if self.name == "none":
            return fedavg(updates)
        if self.name == "krum":
            return krum(updates, self.f).delta.copy()
        if self.name == "multikrum":
            return multikrum(updates, self.f, self.m)
        if self.name == "bulyan":
            return bulyan(updates, self.f)
        combined, self._fg_state = foolsgold(updates, self._fg_state)
        return combined


def make_aggregator(name: str, f: int = 0, m: int | None = None) -> Aggregator:
    return Aggregator(name, f=f, m=m)
