"""Benign-hyperparameter exploration.

A solution is a hyperparameter tuple evaluated to a (MTA, BDA) pair. One
solution dominates another when it is strictly better on both objectives
(higher MTA and lower BDA); the Pareto frontier is the set of non-dominated
solutions. The space can be explored exhaustively (grid_search) or with
NSGA-II over the discrete domains. Two adversary models react to the
benign choice: a greedy per-parameter response table and a stochastic
joint search (NSGA-II run over the malicious space by the harness).
Constrained selection picks the best feasible point for either side of the
accuracy-drop constraint.
"""
from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation

logger = logging.getLogger(__name__)

__all__ = [
    "HyperTuple",
    "SolutionPoint",
    "ConstraintSpec",
    "GreedyResponseTable",
    "dominates",
    "pareto_frontier",
    "grid_search",
    "nsga2",
    "greedy_adapt",
    "stochastic_adapt",
    "build_response_table",
    "constrained_best",
    "write_frontier_csv",
    "write_response_table_csv",
    "PARAM_NAMES",
]

PARAM_NAMES = ("eta", "mu", "weight_decay", "epochs", "batch_size")


@dataclass(frozen=True)
class HyperTuple:
    """One point of the search space (learning rate, momentum, weight decay,
    local epochs, batch size)."""

    eta: float
    mu: float
    weight_decay: float
    epochs: int
    batch_size: int

    def astuple(self) -> tuple:
        return (self.eta, self.mu, self.weight_decay, self.epochs, self.batch_size)


@dataclass(frozen=True)
class SolutionPoint:
    """A hyperparameter tuple with its measured objectives."""

    omega: HyperTuple
    mta: float
    bda: float
    diverged: bool = False

    def __post_init__(self):
        if not self.diverged and not (0.0 <= self.mta <= 1.0 and 0.0 <= self.bda <= 1.0):
            raise ContractViolation("mta and bda must be in [0, 1] for evaluated points")


def dominates(a: SolutionPoint, b: SolutionPoint) -> bool:
    """True iff a is strictly better on both objectives."""
    if a.diverged or b.diverged:
        raise ContractViolation("dominance is undefined for diverged points")
    return a.mta > b.mta and a.bda < b.bda


def pareto_frontier(points: list[SolutionPoint]) -> list[SolutionPoint]:
    """All non-dominated points, ordered by descending MTA.

    Diverged points are filtered out first. Points with identical
    objectives are mutually non-dominated and all kept.
    """
    alive = [p for p in points if not p.diverged]
    if not alive:
        return []
    # sweep in descending-MTA order; a point is dominated iff some point of
    # strictly higher MTA has strictly lower BDA
    alive.sort(key=lambda p: (-p.mta, p.bda))
    frontier: list[SolutionPoint] = []
    best_bda = float("inf")
    i = 0
    while i < len(alive):
        j = i
        while j < len(alive) and alive[j].mta == alive[i].mta:
            j += 1
        group = alive[i:j]
        frontier.extend(p for p in group if p.bda <= best_bda)
        best_bda = min(best_bda, min(p.bda for p in group))
        i = j
    return frontier


def _space_domains(space: dict):
    domains = {}
    for name in PARAM_NAMES:
        if name not in space or not space[name]:
            raise ConfigurationError(f"search space must define values for {name!r}")
        domains[name] = list(space[name])
    return domains


def grid_search(space: dict, evaluator) -> list[SolutionPoint]:
    """Evaluate every point of the Cartesian product once, in deterministic order.

    An evaluator failure marks that point diverged and the search continues.
    """
    domains = _space_domains(space)
    points = []
    for combo in itertools.product(*(domains[n] for n in PARAM_NAMES)):
        omega = HyperTuple(*combo)
        points.append(_evaluate(omega, evaluator))
    return points


def _evaluate(omega: HyperTuple, evaluator) -> SolutionPoint:
    try:
        point = evaluator(omega)
    except Exception:
        return SolutionPoint(omega, 0.0, 1.0, diverged=True)
    if point.diverged:
        return point
    return point


def _non_dominated_sort(objs: list[tuple[float, float]]) -> list[int]:
    """Rank per individual from repeated non-dominated front peeling
    (objectives minimised)."""
    n = len(objs)
    dominated_by = [0] * n
    dominates_set: list[list[int]] = [[] for _ in range(n)]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if (objs[p][0] <= objs[q][0] and objs[p][1] <= objs[q][1]
                    and objs[p] != objs[q]):
                dominates_set[p].append(q)
            elif (objs[q][0] <= objs[p][0] and objs[q][1] <= objs[p][1]
                    and objs[q] != objs[p]):
                dominated_by[p] += 1
    ranks = [0] * n
    front = [i for i in range(n) if dominated_by[i] == 0]
    level = 0
    while front:
        nxt = []
        for p in front:
            ranks[p] = level
            for q in dominates_set[p]:
                dominated_by[q] -= 1
                if dominated_by[q] == 0:
                    nxt.append(q)
        front = nxt
        level += 1
    return ranks


def _crowding(front: list[int], objs: list[tuple[float, float]]) -> dict[int, float]:
    dist = {i: 0.0 for i in front}
    for m in range(2):
        ordered = sorted(front, key=lambda i: objs[i][m])
        dist[ordered[0]] = dist[ordered[-1]] = float("inf")
        lo, hi = objs[ordered[0]][m], objs[ordered[-1]][m]
        if hi == lo:
            continue
        for pos in range(1, len(ordered) - 1):
            gap = objs[ordered[pos + 1]][m] - objs[ordered[pos - 1]][m]
            dist[ordered[pos]] += gap / (hi - lo)
    return dist


def nsga2(space: dict, evaluator, population: int = 12, generations: int = 20,
          seed: int = 0) -> list[SolutionPoint]:
    """NSGA-II over the discrete space; returns the final non-dominated set.

    Uniform random initialisation, binary tournament on (rank, crowding),
    uniform crossover with probability 0.9, per-parameter mutation to a
    neighbouring domain value with probability 1/num_params, and elitist
    survival by non-dominated sorting then crowding distance. Every distinct
    tuple is evaluated once (results are cached) and the returned front is
    the non-dominated set over all evaluated tuples, so exhausting a small
    space recovers the grid-search frontier exactly.
    """
    if population < 4 or population % 2:
        raise ConfigurationError("population must be even and >= 4")
    domains = _space_domains(space)
    names = list(PARAM_NAMES)
    rng = np.random.default_rng(seed)
    cache: dict[tuple, SolutionPoint] = {}

    def evaluate(omega: HyperTuple) -> SolutionPoint:
        key = omega.astuple()
        if key not in cache:
            cache[key] = _evaluate(omega, evaluator)
        return cache[key]

    def objectives(point: SolutionPoint) -> tuple[float, float]:
        if point.diverged:
            return (float("inf"), float("inf"))
        return (-point.mta, point.bda)

    def random_tuple() -> HyperTuple:
        return HyperTuple(**{n: domains[n][rng.integers(len(domains[n]))] for n in names})

    def mutate(omega: HyperTuple) -> HyperTuple:
        values = {}
        for n in names:
            domain = domains[n]
            value = getattr(omega, n)
            if rng.random() < 1.0 / len(names) and len(domain) > 1:
                idx = domain.index(value)
                if idx == 0:
                    idx = 1
                elif idx == len(domain) - 1:
                    idx -= 1
                else:
                    idx += int(rng.integers(2)) * 2 - 1
                value = domain[idx]
            values[n] = value
        return HyperTuple(**values)

    def crossover(a: HyperTuple, b: HyperTuple) -> tuple[HyperTuple, HyperTuple]:
        if rng.random() >= 0.9:
            return a, b
        va, vb = {}, {}
        for n in names:
            if rng.random() < 0.5:
                va[n], vb[n] = getattr(a, n), getattr(b, n)
            else:
                va[n], vb[n] = getattr(b, n), getattr(a, n)
        return HyperTuple(**va), HyperTuple(**vb)

    pop = [random_tuple() for _ in range(population)]
    evaluated = [evaluate(ind) for ind in pop]

    for _ in range(generations):
        objs = [objectives(p) for p in evaluated]
        ranks = _non_dominated_sort(objs)
        fronts: dict[int, list[int]] = {}
        for i, r in enumerate(ranks):
            fronts.setdefault(r, []).append(i)
        crowding: dict[int, float] = {}
        for members in fronts.values():
            crowding.update(_crowding(members, objs))

        def tournament() -> HyperTuple:
            i, j = int(rng.integers(len(pop))), int(rng.integers(len(pop)))
            if ranks[i] != ranks[j]:
                return pop[i] if ranks[i] < ranks[j] else pop[j]
            if crowding[i] != crowding[j]:
                return pop[i] if crowding[i] > crowding[j] else pop[j]
            return pop[min(i, j)]

        offspring: list[HyperTuple] = []
        while len(offspring) < population:
            c1, c2 = crossover(tournament(), tournament())
            offspring.append(mutate(c1))
            if len(offspring) < population:
                offspring.append(mutate(c2))

        merged = pop + offspring
        merged_eval = evaluated + [evaluate(ind) for ind in offspring]
        merged_objs = [objectives(p) for p in merged_eval]
        merged_ranks = _non_dominated_sort(merged_objs)
        merged_fronts: dict[int, list[int]] = {}
        for i, r in enumerate(merged_ranks):
            merged_fronts.setdefault(r, []).append(i)
        survivors: list[int] = []
        for level in sorted(merged_fronts):
            members = merged_fronts[level]
            if len(survivors) + len(members) <= population:
                survivors.extend(members)
            else:
                dist = _crowding(members, merged_objs)
                members = sorted(members, key=lambda i: (-dist[i], i))
                survivors.extend(members[: population - len(survivors)])
                break
        pop = [merged[i] for i in survivors]
        evaluated = [merged_eval[i] for i in survivors]

    return pareto_frontier(list(cache.values()))


@dataclass
class GreedyResponseTable:
    """Per-parameter best malicious response keyed by (attack, param, benign value)."""

    entries: dict[tuple[str, str, float], float]

    def lookup(self, attack_name: str, param: str, benign_value):
        return self.entries.get((attack_name, param, float(benign_value)))


def greedy_adapt(benign: HyperTuple, table: GreedyResponseTable,
                 attack_name: str) -> HyperTuple:
    """Assemble the malicious tuple one parameter at a time from the table.

    Parameters without an entry fall back to copying the benign value.
    """
    values = {}
    for f in fields(HyperTuple):
        benign_value = getattr(benign, f.name)
        response = table.lookup(attack_name, f.name, benign_value)
        if response is None:
            logger.debug("no %s response for %s=%s under %r; copying benign value",
                         attack_name, f.name, benign_value, attack_name)
            values[f.name] = benign_value
        else:
            values[f.name] = type(benign_value)(response)
    return HyperTuple(**values)


def build_response_table(rows) -> GreedyResponseTable:
    """Best (argmax BDA) malicious value per benign value from single-axis sweeps.

    ``rows`` are (attack_name, param, benign_value, malicious_value, bda)
    tuples; ties resolve to the smaller malicious value for determinism.
    """
    best: dict[tuple[str, str, float], tuple[float, float]] = {}
    for attack_name, param, benign_value, malicious_value, bda in rows:
        key = (attack_name, param, float(benign_value))
        cand = (-float(bda), float(malicious_value))
        if key not in best or cand < best[key]:
            best[key] = cand
    return GreedyResponseTable({k: v[1] for k, v in best.items()})


def stochastic_adapt(space: dict, evaluator, population: int = 12,
                     generations: int = 20, seed: int = 0,
                     constraint: "ConstraintSpec | None" = None):
    """Joint malicious-hyperparameter search (the stochastic adversary).

    ``evaluator`` maps a malicious tuple to a SolutionPoint whose (mta, bda)
    are the global model's accuracies under that attack. The adversary
    maximises BDA while keeping MTA high, which is the mirror image of the
    defender's objectives, so the search runs NSGA-II with the BDA axis
    flipped. Returns (front, best) where ``best`` is the accuracy-constrained
    pick when a constraint is supplied (None when infeasible), else the
    unconstrained BDA maximiser.
    """
    def flipped(omega: HyperTuple) -> SolutionPoint:
        point = evaluator(omega)
        if point.diverged:
            return point
        return replace(point, bda=1.0 - point.bda)

    front = [p if p.diverged else replace(p, bda=1.0 - p.bda)
             for p in nsga2(space, flipped, population=population,
                            generations=generations, seed=seed)]
    if constraint is not None:
        best = constrained_best(front, constraint, "adversary")
    else:
        best = max(front, key=lambda p: (p.bda, p.mta)) if front else None
    return front, best


@dataclass(frozen=True)
class ConstraintSpec:
    """Accuracy-drop slacks and the reference accuracies they are measured from."""

    epsilon_def: float = 0.0
    epsilon_adv: float = 0.0
    mta_ideal: float | None = None
    mta_clean: float | None = None

    def __post_init__(self):
        if self.epsilon_def < 0 or self.epsilon_adv < 0:
            raise ContractViolation("epsilons must be >= 0")


def constrained_best(points: list[SolutionPoint], spec: ConstraintSpec,
                     side: str) -> SolutionPoint | None:
    """Best feasible point for one side of the accuracy constraint.

    defender: minimise BDA subject to mta_ideal - mta <= epsilon_def.
    adversary: maximise BDA subject to mta_clean - mta <= epsilon_adv.
    Returns None when no point satisfies the constraint.
    """
    if side not in ("defender", "adversary"):
        raise ConfigurationError("side must be 'defender' or 'adversary'")
    reference = spec.mta_ideal if side == "defender" else spec.mta_clean
    if reference is None:
        raise ContractViolation(f"reference MTA for the {side} side is required")
    slack = spec.epsilon_def if side == "defender" else spec.epsilon_adv
    feasible = [p for p in points if not p.diverged and reference - p.mta <= slack]
    if not feasible:
        return None
    if side == "defender":
        return min(feasible, key=lambda p: (p.bda, -p.mta, p.omega.astuple()))
    return max(feasible, key=lambda p: (p.bda, p.mta, tuple(-x for x in p.omega.astuple())))


def write_frontier_csv(points: list[SolutionPoint], frontier: list[SolutionPoint],
                       path) -> None:
    """CSV of every point with its objectives and an on_frontier flag."""
    on_frontier = {p.omega.astuple() for p in frontier}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(PARAM_NAMES) + ["mta", "bda", "diverged", "on_frontier"])
        for p in points:
            writer.writerow(list(p.omega.astuple()) + [
                "NA" if p.diverged else repr(p.mta),
                "NA" if p.diverged else repr(p.bda),
                int(p.diverged),
                int(p.omega.astuple() in on_frontier),
            ])


def write_response_table_csv(table: GreedyResponseTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attack", "param", "benign_value", "malicious_value"])
        for (attack_name, param, benign_value), malicious_value in sorted(table.entries.items()):
            writer.writerow([attack_name, param, benign_value, malicious_value])
