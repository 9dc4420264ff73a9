"""Federated training loop.

Clients hold disjoint Dirichlet-partitioned shards of the training set. A
fixed fraction of them is designated malicious before round one; those
clients poison their updates only inside the attack window and behave
benignly otherwise. Each round the server selects M clients, collects
their local-training deltas, feeds them through the configured aggregation
rule, and applies the combined delta to the global parameters. MTA and BDA
are evaluated on held-out sets after every round.

All randomness is drawn from streams keyed by (master seed, purpose,
client id, round), so runs are reproducible bit for bit and independent of
client ordering or scheduling.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .aggregation import Aggregator, Update
from .analytic import gen_main_dataset
from .attack import AttackConfig, apply_trigger, malicious_update
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .metrics import bda, mta
from .models import Dataset, MultilayerPerceptron, SgdConfig, local_train
from .seeding import stream

__all__ = [
    "FederationConfig",
    "ClientRecord",
    "RoundLog",
    "FederationData",
    "FederationResult",
    "dirichlet_partition",
    "lr_at_round",
    "select_clients",
    "build_clients",
    "make_toy_federation_data",
    "run_round",
    "run_federation",
    "write_round_log_csv",
]

DEFAULT_MLP_LAYERS = (2, 16, 16, 1)


@dataclass(frozen=True)
class FederationConfig:
    """System-level knobs: population, sampling, attack window, schedule, seed."""

    n_clients: int = 20
    clients_per_round: int = 5
    malicious_fraction: float = 0.2
    rounds_total: int = 400
    attack_start: int = 101
    attack_end: int = 200
    dirichlet_concentration: float = 0.9
    lr_decay_gamma: float = 0.999
    master_seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigurationError("n_clients must be >= 2")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigurationError("clients_per_round must be in [1, n_clients]")
        if not 0.0 <= self.malicious_fraction <= 0.5:
            raise ConfigurationError("malicious_fraction must be in [0, 0.5]")
        if self.rounds_total < 0:
            raise ConfigurationError("rounds_total must be >= 0")
        if self.attack_start > self.attack_end:
            raise ConfigurationError("attack window must satisfy start <= end")
        if not 0.0 < self.lr_decay_gamma <= 1.0:
            raise ConfigurationError("lr_decay_gamma must be in (0, 1]")
        if self.dirichlet_concentration <= 0:
            raise ConfigurationError("dirichlet_concentration must be > 0")

    @property
    def n_malicious(self) -> int:
        return int(self.malicious_fraction * self.n_clients)

    def check_decay_supports_epochs(self, epochs: int) -> None:
        """Schedule sanity: gamma must lie in [2^(-1/E), 1] for convergence."""
        lo = 2.0 ** (-1.0 / epochs)
        if not lo <= self.lr_decay_gamma <= 1.0:
            raise ConfigurationError(
                f"lr_decay_gamma {self.lr_decay_gamma} outside [{lo:.6f}, 1] for E={epochs}"
            )


@dataclass
class ClientRecord:
    """One client: id, local shard and role."""

    id: int
    dataset: Dataset
    is_malicious: bool = False

    @property
    def n_samples(self) -> int:
        return len(self.dataset)


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected: tuple[int, ...]
    mta: float
    bda: float
    n_diverged: int = 0
    no_op: bool = False
    benign_eta: float = 0.0


def lr_at_round(eta0: float, gamma: float, t: int) -> float:
    """Decayed learning rate eta0 * gamma^t (t counts completed decay steps)."""
    if t < 0:
        raise ContractViolation("t must be >= 0")
    return eta0 * gamma**t


def select_clients(n_clients: int, m: int, round_index: int, master_seed: int) -> tuple[int, ...]:
    """Uniform sample of m client ids without replacement, keyed by (seed, round)."""
    if m > n_clients:
        raise ContractViolation("cannot select more clients than exist")
    rng = stream(master_seed, "selection", round_index)
    chosen = rng.choice(n_clients, size=m, replace=False)
    return tuple(sorted(int(c) for c in chosen))


def dirichlet_partition(dataset: Dataset, n_clients: int, concentration: float,
                        rng: np.random.Generator, min_samples: int = 1) -> list[Dataset]:
    """Label-wise Dirichlet split into disjoint, exhaustive client shards.

    For each class, proportions ~ Dirichlet(concentration * 1) assign that
    class's samples to clients by cumulative share. Draws leaving any client
    below ``min_samples`` are retried up to 10 times (the default of one
    sample guarantees every client can participate; the engine raises the
    floor to the batch size so local step counts stay >= 1).
    """
    if len(dataset) < n_clients:
        raise ConfigurationError("dataset smaller than client count")
    labels = dataset.labels
    classes = np.unique(labels)
    for _ in range(10):
        shards: list[list[int]] = [[] for _ in range(n_clients)]
        for cls in classes:
            idx = np.flatnonzero(labels == cls)
            idx = idx[rng.permutation(len(idx))]
            proportions = rng.dirichlet(np.full(n_clients, concentration))
            cuts = (np.cumsum(proportions) * len(idx)).astype(int)[:-1]
            for client_id, part in enumerate(np.split(idx, cuts)):
                shards[client_id].extend(part.tolist())
        if min(len(s) for s in shards) >= min_samples:
            return [dataset.take(np.array(sorted(s), dtype=int)) for s in shards]
    raise ConfigurationError(
        f"could not partition {len(dataset)} samples into {n_clients} shards "
        f"of at least {min_samples} after 10 attempts"
    )


def build_clients(train: Dataset, cfg: FederationConfig,
                  min_samples: int = 1) -> dict[int, ClientRecord]:
    """Partition the training set and statically designate the malicious pool."""
    part_rng = stream(cfg.master_seed, "partition")
    shards = dirichlet_partition(train, cfg.n_clients, cfg.dirichlet_concentration,
                                 part_rng, min_samples=min_samples)
    role_rng = stream(cfg.master_seed, "roles")
    malicious = set(
        int(c) for c in role_rng.choice(cfg.n_clients, size=cfg.n_malicious, replace=False)
    )
    return {
        cid: ClientRecord(cid, shard, is_malicious=cid in malicious)
        for cid, shard in enumerate(shards)
    }


@dataclass(frozen=True)
class FederationData:
    """Training pool plus held-out evaluation sets."""

    train: Dataset
    test_clean: Dataset
    test_backdoor_inputs: np.ndarray
    target_class: int


def make_toy_federation_data(attack: AttackConfig, seed: int,
                             train_size: int = 8000, test_size: int = 2000,
                             exclude_target_class: bool = False) -> FederationData:
    """Generate 2-D toy-task train/test splits plus a trigger-stamped BDA set.

    ``exclude_target_class`` drops evaluation samples whose clean label
    already equals the target class before stamping; off by default so the
    backdoor-accuracy count covers the whole stamped set.
    """
    rng = stream(seed, "federation-data")
    train = gen_main_dataset(train_size, rng)
    test_clean = gen_main_dataset(test_size, rng)
    bd_pool = gen_main_dataset(test_size, rng)
    if exclude_target_class:
        keep = bd_pool.labels != attack.target_class
        bd_pool = bd_pool.take(np.flatnonzero(keep))
    stamped = apply_trigger(bd_pool.inputs, attack.trigger)
    return FederationData(train, test_clean, stamped, attack.target_class)


@dataclass
class FederationResult:
    logs: list[RoundLog]
    final_params: np.ndarray
    clients: dict[int, ClientRecord] = field(repr=False, default_factory=dict)


def run_round(global_params: np.ndarray, model_template, clients: dict[int, ClientRecord],
              cfg: FederationConfig, benign_cfg: SgdConfig,
              attack: AttackConfig | None, aggregator: Aggregator,
              t: int, data: FederationData) -> tuple[np.ndarray, RoundLog]:
    """One synchronous round: select, train locally, aggregate, evaluate.

    Clients that diverge are dropped from the aggregation (FedAvg weights
    renormalise over the survivors). If every selected update diverges the
    round is a no-op and flagged.
    """
    if not 1 <= t <= cfg.rounds_total:
        raise ContractViolation(f"round {t} outside [1, {cfg.rounds_total}]")
    selected = select_clients(cfg.n_clients, cfg.clients_per_round, t, cfg.master_seed)
    eta_t = lr_at_round(benign_cfg.eta, cfg.lr_decay_gamma, t - 1)
    round_cfg = benign_cfg.with_eta(eta_t)

    attack_active = attack is not None and attack.active_at(t)
    active_attackers = (
        sum(1 for cid in selected if clients[cid].is_malicious) if attack_active else 0
    )

    updates: list[Update] = []
    n_diverged = 0
    for cid in selected:
        client = clients[cid]
        rng = stream(cfg.master_seed, "client", cid, t)
        local_model = model_template.copy()
        local_model.params = global_params.copy()
        try:
            if attack_active and client.is_malicious:
                delta = malicious_update(local_model, client.dataset, attack,
                                         eta_t, active_attackers, rng)
            else:
                delta = local_train(local_model, client.dataset, round_cfg, rng)
            updates.append(Update(cid, delta, client.n_samples))
        except DivergenceError:
            n_diverged += 1

    if updates:
        new_params = global_params + aggregator.aggregate(updates)
        no_op = False
    else:
        new_params = global_params.copy()
        no_op = True

    eval_model = model_template.copy()
    eval_model.params = new_params
    log = RoundLog(
        round=t,
        selected=selected,
        mta=mta(eval_model, data.test_clean),
        bda=bda(eval_model, data.test_backdoor_inputs, data.target_class),
        n_diverged=n_diverged,
        no_op=no_op,
        benign_eta=eta_t,
    )
    return new_params, log


def run_federation(cfg: FederationConfig, benign_cfg: SgdConfig,
                   attack: AttackConfig | None, aggregator: Aggregator,
                   data: FederationData | None = None,
                   model_template=None) -> FederationResult:
    """Run the full schedule and return per-round logs plus final parameters."""
    if attack is not None and data is None:
        data = make_toy_federation_data(attack, cfg.master_seed)
    if data is None:
        raise ConfigurationError("run_federation needs data when no attack is configured")
    cfg.check_decay_supports_epochs(benign_cfg.epochs)

    if model_template is None:
        model_template = MultilayerPerceptron(
            DEFAULT_MLP_LAYERS, rng=stream(cfg.master_seed, "model-init")
        )
    min_shard = benign_cfg.batch_size
    if attack is not None:
        min_shard = max(min_shard, attack.malicious_sgd.batch_size)
    clients = build_clients(data.train, cfg, min_samples=min_shard)

    params = model_template.params.copy()
    logs: list[RoundLog] = []
    for t in range(1, cfg.rounds_total + 1):
        params, log = run_round(params, model_template, clients, cfg, benign_cfg,
                                attack, aggregator, t, data)
        logs.append(log)
    return FederationResult(logs=logs, final_params=params, clients=clients)


def write_round_log_csv(logs, path) -> None:
    """Round log CSV: round, mta, bda, selected_ids (semicolon-joined), n_diverged."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "mta", "bda", "selected_ids", "n_diverged"])
        for log in logs:
            writer.writerow([
                log.round,
                repr(log.mta),
                repr(log.bda),
                ";".join(str(c) for c in log.selected),
                log.n_diverged,
            ])
