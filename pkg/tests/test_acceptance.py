"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The heavier end-to-end
criteria take a few minutes combined; every check is deterministic.
"""
import time

import numpy as np
import pytest

from hyperfed.aggregation import (FoolsGoldState, bulyan, foolsgold, krum,
                                  make_aggregator, multikrum)
from hyperfed.analytic import avg_malicious_loss, default_group_hyper, sweep_surface
from hyperfed.attack import AttackConfig, TriggerSpec
from hyperfed.config import loads_config
from hyperfed.federation import (FederationConfig, make_toy_federation_data,
                                 run_federation)
from hyperfed.metrics import MetricConfig, phase_averages, span
from hyperfed.models import SgdConfig
from hyperfed.regression import ols_regress
from hyperfed.runner import run_experiment
from hyperfed.search import (HyperTuple, SolutionPoint, grid_search, nsga2,
                             pareto_frontier)

from test_aggregation import bulyan_oracle, krum_oracle, multikrum_oracle, updates_from
from test_models import finite_difference_grad, random_model_and_batch
from test_regression import ols_oracle
from test_search import SMALL_SPACE, pareto_oracle, synth_evaluator


def verdict(name: str, ok: bool, detail: str = ""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}" + (f" ({detail})" if detail else ""))
    assert ok, f"{name}: {detail}"


BETA_GRID = (0.5, 0.7349, 1.0801, 1.5874, 2.3331, 3.429, 5.0397, 7.407, 10.8863, 16.0)


def test_c01_learning_rate_trend():
    """Average malicious loss is non-decreasing in the benign learning rate."""
    start = time.monotonic()
    etas = (0.05, 0.1, 0.2, 0.5)
    grid = sweep_surface("eta_b", etas, "beta", BETA_GRID,
                         default_group_hyper(), rounds=200, seed=0)
    values = grid.values
    good_cols = 0
    for j in range(len(BETA_GRID)):
        col = values[:, j]
        if np.all(np.isfinite(col)) and np.all(np.diff(col) >= -1e-12):
            good_cols += 1
    elapsed = time.monotonic() - start
    frac = good_cols / len(BETA_GRID)
    verdict("C1 learning-rate trend",
            frac >= 0.9 and elapsed < 60,
            f"{good_cols}/{len(BETA_GRID)} monotone beta columns, {elapsed:.1f}s")


def test_c02_epochs_and_batch_trend():
    """More benign local steps (higher E_b, smaller B_b) raise malicious loss."""
    start = time.monotonic()
    E_vals = (2, 5, 10, 20)
    e_grid = sweep_surface("E_b", E_vals, "E_m", E_vals,
                           default_group_hyper(), rounds=200, seed=0, train_size=128)
    e_cols = sum(
        1 for j in range(len(E_vals))
        if np.all(np.isfinite(e_grid.values[:, j]))
        and np.all(np.diff(e_grid.values[:, j]) >= -1e-12)
    )
    B_vals = (32, 64, 128)
    b_grid = sweep_surface("B_b", B_vals, "B_m", B_vals,
                           default_group_hyper(), rounds=200, seed=0, train_size=128)
    b_cols = sum(
        1 for j in range(len(B_vals))
        if np.all(np.isfinite(b_grid.values[:, j]))
        and np.all(np.diff(b_grid.values[:, j]) <= 1e-12)
    )
    elapsed = time.monotonic() - start
    ok = e_cols / len(E_vals) >= 0.9 and b_cols / len(B_vals) >= 0.9 and elapsed < 300
    verdict("C2 local-epochs/batch-size trend", ok,
            f"E: {e_cols}/4 non-decreasing, B: {b_cols}/3 non-increasing, {elapsed:.1f}s")


def test_c03_beta_asymptote():
    """Loss increments shrink as the relative malicious rate doubles."""
    losses = [avg_malicious_loss(default_group_hyper(eta_b=0.2, beta=float(b)),
                                 rounds=200, seed=0)
              for b in (1, 2, 4, 8, 16)]
    increments = np.diff(losses)
    ok = np.all(np.isfinite(losses)) and abs(increments[-1]) < abs(increments[0])
    verdict("C3 beta asymptote", bool(ok),
            f"first increment {increments[0]:+.4f}, last {increments[-1]:+.4f}")


def test_c04_gradient_oracle():
    """Analytic gradients match central finite differences on random draws."""
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        model, X, y = random_model_and_batch(rng)
        _, grad = model.loss_and_grad(X, y)
        oracle = finite_difference_grad(model, X, y)
        err = np.abs(grad - oracle) / np.maximum(np.abs(oracle), 1e-3)
        mismatch = np.abs(grad - oracle)
        rel_ok = np.all((mismatch <= 1e-4 * np.abs(oracle)) | (mismatch <= 1e-7))
        worst = max(worst, float(err.max()))
        if not rel_ok:
            verdict("C4 gradient oracle", False, "coordinate outside tolerance")
    verdict("C4 gradient oracle", True, f"100 draws, worst scaled error {worst:.2e}")


def test_c05_robust_aggregation_oracles():
    """Krum, Multi-Krum and Bulyan match brute-force implementations exactly."""
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = int(rng.integers(5, 10))
        f = int(rng.integers(0, (n - 3) // 2 + 1))
        dim = int(rng.integers(1, 7))
        ups = updates_from([rng.normal(0, 1, dim) for _ in range(n)],
                           ids=rng.permutation(60)[:n].tolist())
        if krum(ups, f).client_id != krum_oracle(ups, f):
            verdict("C5 robust aggregation oracles", False, "krum mismatch")
        m = int(rng.integers(1, n + 1))
        if not np.array_equal(multikrum(ups, f, m), multikrum_oracle(ups, f, m)):
            verdict("C5 robust aggregation oracles", False, "multikrum mismatch")
    for _ in range(200):
        f = 1
        n = int(rng.integers(7, 10))
        dim = int(rng.integers(1, 7))
        ups = updates_from([rng.normal(0, 1, dim) for _ in range(n)],
                           ids=rng.permutation(60)[:n].tolist())
        if not np.array_equal(bulyan(ups, f), bulyan_oracle(ups, f)):
            verdict("C5 robust aggregation oracles", False, "bulyan mismatch")
    verdict("C5 robust aggregation oracles", True, "200 instances per rule")


def test_c06_pareto_and_nsga2():
    """Frontier equals the all-pairs oracle; NSGA-II recovers the grid frontier."""
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(1, 301))
        pts = [SolutionPoint(HyperTuple(float(rng.uniform(0.01, 1)), 0.9, 5e-4,
                                        int(rng.integers(1, 50)), 64),
                             float(rng.uniform()), float(rng.uniform()))
               for _ in range(n)]
        got = {id(p) for p in pareto_frontier(pts)}
        want = {id(p) for p in pareto_oracle(pts)}
        if got != want:
            verdict("C6 Pareto / NSGA-II", False, "frontier differs from oracle")
    target = {p.omega.astuple()
              for p in pareto_frontier(grid_search(SMALL_SPACE, synth_evaluator))}
    for seed in range(5):
        front = {p.omega.astuple()
                 for p in nsga2(SMALL_SPACE, synth_evaluator, population=12,
                                generations=20, seed=seed)}
        if front != target:
            verdict("C6 Pareto / NSGA-II", False, f"NSGA-II seed {seed} missed frontier")
    verdict("C6 Pareto / NSGA-II", True,
            "100 random frontiers + 24-point space recovery for 5 seeds")


def test_c07_ols_oracle():
    """OLS inference matches the normal-equations + t-quadrature oracle."""
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(15, 60))
        k = int(rng.integers(1, 5))
        X = rng.normal(0, 1, (n, k))
        y = X @ rng.normal(0, 2, k) + rng.normal(0, 1, n)
        report = ols_regress(X, y)
        beta, se, t_stats, p_values, lo, hi, r2 = ols_oracle(X, y)
        rows = report.predictors
        close = (
            np.allclose([r.coef for r in rows], beta, atol=1e-8)
            and np.allclose([r.std_err for r in rows], se, atol=1e-8)
            and np.allclose([r.t_stat for r in rows], t_stats, atol=1e-8)
            and np.allclose([r.p_value for r in rows], p_values, atol=1e-8)
            and np.allclose([r.ci_low for r in rows], lo, atol=1e-8)
            and np.allclose([r.ci_high for r in rows], hi, atol=1e-8)
            and abs(report.r_squared - r2) < 1e-8
        )
        if not close:
            verdict("C7 OLS oracle", False, "inference mismatch")
    X = rng.normal(0, 1, (60, 2))
    y = 2 * X[:, 0] - 3 * X[:, 1] + 1
    rows = ols_regress(X, y).predictors
    exact = (abs(rows[0].coef - 1) < 1e-8 and abs(rows[1].coef - 2) < 1e-8
             and abs(rows[2].coef + 3) < 1e-8)
    verdict("C7 OLS oracle", exact, "50 random fits + noiseless recovery")


WEAK = SgdConfig(0.05, 0.9, 5e-4, 2, 64)
STRONG = SgdConfig(0.2, 0.9, 5e-4, 10, 32)


def _federation_metrics(benign: SgdConfig, seed: int):
    window = (101, 200)
    cfg = FederationConfig(n_clients=20, clients_per_round=5, malicious_fraction=0.2,
                           rounds_total=400, attack_start=window[0], attack_end=window[1],
                           dirichlet_concentration=0.9, lr_decay_gamma=0.999,
                           master_seed=seed)
    attack = AttackConfig(TriggerSpec.stamp(0, 1.0), 1, 0.5,
                          SgdConfig(0.1, 0.9, 5e-4, 5, 64), beta=2.0, window=window)
    data = make_toy_federation_data(attack, seed, train_size=8000, test_size=2000)
    result = run_federation(cfg, benign, attack, make_aggregator("none"), data=data)
    averages = phase_averages(result.logs, window)
    lifespan = span({log.round: log.bda for log in result.logs},
                    MetricConfig(0.5, window[1]))
    return averages, lifespan


@pytest.mark.slow
def test_c08_end_to_end_hyperparameter_effect():
    """Strong benign config suppresses the attack without losing accuracy."""
    start = time.monotonic()
    bda_gaps, mta_gaps, span_ok = [], [], True
    for seed in range(5):
        weak_avg, weak_span = _federation_metrics(WEAK, seed)
        strong_avg, strong_span = _federation_metrics(STRONG, seed)
        bda_gaps.append(weak_avg.bda - strong_avg.bda)
        mta_gaps.append(abs(weak_avg.mta - strong_avg.mta))
        span_ok = span_ok and strong_span <= weak_span
    elapsed = time.monotonic() - start
    med_bda = float(np.median(bda_gaps))
    med_mta = float(np.median(mta_gaps))
    ok = med_bda >= 0.10 and med_mta <= 0.05 and span_ok and elapsed < 600
    verdict("C8 end-to-end hyperparameter effect", ok,
            f"median BDA gap {med_bda:.3f}, median |MTA gap| {med_mta:.3f}, "
            f"spans ok {span_ok}, {elapsed:.0f}s")


def test_c09_foolsgold_collusion():
    """Two identical colluders lose essentially all aggregation weight."""
    rng = np.random.default_rng(3)
    collusion = rng.normal(0, 1, 30)
    benign_dirs = [rng.normal(0, 1, 30) for _ in range(3)]
    state = FoolsGoldState()
    for _ in range(5):
        ups = updates_from([collusion.copy(), collusion.copy()]
                           + [d + 0.3 * rng.normal(0, 1, 30) for d in benign_dirs])
        _, state = foolsgold(ups, state)
    combined = state.weights[0] + state.weights[1]
    verdict("C9 FoolsGold collusion", combined < 0.1,
            f"combined colluder weight {combined:.4f}")


DETERMINISM_FEDERATION = """
[experiment]
kind = federation
output_dir = {out}
master_seed = 17

[federation]
n_clients = 8
clients_per_round = 4
malicious_fraction = 0.25
rounds_total = 12
attack_start = 4
attack_end = 8
dirichlet_concentration = 2.0
train_size = 800
test_size = 300

[benign]
eta = 0.1
mu = 0.9
lambda = 0.0005
epochs = 2
batch_size = 16

[attack]
enabled = true
beta = 2.0
batch_size = 16

[aggregator]
name = foolsgold
"""

DETERMINISM_SURFACE = """
[experiment]
kind = analytic_surface
output_dir = {out}
master_seed = 9

[surface]
axis1 = eta_b
axis1_values = 0.05 0.2
axis2 = beta
axis2_values = 1 4
rounds = 10
"""


def test_c10_determinism(tmp_path):
    """Identical configs yield byte-identical data artifacts."""
    import hashlib

    def digest(path):
        return hashlib.sha256(path.read_bytes()).hexdigest()

    ok = True
    details = []
    for label, template, artifact in [
        ("federation", DETERMINISM_FEDERATION, "rounds.csv"),
        ("surface", DETERMINISM_SURFACE, "surface.csv"),
    ]:
        out1, out2 = tmp_path / f"{label}1", tmp_path / f"{label}2"
        run_experiment(loads_config(template.format(out=out1)), base_dir=tmp_path)
        run_experiment(loads_config(template.format(out=out2)), base_dir=tmp_path)
        same = digest(out1 / artifact) == digest(out2 / artifact)
        ok = ok and same
        details.append(f"{label}:{'=' if same else '!='}")
    verdict("C10 determinism", ok, " ".join(details))


def test_c11_metric_formulas():
    """Span and phase-average formulas on their defining examples."""

    class Log:
        def __init__(self, t, m, b):
            self.round, self.mta, self.bda = t, m, b

    checks = []
    cfg = MetricConfig(span_threshold=0.5, attack_end_round=3)
    checks.append(span([0.9, 0.9, 0.9, 0.4, 0.3], cfg) == 0)
    cfg = MetricConfig(span_threshold=0.5, attack_end_round=2)
    series = {t: (0.9 if 2 < t <= 9 else 0.0) for t in range(1, 11)}
    checks.append(span(series, cfg) == 7)
    cfg = MetricConfig(span_threshold=0.5, attack_end_round=0)
    checks.append(span([0.6, 0.4, 0.6, 0.4], cfg) == 3)

    logs = [Log(t, 0.7, 0.3) for t in range(1, 9)]
    out = phase_averages(logs, (2, 5))
    checks.append(np.isclose(out.mta, 0.7) and np.isclose(out.bda, 0.3)
                  and np.isclose(out.mta_post, 0.7) and np.isclose(out.bda_post, 0.3))
    out = phase_averages(logs, (1, 8))
    checks.append(out.mta_post is None and out.bda_post is None)
    step = [Log(t, 0.9, 0.8 if t <= 4 else 0.2) for t in range(1, 9)]
    out = phase_averages(step, (1, 4))
    checks.append(np.isclose(out.bda, 0.8) and np.isclose(out.bda_post, 0.2))
    verdict("C11 metric formulas", all(checks), f"{sum(checks)}/{len(checks)} identities")
