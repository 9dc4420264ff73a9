"""Experiment orchestration: dispatch a parsed config, write artifacts.

Every experiment kind writes delimited data files plus a manifest
(config copy, seed, versions, wall time) into the output directory, and
renders matplotlib figures next to the data. Data files are byte-identical
across repeated runs of the same config; only the manifest carries
timing information.

Exit codes: 0 success, 1 configuration error, 2 everything diverged,
3 I/O failure.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
import struct
import time
from dataclasses import replace
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from . import __version__
from .analytic import (GroupHyper, SurfaceGrid, apply_axis, default_group_hyper,
                       sweep_surface, write_surface_csv)
from .aggregation import make_aggregator
from .attack import AttackConfig, TriggerSpec
from .config import ExperimentConfig, serialize_config
from .errors import ConfigurationError
from .federation import (make_toy_federation_data, run_federation,
                         write_round_log_csv)
from .metrics import MetricConfig, phase_averages, span
from .models import SgdConfig
from .regression import normalize_predictors, ols_regress, report_markdown
from .search import (ConstraintSpec, GreedyResponseTable, HyperTuple, SolutionPoint,
                     build_response_table, constrained_best, grid_search,
                     greedy_adapt, nsga2, pareto_frontier, write_frontier_csv,
                     write_response_table_csv, PARAM_NAMES)

__all__ = [
    "run_experiment",
    "write_checkpoint",
    "read_checkpoint",
    "emit_surface_plotdata",
    "summarize_logs",
    "report_results",
]

CHECKPOINT_MAGIC = b"HYFD"
CHECKPOINT_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGED = 2
EXIT_IO = 3


def write_checkpoint(params: np.ndarray, path) -> None:
    """Little-endian float64 dump with a 16-byte (magic, version, length) header."""
    arr = np.asarray(params, dtype="<f8")
    header = struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, arr.size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_checkpoint(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.read(16)
        magic, version, count = struct.unpack("<4sIQ", header)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigurationError(f"{path} is not a parameter checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        data = np.frombuffer(fh.read(count * 8), dtype="<f8")
    if data.size != count:
        raise ConfigurationError(f"{path} is truncated")
    return data.astype(np.float64)


def _write_manifest(out: Path, cfg: ExperimentConfig, started: float) -> None:
    manifest = {
        "config": serialize_config(cfg),
        "kind": cfg.kind,
        "master_seed": cfg.master_seed,
        "versions": {"hyperfed": __version__, "numpy": np.__version__},
        "wall_time_s": round(time.time() - started, 3),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)


def emit_surface_plotdata(grid: SurfaceGrid, out: Path, stem: str = "surface") -> None:
    """Long-form CSV plus a gnuplot-style matrix file; diverged cells are NA."""
    write_surface_csv(grid, out / f"{stem}.csv")
    with open(out / f"{stem}.matrix", "w", encoding="utf-8") as fh:
        header = "\t".join(str(v) for v in grid.axis2_values)
        fh.write(f"# rows: {grid.axis1_name}, columns: {grid.axis2_name}\n")
        fh.write(f"# {header}\n")
        for i in range(len(grid.axis1_values)):
            cells = [
                "NA" if not math.isfinite(grid.values[i, j]) else repr(float(grid.values[i, j]))
                for j in range(len(grid.axis2_values))
            ]
            fh.write("\t".join([str(grid.axis1_values[i])] + cells) + "\n")


def _plot_surface(grid: SurfaceGrid, out: Path, stem: str = "surface") -> None:
    fig, ax = plt.subplots(figsize=(5.2, 4.0))
    masked = np.ma.masked_invalid(grid.values)
    im = ax.imshow(masked, origin="lower", aspect="auto", cmap="viridis")
    ax.set_xticks(range(len(grid.axis2_values)))
    ax.set_xticklabels([f"{v:g}" for v in grid.axis2_values])
    ax.set_yticks(range(len(grid.axis1_values)))
    ax.set_yticklabels([f"{v:g}" for v in grid.axis1_values])
    ax.set_xlabel(grid.axis2_name)
    ax.set_ylabel(grid.axis1_name)
    fig.colorbar(im, ax=ax, label="avg malicious loss")
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=120)
    plt.close(fig)


def _plot_rounds(logs, window, out: Path, stem: str = "curves") -> None:
    rounds = [log.round for log in logs]
    fig, ax = plt.subplots(figsize=(6.0, 3.6))
    ax.plot(rounds, [log.mta for log in logs], label="MTA")
    ax.plot(rounds, [log.bda for log in logs], label="BDA")
    if window is not None:
        ax.axvspan(window[0], window[1], color="red", alpha=0.12, label="attack window")
    ax.set_xlabel("round")
    ax.set_ylabel("accuracy")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=120)
    plt.close(fig)


def _plot_frontier(points, frontier, out: Path, stem: str = "frontier") -> None:
    fig, ax = plt.subplots(figsize=(5.0, 4.0))
    alive = [p for p in points if not p.diverged]
    ax.scatter([p.bda for p in alive], [p.mta for p in alive],
               s=18, color="#777777", label="evaluated")
    front_sorted = sorted(frontier, key=lambda p: p.bda)
    ax.plot([p.bda for p in front_sorted], [p.mta for p in front_sorted],
            "o-", color="#bb3333", label="frontier")
    ax.set_xlabel("BDA (attack phase)")
    ax.set_ylabel("MTA (attack phase)")
    ax.legend(loc="best")
    fig.tight_layout()
    fig.savefig(out / f"{stem}.png", dpi=120)
    plt.close(fig)


def summarize_logs(logs, window, metric_cfg: MetricConfig) -> dict:
    averages = phase_averages(logs, window)
    bda_by_round = {log.round: log.bda for log in logs}
    lifespan = span(bda_by_round, metric_cfg)
    return {
        "mta": averages.mta,
        "bda": averages.bda,
        "mta_post": averages.mta_post,
        "bda_post": averages.bda_post,
        "span": lifespan,
        "n_rounds": len(logs),
        "n_no_op": sum(1 for log in logs if log.no_op),
    }


def _base_hyper_from_surface(cfg: ExperimentConfig) -> GroupHyper:
    s = cfg.surface
    base = default_group_hyper(eta_b=s.eta_b, beta=s.beta, alpha=s.alpha,
                               mu=s.mu_b, weight_decay=s.lambda_b,
                               epochs=s.E_b, batch_size=s.B_b)
    for axis, value in (("mu_m", s.mu_m), ("lambda_m", s.lambda_m),
                        ("E_m", s.E_m), ("B_m", s.B_m)):
        base = apply_axis(base, axis, value)
    return base


def _run_analytic_surface(cfg: ExperimentConfig, out: Path) -> int:
    s = cfg.surface
    grid = sweep_surface(s.axis1, s.axis1_values, s.axis2, s.axis2_values,
                         _base_hyper_from_surface(cfg), rounds=s.rounds,
                         seed=cfg.master_seed, train_size=s.train_size)
    emit_surface_plotdata(grid, out)
    _plot_surface(grid, out)
    if grid.diverged().all():
        return EXIT_DIVERGED
    return EXIT_OK


def _federation_once(cfg: ExperimentConfig, benign: SgdConfig,
                     attack: AttackConfig | None):
    fed = cfg.federation
    if attack is None:
        # keep the evaluation surface identical (trigger from defaults)
        probe = cfg.attack or _default_attack(cfg, benign)
        data = make_toy_federation_data(
            probe, fed.master_seed, cfg.train_size, cfg.test_size,
            exclude_target_class=cfg.exclude_target_class,
        )
    else:
        data = make_toy_federation_data(
            attack, fed.master_seed, cfg.train_size, cfg.test_size,
            exclude_target_class=cfg.exclude_target_class,
        )
    aggregator = make_aggregator(cfg.aggregator.name, f=cfg.aggregator.f, m=cfg.aggregator.m)
    return run_federation(fed, benign, attack, aggregator, data=data)


def _default_attack(cfg: ExperimentConfig, benign: SgdConfig) -> AttackConfig:
    return AttackConfig(
        trigger=TriggerSpec.stamp(0, 1.0),
        target_class=1,
        poison_fraction=0.5,
        malicious_sgd=benign,
        beta=1.0,
        window=(cfg.federation.attack_start, cfg.federation.attack_end),
    )


def _run_federation_kind(cfg: ExperimentConfig, out: Path) -> int:
    result = _federation_once(cfg, cfg.benign, cfg.attack)
    write_round_log_csv(result.logs, out / "rounds.csv")
    window = (cfg.federation.attack_start, cfg.federation.attack_end)
    summary = summarize_logs(result.logs, window, cfg.metrics)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    write_checkpoint(result.final_params, out / "checkpoint.bin")
    _plot_rounds(result.logs, window, out)
    if summary["n_no_op"] == summary["n_rounds"] and summary["n_rounds"] > 0:
        return EXIT_DIVERGED
    return EXIT_OK


_SWEEP_FIELD = {"eta": "eta", "mu": "mu", "lambda": "weight_decay",
                "epochs": "epochs", "batch_size": "batch_size"}
_SWEEP_VALUES = {"eta": "eta_values", "mu": "mu_values", "lambda": "lambda_values",
                 "epochs": "epochs_values", "batch_size": "batch_values"}


def _run_sweep(cfg: ExperimentConfig, out: Path) -> int:
    if cfg.sweep.mode == "response":
        return _run_response_sweep(cfg, out)
    params = list(cfg.sweep.params)
    domains = [list(getattr(cfg.sweep, _SWEEP_VALUES[p])) for p in params]
    rows = []
    window = (cfg.federation.attack_start, cfg.federation.attack_end)
    for combo in itertools.product(*domains):
        benign = replace(cfg.benign, **{
            _SWEEP_FIELD[p]: v for p, v in zip(params, combo)
        })
        attack = cfg.attack or _default_attack(cfg, benign)
        result = _federation_once(cfg, benign, attack)
        summary = summarize_logs(result.logs, window, cfg.metrics)
        rows.append((benign, summary))
    with open(out / "sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eta", "mu", "weight_decay", "epochs", "batch_size",
                         "mta", "bda", "mta_post", "bda_post", "span"])
        for benign, summary in rows:
            writer.writerow([
                repr(benign.eta), repr(benign.mu), repr(benign.weight_decay),
                benign.epochs, benign.batch_size,
                repr(summary["mta"]), repr(summary["bda"]),
                "NA" if summary["mta_post"] is None else repr(summary["mta_post"]),
                "NA" if summary["bda_post"] is None else repr(summary["bda_post"]),
                summary["span"],
            ])
    _plot_sweep(rows, params, out)
    return EXIT_OK


def _plot_sweep(rows, params, out: Path) -> None:
    fig, ax = plt.subplots(figsize=(5.6, 3.8))
    ax.scatter([s["bda"] for _, s in rows], [s["mta"] for _, s in rows], s=20)
    ax.set_xlabel("BDA (attack phase)")
    ax.set_ylabel("MTA (attack phase)")
    ax.set_title(f"sweep over {', '.join(params)}")
    fig.tight_layout()
    fig.savefig(out / "sweep.png", dpi=120)
    plt.close(fig)


def _run_response_sweep(cfg: ExperimentConfig, out: Path) -> int:
    """Single-axis benign x malicious grid; emits the greedy response table."""
    sweep = cfg.sweep
    param = sweep.param
    window = (cfg.federation.attack_start, cfg.federation.attack_end)
    rows = []
    table_rows = []
    for benign_value in sweep.benign_values:
        benign = replace(cfg.benign, **{_SWEEP_FIELD[param]: _cast_param(param, benign_value)})
        for malicious_value in sweep.malicious_values:
            attack = cfg.attack or _default_attack(cfg, benign)
            attack = _override_malicious(attack, param, malicious_value, benign)
            result = _federation_once(cfg, benign, attack)
            summary = summarize_logs(result.logs, window, cfg.metrics)
            rows.append((benign_value, malicious_value, summary))
            table_rows.append((sweep.attack_name, _SWEEP_FIELD[param],
                               benign_value, malicious_value, summary["bda"]))
    with open(out / "response_sweep.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "benign_value", "malicious_value", "mta", "bda", "span"])
        for benign_value, malicious_value, summary in rows:
            writer.writerow([param, benign_value, malicious_value,
                             repr(summary["mta"]), repr(summary["bda"]), summary["span"]])
    table = build_response_table(table_rows)
    write_response_table_csv(table, out / "response_table.csv")
    return EXIT_OK


def _cast_param(param: str, value):
    return int(value) if param in ("epochs", "batch_size") else float(value)


def _override_malicious(attack: AttackConfig, param: str, value, benign: SgdConfig) -> AttackConfig:
    if param == "eta":
        # the table stores absolute malicious rates; keep the beta coupling
        return replace(attack, beta=float(value) / benign.eta)
    field = _SWEEP_FIELD[param]
    return replace(attack, malicious_sgd=replace(
        attack.malicious_sgd, **{field: _cast_param(param, value)}
    ))


def _load_response_table(path: Path) -> GreedyResponseTable:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for record in csv.DictReader(fh):
            rows.append((record["attack"], record["param"],
                         float(record["benign_value"]), float(record["malicious_value"]),
                         1.0))  # already reduced: one response per benign value
    return GreedyResponseTable({
        (attack_name, param, benign_value): malicious_value
        for attack_name, param, benign_value, malicious_value, _ in rows
    })


def _run_frontier(cfg: ExperimentConfig, out: Path, base_dir: Path) -> int:
    search = cfg.search
    space = {
        "eta": list(search.eta_values),
        "mu": list(search.mu_values),
        "weight_decay": list(search.lambda_values),
        "epochs": list(search.epochs_values),
        "batch_size": list(search.batch_values),
    }
    table = None
    if search.adapt == "greedy":
        table_path = Path(search.response_table)
        if not table_path.is_absolute():
            table_path = base_dir / table_path
        table = _load_response_table(table_path)
    window = (cfg.federation.attack_start, cfg.federation.attack_end)

    def evaluator(omega: HyperTuple) -> SolutionPoint:
        benign = SgdConfig(omega.eta, omega.mu, omega.weight_decay,
                           omega.epochs, omega.batch_size)
        attack = cfg.attack or _default_attack(cfg, benign)
        if table is not None:
            malicious = greedy_adapt(omega, table, search.attack_name)
            attack = replace(attack, beta=malicious.eta / benign.eta,
                             malicious_sgd=replace(
                                 attack.malicious_sgd, mu=malicious.mu,
                                 weight_decay=malicious.weight_decay,
                                 epochs=malicious.epochs,
                                 batch_size=malicious.batch_size))
        result = _federation_once(cfg, benign, attack)
        summary = summarize_logs(result.logs, window, cfg.metrics)
        return SolutionPoint(omega, summary["mta"], summary["bda"])

    if search.method == "grid":
        points = grid_search(space, evaluator)
        frontier = pareto_frontier(points)
    else:
        frontier = nsga2(space, evaluator, population=search.population,
                         generations=search.generations, seed=cfg.master_seed)
        points = frontier
    write_frontier_csv(points, frontier, out / "grid.csv")
    write_frontier_csv(frontier, frontier, out / "frontier.csv")
    _plot_frontier(points, frontier, out)

    summary = {"n_evaluated": len(points), "n_frontier": len(frontier)}
    if search.epsilon_def is not None and search.mta_ideal is not None:
        pick = constrained_best(points, ConstraintSpec(
            epsilon_def=search.epsilon_def, mta_ideal=search.mta_ideal), "defender")
        summary["constrained_pick"] = None if pick is None else {
            "omega": dict(zip(PARAM_NAMES, pick.omega.astuple())),
            "mta": pick.mta, "bda": pick.bda,
        }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    if all(p.diverged for p in points):
        return EXIT_DIVERGED
    return EXIT_OK


def _run_regression(cfg: ExperimentConfig, out: Path, base_dir: Path) -> int:
    spec = cfg.regression
    path = Path(spec.input)
    if not path.is_absolute():
        path = base_dir / path
    with open(path, newline="", encoding="utf-8") as fh:
        records = [r for r in csv.DictReader(fh)]
    if not records:
        raise ConfigurationError(f"regression input {path} is empty")
    col_by_pred = {"eta": "eta", "mu": "mu", "weight_decay": "weight_decay",
                   "epochs": "epochs", "batch_size": "batch_size"}
    usable = [r for r in records if r.get(spec.response, "NA") != "NA"]
    if not usable:
        raise ConfigurationError(f"no usable rows for response {spec.response!r}")
    X = np.array([[float(r[col_by_pred[p]]) for p in spec.predictors] for r in usable])
    y = np.array([float(r[spec.response]) for r in usable])
    Xn, _, _ = normalize_predictors(X)
    report = ols_regress(Xn, y, names=list(spec.predictors))
    with open(out / "regression.md", "w", encoding="utf-8") as fh:
        fh.write(report_markdown(report) + "\n")
    with open(out / "regression.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["predictor", "coef", "std_err", "t", "p_value", "ci_low", "ci_high"])
        for row in report.predictors:
            writer.writerow([row.name, repr(row.coef), repr(row.std_err),
                             repr(row.t_stat), repr(row.p_value),
                             repr(row.ci_low), repr(row.ci_high)])
    _plot_regression(report, out)
    return EXIT_OK


def _plot_regression(report, out: Path) -> None:
    rows = [r for r in report.predictors if r.name != "const"]
    fig, ax = plt.subplots(figsize=(5.4, 3.4))
    xs = range(len(rows))
    ax.errorbar(xs, [r.coef for r in rows],
                yerr=[[r.coef - r.ci_low for r in rows], [r.ci_high - r.coef for r in rows]],
                fmt="o", capsize=4)
    ax.axhline(0.0, color="#999999", lw=0.8)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([r.name for r in rows], rotation=20)
    ax.set_ylabel("normalized coefficient")
    fig.tight_layout()
    fig.savefig(out / "regression.png", dpi=120)
    plt.close(fig)


def run_experiment(cfg: ExperimentConfig, base_dir: Path | None = None) -> int:
    """Dispatch to the pipeline for cfg.kind; returns a process exit code."""
    started = time.time()
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = base_dir / out
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError:
        return EXIT_IO
    try:
        if cfg.kind == "analytic_surface":
            code = _run_analytic_surface(cfg, out)
        elif cfg.kind == "federation":
            code = _run_federation_kind(cfg, out)
        elif cfg.kind == "sweep":
            code = _run_sweep(cfg, out)
        elif cfg.kind == "frontier":
            code = _run_frontier(cfg, out, base_dir)
        elif cfg.kind == "regression":
            code = _run_regression(cfg, out, base_dir)
        else:
            raise ConfigurationError(f"unknown experiment kind {cfg.kind!r}")
    except ConfigurationError:
        raise
    except OSError:
        return EXIT_IO
    _write_manifest(out, cfg, started)
    return code


def report_results(results_dir: Path) -> str:
    """Phase averages and lifespan for a finished federation run directory."""
    results_dir = Path(results_dir)
    rounds_path = results_dir / "rounds.csv"
    if not rounds_path.exists():
        raise ConfigurationError(f"no rounds.csv under {results_dir}")
    summary_path = results_dir / "summary.json"
    lines = []
    if summary_path.exists():
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)
        lines.append("phase averages")
        lines.append(f"  MTA  (attack) = {summary['mta']:.4f}")
        lines.append(f"  BDA  (attack) = {summary['bda']:.4f}")
        mta_post = summary.get("mta_post")
        bda_post = summary.get("bda_post")
        lines.append(f"  MTA* (post)   = {'N.A.' if mta_post is None else f'{mta_post:.4f}'}")
        lines.append(f"  BDA* (post)   = {'N.A.' if bda_post is None else f'{bda_post:.4f}'}")
        lines.append(f"  Span          = {summary['span']}")
    with open(rounds_path, newline="", encoding="utf-8") as fh:
        records = list(csv.DictReader(fh))

    class _Row:
        def __init__(self, r):
            self.round = int(r["round"])
            self.mta = float(r["mta"])
            self.bda = float(r["bda"])

    logs = [_Row(r) for r in records]
    _plot_rounds(logs, None, results_dir, stem="report_curves")
    lines.append(f"rounds logged: {len(logs)}")
    if logs:
        lines.append(f"final MTA = {logs[-1].mta:.4f}, final BDA = {logs[-1].bda:.4f}")
    lines.append(f"figures written to {results_dir / 'report_curves.png'}")
    return "\n".join(lines)
