"""Experiment configuration: a small `key = value` format with [section] blocks.

Every run is fully determined by the file content: seeds, sizes, schedules
and search domains all live here, never in the environment or the clock.
Unknown keys, malformed values and violated invariants are reported with
the offending line number.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .analytic import AXIS_NAMES
from .aggregation import AGGREGATOR_NAMES
from .attack import AttackConfig, TriggerSpec
from .errors import ConfigurationError
from .federation import FederationConfig
from .metrics import MetricConfig
from .models import SgdConfig

__all__ = [
    "ExperimentConfig",
    "SurfaceSpec",
    "SweepSpec",
    "SearchSpec",
    "RegressionSpec",
    "AggregatorSpec",
    "load_config",
    "loads_config",
    "serialize_config",
    "EXPERIMENT_KINDS",
    "KNOWN_KEYS",
]

EXPERIMENT_KINDS = ("analytic_surface", "federation", "sweep", "frontier", "regression")

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_bool(raw: str, line: int) -> bool:
    if raw.lower() not in _BOOL:
        raise ConfigurationError(f"line {line}: expected a boolean, got {raw!r}")
    return _BOOL[raw.lower()]


def _parse_int(raw: str, line: int) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigurationError(f"line {line}: expected an integer, got {raw!r}") from None


def _parse_float(raw: str, line: int) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"line {line}: expected a number, got {raw!r}") from None


def _parse_floats(raw: str, line: int) -> list[float]:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ConfigurationError(f"line {line}: expected a list of numbers")
    return [_parse_float(p, line) for p in parts]


def _parse_ints(raw: str, line: int) -> list[int]:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ConfigurationError(f"line {line}: expected a list of integers")
    return [_parse_int(p, line) for p in parts]


def _parse_str(raw: str, line: int) -> str:
    return raw


def _parse_strs(raw: str, line: int) -> list[str]:
    parts = raw.replace(",", " ").split()
    if not parts:
        raise ConfigurationError(f"line {line}: expected a list of names")
    return parts


# Registry of every tunable reachable from a config file:
# section -> key -> parser. The registry doubles as the completeness check
# surface exercised by the test suite.
KNOWN_KEYS: dict[str, dict[str, object]] = {
    "experiment": {
        "kind": _parse_str,
        "output_dir": _parse_str,
        "master_seed": _parse_int,
    },
    "federation": {
        "n_clients": _parse_int,
        "clients_per_round": _parse_int,
        "malicious_fraction": _parse_float,
        "rounds_total": _parse_int,
        "attack_start": _parse_int,
        "attack_end": _parse_int,
        "dirichlet_concentration": _parse_float,
        "lr_decay_gamma": _parse_float,
        "train_size": _parse_int,
        "test_size": _parse_int,
    },
    "benign": {
        "eta": _parse_float,
        "mu": _parse_float,
        "lambda": _parse_float,
        "epochs": _parse_int,
        "batch_size": _parse_int,
    },
    "attack": {
        "enabled": _parse_bool,
        "target_class": _parse_int,
        "poison_fraction": _parse_float,
        "trigger_index": _parse_int,
        "trigger_value": _parse_float,
        "beta": _parse_float,
        "mu": _parse_float,
        "lambda": _parse_float,
        "epochs": _parse_int,
        "batch_size": _parse_int,
        "scaling": _parse_float,
    },
    "aggregator": {
        "name": _parse_str,
        "f": _parse_int,
        "m": _parse_int,
    },
    "metrics": {
        "span_threshold": _parse_float,
        "exclude_target_class": _parse_bool,
    },
    "surface": {
        "axis1": _parse_str,
        "axis1_values": _parse_floats,
        "axis2": _parse_str,
        "axis2_values": _parse_floats,
        "rounds": _parse_int,
        "alpha": _parse_float,
        "beta": _parse_float,
        "eta_b": _parse_float,
        "mu_b": _parse_float,
        "mu_m": _parse_float,
        "lambda_b": _parse_float,
        "lambda_m": _parse_float,
        "E_b": _parse_int,
        "E_m": _parse_int,
        "B_b": _parse_int,
        "B_m": _parse_int,
        "train_size": _parse_int,
        "mix_ratio": _parse_float,
    },
    "sweep": {
        "mode": _parse_str,  # benign_grid | response
        "params": _parse_strs,
        "eta_values": _parse_floats,
        "mu_values": _parse_floats,
        "lambda_values": _parse_floats,
        "epochs_values": _parse_ints,
        "batch_values": _parse_ints,
        "param": _parse_str,
        "benign_values": _parse_floats,
        "malicious_values": _parse_floats,
        "attack_name": _parse_str,
    },
    "search": {
        "method": _parse_str,  # grid | nsga2
        "eta_values": _parse_floats,
        "mu_values": _parse_floats,
        "lambda_values": _parse_floats,
        "epochs_values": _parse_ints,
        "batch_values": _parse_ints,
        "population": _parse_int,
        "generations": _parse_int,
        "adapt": _parse_str,  # none | greedy
        "response_table": _parse_str,
        "attack_name": _parse_str,
        "epsilon_def": _parse_float,
        "mta_ideal": _parse_float,
    },
    "regression": {
        "input": _parse_str,
        "response": _parse_str,  # bda | bda_post | span
        "predictors": _parse_strs,
    },
}


@dataclass(frozen=True)
class AggregatorSpec:
    name: str = "none"
    f: int = 0
    m: int | None = None


@dataclass(frozen=True)
class SurfaceSpec:
    axis1: str = "eta_b"
    axis1_values: tuple[float, ...] = (0.05, 0.1, 0.2, 0.5)
    axis2: str = "beta"
    axis2_values: tuple[float, ...] = (
        0.5, 0.7349, 1.0801, 1.5874, 2.3331, 3.429, 5.0397, 7.407, 10.8863, 16.0)
    rounds: int = 200
    alpha: float = 0.05
    beta: float = 1.0
    eta_b: float = 0.1
    mu_b: float = 0.9
    mu_m: float = 0.9
    lambda_b: float = 5e-4
    lambda_m: float = 5e-4
    E_b: int = 2
    E_m: int = 2
    B_b: int = 64
    B_m: int = 64
    train_size: int = 64
    mix_ratio: float = 0.0


@dataclass(frozen=True)
class SweepSpec:
    mode: str = "benign_grid"
    params: tuple[str, ...] = ("eta",)
    eta_values: tuple[float, ...] = (0.05, 0.1, 0.2)
    mu_values: tuple[float, ...] = (0.9,)
    lambda_values: tuple[float, ...] = (5e-4,)
    epochs_values: tuple[int, ...] = (2, 5, 10)
    batch_values: tuple[int, ...] = (32, 64, 128)
    param: str = "eta"
    benign_values: tuple[float, ...] = (0.05, 0.1, 0.2)
    malicious_values: tuple[float, ...] = (0.5, 1.0, 2.0)
    attack_name: str = "baseline"


@dataclass(frozen=True)
class SearchSpec:
    method: str = "grid"
    eta_values: tuple[float, ...] = (0.1, 0.15, 0.2)
    mu_values: tuple[float, ...] = (0.9,)
    lambda_values: tuple[float, ...] = (5e-4, 1e-3)
    epochs_values: tuple[int, ...] = (10, 20)
    batch_values: tuple[int, ...] = (16, 32)
    population: int = 12
    generations: int = 20
    adapt: str = "none"
    response_table: str | None = None
    attack_name: str = "baseline"
    epsilon_def: float | None = None
    mta_ideal: float | None = None


@dataclass(frozen=True)
class RegressionSpec:
    input: str
    response: str = "bda"
    predictors: tuple[str, ...] = ("eta", "mu", "weight_decay", "epochs", "batch_size")


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    output_dir: str = "results"
    master_seed: int = 0
    federation: FederationConfig = field(default_factory=FederationConfig)
    benign: SgdConfig = field(default_factory=lambda: SgdConfig(0.1, 0.9, 5e-4, 2, 64))
    attack: AttackConfig | None = None
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    exclude_target_class: bool = False
    train_size: int = 8000
    test_size: int = 2000
    surface: SurfaceSpec = field(default_factory=SurfaceSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    search: SearchSpec = field(default_factory=SearchSpec)
    regression: RegressionSpec | None = None


def _tokenize(text: str):
    """Yield (line_number, section, key, raw_value) for every assignment."""
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in KNOWN_KEYS:
                raise ConfigurationError(
                    f"line {lineno}: unknown section [{section}]"
                )
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigurationError(f"line {lineno}: assignment outside any [section]")
        key, raw_value = (part.strip() for part in line.split("=", 1))
        if key not in KNOWN_KEYS[section]:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r} in [{section}]")
        yield lineno, section, key, raw_value


def loads_config(text: str) -> ExperimentConfig:
    values: dict[str, dict[str, object]] = {}
    lines: dict[tuple[str, str], int] = {}
    for lineno, section, key, raw in _tokenize(text):
        parser = KNOWN_KEYS[section][key]
        values.setdefault(section, {})[key] = parser(raw, lineno)
        lines[(section, key)] = lineno

    def where(section: str, key: str) -> str:
        lineno = lines.get((section, key))
        return f"line {lineno}: " if lineno is not None else ""

    exp = values.get("experiment", {})
    kind = exp.get("kind")
    if kind is None:
        raise ConfigurationError("missing required key 'kind' in [experiment]")
    if kind not in EXPERIMENT_KINDS:
        raise ConfigurationError(
            f"{where('experiment', 'kind')}unknown experiment kind {kind!r}; "
            f"expected one of {EXPERIMENT_KINDS}"
        )

    fed_values = dict(values.get("federation", {}))
    train_size = fed_values.pop("train_size", 8000)
    test_size = fed_values.pop("test_size", 2000)
    try:
        federation = FederationConfig(master_seed=exp.get("master_seed", 0), **fed_values)
    except (ConfigurationError, ValueError) as exc:
        key = next(iter(values.get("federation", {})), None)
        prefix = where("federation", key) if key else ""
        raise ConfigurationError(f"{prefix}[federation] {exc}") from None

    benign_kwargs = {"eta": 0.1, "mu": 0.9, "weight_decay": 5e-4, "epochs": 2, "batch_size": 64}
    overrides = dict(values.get("benign", {}))
    if "lambda" in overrides:
        overrides["weight_decay"] = overrides.pop("lambda")
    benign_kwargs.update(overrides)
    try:
        benign = SgdConfig(**benign_kwargs)
    except (ConfigurationError, ValueError) as exc:
        key = next(iter(values.get("benign", {})), None)
        prefix = where("benign", key) if key else ""
        raise ConfigurationError(f"{prefix}[benign] {exc}") from None

    attack = None
    atk = dict(values.get("attack", {}))
    if atk.pop("enabled", bool(atk)):
        malicious_sgd = SgdConfig(
            eta=benign.eta,  # placeholder; rescaled by beta each round
            mu=atk.pop("mu", benign.mu),
            weight_decay=atk.pop("lambda", benign.weight_decay),
            epochs=atk.pop("epochs", benign.epochs),
            batch_size=atk.pop("batch_size", benign.batch_size),
        )
        trigger = TriggerSpec.stamp(atk.pop("trigger_index", 0), atk.pop("trigger_value", 1.0))
        try:
            attack = AttackConfig(
                trigger=trigger,
                target_class=atk.pop("target_class", 1),
                poison_fraction=atk.pop("poison_fraction", 0.5),
                malicious_sgd=malicious_sgd,
                beta=atk.pop("beta", 1.0),
                scaling=atk.pop("scaling", None),
                window=(federation.attack_start, federation.attack_end),
            )
        except (ConfigurationError, ValueError) as exc:
            raise ConfigurationError(f"[attack] {exc}") from None

    agg = values.get("aggregator", {})
    name = agg.get("name", "none")
    if name not in AGGREGATOR_NAMES:
        raise ConfigurationError(
            f"{where('aggregator', 'name')}unknown aggregator {name!r}; "
            f"expected one of {AGGREGATOR_NAMES}"
        )
    aggregator = AggregatorSpec(name=name, f=agg.get("f", 0), m=agg.get("m"))

    met = values.get("metrics", {})
    metrics = MetricConfig(
        span_threshold=met.get("span_threshold", 0.5),
        attack_end_round=federation.attack_end,
    )

    surf = dict(values.get("surface", {}))
    for axis_key in ("axis1", "axis2"):
        axis = surf.get(axis_key)
        if axis is not None and axis not in AXIS_NAMES:
            raise ConfigurationError(
                f"{where('surface', axis_key)}unknown sweep axis {axis!r}; "
                f"expected one of {AXIS_NAMES}"
            )
    for list_key in ("axis1_values", "axis2_values"):
        if list_key in surf:
            surf[list_key] = tuple(surf[list_key])
    surface = SurfaceSpec(**surf)
    if not 0.0 <= surface.alpha <= 0.5:
        raise ConfigurationError(
            f"{where('surface', 'alpha')}alpha must be in [0, 0.5], got {surface.alpha}"
        )

    sweep_values = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in values.get("sweep", {}).items()
    }
    sweep = SweepSpec(**sweep_values)
    if sweep.mode not in ("benign_grid", "response"):
        raise ConfigurationError(
            f"{where('sweep', 'mode')}sweep mode must be benign_grid or response"
        )
    if any(p not in ("eta", "mu", "lambda", "epochs", "batch_size") for p in sweep.params):
        raise ConfigurationError(
            f"{where('sweep', 'params')}sweep params must be among "
            "eta, mu, lambda, epochs, batch_size"
        )

    search_values = {
        k: tuple(v) if isinstance(v, list) else v
        for k, v in values.get("search", {}).items()
    }
    search = SearchSpec(**search_values)
    if search.method not in ("grid", "nsga2"):
        raise ConfigurationError(f"{where('search', 'method')}method must be grid or nsga2")
    if search.adapt not in ("none", "greedy"):
        raise ConfigurationError(f"{where('search', 'adapt')}adapt must be none or greedy")

    regression = None
    if "regression" in values:
        reg = dict(values["regression"])
        if "input" not in reg:
            raise ConfigurationError("missing required key 'input' in [regression]")
        if "predictors" in reg:
            reg["predictors"] = tuple(reg["predictors"])
        regression = RegressionSpec(**reg)
        if regression.response not in ("bda", "bda_post", "span", "mta", "mta_post"):
            raise ConfigurationError(
                f"{where('regression', 'response')}unknown response {regression.response!r}"
            )
    elif kind == "regression":
        raise ConfigurationError("experiment kind 'regression' needs a [regression] block")

    if kind == "frontier" and search.adapt == "greedy" and not search.response_table:
        raise ConfigurationError("greedy adaptation needs search.response_table")

    return ExperimentConfig(
        kind=kind,
        output_dir=exp.get("output_dir", "results"),
        master_seed=exp.get("master_seed", 0),
        federation=federation,
        benign=benign,
        attack=attack,
        aggregator=aggregator,
        metrics=metrics,
        exclude_target_class=met.get("exclude_target_class", False),
        train_size=train_size,
        test_size=test_size,
        surface=surface,
        sweep=sweep,
        search=search,
        regression=regression,
    )


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return loads_config(fh.read())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def serialize_config(cfg: ExperimentConfig) -> str:
    """Emit the configuration in the file grammar; reparsing gives an equal config."""
    out = [
        "[experiment]",
        f"kind = {cfg.kind}",
        f"output_dir = {cfg.output_dir}",
        f"master_seed = {cfg.master_seed}",
        "",
        "[federation]",
        f"n_clients = {cfg.federation.n_clients}",
        f"clients_per_round = {cfg.federation.clients_per_round}",
        f"malicious_fraction = {_fmt(cfg.federation.malicious_fraction)}",
        f"rounds_total = {cfg.federation.rounds_total}",
        f"attack_start = {cfg.federation.attack_start}",
        f"attack_end = {cfg.federation.attack_end}",
        f"dirichlet_concentration = {_fmt(cfg.federation.dirichlet_concentration)}",
        f"lr_decay_gamma = {_fmt(cfg.federation.lr_decay_gamma)}",
        f"train_size = {cfg.train_size}",
        f"test_size = {cfg.test_size}",
        "",
        "[benign]",
        f"eta = {_fmt(cfg.benign.eta)}",
        f"mu = {_fmt(cfg.benign.mu)}",
        f"lambda = {_fmt(cfg.benign.weight_decay)}",
        f"epochs = {cfg.benign.epochs}",
        f"batch_size = {cfg.benign.batch_size}",
        "",
    ]
    if cfg.attack is not None:
        a = cfg.attack
        idx, val = a.trigger.assignments[0]
        out += [
            "[attack]",
            "enabled = true",
            f"target_class = {a.target_class}",
            f"poison_fraction = {_fmt(a.poison_fraction)}",
            f"trigger_index = {idx}",
            f"trigger_value = {_fmt(val)}",
            f"beta = {_fmt(a.beta)}",
            f"mu = {_fmt(a.malicious_sgd.mu)}",
            f"lambda = {_fmt(a.malicious_sgd.weight_decay)}",
            f"epochs = {a.malicious_sgd.epochs}",
            f"batch_size = {a.malicious_sgd.batch_size}",
        ]
        if a.scaling is not None:
            out.append(f"scaling = {_fmt(a.scaling)}")
        out.append("")
    out += [
        "[aggregator]",
        f"name = {cfg.aggregator.name}",
        f"f = {cfg.aggregator.f}",
    ]
    if cfg.aggregator.m is not None:
        out.append(f"m = {cfg.aggregator.m}")
    out += [
        "",
        "[metrics]",
        f"span_threshold = {_fmt(cfg.metrics.span_threshold)}",
        f"exclude_target_class = {_fmt(cfg.exclude_target_class)}",
        "",
        "[surface]",
        f"axis1 = {cfg.surface.axis1}",
        f"axis1_values = {_fmt(cfg.surface.axis1_values)}",
        f"axis2 = {cfg.surface.axis2}",
        f"axis2_values = {_fmt(cfg.surface.axis2_values)}",
        f"rounds = {cfg.surface.rounds}",
        f"alpha = {_fmt(cfg.surface.alpha)}",
        f"beta = {_fmt(cfg.surface.beta)}",
        f"eta_b = {_fmt(cfg.surface.eta_b)}",
        f"mu_b = {_fmt(cfg.surface.mu_b)}",
        f"mu_m = {_fmt(cfg.surface.mu_m)}",
        f"lambda_b = {_fmt(cfg.surface.lambda_b)}",
        f"lambda_m = {_fmt(cfg.surface.lambda_m)}",
        f"E_b = {cfg.surface.E_b}",
        f"E_m = {cfg.surface.E_m}",
        f"B_b = {cfg.surface.B_b}",
        f"B_m = {cfg.surface.B_m}",
        f"train_size = {cfg.surface.train_size}",
        f"mix_ratio = {_fmt(cfg.surface.mix_ratio)}",
        "",
        "[sweep]",
        f"mode = {cfg.sweep.mode}",
        f"params = {_fmt(cfg.sweep.params)}",
        f"eta_values = {_fmt(cfg.sweep.eta_values)}",
        f"mu_values = {_fmt(cfg.sweep.mu_values)}",
        f"lambda_values = {_fmt(cfg.sweep.lambda_values)}",
        f"epochs_values = {_fmt(cfg.sweep.epochs_values)}",
        f"batch_values = {_fmt(cfg.sweep.batch_values)}",
        f"param = {cfg.sweep.param}",
        f"benign_values = {_fmt(cfg.sweep.benign_values)}",
        f"malicious_values = {_fmt(cfg.sweep.malicious_values)}",
        f"attack_name = {cfg.sweep.attack_name}",
        "",
        "[search]",
        f"method = {cfg.search.method}",
        f"eta_values = {_fmt(cfg.search.eta_values)}",
        f"mu_values = {_fmt(cfg.search.mu_values)}",
        f"lambda_values = {_fmt(cfg.search.lambda_values)}",
        f"epochs_values = {_fmt(cfg.search.epochs_values)}",
        f"batch_values = {_fmt(cfg.search.batch_values)}",
        f"population = {cfg.search.population}",
        f"generations = {cfg.search.generations}",
        f"adapt = {cfg.search.adapt}",
        f"attack_name = {cfg.search.attack_name}",
    ]
    if cfg.search.response_table:
        out.append(f"response_table = {cfg.search.response_table}")
    if cfg.search.epsilon_def is not None:
        out.append(f"epsilon_def = {_fmt(cfg.search.epsilon_def)}")
    if cfg.search.mta_ideal is not None:
        out.append(f"mta_ideal = {_fmt(cfg.search.mta_ideal)}")
    if cfg.regression is not None:
        out += [
            "",
            "[regression]",
            f"input = {cfg.regression.input}",
            f"response = {cfg.regression.response}",
            f"predictors = {_fmt(cfg.regression.predictors)}",
        ]
    out.append("")
    return "\n".join(out)
