import pytest

from hyperfed.config import (EXPERIMENT_KINDS, KNOWN_KEYS, ExperimentConfig,
                             load_config, loads_config, serialize_config)
from hyperfed.errors import ConfigurationError

MINIMAL_SURFACE = """
[experiment]
kind = analytic_surface
output_dir = out
master_seed = 3
"""

FULL_FEDERATION = """
[experiment]
kind = federation
output_dir = results/run1
master_seed = 11

[federation]
n_clients = 12
clients_per_round = 4
malicious_fraction = 0.25
rounds_total = 20
attack_start = 6
attack_end = 10
dirichlet_concentration = 1.5
lr_decay_gamma = 0.999
train_size = 1200
test_size = 400

[benign]
eta = 0.1
mu = 0.9
lambda = 0.0005
epochs = 2
batch_size = 32

[attack]
enabled = true
target_class = 1
poison_fraction = 0.5
trigger_index = 0
trigger_value = 1.0
beta = 2.0
epochs = 5

[aggregator]
name = multikrum
f = 1
m = 3

[metrics]
span_threshold = 0.5
"""


class TestParsing:
    def test_minimal_config_fills_defaults(self):
        cfg = loads_config(MINIMAL_SURFACE)
        assert cfg.kind == "analytic_surface"
        assert cfg.master_seed == 3
        assert cfg.surface.axis1 == "eta_b"
        assert cfg.surface.rounds == 200
        assert cfg.benign.eta == 0.1

    def test_full_federation_config(self):
        cfg = loads_config(FULL_FEDERATION)
        assert cfg.federation.n_clients == 12
        assert cfg.federation.master_seed == 11
        assert cfg.attack is not None
        assert cfg.attack.beta == 2.0
        assert cfg.attack.malicious_sgd.epochs == 5
        assert cfg.attack.malicious_sgd.mu == 0.9  # inherited from benign
        assert cfg.attack.window == (6, 10)
        assert cfg.aggregator.name == "multikrum" and cfg.aggregator.m == 3
        assert cfg.metrics.attack_end_round == 10

    def test_comments_and_blank_lines(self):
        cfg = loads_config("# top\n\n[experiment]\nkind = federation  # inline\n")
        assert cfg.kind == "federation"

    def test_unknown_key_has_line_number(self):
        text = "[experiment]\nkind = federation\n\n[benign]\nlearning_rate = 0.1\n"
        with pytest.raises(ConfigurationError, match="line 5"):
            loads_config(text)

    def test_unknown_section(self):
        with pytest.raises(ConfigurationError, match="unknown section"):
            loads_config("[experiment]\nkind = federation\n[server]\nx = 1\n")

    def test_missing_kind(self):
        with pytest.raises(ConfigurationError, match="kind"):
            loads_config("[experiment]\noutput_dir = out\n")

    def test_bad_kind(self):
        with pytest.raises(ConfigurationError, match="unknown experiment kind"):
            loads_config("[experiment]\nkind = training\n")

    def test_assignment_outside_section(self):
        with pytest.raises(ConfigurationError, match="outside"):
            loads_config("kind = federation\n")

    def test_malformed_number(self):
        text = "[experiment]\nkind = federation\nmaster_seed = seven\n"
        with pytest.raises(ConfigurationError, match="line 3"):
            loads_config(text)


class TestInvariantEnforcement:
    def test_alpha_above_half_rejected(self):
        text = ("[experiment]\nkind = federation\n"
                "[federation]\nmalicious_fraction = 0.7\n")
        with pytest.raises(ConfigurationError, match="malicious_fraction"):
            loads_config(text)

    def test_surface_alpha_above_half_rejected(self):
        text = ("[experiment]\nkind = analytic_surface\n"
                "[surface]\nalpha = 0.7\n")
        with pytest.raises(ConfigurationError, match="alpha"):
            loads_config(text)

    def test_bad_aggregator_name(self):
        text = ("[experiment]\nkind = federation\n"
                "[aggregator]\nname = median\n")
        with pytest.raises(ConfigurationError, match="unknown aggregator"):
            loads_config(text)

    def test_bad_surface_axis(self):
        text = ("[experiment]\nkind = analytic_surface\n"
                "[surface]\naxis1 = gamma\n")
        with pytest.raises(ConfigurationError, match="unknown sweep axis"):
            loads_config(text)

    def test_regression_kind_needs_block(self):
        with pytest.raises(ConfigurationError, match="regression"):
            loads_config("[experiment]\nkind = regression\n")

    def test_window_order_enforced(self):
        text = ("[experiment]\nkind = federation\n"
                "[federation]\nattack_start = 10\nattack_end = 5\n")
        with pytest.raises(ConfigurationError):
            loads_config(text)


class TestRoundTrip:
    @pytest.mark.parametrize("text", [MINIMAL_SURFACE, FULL_FEDERATION])
    def test_serialize_reparses_equal(self, text):
        cfg = loads_config(text)
        again = loads_config(serialize_config(cfg))
        assert again == cfg

    def test_load_config_from_file(self, tmp_path):
        path = tmp_path / "exp.cfg"
        path.write_text(FULL_FEDERATION, encoding="utf-8")
        assert load_config(path) == loads_config(FULL_FEDERATION)


class TestKnobRegistry:
    """Every tunable named in the module contracts must be reachable."""

    REQUIRED = {
        "experiment": {"kind", "output_dir", "master_seed"},
        "federation": {"n_clients", "clients_per_round", "malicious_fraction",
                       "rounds_total", "attack_start", "attack_end",
                       "dirichlet_concentration", "lr_decay_gamma",
                       "train_size", "test_size"},
        "benign": {"eta", "mu", "lambda", "epochs", "batch_size"},
        "attack": {"enabled", "target_class", "poison_fraction", "trigger_index",
                   "trigger_value", "beta", "mu", "lambda", "epochs",
                   "batch_size", "scaling"},
        "aggregator": {"name", "f", "m"},
        "metrics": {"span_threshold", "exclude_target_class"},
        "surface": {"axis1", "axis1_values", "axis2", "axis2_values", "rounds",
                    "alpha", "beta", "eta_b", "mu_b", "mu_m", "lambda_b",
                    "lambda_m", "E_b", "E_m", "B_b", "B_m", "train_size",
                    "mix_ratio"},
        "sweep": {"mode", "params", "eta_values", "mu_values", "lambda_values",
                  "epochs_values", "batch_values", "param", "benign_values",
                  "malicious_values", "attack_name"},
        "search": {"method", "eta_values", "mu_values", "lambda_values",
                   "epochs_values", "batch_values", "population", "generations",
                   "adapt", "response_table", "attack_name", "epsilon_def",
                   "mta_ideal"},
        "regression": {"input", "response", "predictors"},
    }

    def test_every_required_knob_registered(self):
        for section, keys in self.REQUIRED.items():
            assert section in KNOWN_KEYS
            missing = keys - set(KNOWN_KEYS[section])
            assert not missing, f"[{section}] missing {missing}"

    def test_every_kind_is_parseable(self):
        for kind in EXPERIMENT_KINDS:
            extra = "\n[regression]\ninput = sweep.csv\n" if kind == "regression" else ""
            cfg = loads_config(f"[experiment]\nkind = {kind}\n{extra}")
            assert isinstance(cfg, ExperimentConfig)
