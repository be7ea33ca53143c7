"""Tests for configuration loading."""

from pathlib import Path

import pytest

from repulse.config import THREADS_ENV, load_config, parse_enum, resolve_threads
from repulse.engine import Method
from repulse.errors import ConfigError
from repulse.models import Distance, ParticleMode, Space

ROOT = Path(__file__).resolve().parents[1]


class TestLoadConfig:
    """Test loading TOML configs."""

    def test_defaults(self):
        """No path gives the default config."""
        config = load_config()
        assert config.particles.mode == "multi-head"
        assert config.acquisition.rounds == 55
        assert config.train_config().method is Method.FUNCTION_REPULSION

    def test_partial_file(self, write_config):
        """Unlisted keys keep their defaults."""
        config = load_config(write_config("[train]\nsteps = 20\nstep_size = 1\n"))
        assert config.train.steps == 20
        assert config.train.step_size == 1
        assert config.train.repulsion_weight == 1.0

    def test_missing_file(self, tmp_path):
        """A missing config is a config error."""
        with pytest.raises(ConfigError, match="not found"):
            load_config(tmp_path / "absent.toml")

    def test_invalid_toml(self, write_config):
        """Syntax errors are reported as config errors."""
        with pytest.raises(ConfigError):
            load_config(write_config("[train\nsteps = 1\n"))

    def test_unknown_key(self, write_config):
        """Unknown keys are named with their section."""
        with pytest.raises(ConfigError, match="unknown key 'train.step'"):
            load_config(write_config("[train]\nstep = 3\n"))

    def test_unknown_section(self, write_config):
        """Unknown tables are rejected."""
        with pytest.raises(ConfigError, match=r"unknown section '\[trainer\]'"):
            load_config(write_config("[trainer]\nsteps = 3\n"))

    def test_bad_enum(self, write_config):
        """Enum values must be one of the listed choices."""
        with pytest.raises(ConfigError, match="kernel.distance"):
            load_config(write_config('[kernel]\ndistance = "l3"\n'))

    @pytest.mark.parametrize(
        "text, key",
        [
            ('[train]\nsteps = "ten"\n', "train.steps"),
            ("[particles]\nn = true\n", "particles.n"),
            ("[metrics]\npercent = 1\n", "metrics.percent"),
        ],
    )
    def test_wrong_type(self, write_config, text, key):
        """Values must match the default's type."""
        with pytest.raises(ConfigError, match=key):
            load_config(write_config(text))

    def test_invalid_train_settings(self, write_config):
        """Engine validation errors surface as config errors."""
        with pytest.raises(ConfigError):
            load_config(write_config("[train]\nstep_size = -1.0\n"))

    def test_bad_decay(self, write_config):
        """Decay entries are [step, multiplier] pairs."""
        with pytest.raises(ConfigError, match="train.decay"):
            load_config(write_config("[train]\ndecay = [[100, 0.1, 3]]\n"))

    def test_negative_seed(self, write_config):
        """Root seeds must be non-negative."""
        with pytest.raises(ConfigError, match="experiment.seed"):
            load_config(write_config("[experiment]\nseed = -1\n"))

    def test_bad_init(self, write_config):
        """Only random and map-clone initializations exist."""
        with pytest.raises(ConfigError, match="particles.init"):
            load_config(write_config('[particles]\ninit = "zeros"\n'))

    def test_missing_data_path(self, write_config):
        """Referenced files must exist."""
        with pytest.raises(ConfigError, match="data.train_path"):
            load_config(write_config('[data]\ntrain_path = "missing.csv"\n'))

    def test_relative_paths(self, write_config, tmp_path):
        """Paths resolve against the config file's directory."""
        (tmp_path / "train.csv").write_text("feat_0,label\n0.5,1\n")
        config = load_config(write_config('[data]\ntrain_path = "train.csv"\n'))
        assert config.resolve(config.data.train_path) == tmp_path / "train.csv"

    @pytest.mark.parametrize(
        "path",
        ["config.example.toml"]
        + sorted(f"configs/{p.name}" for p in (ROOT / "configs").glob("*.toml")),
    )
    def test_shipped_configs(self, path):
        """Every config in the repository loads."""
        assert load_config(ROOT / path) is not None


class TestSections:
    """Test conversion of sections into engine objects."""

    def test_parameter_method_uses_parameter_space(self, write_config):
        """The kernel space follows the training method."""
        config = load_config(write_config('[train]\nmethod = "parameter"\n'))
        train = config.train_config()
        assert train.method is Method.PARAM_REPULSION
        assert train.kernel.space is Space.PARAMETER

    def test_recipe(self, write_config):
        """Particle settings become a recipe."""
        text = '[particles]\nmode = "full-ensemble"\nn = 3\nhidden = [8, 8]\n'
        recipe = load_config(write_config(text)).particles.to_recipe()
        assert recipe.mode is ParticleMode.FULL_ENSEMBLE
        assert recipe.hidden == (8, 8)
        assert recipe.n == 3

    def test_single_bound_is_broadcast(self, moons):
        """One [low, high] pair covers every input dimension."""
        source = load_config().repulsion.to_source(moons)
        assert source.input_dim == 2

    def test_ood_pool_needs_pool(self, write_config, moons):
        """An ood-pool source without a pool is a config error."""
        config = load_config(write_config('[repulsion]\nsource = "ood-pool"\n'))
        with pytest.raises(ConfigError):
            config.repulsion.to_source(moons)

    def test_parse_enum(self):
        """Kebab-case values map to members."""
        assert parse_enum(Distance, "sq-l2", "kernel.distance") is Distance.SQ_L2


class TestResolveThreads:
    """Test the worker-count precedence."""

    def test_environment_wins(self, monkeypatch):
        """REPULSE_THREADS overrides the command line."""
        monkeypatch.setenv(THREADS_ENV, "3")
        assert resolve_threads(2, 1) == 3

    def test_cli_then_config(self, monkeypatch):
        """Without the variable, --threads beats the config."""
        monkeypatch.delenv(THREADS_ENV, raising=False)
        assert resolve_threads(2, 5) == 2
        assert resolve_threads(None, 5) == 5

    @pytest.mark.parametrize("value", ["abc", "0", "-2"])
    def test_invalid_environment(self, monkeypatch, value):
        """The variable must be a positive integer."""
        monkeypatch.setenv(THREADS_ENV, value)
        with pytest.raises(ConfigError):
            resolve_threads(None)
