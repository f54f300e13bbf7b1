import os, pytest

from modules.types import ConfigurationError
from modules.training import TrainConfig
from modules.fixtures import FixtureSpec
from utils.config import load_config, parse_pairs


CONFIGS = os.path.join(os.path.dirname(__file__), "..", "configs")


def write(tmp_path, text: str) -> str:
    path = tmp_path / "run.cfg"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_parse_pairs_skips_comments_and_blanks():
    assert parse_pairs(["# header", "", "lr = 1e-3  # faster", "out_dir=runs/a"]) == {"lr": "1e-3", "out_dir": "runs/a"}


def test_parse_pairs_rejects_lines_without_equals():
    with pytest.raises(ConfigurationError, match=":2:"):
        parse_pairs(["lr = 1", "iterations 10"], origin="run.cfg")


def test_file_values_are_coerced(tmp_path):
    config = load_config(TrainConfig, write(tmp_path, "iterations = 20\nbetas = 0.5, 0.9\ncurriculum = false\n"), environ={})
    assert config.iterations == 20 and config.betas == (0.5, 0.9) and config.curriculum is False


def test_precedence(tmp_path):
    path = write(tmp_path, "iterations = 20\nfixture_root = from_file\n")
    config = load_config(TrainConfig, path, ["iterations=30"], environ={"TEXGEN_FIXTURE_ROOT": "from_env"})
    assert config.iterations == 30
    assert config.fixture_root == "from_env"


def test_environment_only_touches_known_fields():
    spec = load_config(FixtureSpec, environ={"TEXGEN_FIXTURE_ROOT": "elsewhere"})
    assert spec == FixtureSpec()


def test_optional_fields_accept_none():
    assert load_config(TrainConfig, overrides=["extractor_weights = none"], environ={}).extractor_weights is None


def test_list_fields():
    spec = load_config(FixtureSpec, overrides=["coverage_levels = 0.2, 0.5"], environ={})
    assert spec.coverage_levels == [0.2, 0.5]


def test_unknown_key(tmp_path):
    with pytest.raises(ConfigurationError, match="learning_rate"):
        load_config(TrainConfig, write(tmp_path, "learning_rate = 1\n"), environ={})


def test_invalid_value():
    with pytest.raises(ConfigurationError):
        load_config(TrainConfig, overrides=["p_aug = 2"], environ={})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigurationError):
        load_config(TrainConfig, str(tmp_path / "absent.cfg"))


@pytest.mark.parametrize("name", ["sampler.cfg", "refiner.cfg", "ablation_no_curriculum.cfg", "smoke.cfg"])
def test_shipped_training_configs_load(name):
    load_config(TrainConfig, os.path.join(CONFIGS, name), environ={})


def test_shipped_fixture_spec_loads():
    spec = load_config(FixtureSpec, os.path.join(CONFIGS, "fixtures.cfg"), environ={})
    assert spec.coverage_levels[0] == 0.2 and spec.count == 10
