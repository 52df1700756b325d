from pathlib import Path

import pytest

from tilt_matching.config import ConfigError, RunConfig, load_config, parse_config

CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


def test_defaults_roundtrip():
    cfg = RunConfig()
    assert parse_config(cfg.to_ini()) == cfg


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.cfg")), ids=lambda p: p.stem)
def test_shipped_configs_roundtrip(path):
    cfg = load_config(path)
    again = parse_config(cfg.to_ini())
    assert again == cfg
    assert again.anneal_config() == cfg.anneal_config()


def test_vectors_and_none():
    cfg = parse_config("[target]\nmean = 1, 2\ncov = 1, 0, 0, 1\n[reward]\nc = 0.5, -1\n"
                       "[anneal]\nclip = none\nlevels = 0, 0.5, 1\n")
    assert cfg.target.mean == (1.0, 2.0)
    assert cfg.anneal.clip is None
    ac = cfg.anneal_config()
    assert ac.levels == [0.0, 0.5, 1.0] and ac.fixed_h is None


@pytest.mark.parametrize("text, fragment", [
    ("[nonsense]\nx = 1\n", "unknown section"),
    ("[anneal]\nlearning_rate = 1\n", "learning_rate"),
    ("[anneal]\nbatch_size = many\n", "batch_size"),
    ("[anneal]\nlevels = 0.2, 1.0\n", "[anneal]"),
    ("[anneal]\nloss = FM\n", "[anneal]"),
    ("[target]\nkind = banana\n", "[target] kind"),
    ("[target]\nmean = 0, 0\ncov = 1\n", "[target] cov"),
    ("[reward]\nc = 1, 2\n", "[reward] c"),
    ("[reward]\nkind = temperature\ntemperature = -1\n", "temperature"),
    ("[model]\nbackend = analytic\n[target]\nkind = gmm\n[reward]\nkind = temperature\n", "[model] backend"),
    ("[model]\nbackend = grid\n[target]\nkind = lennard_jones\n[reward]\nkind = temperature\n", "grid"),
    ("[model]\nhidden\n", "malformed"),
])
def test_errors_name_the_problem(text, fragment):
    with pytest.raises(ConfigError, match=None) as info:
        parse_config(text)
    assert fragment in str(info.value)


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        load_config("/nonexistent/run.cfg")
