from __future__ import annotations

import pytest

from dplora.config import DEFAULT_SIGMA, parse_config, read_ini, to_ini
from dplora.errors import ConfigError


def test_defaults():
    cfg = parse_config()
    assert (cfg.nodes, cfg.rounds, cfg.batch, cfg.rank) == (5, 50, 8, 512)
    assert (cfg.sigma, cfg.learning_rate, cfg.clip) == (DEFAULT_SIGMA, 5e-4, 10.0)
    assert cfg.epsilon is None and cfg.accountant == "moments"


def test_sigma_and_epsilon_are_exclusive():
    with pytest.raises(ConfigError) as err:
        parse_config(None, {"sigma": "2", "epsilon": "1"})
    assert err.value.key == "sigma"
    cfg = parse_config(None, {"epsilon": "1.5"})
    assert cfg.sigma is None and cfg.epsilon == 1.5


def test_flags_override_file(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[federation]\nnodes = 4\nrounds = 7\n[privacy]\nsigma = 3\n")
    cfg = parse_config(path, {"rounds": "9", "nodes": None})
    assert (cfg.nodes, cfg.rounds, cfg.sigma) == (4, 9, 3.0)


@pytest.mark.parametrize(
    "text, key",
    [
        ("[federation]\nbogus = 1\n", "bogus"),
        ("[nowhere]\nnodes = 1\n", "nowhere"),
        ("[privacy]\nnodes = 3\n", "nodes"),
        ("[federation]\nnodes = three\n", "nodes"),
        ("[privacy]\naccountant = rdp\n", "accountant"),
    ],
)
def test_bad_files_name_the_key(text, key):
    with pytest.raises(ConfigError) as err:
        read_ini(text)
    assert err.value.key == key


@pytest.mark.parametrize(
    "overrides, key",
    [
        ({"rank": 40, "width": 32}, "rank"),
        ({"nodes": 100, "n_samples": 50}, "n_samples"),
        ({"weights": "0.5 0.6", "nodes": 2}, "weights"),
        ({"delta": 2}, "delta"),
        ({"clip": "inf"}, "clip"),
        ({"rounds": 0}, "rounds"),
    ],
)
def test_validation_errors(overrides, key):
    with pytest.raises(ConfigError) as err:
        parse_config(None, overrides)
    assert err.value.key == key


def test_clip_may_be_disabled_without_noise():
    assert parse_config(None, {"clip": "inf", "sigma": 0}).clip == float("inf")


def test_ini_round_trip(tmp_path):
    cfg = parse_config(None, {"weights": "0.1, 0.2, 0.3, 0.2, 0.2", "seed": 11, "epsilon": 3.0, "baseline": "true"})
    path = tmp_path / "echo.ini"
    path.write_text(to_ini(cfg))
    assert parse_config(path) == cfg
