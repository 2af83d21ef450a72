"""Tests for layered experiment configuration."""

import pytest

from qpimaging.app.config import BUNDLED_SCENE, env_layer, resolve_config
from qpimaging.sim.errors import ConfigError


def _write(tmp_path, text, name="run.conf"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_defaults():
    cfg = resolve_config("resources")
    assert cfg.n_pixels == 10
    assert cfg.mode == "circuit"
    assert cfg.plan.r_prior is None
    assert cfg.scene_path() == BUNDLED_SCENE


def test_layers_apply_in_order(tmp_path):
    path = _write(tmp_path, "trials=5\nplan.eps=0.2\nplan.delta=0.1\n")
    env = {"QPIMAGING_TRIALS": "7", "QPIMAGING_PLAN_DELTA": "0.3"}
    cfg = resolve_config("filter", config_file=path)
    assert cfg.trials == 5
    cfg = resolve_config("filter", config_file=path, environ=env)
    assert cfg.trials == 7
    assert cfg.plan.eps == pytest.approx(0.2)
    assert cfg.plan.delta == pytest.approx(0.3)
    cfg = resolve_config("filter", config_file=path, environ=env, flags={"trials": 9, "shots": None})
    assert cfg.trials == 9
    assert cfg.shots == 10_000


def test_unknown_key_in_file(tmp_path):
    path = _write(tmp_path, "trails=5\n")
    with pytest.raises(ConfigError) as exc:
        resolve_config("filter", config_file=path)
    assert exc.value.code == "UNKNOWN_KEY"
    path = _write(tmp_path, "plan.epsilon=0.1\n", name="plan.conf")
    with pytest.raises(ConfigError) as exc:
        resolve_config("filter", config_file=path)
    assert exc.value.code == "UNKNOWN_KEY"


def test_bad_values():
    with pytest.raises(ConfigError) as exc:
        resolve_config("filter", flags={"trials": 0})
    assert exc.value.code == "BAD_VALUE"
    with pytest.raises(ConfigError) as exc:
        resolve_config("filter", flags={"mode": "exact"})
    assert exc.value.code == "BAD_VALUE"
    with pytest.raises(ConfigError):
        resolve_config("filter", environ={"QPIMAGING_PLAN_R_PRIOR": "0.4"})


def test_config_file_for_another_command(tmp_path):
    path = _write(tmp_path, "command=estimate\n")
    with pytest.raises(ConfigError) as exc:
        resolve_config("filter", config_file=path)
    assert exc.value.code == "BAD_VALUE"


def test_lists_and_constants():
    env = {"QPIMAGING_GRID_N": "10, 20", "QPIMAGING_CONSTANTS": "m_qsp:2,m_tom:0.5"}
    cfg = resolve_config("complexity", environ=env)
    assert cfg.grid_n == [10, 20]
    assert cfg.constants == {"m_qsp": 2.0, "m_tom": 0.5}
    with pytest.raises(ConfigError) as exc:
        resolve_config("complexity", environ={"QPIMAGING_CONSTANTS": "m_qsp"})
    assert exc.value.code == "BAD_VALUE"


def test_reserved_environment_is_ignored():
    env = {
        "QPIMAGING_DB_PATH": "/tmp/x.db",
        "QPIMAGING_LOG_LEVEL": "DEBUG",
        "QPIMAGING_STRESS_DIM": "64",
        "QPIMAGING_SHOTS": "12",
        "HOME": "/root",
    }
    assert env_layer(env) == {"shots": "12"}
    assert resolve_config("estimate", environ=env).shots == 12


def test_hashed_view_skips_output_location():
    a = resolve_config("resources", flags={"out": "a", "workers": 1})
    b = resolve_config("resources", flags={"out": "b", "workers": 4})
    assert a.hashed_view() == b.hashed_view()
    assert "out" not in a.hashed_view()
    c = resolve_config("resources", flags={"master_seed": 3})
    assert c.hashed_view() != a.hashed_view()


def test_reference_prior_keys():
    cfg = resolve_config("estimate", environ={"QPIMAGING_REF_SIGNS": "-1, 1"})
    assert cfg.ref_signs == [-1, 1]
    assert cfg.validation is False
    assert resolve_config("estimate", environ={"QPIMAGING_VALIDATION": "true"}).validation
    for signs in ("0,0", "1", "2,0", "1,0,1"):
        with pytest.raises(ConfigError) as exc:
            resolve_config("estimate", environ={"QPIMAGING_REF_SIGNS": signs})
        assert exc.value.code == "BAD_VALUE"
    with pytest.raises(ConfigError) as exc:
        resolve_config("estimate", environ={"QPIMAGING_REF_SIGNS": "1,0", "QPIMAGING_REF_PHASE": "0.3"})
    assert exc.value.code == "BAD_VALUE"
