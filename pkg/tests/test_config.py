import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from decteam.config import ConfigError, dump_config, load_config, parse_config, spec_to_config
from decteam.model import LqTeamSpec, TimeGrid

import scenarios

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _fields_close(a, b, tol=1e-12):
    names = ["H", "R", "E", "m", "F", "D", "mean", "cov"]
    if isinstance(a, LqTeamSpec):
        names += ["A", "B", "G", "C", "M_T"]
    for name in names:
        np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=0, atol=tol, err_msg=name)


@pytest.mark.parametrize("name,factory", [
    ("coupled_two_dm", scenarios.coupled_two_dm),
    ("filtering_two_dm", scenarios.filtering_two_dm),
    ("single_dm", scenarios.single_dm),
    ("broadcast_two_dm", scenarios.broadcast_two_dm),
    ("broadcast_singular", scenarios.singular_broadcast),
])
def test_shipped_configs_match_factories(name, factory):
    sc = load_config(CONFIGS / f"{name}.json")
    _fields_close(sc.spec, factory(), tol=0.0)


matrix = st.lists(st.floats(-5, 5, allow_nan=False), min_size=4, max_size=4).map(lambda v: np.reshape(v, (2, 2)))


@settings(max_examples=30, deadline=None)
@given(matrix, matrix, st.floats(0.1, 3))
def test_round_trip(A, Q, T):
    spec = LqTeamSpec(A=A, B=[[1.0], [0.0]], G=np.eye(2), C=[[1.0, 0.0]], D=[[0.3]], H=Q @ Q.T,
                      R=[[2.0]], mean=A[0], cov=Q @ Q.T, n_blocks=(2,), d_blocks=(1,), k_blocks=(1,),
                      M_T=np.eye(2) * T)
    grid = TimeGrid(T, T / 10)
    text = json.dumps(spec_to_config(spec, grid))
    back = parse_config(json.loads(text))
    _fields_close(spec, back.spec)
    assert back.grid == grid


def test_dump_and_load(tmp_path):
    p = tmp_path / "b.json"
    dump_config(scenarios.broadcast_two_dm(), TimeGrid(1.0, 0.01), p)
    sc = load_config(p)
    assert sc.kind == "broadcast"
    _fields_close(sc.spec, scenarios.broadcast_two_dm())


def test_dt_override():
    sc = load_config(CONFIGS / "single_dm.json", dt=0.01)
    assert sc.grid.num_steps == 100


@pytest.mark.parametrize("text", ["{not json", "[]", '{"scenario": "other"}', '{"scenario": "lq_team"}'])
def test_bad_configs_raise_config_error(tmp_path, text):
    p = tmp_path / "bad.json"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_config(p)


def test_missing_matrix_is_named(tmp_path):
    cfg = json.loads((CONFIGS / "single_dm.json").read_text())
    del cfg["dynamics"]["B"]
    with pytest.raises(ConfigError, match="'B'"):
        parse_config(cfg)
