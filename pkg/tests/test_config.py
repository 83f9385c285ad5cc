import math

import pytest
from hypothesis import given, settings, strategies as st

from mskernel.config import RunConfig, emit_config, load_config, parse_config, resolve_T

finite = st.floats(1e-6, 1e6, allow_nan=False, allow_infinity=False)


def test_defaults_match_reference_setup():
    cfg = RunConfig()
    assert (cfg.mu, cfg.nu, cfg.kernel, cfg.target) == (0.5, 4.0, "wendland-3-1", "franke")
    assert cfg.domain.d == 2 and cfg.levels == 4 and cfg.max_levels == 8
    assert cfg.hierarchy_params(3.0).gamma == 2.0


def test_round_trip_defaults():
    cfg = RunConfig()
    assert parse_config(emit_config(cfg)) == cfg


@settings(max_examples=60, deadline=None)
@given(levels=st.integers(1, 12), mu=st.floats(0.05, 0.95), nu=finite, cg_tol=st.floats(1e-14, 0.5),
       T=st.one_of(st.just("auto"), st.just("full"), finite.map(repr)),
       workers=st.one_of(st.just("auto"), st.integers(1, 64).map(str)),
       det=st.booleans(), seed=st.integers(0, 2**31), gamma=st.one_of(st.none(), finite),
       T_list=st.lists(finite, max_size=6).map(tuple), mode=st.sampled_from(["matrix_free", "thresholded"]),
       stopping=st.sampled_from(["uniform", "level-weighted"]), target=st.sampled_from(["franke", "zero"]))
def test_round_trip_property(levels, mu, nu, cg_tol, T, workers, det, seed, gamma, T_list, mode, stopping, target):
    cfg = RunConfig(levels=levels, mu=mu, nu=nu, cg_tol=cg_tol, T=T, workers=workers, deterministic=det,
                    seed=seed, gamma=gamma, T_list=T_list, mode=mode, stopping=stopping, target=target)
    assert parse_config(emit_config(cfg)) == cfg


def test_partial_file_keeps_defaults(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[hierarchy]\nlevels = 6\n[solver]\nT = 3.5\n", encoding="utf-8")
    cfg = load_config(path)
    assert cfg.levels == 6 and cfg.T == "3.5" and cfg.nu == 4.0


@pytest.mark.parametrize("text", [
    "[hierarchy]\nbogus = 1\n",
    "[solver]\nlevels = 3\n",
    "[hierarchy]\nlevels = 0\n",
    "[solver]\nmode = fast\n",
    "[solver]\nT = -2\n",
    "[run]\ndeterministic = maybe\n",
    "[run]\nworkers = 0\n",
    "[kernel]\nkernel = gauss\n",
])
def test_bad_configs_rejected(text):
    with pytest.raises(ValueError):
        parse_config(text)


def test_resolve_T():
    assert resolve_T("full") == math.inf
    assert resolve_T("auto") == "auto"
    assert resolve_T("2.5") == 2.5


def test_solver_config_only_thresholded_uses_T():
    assert RunConfig().solver_config(3.0).T is None
    assert RunConfig(mode="thresholded").solver_config(3.0).T == 3.0
