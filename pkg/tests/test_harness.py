import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qsieve.config import FitConfig, StudyConfig
from qsieve.errors import ConfigError, InputError, StudyError
from qsieve.harness import csv_columns, fd_derivative, fit_loglog_slope, run_study, task_seed


def small_cfg(tmp_path, **kw):
    base = dict(
        ladder_N=[4, 8, 16, 32],
        ladder_T=[50, 50, 50, 50],
        replications=2,
        burn_in=50,
        sup_grid=41,
        l2_nodes=24,
        output_csv=str(tmp_path / "out.csv"),
        output_json=str(tmp_path / "out.json"),
    )
    base.update(kw)
    return StudyConfig.from_dict(base)


# ---- slope fitting -------------------------------------------------------------


def test_slope_exact_power_law():
    s, se = fit_loglog_slope([(x, x**-0.5) for x in (10, 100, 1000, 10000)])
    assert s == pytest.approx(-0.5, abs=1e-12) and se <= 1e-12


def test_slope_constant():
    s, _ = fit_loglog_slope([(x, 3.0) for x in (1, 2, 4, 8)])
    assert abs(s) <= 1e-12


def test_slope_noisy_recovers_rate():
    g = np.random.default_rng(0)
    xs = [10.0**k for k in range(2, 7)]
    s, _ = fit_loglog_slope([(x, x ** (-1 / 3) * math.exp(0.02 * g.standard_normal())) for x in xs])
    assert abs(s + 1 / 3) <= 0.02


def test_slope_input_errors():
    with pytest.raises(InputError):
        fit_loglog_slope([(1, 1), (2, 1), (3, 1)])
    with pytest.raises(InputError):
        fit_loglog_slope([(1, 1), (2, 0), (3, 1), (4, 1)])
    with pytest.raises(InputError):
        fit_loglog_slope([(2, 1), (2, 2), (2, 3), (2, 1)])


@settings(max_examples=50, deadline=None)
@given(rate=st.floats(-3, 3), c=st.floats(1e-3, 1e3), x0=st.floats(1, 100))
def test_slope_property(rate, c, x0):
    pts = [(x0 * 4**k, c * (x0 * 4**k) ** rate) for k in range(5)]
    assert fit_loglog_slope(pts)[0] == pytest.approx(rate, abs=1e-9)


def test_fd_derivative_polynomial():
    X = np.array([[0.3, 0.4]])
    f = lambda X: X[:, 0] ** 3 * X[:, 1]
    assert fd_derivative(f, X, (1, 0))[0] == pytest.approx(3 * 0.09 * 0.4, abs=1e-8)
    assert fd_derivative(f, X, (1, 1))[0] == pytest.approx(3 * 0.09, abs=1e-5)


def test_task_seed_distinct():
    seeds = {task_seed(0, k, r) for k in range(5) for r in range(20)}
    assert len(seeds) == 100
    assert task_seed(3, 1, 2) == task_seed(3, 1, 2)


# ---- configuration -------------------------------------------------------------


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="unknwn"):
        StudyConfig.from_dict({"unknwn": 1})


def test_config_validation():
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"ladder_N": [10, 5], "ladder_T": [10, 10]})
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"replications": 0})
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"gamma": "high"})
    with pytest.raises(ConfigError):
        StudyConfig.from_dict({"multiplier": "auto"})


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        StudyConfig.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("gamma = = 1")
    with pytest.raises(ConfigError, match="malformed"):
        StudyConfig.load(bad)


def test_config_toml_roundtrip(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('gamma = 0.5\nladder_N = [1, 2, 3, 4]\nladder_T = [10, 10, 10, 10]\nmultiplier = "select"\n'
                 "alphas = [[1, 0], [0, 1]]\nsmoothness = 2\n")
    cfg = StudyConfig.load(p)
    assert cfg.gamma == 0.5 and cfg.multiplier == "select" and cfg.alphas == ((1, 0), (0, 1))
    assert StudyConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(seed=9).seed == 9


def test_fit_config(tmp_path):
    p = tmp_path / "f.toml"
    p.write_text('counts = [5, 5]\npsi_family = "cosine"\n')
    cfg = FitConfig.load(p)
    assert cfg.counts == (5, 5) and cfg.psi_family == "cosine"


# ---- studies -------------------------------------------------------------------


def test_single_point_study(tmp_path):
    cfg = small_cfg(tmp_path, ladder_N=[10], ladder_T=[50], replications=1)
    res = run_study(cfg)
    assert len(res.rows) == 1 and res.rows[0]["status"] == "ok"
    assert all(v is None for v in res.slopes.values())


def test_noiseless_in_span_study(tmp_path):
    cfg = small_cfg(tmp_path, recipe="in_span", noise_sd=0.0, multiplier=0.1, b_extra_per_dim=1, error_inset=0.0,
                    alphas=[])
    res = run_study(cfg, write=False)
    for r in res.rows:
        assert r["counts"] == "4x4"
        assert r["l2_err"] <= 1e-8 and r["sup_err"] <= 1e-8


def test_study_outputs_and_determinism(tmp_path):
    cfg = small_cfg(tmp_path)
    res = run_study(cfg)
    text = (tmp_path / "out.csv").read_text()
    assert text == res.to_csv_text()
    header = text.splitlines()[0].split(",")
    assert header == csv_columns(cfg) and "wall_time" not in header
    doc = json.loads((tmp_path / "out.json").read_text())
    assert doc["schema_version"] == 1 and "wall_time" in doc["rows"][0]
    again = run_study(cfg.replace(output_csv=str(tmp_path / "b.csv"), output_json=str(tmp_path / "b.json")))
    assert (tmp_path / "b.csv").read_bytes() == text.encode()
    assert again.slopes == res.slopes


def test_parallel_matches_serial(tmp_path):
    cfg = small_cfg(tmp_path, replications=2)
    serial = run_study(cfg, write=False).to_csv_text()
    parallel = run_study(cfg.replace(workers=2), write=False).to_csv_text()
    assert serial == parallel


def test_errors_decrease_along_ladder(tmp_path):
    cfg = small_cfg(tmp_path, ladder_N=[5, 20, 80, 320], replications=4, gamma=0.5)
    res = run_study(cfg, write=False)
    means = [a["l2_err"] for a in res.aggregates]
    inversions = sum(1 for a, b in zip(means, means[1:]) if b > a)
    assert inversions <= 1
    assert res.slopes["l2_err"]["slope"] < 0


def test_all_failures_raise(tmp_path):
    cfg = small_cfg(tmp_path, ladder_N=[1, 1, 1, 1], ladder_T=[5, 6, 7, 8], replications=1)
    with pytest.raises(StudyError):
        run_study(cfg)
    # outputs are still written
    rows = (tmp_path / "out.csv").read_text().splitlines()
    assert len(rows) == 5 and all(",failed," in r for r in rows[1:])


def test_minority_failures_recorded(tmp_path):
    cfg = small_cfg(tmp_path, ladder_N=[1, 10, 12, 14, 16], ladder_T=[10] * 5, replications=1, b_extra_per_dim=1)
    res = run_study(cfg, write=False)
    assert res.failures == 1 and res.rows[0]["status"] == "failed" and "InputError" in res.rows[0]["message"]
    assert res.aggregates[0]["replications_ok"] == 0


def test_non_designed_recipe_rejected(tmp_path):
    with pytest.raises(ConfigError):
        run_study(small_cfg(tmp_path, recipe="no_such_recipe"), write=False)
