import csv
import io
import json

import numpy as np
import pytest

from cavitrap.config import CavityConfig, ConfigError, GridConfig, StudyConfig, SweepConfig
from cavitrap.runner import (CSV_COLUMNS, PRESETS, BaselineCache, CaseError, default_workers, preset,
                             preset_cases, run_case, run_configs, run_sweep, write_outputs)

COARSE = GridConfig(spacing=100e-6, ratio=1.3, half_width=6e-3)


def coarse(trap="blade", **kw):
    return StudyConfig(trap, grid=COARSE, **kw)


@pytest.fixture(scope="module")
def cache():
    return BaselineCache()


def test_baseline_case(cache):
    r = run_case(coarse(), cache)
    assert r.ok and r.report is r.baseline
    assert r.report.depths["x"].bounded and r.report.frequencies["x"] > 0
    assert r.report.geometry_hash == r.baseline.geometry_hash


def test_cavity_case_is_normalised_and_reuses_baseline(cache):
    hits = cache.hits
    r = run_case(coarse(cavity=CavityConfig("x", 1e-3)), cache)
    assert cache.hits >= hits + 2  # grid and baseline report both cached
    assert 0 < r.report.normalized["depth_x"] < 1
    assert r.report.baseline_hash == r.baseline.geometry_hash
    assert r.report.geometry_hash != r.baseline.geometry_hash
    assert r.solve["residual"] <= 1e-8


def test_deterministic_rerun_is_identical(cache):
    cfg = coarse(cavity=CavityConfig("y", 1.5e-3))
    a = run_case(cfg, BaselineCache()).to_dict(deterministic=True)
    b = run_case(cfg, BaselineCache()).to_dict(deterministic=True)
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert "wall_time" not in a["solve"]


def test_failure_carries_case_label(cache):
    cfg = coarse(cavity=CavityConfig("x", 1e-3, diameter=1.6e-3))
    with pytest.raises(CaseError, match="x-cavity L=1mm"):
        run_case(cfg, cache)


def test_sweep_orders_results_and_reports_partial_failure(cache, tmp_path):
    cfg = coarse(cavity=CavityConfig("x", 1e-3, diameter=1.6e-3),
                 sweep=SweepConfig("cavity_length", (3e-3, 1e-3, 2e-3)))
    res = run_sweep(cfg, workers=1, cache=cache)
    assert [c.sweep_value for c in res.cases] == [1e-3, 2e-3, 3e-3]
    # a wide mirror 0.5 mm from the null hits the blades
    assert [c.ok for c in res.cases] == [False, True, True]
    rows = list(csv.reader(io.StringIO(res.csv())))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) - 1 == len(res.completed) == 2
    assert all(r[CSV_COLUMNS.index("config_hash")] for r in rows[1:])
    paths = write_outputs(res, tmp_path, True, "sweep")
    assert len(paths["reports"]) == 3
    failed = json.loads(paths["reports"][0].read_text())
    assert failed["status"] == "failed" and "overlaps" in failed["error"]


def test_worker_count_does_not_change_results(cache):
    cfgs = [(coarse(cavity=CavityConfig(ax, 1e-3)), None) for ax in ("z", "x")]
    one = run_configs(cfgs, workers=1, cache=BaselineCache())
    two = run_configs(cfgs, workers=2, cache=BaselineCache())
    assert one.csv() == two.csv()
    rev = run_configs(cfgs[::-1], workers=1, cache=BaselineCache())
    assert rev.cases[0].to_dict() == {**one.cases[1].to_dict(), "index": 0}


def test_workers_from_environment(monkeypatch):
    monkeypatch.setenv("CAVITRAP_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.setenv("CAVITRAP_WORKERS", "zero")
    assert default_workers() == 1


def test_surface_charge_case(cache):
    r = run_case(coarse(study="surface_charge", cavity=CavityConfig("z", 1e-3)), cache)
    assert r.report is None and np.linalg.norm(r.efield) > 0
    row = r.to_dict()
    assert row["efield_abs_V_per_m"] == pytest.approx(float(np.linalg.norm(r.efield)))


def test_scaled_case_uses_scaled_mirrors(cache):
    r = run_case(coarse(scale=2.0, cavity=CavityConfig("x", 1e-3)), cache)
    assert r.report.normalized["depth_x"] < 1


def test_presets():
    assert len(preset("table1")) == 5
    assert {c.trap for c in preset("table1")} == {"blade", "wafer", "endcap", "stylus", "surface"}
    fig5 = preset("fig5")
    assert len(fig5) == 9 and {c.trap for c in fig5} == {"blade"}
    assert {(c.cavity.axis, next(k for k in ("longitudinal", "transverse", "skew")
                                  if getattr(c.cavity.misalignment, k))) for c in fig5} == \
        {(a, m) for a in "xyz" for m in ("longitudinal", "transverse", "skew")}
    assert all(c.cavity.length == 1e-3 for c in fig5)
    eps = [c.cavity.eps_r for c, _ in preset_cases("fig8") if c.cavity.coating is None and not c.cavity.metalized]
    assert sorted(eps) == [2.1, 3.8, 4.5]
    labels = [c.name for c in preset("fig8")]
    assert any("coated" in n for n in labels) and any("metalized" in n for n in labels)
    assert any(c.sweep and c.sweep.parameter == "conductivity" for c in preset("fig8"))
    assert set(PRESETS) == {"table1", "fig3", "fig4", "fig5", "fig6", "fig7", "fig8"}
    with pytest.raises(ConfigError, match="unknown preset"):
        preset("fig9")
