import math

import pytest

from cavitrap.config import (CavityConfig, ConfigError, GridConfig, StudyConfig, SweepConfig, apply_sweep_value,
                             expand_cases, load_config, parse_config)
from cavitrap.geometry import Coating


def test_minimal_document_defaults():
    cfg = parse_config('trap = "blade"')
    assert cfg.trap == "blade" and cfg.scale == 1.0 and cfg.study == "rf"
    assert cfg.drive.v_rf == 200.0 and cfg.drive.frequency == 10e6
    assert cfg.ion.mass_amu == 40.0 and cfg.ion.charge_e == 1.0
    assert cfg.grid.spacing == 25e-6 and cfg.grid.auto_domain_tolerance == 0.01
    assert cfg.cavity is None and cfg.sweep is None and cfg.deterministic


def test_unknown_trap_names_valid_ids():
    with pytest.raises(ConfigError) as info:
        parse_config('trap = "paul"')
    for name in ("blade", "wafer", "endcap", "stylus", "surface"):
        assert name in str(info.value)


@pytest.mark.parametrize("doc", [
    'trap = "blade"\nscale = -1.0',
    'trap = "blade"\n[grid]\nspacing = -25e-6',
    'trap = "blade"\n[cavity]\naxis = "x"\nlength = -1e-3',
    'trap = "blade"\n[cavity]\naxis = "x"\nlength = 1e-3\ndiameter = 0.0',
    'trap = "blade"\n[cavity]\naxis = "x"\nlength = 1e-3\n[sweep]\nparameter = "cavity_length"\nvalues = [1e-3, -2e-3]',
])
def test_negative_lengths_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_empty_sweep_rejected():
    doc = 'trap = "blade"\n[cavity]\naxis = "x"\nlength = 1e-3\n[sweep]\nparameter = "cavity_length"\nvalues = []'
    with pytest.raises(ConfigError, match="at least one"):
        parse_config(doc)


@pytest.mark.parametrize("doc,match", [
    ('trap = "blade"\ncolour = 3', "unknown"),
    ('trap = "blade"\n[grid]\nspcing = 1e-5', "unknown"),
    ('trap = "blade"\n[grid]\nratio = 3.0', "ratio"),
    ('trap = "blade"\n[grid]\nauto_domain_tolerance = 0.0', "tolerance"),
    ('trap = "blade"\n[solver]\ntolerance = 2.0', "tolerance"),
    ('trap = "blade"\nstudy = "surface_charge"', "cavity"),
    ('trap = "blade"\n[cavity]\naxis = "w"\nlength = 1e-3', "axis"),
    ('trap = "blade"\n[sweep]\nparameter = "epsilon"\nvalues = [2.0]', "cavity"),
    ('trap = "blade"\n[cavity]\naxis = "x"\nlength = 1e-3\n[sweep]\nparameter = "phase"\nvalues = [1]', "parameter"),
    ('trap = "blade" = x', "malformed"),
])
def test_validation_errors(doc, match):
    with pytest.raises(ConfigError, match=match):
        parse_config(doc)


def test_endcap_axis_mapping():
    y = parse_config('trap = "endcap"\n[cavity]\naxis = "y"\nlength = 1e-3')
    assert y.cavity.axis == "y" and not y.notes
    z = parse_config('trap = "endcap"\n[cavity]\naxis = "z"\nlength = 1e-3')
    assert z.cavity.axis == "x"
    assert any("equivalent" in n for n in z.notes)


def test_surface_y_cavity_defaults_to_one_mirror():
    cfg = parse_config('trap = "surface"\n[cavity]\naxis = "y"\nlength = 0.6e-3')
    assert cfg.cavity.single_mirror


def test_nested_sections():
    doc = '''
trap = "blade"
scale = 2.0
[drive]
v_rf = 150.0
[cavity]
axis = "x"
length = 1e-3
[cavity.coating]
thickness = 10e-6
eps_r = 15.0
[cavity.misalignment]
skew = 1e-4
'''
    cfg = parse_config(doc)
    assert cfg.drive.v_rf == 150.0 and cfg.drive.frequency == 10e6
    assert cfg.cavity.coating == Coating(10e-6, 15.0)
    assert cfg.cavity.misalignment.skew == 1e-4


def round_trip(cfg):
    return parse_config(cfg.to_toml())


@pytest.mark.parametrize("cfg", [
    StudyConfig("blade"),
    StudyConfig("endcap", scale=0.5, grid=GridConfig(spacing=50e-6, half_width=8e-3),
                cavity=CavityConfig("y", 2e-3, coating=Coating(sigma=1.0))),
    StudyConfig("wafer", study="surface_charge", cavity=CavityConfig("x", 1e-3),
                sweep=SweepConfig("cavity_length", (1e-3, 2e-3))),
])
def test_toml_round_trip(cfg):
    back = round_trip(cfg)
    assert back == cfg
    assert back.to_toml() == cfg.to_toml()


def test_load_config(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(StudyConfig("stylus", cavity=CavityConfig("x", 1e-3)).to_toml())
    assert load_config(p).cavity.axis == "x"


def test_expand_cases_orders_by_value():
    cfg = StudyConfig("blade", cavity=CavityConfig("x", 1e-3), sweep=SweepConfig("cavity_length", (3e-3, 1e-3, 2e-3)))
    cases = expand_cases(cfg)
    assert [v for _, v in cases] == [1e-3, 2e-3, 3e-3]
    assert [c.cavity.length for c, _ in cases] == [1e-3, 2e-3, 3e-3]
    assert all(c.sweep is None for c, _ in cases)
    assert expand_cases(StudyConfig("blade")) == [(StudyConfig("blade"), None)]


def test_sweep_values_applied():
    cav = CavityConfig("x", 1e-3)
    base = StudyConfig("blade", cavity=cav)
    assert apply_sweep_value(base, "epsilon", 2.1).cavity.eps_r == 2.1
    c = apply_sweep_value(base, "conductivity", 1.0).cavity.coating
    assert c.sigma == 1.0 and c.thickness == 10e-6 and c.eps_r == cav.eps_r
    m = apply_sweep_value(base, "misalignment", 1e-4, "skew").cavity.misalignment
    assert m.skew == 1e-4 and m.longitudinal == 0


def test_baseline_strips_cavity():
    cfg = StudyConfig("blade", study="surface_charge", cavity=CavityConfig("x", 1e-3))
    b = cfg.baseline()
    assert b.cavity is None and b.study == "rf" and b.grid == cfg.grid
    assert math.isclose(b.scale, cfg.scale)
