from __future__ import annotations

import json

import numpy as np
import pytest

from revsde import catalog
from revsde.config import build_fields
from revsde.config import build_quadrature
from revsde.config import build_simulation_system
from revsde.config import build_slow_fast
from revsde.config import load_config
from revsde.config import parse_config
from revsde.errors import ConfigError
from revsde.exprfield import RotatedDiagonalSpec
from revsde.models import QuadratureRule
from revsde.sde import KLIMONTOVICH


F1_PROBLEM = {
    "dimension": 1,
    "potential": "x^2/2",
    "volatility": {"entries": [["2+sin(x)"]]},
}


def _config(**blocks) -> str:
    return json.dumps(blocks)


def test_json_syntax_error_reports_line_and_column():
    text = '{\n  "convention": 1.0,\n  "grid": }\n'
    with pytest.raises(ConfigError) as info:
        parse_config(text, "cfg.json")
    assert "cfg.json:3:11" in str(info.value)


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config(_config(convnetion=0.5))
    assert "convnetion" in str(info.value)
    with pytest.raises(ConfigError):
        parse_config(_config(problem={**F1_PROBLEM, "potental": "x"}))


def test_top_level_must_be_object():
    with pytest.raises(ConfigError):
        parse_config("[1, 2]")


def test_convention_range():
    with pytest.raises(ConfigError):
        parse_config(_config(convention=1.5))
    assert parse_config(_config(convention=0.0)).convention == 0.0


def test_volatility_needs_exactly_one_form():
    both = {**F1_PROBLEM, "volatility": {"entries": [["1"]], "diagonal": ["1"]}}
    with pytest.raises(ConfigError) as info:
        parse_config(_config(problem=both))
    assert "problem.volatility" in str(info.value)
    with pytest.raises(ConfigError):
        parse_config(_config(problem={**F1_PROBLEM, "volatility": {}}))


def test_grid_bounds_must_be_ordered():
    with pytest.raises(ConfigError):
        parse_config(_config(grid={"lower": [1.0], "upper": [0.0]}))
    with pytest.raises(ConfigError):
        parse_config(_config(grid={"lower": [0.0, 0.0], "upper": [1.0]}))


def test_resolved_expands_defaults():
    cfg = parse_config(_config(problem=F1_PROBLEM))
    resolved = cfg.resolved()
    assert resolved["convention"] == 1.0
    assert resolved["gibbs"] == {"measure_mode": "flat", "beta": 1.0}
    assert resolved["outputs"]["formats"] == ["csv", "json"]
    assert resolved["problem"]["derivative_mode"] == "analytic"


def test_require_names_missing_blocks():
    cfg = parse_config(_config(problem=F1_PROBLEM))
    with pytest.raises(ConfigError) as info:
        cfg.require("problem", "grid", "simulation")
    assert "grid" in str(info.value)
    assert "simulation" in str(info.value)


def test_build_fields_matches_catalog():
    fields = build_fields(parse_config(_config(problem=F1_PROBLEM)).problem)
    reference = catalog.f1()
    pts = np.linspace(-2.0, 2.0, 7).reshape(-1, 1)
    np.testing.assert_array_equal(fields.potential_jet(pts, 1).grad, reference.potential_jet(pts, 1).grad)
    np.testing.assert_array_equal(fields.volatility_jet(pts, 0).value, reference.volatility_jet(pts, 0).value)


def test_build_simulation_system_drift():
    cfg = parse_config(_config(problem={**F1_PROBLEM, "drift": ["-x"]}, convention=0.0))
    system = build_simulation_system(cfg, build_fields(cfg.problem))
    np.testing.assert_allclose(system.drift_at([1.5]), [-1.5])

    gibbs = parse_config(_config(problem=F1_PROBLEM))
    assert build_simulation_system(gibbs, build_fields(gibbs.problem)).convention == KLIMONTOVICH

    bad = parse_config(_config(problem={**F1_PROBLEM, "drift": ["-x", "0"]}))
    with pytest.raises(ConfigError):
        build_simulation_system(bad, build_fields(bad.problem))


def test_build_slow_fast_with_rotated_block():
    slow_fast = {
        "slow_dimension": 2,
        "fast_dimension": 1,
        "potential": "(x1^2+x2^2+x3^2)/2",
        "sigma_slow": {
            "rotated_diagonal": {
                "U": [[0.6, -0.8], [0.8, 0.6]],
                "diagonal": ["2+sin(x1)", "1+x3^2"],
            }
        },
        "sigma_fast": {"diagonal": ["1"]},
        "timescale": 50.0,
    }
    cfg = parse_config(_config(slow_fast=slow_fast))
    sf, rotated = build_slow_fast(cfg.slow_fast)
    assert isinstance(rotated, RotatedDiagonalSpec)
    assert sf.slow_dimension == 2
    assert sf.timescale == 50.0

    plain = {**slow_fast, "sigma_slow": {"diagonal": ["1", "1"]}}
    _, none = build_slow_fast(parse_config(_config(slow_fast=plain)).slow_fast)
    assert none is None


def test_build_quadrature_carries_rule():
    cfg = parse_config(
        _config(averaging={"slow_grid": {"lower": [-1.0], "upper": [1.0]}, "rule": "simpson", "panels": 200})
    )
    quad = build_quadrature(cfg.averaging)
    assert quad.rule == QuadratureRule.SIMPSON
    assert quad.panels == 200


def test_load_config_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def test_load_config_reads_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(_config(problem=F1_PROBLEM, tolerance=1e-7), encoding="utf-8")
    assert load_config(path).tolerance == 1e-7
