"""Run-config schema validation, defaults, and builder round trips."""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from scattershape.config import (
    CONFIG_VERSION,
    ConfigError,
    build_gn_config,
    build_mesh,
    build_waves,
    emit_config,
    load_config,
    normalize_config,
)
from scattershape.gauss_newton import GNConfig
from scattershape.mesh import icosphere
from scattershape.tangent_point import EnergyParams


def minimal_config(**overrides):
    cfg = {
        "version": CONFIG_VERSION,
        "grid_level": 1,
        "waves": {"kappas": [np.pi], "directions": [[0.0, 0.0, 1.0]]},
    }
    cfg.update(overrides)
    return cfg


class TestNormalize:
    def test_defaults_filled(self):
        cfg = normalize_config(minimal_config())
        assert cfg["seed"] == 0
        assert cfg["noise_percent"] == 0.0
        assert cfg["output_dir"] == "runs/out"
        assert cfg["far_field_file"] == "far_field.ff"
        defaults = GNConfig()
        for name in ("alpha0", "rho", "tau", "max_iterations",
                     "tol_forward", "tol_update", "remesh_every"):
            assert cfg["solver"][name] == getattr(defaults, name)
        energy = EnergyParams()
        assert cfg["energy"]["p"] == energy.p
        assert cfg["energy"]["include_adjacent"] == energy.include_adjacent

    def test_normalize_does_not_mutate_input(self):
        raw = minimal_config()
        normalize_config(raw)
        assert raw == minimal_config()

    def test_round_trip_is_fixed_point(self):
        cfg = normalize_config(minimal_config(
            seed=11, noise_percent=2.0,
            solver={"alpha0": 1e-2, "max_iterations": 5},
            energy={"p": 8.0}))
        text = emit_config(cfg)
        again = normalize_config(json.loads(text))
        assert again == cfg
        assert emit_config(again) == text

    def test_rejects_non_object(self):
        with pytest.raises(ConfigError, match="JSON object"):
            normalize_config([1, 2, 3])

    @pytest.mark.parametrize("mangle", [
        {"version": 999},
        {"unknown_key": 1},
        {"grid_level": 9},
        {"grid_level": -1},
        {"seed": -1},
        {"seed": 2 ** 64},
        {"noise_percent": -0.5},
        {"eta_override": 0.0},
        {"waves": {"kappas": [], "directions": [[0, 0, 1]]}},
        {"waves": {"kappas": [-1.0], "directions": [[0, 0, 1]]}},
        {"waves": {"kappas": [1.0], "directions": [[0, 0]]}},
        {"waves": {"kappas": [1.0], "directions": [[0, 0, 1]],
                   "extra": 1}},
        {"solver": {"rho": 1.0}},
        {"solver": {"tau": 1.0}},
        {"solver": {"sigma_armijo": 1.0}},
        {"solver": {"max_iterations": -2}},
        {"solver": {"no_such_knob": 1}},
        {"energy": {"p": 4.0}},
        {"energy": {"mystery": True}},
        {"true_mesh": {"icosphere_level": 8}},
        {"true_mesh": {"icosphere_level": 2, "scale": [1.0, 2.0]}},
        {"true_mesh": {"icosphere_level": 2, "spin": 3}},
        {"true_mesh": ""},
        {"remesh_target_edge": 0.0},
    ])
    def test_schema_violations_rejected(self, mangle):
        with pytest.raises(ConfigError):
            normalize_config(minimal_config(**mangle))

    @pytest.mark.parametrize("drop", ["version", "waves", "grid_level"])
    def test_required_keys(self, drop):
        cfg = minimal_config()
        del cfg[drop]
        with pytest.raises(ConfigError, match=drop):
            normalize_config(cfg)

    def test_error_reports_source_and_path(self):
        with pytest.raises(ConfigError, match=r"my\.json.*solver"):
            normalize_config(minimal_config(solver={"rho": 2.0}),
                             source="my.json")

    def test_etas_length_mismatch(self):
        cfg = minimal_config()
        cfg["waves"]["etas"] = [1.0, 2.0]
        with pytest.raises(ConfigError, match="etas"):
            normalize_config(cfg)

    def test_zero_direction_rejected(self):
        cfg = minimal_config()
        cfg["waves"]["directions"] = [[0.0, 0.0, 0.0]]
        with pytest.raises(ConfigError, match="nonzero"):
            normalize_config(cfg)

    def test_stage_index_out_of_range(self):
        cfg = minimal_config(solver={"stages": [[0], [1]]})
        with pytest.raises(ConfigError, match="out of range"):
            normalize_config(cfg)


class TestLoad:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_config(tmp_path / "nope.json")

    def test_invalid_json_reports_position(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text('{"version": 1,,}')
        with pytest.raises(ConfigError, match=r"bad\.json:1:"):
            load_config(path)

    def test_valid_file_round_trips(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(minimal_config(seed=3)))
        cfg = load_config(path)
        (tmp_path / "again.json").write_text(emit_config(cfg))
        assert load_config(tmp_path / "again.json") == cfg


class TestBuilders:
    def test_waves_normalizes_directions(self):
        cfg = normalize_config(minimal_config(
            waves={"kappas": [np.pi, 2.0],
                   "directions": [[0.0, 0.0, 2.0], [3.0, 0.0, 0.0]]}))
        waves = build_waves(cfg)
        assert_allclose(np.linalg.norm(waves.directions, axis=-1), 1.0,
                        rtol=1e-15)
        assert_allclose(waves.etas, waves.kappas, rtol=0)

    def test_waves_eta_override(self):
        cfg = normalize_config(minimal_config())
        waves = build_waves(cfg, eta_override=1.0)
        assert_allclose(waves.etas, 1.0, rtol=0)

    def test_waves_explicit_etas(self):
        cfg = minimal_config()
        cfg["waves"]["etas"] = [0.5]
        waves = build_waves(normalize_config(cfg))
        assert_allclose(waves.etas, [0.5], rtol=0)

    def test_mesh_recipe_scale_translate(self):
        spec = {"icosphere_level": 1, "scale": [2.0, 1.0, 1.0],
                "translate": [0.0, 0.0, 3.0]}
        mesh = build_mesh(spec)
        reference = icosphere(1)
        assert_allclose(
            mesh.vertices,
            reference.vertices * [2.0, 1.0, 1.0] + [0.0, 0.0, 3.0],
            rtol=0, atol=0)

    def test_mesh_path_resolved_against_base_dir(self, tmp_path):
        from scattershape.mesh import save_mesh
        save_mesh(icosphere(0), tmp_path / "m.obj")
        mesh = build_mesh("m.obj", base_dir=tmp_path)
        assert mesh.n_triangles == icosphere(0).n_triangles

    def test_mesh_missing_path(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            build_mesh("gone.obj", base_dir=tmp_path)

    def test_gn_config_carries_solver_and_stages(self):
        cfg = normalize_config(minimal_config(
            waves={"kappas": [1.0, 2.0],
                   "directions": [[0, 0, 1], [1, 0, 0]]},
            solver={"alpha0": 5e-4, "max_iterations": 7,
                    "stages": [[0], [0, 1]]},
            energy={"p": 8.0}))
        gn = build_gn_config(cfg)
        assert gn.alpha0 == 5e-4
        assert gn.max_iterations == 7
        assert gn.stages == ((0,), (0, 1))
        assert gn.energy.p == 8.0
