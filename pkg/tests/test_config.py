import json

import pytest

from hyperfe2.config import DEFAULTS, ConfigError, config_from_dict, parse_config


def _paths(exc):
    return [p for p, _ in exc.value.errors]


def test_defaults_filled():
    cfg = config_from_dict({"hyper": {"m_tilde": 16}})
    assert cfg.mode == "ecm"
    assert cfg["rom"]["n_modes"] == DEFAULTS["rom"]["n_modes"]
    assert cfg["rve"]["mesh"] == {"generator": "rve_with_pore", "n": 12, "pore_radius": 0.18, "etype": "tri6",
                                  "size": 1.0}
    assert cfg["macro"]["mesh"]["etype"] == "quad8"
    assert cfg["rve"]["materials"]["0"]["type"] == "j2"


def test_materials_replace_instead_of_merge():
    cfg = config_from_dict({"mode": "rom", "rve": {"materials": {"0": {"type": "elastic", "E": 2, "nu": 0.2}}}})
    assert list(cfg["rve"]["materials"]) == ["0"]


def test_unknown_key_rejected_with_path():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "rom", "solver": {"tolerance": 1e-6}})
    assert _paths(exc) == ["solver"]
    assert "tolerance" in exc.value.errors[0][1]


def test_missing_material_field_named():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "rom", "rve": {"materials": {"0": {"type": "j2", "E": 1, "nu": 0.3, "h": 0.1}}}})
    assert "rve.materials.0.sigma_y0" in _paths(exc)


def test_type_errors_collected():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "fe3", "sampling": {"k": 0}, "macro": {"steps": "20"}})
    assert set(_paths(exc)) == {"mode", "sampling.k", "macro.steps"}


def test_hyper_mode_needs_m_tilde():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "eheim"})
    assert _paths(exc) == ["hyper.m_tilde"]
    assert config_from_dict({"mode": "eheim", "study": {"m_tilde": [8, 16]}})["hyper"]["m_tilde"] is None


def test_energy_threshold_replaces_mode_count():
    cfg = config_from_dict({"mode": "rom", "rom": {"energy": 0.999}})
    assert cfg["rom"]["n_modes"] is None and cfg["rom"]["energy"] == 0.999
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "rom", "rom": {"n_modes": None, "energy": None}})
    assert _paths(exc) == ["rom.n_modes"]


def test_generator_parameter_check():
    with pytest.raises(ConfigError) as exc:
        config_from_dict({"mode": "rom", "rve": {"mesh": {"generator": "rve_with_pore", "nx": 4}}})
    assert _paths(exc) == ["rve.mesh.nx"]


def test_mesh_file_resolved_relative_to_config(tmp_path):
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "rve.json").write_text("{}")
    (tmp_path / "cfg.json").write_text(json.dumps({"mode": "rom", "rve": {"mesh": "sub/rve.json"}}))
    cfg = parse_config(tmp_path / "cfg.json")
    assert cfg["rve"]["mesh"] == str((tmp_path / "sub" / "rve.json").resolve())
    (tmp_path / "bad.json").write_text(json.dumps({"mode": "rom", "rve": {"mesh": "nope.json"}}))
    with pytest.raises(ConfigError) as exc:
        parse_config(tmp_path / "bad.json")
    assert _paths(exc) == ["rve.mesh"]


def test_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "missing.json")
    (tmp_path / "x.json").write_text("{mode: ecm")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(tmp_path / "x.json")
    (tmp_path / "y.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "y.json")


def test_roundtrip_and_overrides(tmp_path):
    cfg = config_from_dict({"hyper": {"m_tilde": 16}, "sampling": {"k": 4}})
    cfg.save(tmp_path / "full.json")
    back = parse_config(tmp_path / "full.json")
    assert back.data == cfg.data
    ov = cfg.with_overrides(**{"hyper.m_tilde": 32, "mode": "eheim"})
    assert ov["hyper"]["m_tilde"] == 32 and ov.mode == "eheim"
    assert cfg["hyper"]["m_tilde"] == 16
    with pytest.raises(ConfigError):
        cfg.with_overrides(**{"sampling.k": -1})
