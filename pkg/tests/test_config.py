import pytest

from spikerecon.config import default_config, load_config, write_default_config
from spikerecon.errors import ValidationError


def test_defaults_load_and_validate():
    cfg = load_config(None, [])
    assert cfg.get("diffusion", "t_steps") == 50
    assert cfg.get("diffusion", "strength") == 0.75
    assert cfg.get("diffusion", "w_vision") == 0.6
    assert cfg.get("diffusion", "w_text") == 0.4


def test_written_default_file_roundtrips(tmp_path):
    p = tmp_path / "run.ini"
    write_default_config(p)
    cfg = load_config(p, [])
    assert cfg.values == default_config().values


def test_override_applies():
    cfg = load_config(None, ["run.seed=7", "data.frames=50"])
    assert cfg.get("run", "seed") == 7
    assert cfg.get("data", "frames") == 50


def test_unknown_section_rejected(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[nosuch]\nx = 1\n")
    with pytest.raises(ValidationError, match="unknown"):
        load_config(p, [])


def test_unknown_key_rejected():
    with pytest.raises(ValidationError, match="unknown"):
        load_config(None, ["data.bogus=1"])


def test_range_violation_rejected():
    with pytest.raises(ValidationError):
        load_config(None, ["diffusion.strength=1.5"])


def test_cross_validation_rules():
    with pytest.raises(ValidationError, match="beta"):
        load_config(None, ["diffusion.beta_lo=0.1", "diffusion.beta_hi=0.01"])
    with pytest.raises(ValidationError, match="w_vision"):
        load_config(None, ["diffusion.w_vision=0.9"])
    with pytest.raises(ValidationError, match="k_layers"):
        load_config(None, ["hvae.k_layers=9"])
    with pytest.raises(ValidationError, match="divisible"):
        load_config(None, ["data.height=30"])


def test_malformed_override_rejected():
    with pytest.raises(ValidationError):
        load_config(None, ["run.seed"])
    with pytest.raises(ValidationError):
        load_config(None, ["seed=3"])


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ValidationError, match="not found"):
        load_config(tmp_path / "nope.ini", [])


def test_manifest_dict_is_plain_data():
    import json
    d = load_config(None, []).as_manifest_dict()
    json.dumps(d)  # must be JSON-serializable
    assert d["diffusion"]["strength"] == 0.75
