import pytest

from planfl.config import PROFILES, load_config
from planfl.errors import ConfigError


def test_overrides_do_not_leak_into_profiles():
    before = repr(PROFILES["tiny"])
    load_config("tiny", ["model.n_heads=4", "train.lr=9"])
    assert repr(PROFILES["tiny"]) == before
    assert load_config("tiny").train.lr == 0.05


def test_full_profile_values():
    cfg = load_config("full")
    assert (cfg.model.depth, cfg.model.m_text, cfg.model.d_text, cfg.model.d_vis) == (12, 8, 512, 768)
    assert cfg.train.lr == 0.0015 and cfg.train.batch_size == 32 and cfg.rounds == 20


def test_dotted_and_keyword_overrides_agree():
    assert load_config("tiny", ["train.alpha=0.5"]) == load_config("tiny", **{"train.alpha": 0.5})


def test_field_level_diagnostics():
    with pytest.raises(ConfigError, match="model.bogus"):
        load_config("tiny", ["model.bogus=1"])
    with pytest.raises(ConfigError, match="rounds"):
        load_config("tiny", ["rounds=0"])


def test_yaml_file_with_profile(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("profile: tiny\nrounds: 4\ntrain:\n  alpha: 2.0\n")
    cfg = load_config(str(path))
    assert cfg.rounds == 4 and cfg.train.alpha == 2.0 and cfg.model.depth == 2


def test_config_hash_tracks_content():
    assert load_config("tiny").config_hash() == load_config("tiny").config_hash()
    assert load_config("tiny", seed=1).config_hash() != load_config("tiny").config_hash()
