"""Plain-text config parsing and the settings registry."""

import pytest

from graphage.config import (
    build_settings,
    config_help,
    default_config_text,
    parse_config,
    settings_from_file,
)
from graphage.errors import ConfigError


def test_parse_handles_comments_blanks_and_spacing():
    text = """
# full line comment
train.epochs = 12   # trailing comment

loss.mu=0.75
"""
    assert parse_config(text) == {"train.epochs": "12", "loss.mu": "0.75"}


def test_parse_rejects_lines_without_equals():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("# fine\ntrain.epochs 12\n")


def test_parse_rejects_duplicates():
    with pytest.raises(ConfigError, match="line 3.*duplicate"):
        parse_config("train.epochs = 1\n# x\ntrain.epochs = 2\n")


def test_parse_rejects_empty_value():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("train.epochs =\n")


def test_defaults_round_trip_through_the_template():
    assert build_settings(parse_config(default_config_text())) == build_settings()


def test_overrides_apply_with_types():
    s = build_settings(
        {
            "train.epochs": "5",
            "loss.mu": "1.0",
            "model.residual": "false",
            "elm.lam_grid": "1, 10",
            "elm.hidden_grid": "20,40",
            "train.optimizer": "sgd",
        }
    )
    assert s.train.epochs == 5
    assert s.loss.mu == 1.0
    assert s.model.residual is False
    assert s.elm.lam_grid == (1.0, 10.0)
    assert s.elm.hidden_grid == (20, 40)
    assert s.train.optimizer == "sgd"


def test_unknown_key_is_rejected():
    with pytest.raises(ConfigError, match="unknown config key"):
        build_settings({"train.speed": "11"})


def test_bad_value_reports_the_key():
    with pytest.raises(ConfigError, match="train.epochs"):
        build_settings({"train.epochs": "fast"})


def test_bool_spellings():
    for raw, expect in (("true", True), ("1", True), ("yes", True), ("on", True),
                        ("false", False), ("0", False), ("no", False), ("off", False)):
        assert build_settings({"model.residual": raw}).model.residual is expect
    with pytest.raises(ConfigError, match="model.residual"):
        build_settings({"model.residual": "maybe"})


def test_range_checks_still_run():
    with pytest.raises(ConfigError):
        build_settings({"loss.mu": "1.5"})


def test_settings_from_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("train.epochs = 3\naug.mask_ratio = 0.25\n")
    s = settings_from_file(str(path))
    assert s.train.epochs == 3
    assert s.aug.mask_ratio == 0.25


def test_flat_dict_covers_every_registered_key():
    from graphage.config import _REGISTRY

    flat = build_settings().as_flat_dict()
    for key in _REGISTRY:
        assert key in flat


def test_help_lists_keys_with_clean_type_names():
    text = config_help()
    assert "train.epochs" in text
    assert "(int)" in text
    assert "(str)" in text  # not mangled by prefix stripping
    assert "(float_tuple)" in text
    assert "elm.hidden_grid" in text
