"""Configured forest presets."""

import pytest
from pydantic import ValidationError

from koos import presets_loader
from koos.forest import ForestParams


def _write(tmp_path, text):
    path = tmp_path / "presets.yaml"
    path.write_text(text, encoding="utf-8")
    return path


def test_shipped_presets_compile_with_one_default():
    presets = presets_loader.validate_presets()

    assert [p.id for p in presets] == ["published", "desk", "memorize"]
    assert [p.id for p in presets if p.default] == ["published"]


def test_default_preset_carries_the_published_settings():
    params = presets_loader.default_preset().params()

    assert params == ForestParams(
        n_trees=100000, max_depth=5, min_samples_leaf=2, mtry=3, seed=0, bootstrap=True
    )


def test_overrides_replace_fields_and_none_is_ignored():
    preset = presets_loader.get_preset("desk")

    params = preset.params(seed=42, n_trees=7, max_depth=None, bootstrap=False)

    assert (params.n_trees, params.max_depth, params.seed) == (7, 5, 42)
    assert params.bootstrap is False


def test_preset_values_are_read_only():
    preset = presets_loader.get_preset("memorize")

    with pytest.raises(TypeError):
        preset.values["n_trees"] = 5


def test_invalid_override_surfaces_as_a_validation_error():
    with pytest.raises(ValidationError):
        presets_loader.get_preset("desk").params(mtry=12)


def test_unknown_preset_fails_with_structured_not_found():
    with pytest.raises(presets_loader.PresetNotFoundError) as caught:
        presets_loader.get_preset("totally-bogus")

    assert caught.value.code == "preset_not_found"
    assert "published" in caught.value.configured


def test_two_defaults_are_rejected(tmp_path):
    path = _write(
        tmp_path,
        "presets:\n  a: {default: true, n_trees: 1}\n  b: {default: true, n_trees: 2}\n",
    )

    with pytest.raises(ValueError, match="exactly one default"):
        presets_loader.preset_ids(path)


def test_unknown_keys_are_rejected(tmp_path):
    path = _write(tmp_path, "presets:\n  a: {default: true, trees: 10}\n")

    with pytest.raises(ValueError, match="unknown keys"):
        presets_loader.get_preset("a", path)


def test_out_of_range_values_are_rejected(tmp_path):
    path = _write(tmp_path, "presets:\n  a: {default: true, mtry: 20}\n")

    with pytest.raises(ValueError, match="invalid"):
        presets_loader.validate_presets(path)


def test_missing_presets_mapping_is_rejected(tmp_path):
    with pytest.raises(ValueError):
        presets_loader.preset_ids(_write(tmp_path, "other: 1\n"))
