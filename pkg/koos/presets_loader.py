"""Validated forest hyperparameter presets.

Presets are declared in ``forest_presets.yaml`` and compile to immutable
records holding a :class:`~koos.forest.ForestParams` without a seed; the seed
always comes from the caller.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Any, Dict, List, Mapping, Tuple

import yaml
from pydantic import ValidationError

from .forest import ForestParams

_PATH = Path(__file__).parent / "forest_presets.yaml"
_PARAM_KEYS = ("n_trees", "max_depth", "min_samples_leaf", "mtry", "bootstrap")


class PresetNotFoundError(KeyError):
    code = "preset_not_found"
    exit_status = 1

    def __init__(self, preset_id: str, configured: List[str]) -> None:
        self.preset_id = preset_id
        self.configured = tuple(configured)
        self.message = f"preset {preset_id!r} is not configured; choose one of {configured}"
        super().__init__(self.message)


@dataclass(frozen=True)
class ForestPreset:
    id: str
    label: str
    values: Mapping[str, Any]
    default: bool = False

    def params(self, seed: int = 0, **overrides: Any) -> ForestParams:
        """Preset values with ``None``-valued overrides ignored."""
        merged = dict(self.values)
        merged.update({key: value for key, value in overrides.items() if value is not None})
        return ForestParams(seed=seed, **merged)


def _load_raw(path: Path = _PATH) -> Dict[str, dict]:
    try:
        document = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError as exc:
        raise FileNotFoundError(f"presets file not found at {path}") from exc
    presets = document.get("presets")
    if not isinstance(presets, dict) or not presets:
        raise ValueError(f"{path} must contain a non-empty top-level presets mapping")
    return presets


def _from_spec(preset_id: str, spec: Mapping[str, Any]) -> ForestPreset:
    unknown = sorted(set(spec) - set(_PARAM_KEYS) - {"label", "default"})
    if unknown:
        raise ValueError(f"preset {preset_id!r} has unknown keys {unknown}")
    values = {key: spec[key] for key in _PARAM_KEYS if key in spec}
    try:
        ForestParams(**values)
    except ValidationError as exc:
        raise ValueError(f"preset {preset_id!r} is invalid: {exc}") from exc
    return ForestPreset(
        id=preset_id,
        label=str(spec.get("label") or preset_id).strip(),
        values=MappingProxyType(values),
        default=bool(spec.get("default")),
    )


def preset_ids(path: Path = _PATH) -> List[str]:
    raw = _load_raw(path)
    ids = list(raw)
    defaults = [preset_id for preset_id in ids if bool((raw[preset_id] or {}).get("default"))]
    if len(defaults) != 1:
        raise ValueError(f"{path.name} must define exactly one default preset; found {defaults}")
    return ids


def get_preset(preset_id: str, path: Path = _PATH) -> ForestPreset:
    raw = _load_raw(path)
    if preset_id not in raw:
        raise PresetNotFoundError(preset_id, list(raw))
    return _from_spec(preset_id, raw[preset_id] or {})


def default_preset(path: Path = _PATH) -> ForestPreset:
    raw = _load_raw(path)
    for preset_id in preset_ids(path):
        if bool((raw[preset_id] or {}).get("default")):
            return _from_spec(preset_id, raw[preset_id])
    raise AssertionError("unreachable: preset_ids enforces one default")


def validate_presets(path: Path = _PATH) -> Tuple[ForestPreset, ...]:
    """Compile every configured preset; raises on the first invalid one."""
    return tuple(get_preset(preset_id, path) for preset_id in preset_ids(path))
