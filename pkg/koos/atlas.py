"""Anatomical structure schema and its mapping onto label IDs.

Label IDs are configuration. An atlas file lists, one structure per line,
``Name = id[,id...]`` with ``#`` comments; names are spelled exactly as
:class:`StructureId` members. Background is never listed: it is label 0 plus
every ID no structure claims, so a full parcellation with dozens of extra
structures still partitions cleanly into the nine classes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Dict, FrozenSet, Mapping, Union

import numpy as np

from .errors import KoosError
from .geometry import BinaryMask
from .nifti import MAX_LABEL, LabelVolume

_DATA = Path(__file__).parent / "atlas_data"
_LINE = re.compile(r"^(?P<name>[^=]+?)\s*=\s*(?P<ids>.*)$")
_ID = re.compile(r"^\d+$")


class StructureId(Enum):
    # member order is the feature-vector column order
    VS = "VS"
    Pons = "Pons"
    Brainstem = "Brainstem"
    VermalLobulesI_V = "VermalLobulesI_V"
    VermalLobulesVI_VII = "VermalLobulesVI_VII"
    VermalLobulesVIII_X = "VermalLobulesVIII_X"
    LeftCerebellum = "LeftCerebellum"
    RightCerebellum = "RightCerebellum"
    Background = "Background"


ANATOMICAL = tuple(s for s in StructureId if s is not StructureId.Background)


class AtlasError(KoosError):
    code = "atlas_error"


class UnknownStructureName(AtlasError):
    code = "unknown_structure_name"


class DuplicateLabelId(AtlasError):
    code = "duplicate_label_id"


class MissingStructure(AtlasError):
    code = "missing_structure"


class MalformedAtlas(AtlasError):
    code = "malformed_atlas"


@dataclass(frozen=True)
class AtlasConfig:
    label_ids: Mapping[StructureId, FrozenSet[int]]

    def ids_for(self, structure: StructureId) -> FrozenSet[int]:
        if structure is StructureId.Background:
            raise KeyError("Background has no explicit label IDs")
        return self.label_ids[structure]

    @property
    def mapped_ids(self) -> FrozenSet[int]:
        return frozenset().union(*self.label_ids.values())


def _parse_ids(structure: str, text: str, line_no: int) -> list[int]:
    parts = [part.strip() for part in text.split(",")]
    if not parts or any(not part for part in parts):
        raise MalformedAtlas(f"line {line_no}: {structure} needs a comma-separated ID list")
    ids = []
    for part in parts:
        if not _ID.match(part):
            raise MalformedAtlas(f"line {line_no}: label ID {part!r} is not an integer")
        value = int(part)
        if not 1 <= value <= MAX_LABEL:
            raise MalformedAtlas(
                f"line {line_no}: label ID {value} outside 1..{MAX_LABEL} "
                "(0 is always Background)"
            )
        ids.append(value)
    return ids


def build_atlas(mapping: Mapping[StructureId, Union[int, list[int], set[int]]]) -> AtlasConfig:
    """Validate a structure → IDs mapping and freeze it."""
    owners: Dict[int, StructureId] = {}
    frozen: Dict[StructureId, FrozenSet[int]] = {}
    for structure in ANATOMICAL:
        if structure not in mapping:
            continue
        raw = mapping[structure]
        ids = [raw] if isinstance(raw, int) else list(raw)
        if not ids:
            raise MissingStructure(f"{structure.value} maps to no label IDs")
        for label in ids:
            if label in owners:
                raise DuplicateLabelId(
                    f"label {label} assigned to both {owners[label].value} "
                    f"and {structure.value}"
                )
            owners[label] = structure
        frozen[structure] = frozenset(ids)
    if StructureId.Background in mapping:
        raise UnknownStructureName("Background is implicit and cannot be mapped")
    missing = [s.value for s in ANATOMICAL if s not in frozen]
    if missing:
        raise MissingStructure(f"atlas lacks structures {missing}")
    return AtlasConfig(MappingProxyType(frozen))


def load_atlas(text: str) -> AtlasConfig:
    by_name = {s.value: s for s in ANATOMICAL}
    mapping: Dict[StructureId, list[int]] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        match = _LINE.match(body)
        if match is None:
            raise MalformedAtlas(f"line {line_no}: expected 'Name = id[,id...]'")
        name = match.group("name").strip()
        if name == StructureId.Background.value:
            raise UnknownStructureName(
                f"line {line_no}: Background is implicit (label 0 plus unmapped IDs)"
            )
        if name not in by_name:
            raise UnknownStructureName(
                f"line {line_no}: unknown structure {name!r}; expected one of "
                f"{sorted(by_name)}"
            )
        structure = by_name[name]
        if structure in mapping:
            raise MalformedAtlas(f"line {line_no}: {name} listed twice")
        mapping[structure] = _parse_ids(name, match.group("ids"), line_no)
    return build_atlas(mapping)


def load_atlas_file(path: Union[str, Path]) -> AtlasConfig:
    return load_atlas(Path(path).read_text(encoding="utf-8"))


def bundled_atlas(name: str) -> AtlasConfig:
    """Load one of the atlases shipped under ``koos/atlas_data``."""
    return load_atlas_file(_DATA / f"{name}.atlas")


def dump_atlas(atlas: AtlasConfig, header: str = "") -> str:
    lines = [f"# {row}" for row in header.splitlines()]
    for structure in ANATOMICAL:
        ids = ",".join(str(i) for i in sorted(atlas.label_ids[structure]))
        lines.append(f"{structure.value} = {ids}")
    return "\n".join(lines) + "\n"


def mask_of(vol: LabelVolume, atlas: AtlasConfig, structure: StructureId) -> BinaryMask:
    if structure is StructureId.Background:
        ids = atlas.mapped_ids
        bits = ~np.isin(vol.labels, sorted(ids))
    else:
        bits = np.isin(vol.labels, sorted(atlas.label_ids[structure]))
    return BinaryMask(bits, vol.spacing)


def partition_counts(vol: LabelVolume, atlas: AtlasConfig) -> Dict[StructureId, int]:
    """Voxel count per structure; the counts always sum to the voxel total."""
    values, counts = np.unique(vol.labels, return_counts=True)
    owner = {label: s for s, ids in atlas.label_ids.items() for label in ids}
    totals = {s: 0 for s in StructureId}
    for value, count in zip(values, counts):
        totals[owner.get(int(value), StructureId.Background)] += int(count)
    return totals
