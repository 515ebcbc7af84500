"""Nine-feature vectors per case and the labeled dataset CSV.

Columns, in order: VS volume; shortest VS distance to pons, brainstem, the
three vermal lobule groups, ipsilateral and contralateral cerebellum; VS
contact surface with background. A structure absent from the volume yields
the distance sentinel -1.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import astuple, dataclass
from pathlib import Path
from typing import Iterable, List, Mapping, Optional, TextIO, Tuple, Union

from joblib import Parallel, delayed

from .atlas import AtlasConfig, StructureId, mask_of
from .errors import InvariantViolation, KoosError
from .geometry import (
    ABSENT_DISTANCE,
    Side,
    dist_vs,
    edt,
    resolve_laterality,
    structure_volume,
    surf_vs,
)
from .nifti import LabelVolume, case_id_for, is_nifti_path, load_volume

logger = logging.getLogger(__name__)

FEATURE_NAMES: Tuple[str, ...] = (
    "vs_volume",
    "dist_pons",
    "dist_brainstem",
    "dist_vermal_1_5",
    "dist_vermal_6_7",
    "dist_vermal_8_10",
    "dist_ipsi_cerebellum",
    "dist_contra_cerebellum",
    "surf_background",
)
DATASET_HEADER: Tuple[str, ...] = ("case_id",) + FEATURE_NAMES + ("grade",)
GRADES_HEADER: Tuple[str, ...] = ("case_id", "grade")
GRADES = (1, 2, 3, 4)

_MIDLINE_DISTANCES = (
    ("dist_pons", StructureId.Pons),
    ("dist_brainstem", StructureId.Brainstem),
    ("dist_vermal_1_5", StructureId.VermalLobulesI_V),
    ("dist_vermal_6_7", StructureId.VermalLobulesVI_VII),
    ("dist_vermal_8_10", StructureId.VermalLobulesVIII_X),
)


class MissingVS(KoosError):
    code = "missing_vs"


class DatasetError(KoosError):
    code = "dataset_error"


class DuplicateCaseId(DatasetError):
    code = "duplicate_case_id"


class MalformedRow(DatasetError):
    code = "malformed_row"


class SchemaMismatch(DatasetError):
    code = "schema_mismatch"


@dataclass(frozen=True)
class FeatureVector:
    vs_volume: float
    dist_pons: float
    dist_brainstem: float
    dist_vermal_1_5: float
    dist_vermal_6_7: float
    dist_vermal_8_10: float
    dist_ipsi_cerebellum: float
    dist_contra_cerebellum: float
    surf_background: float

    @classmethod
    def from_values(cls, values: Iterable[float]) -> "FeatureVector":
        values = [float(v) for v in values]
        if len(values) != len(FEATURE_NAMES):
            raise ValueError(
                f"expected {len(FEATURE_NAMES)} feature values; got {len(values)}"
            )
        return cls(*values)

    def values(self) -> Tuple[float, ...]:
        return astuple(self)


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    features: FeatureVector
    grade: Optional[int] = None

    def __post_init__(self) -> None:
        if self.grade is not None and self.grade not in GRADES:
            raise ValueError(f"grade must be one of {GRADES}; got {self.grade!r}")


def _check_vector(fv: FeatureVector) -> None:
    if not fv.vs_volume > 0:
        raise InvariantViolation(f"vs_volume {fv.vs_volume} is not positive")
    for name in FEATURE_NAMES[1:-1]:
        value = getattr(fv, name)
        if not (value >= 0 or value == ABSENT_DISTANCE):
            raise InvariantViolation(f"{name} {value} is neither >= 0 nor the sentinel")
    if not fv.surf_background >= 0:
        raise InvariantViolation(f"surf_background {fv.surf_background} is negative")


def extract_case(vol: LabelVolume, atlas: AtlasConfig) -> FeatureVector:
    vs = mask_of(vol, atlas, StructureId.VS)
    if vs.empty:
        raise MissingVS("VS mask is empty; the case cannot be featurized")
    vs_field = edt(vs)

    values = {"vs_volume": structure_volume(vs)}
    for name, structure in _MIDLINE_DISTANCES:
        values[name] = dist_vs(mask_of(vol, atlas, structure), vs_field)

    brainstem = mask_of(vol, atlas, StructureId.Brainstem)
    side = resolve_laterality(vs, brainstem, vol.affine)
    left = mask_of(vol, atlas, StructureId.LeftCerebellum)
    right = mask_of(vol, atlas, StructureId.RightCerebellum)
    ipsi, contra = (left, right) if side is Side.Left else (right, left)
    values["dist_ipsi_cerebellum"] = dist_vs(ipsi, vs_field)
    values["dist_contra_cerebellum"] = dist_vs(contra, vs_field)

    background = mask_of(vol, atlas, StructureId.Background)
    values["surf_background"] = surf_vs(vs, background)

    fv = FeatureVector(**values)
    _check_vector(fv)
    return fv


def _format_real(value: float) -> str:
    return format(value, ".17g")


def write_dataset(records: Iterable[CaseRecord], sink: TextIO) -> None:
    records = list(records)
    seen = set()
    for record in records:
        if record.case_id in seen:
            raise DuplicateCaseId(f"case_id {record.case_id!r} appears more than once")
        seen.add(record.case_id)
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(DATASET_HEADER)
    for record in sorted(records, key=lambda r: r.case_id):
        grade = "" if record.grade is None else str(record.grade)
        writer.writerow(
            [record.case_id]
            + [_format_real(v) for v in record.features.values()]
            + [grade]
        )


def _parse_real(text: str, column: str, line_no: int) -> float:
    try:
        value = float(text)
    except ValueError as exc:
        raise MalformedRow(f"line {line_no}: {column} {text!r} is not a number") from exc
    if not math.isfinite(value):
        raise MalformedRow(f"line {line_no}: {column} {text!r} is not finite")
    return value


def _parse_grade(text: str, line_no: int) -> Optional[int]:
    text = text.strip()
    if not text:
        return None
    try:
        grade = int(text)
    except ValueError as exc:
        raise MalformedRow(f"line {line_no}: grade {text!r} is not an integer") from exc
    if grade not in GRADES:
        raise MalformedRow(f"line {line_no}: grade {grade} is outside 1..4")
    return grade


def read_dataset(source: TextIO) -> List[CaseRecord]:
    reader = csv.reader(source)
    header = next(reader, None)
    if header is None or tuple(header) != DATASET_HEADER:
        raise SchemaMismatch(
            f"dataset header must be {','.join(DATASET_HEADER)!r}; got "
            f"{','.join(header or [])!r}"
        )
    records: List[CaseRecord] = []
    seen = set()
    for line_no, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(DATASET_HEADER):
            raise MalformedRow(
                f"line {line_no}: expected {len(DATASET_HEADER)} columns; got {len(row)}"
            )
        case_id = row[0]
        if not case_id:
            raise MalformedRow(f"line {line_no}: empty case_id")
        if case_id in seen:
            raise DuplicateCaseId(f"line {line_no}: case_id {case_id!r} repeated")
        seen.add(case_id)
        features = FeatureVector.from_values(
            _parse_real(text, name, line_no)
            for name, text in zip(FEATURE_NAMES, row[1:-1])
        )
        records.append(CaseRecord(case_id, features, _parse_grade(row[-1], line_no)))
    return records


def write_grades(grades: Mapping[str, int], sink: TextIO) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(GRADES_HEADER)
    for case_id in sorted(grades):
        writer.writerow([case_id, str(grades[case_id])])


def read_grades(source: TextIO) -> dict[str, int]:
    """Read ``case_id,grade`` rows; a full dataset CSV contributes its grade column.

    Rows of a dataset CSV with an empty grade are left out.
    """
    reader = csv.reader(source)
    header = tuple(next(reader, ()))
    if header not in (GRADES_HEADER, DATASET_HEADER):
        raise SchemaMismatch(
            f"grades header must be 'case_id,grade' or the dataset header; got "
            f"{','.join(header)!r}"
        )
    grades: dict[str, int] = {}
    for line_no, row in enumerate(reader, 2):
        if not row:
            continue
        if len(row) != len(header):
            raise MalformedRow(
                f"line {line_no}: expected {len(header)} columns; got {len(row)}"
            )
        case_id = row[0]
        if case_id in grades:
            raise DuplicateCaseId(f"line {line_no}: case_id {case_id!r} repeated")
        grade = _parse_grade(row[-1], line_no)
        if grade is None:
            if header == GRADES_HEADER:
                raise MalformedRow(f"line {line_no}: missing grade for {case_id!r}")
            continue
        grades[case_id] = grade
    return grades


def load_dataset(path: Union[str, Path]) -> List[CaseRecord]:
    with open(path, newline="", encoding="utf-8") as handle:
        return read_dataset(handle)


def save_dataset(path: Union[str, Path], records: Iterable[CaseRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        write_dataset(records, handle)


def _extract_file(path: Path, atlas: AtlasConfig) -> Tuple[str, Optional[FeatureVector]]:
    case_id = case_id_for(path)
    vol = load_volume(path)
    try:
        fv = extract_case(vol, atlas)
    except MissingVS:
        return case_id, None
    logger.debug("%s features %s", case_id, fv.values())
    return case_id, fv


def extract_directory(
    directory: Union[str, Path],
    atlas: AtlasConfig,
    labels: Optional[Mapping[str, int]] = None,
    threads: int = 1,
) -> Tuple[List[CaseRecord], List[str]]:
    """Featurize every NIfTI file in ``directory``.

    Returns the records sorted by case_id and the ids of cases skipped for an
    empty VS mask. Unreadable files raise; the batch is not partial.
    """
    paths = sorted(p for p in Path(directory).iterdir() if p.is_file() and is_nifti_path(p))
    by_case: dict[str, Path] = {}
    for path in paths:
        case_id = case_id_for(path)
        if case_id in by_case:
            raise DuplicateCaseId(
                f"{by_case[case_id].name} and {path.name} share case_id {case_id!r}"
            )
        by_case[case_id] = path

    results = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_extract_file)(path, atlas) for path in by_case.values()
    )

    labels = labels or {}
    records: List[CaseRecord] = []
    skipped: List[str] = []
    for case_id, fv in sorted(results, key=lambda item: item[0]):
        if fv is None:
            logger.warning("skipping %s: VS mask is empty", case_id)
            skipped.append(case_id)
            continue
        records.append(CaseRecord(case_id, fv, labels.get(case_id)))
    unmatched = sorted(set(labels) - set(by_case))
    if unmatched:
        logger.info("%d labeled case(s) have no mask file: %s", len(unmatched), unmatched)
    logger.info("extracted %d case(s), skipped %d", len(records), len(skipped))
    return records, skipped
