"""Synthetic graded label volumes with known geometry.

A fixed schematic template (midline brainstem cylinder, pons ellipsoid, three
vermal boxes, two lateral cerebellum blocks with an inner sub-label each, and
one unmapped distractor label) is rasterized on the grid, then a spherical VS
is placed beside the brainstem on the requested side. The grade fixes the
geometry:

* grade 1: small tumour (radius <= ``R1``) at least ``G_FAR`` from the brainstem
* grade 2: larger tumour, gap in ``[G_NEAR, G_FAR)``
* grade 3: tumour touching the brainstem without entering it
* grade 4: tumour carved into the brainstem (overwrites its voxels)

World coordinates are ``index * spacing`` (diagonal affine); the template is
centred on the grid in x and fixed in millimetres along y and z.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Tuple

import numpy as np
from joblib import Parallel, delayed

from .atlas import StructureId, build_atlas
from .errors import InvariantViolation, KoosError
from .features import CaseRecord, FeatureVector, extract_case
from .geometry import BinaryMask, Side, surf_vs
from .nifti import LabelVolume
from .seeding import child_rng, mix_seed

logger = logging.getLogger(__name__)

DEFAULT_DIMS = (64, 64, 40)
DEFAULT_SPACING = (0.5, 0.5, 1.0)

R1 = 4.0
G_FAR = 6.0
G_NEAR = 1.0
VOLUME_SPLIT = 570.0
MARGIN_VOXELS = 2

BRAINSTEM_RADIUS = 2.5
BRAINSTEM_Y = 14.0
BRAINSTEM_Z = (6.0, 30.0)
VS_Y = 14.0
VS_Z = 20.0
GRADE3_OVERLAP = 0.3
# physical extent (x, y, z) the template needs
TEMPLATE_EXTENT = (25.5, 30.0, 37.0)

# (radius range, brainstem gap range); grade 4 gaps are negative carve depths
GRADE_RANGES = {
    1: ((1.5, 2.6), (6.2, 6.6)),
    2: ((4.25, 4.75), (1.2, 2.0)),
    3: ((4.25, 4.75), (0.0, 0.0)),
    4: ((5.5, 6.0), (-2.0, -1.0)),
}

PHANTOM_LABELS = {
    StructureId.VS: (1,),
    StructureId.Pons: (2,),
    StructureId.Brainstem: (3,),
    StructureId.VermalLobulesI_V: (4,),
    StructureId.VermalLobulesVI_VII: (5,),
    StructureId.VermalLobulesVIII_X: (6,),
    StructureId.LeftCerebellum: (7, 8),
    StructureId.RightCerebellum: (9, 10),
}
PHANTOM_ATLAS = build_atlas(PHANTOM_LABELS)
# painted but never mapped, so it counts as background
DISTRACTOR_LABEL = 11


class InvalidSpec(KoosError):
    code = "invalid_spec"


@dataclass(frozen=True)
class PhantomSpec:
    grade: int
    side: Side
    tumor_radius_mm: float
    brainstem_gap_mm: float
    seed: int = 0
    dims: Tuple[int, int, int] = DEFAULT_DIMS
    spacing: Tuple[float, float, float] = DEFAULT_SPACING


@dataclass(frozen=True)
class PhantomExpectation:
    vs_volume: float
    volume_tolerance: float
    dist_brainstem_bounds: Tuple[float, float]


def _sphere_volume(radius: float) -> float:
    return 4.0 / 3.0 * math.pi * radius**3


def _grid(dims, spacing) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y, z = (np.arange(n, dtype=np.float64) * s for n, s in zip(dims, spacing))
    return x[:, None, None], y[None, :, None], z[None, None, :]


def _x_mid(dims, spacing) -> float:
    return (dims[0] - 1) * spacing[0] / 2.0


@lru_cache(maxsize=8)
def _template(dims: Tuple[int, int, int], spacing: Tuple[float, float, float]) -> np.ndarray:
    x, y, z = _grid(dims, spacing)
    xm = _x_mid(dims, spacing)
    labels = np.zeros(dims, dtype=np.uint16)

    def box(x0, x1, y0, y1, z0, z1):
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1) & (z >= z0) & (z <= z1)

    def paint(region, label):
        labels[np.broadcast_to(region, dims)] = label

    ids = {s: min(PHANTOM_LABELS[s]) for s in PHANTOM_LABELS}
    z0, z1 = BRAINSTEM_Z
    paint(
        ((x - xm) ** 2 + (y - BRAINSTEM_Y) ** 2 <= BRAINSTEM_RADIUS**2)
        & (z >= z0)
        & (z <= z1),
        ids[StructureId.Brainstem],
    )
    paint(
        ((x - xm) / 3.5) ** 2 + ((y - BRAINSTEM_Y) / 3.0) ** 2 + ((z - 34.0) / 3.0) ** 2
        <= 1.0,
        ids[StructureId.Pons],
    )
    paint(box(xm - 2, xm + 2, 24, 29, 28, 34), ids[StructureId.VermalLobulesI_V])
    paint(box(xm - 2, xm + 2, 24, 29, 20, 26), ids[StructureId.VermalLobulesVI_VII])
    paint(box(xm - 2, xm + 2, 24, 29, 10, 16), ids[StructureId.VermalLobulesVIII_X])

    left_cortex, left_core = sorted(PHANTOM_LABELS[StructureId.LeftCerebellum])
    right_cortex, right_core = sorted(PHANTOM_LABELS[StructureId.RightCerebellum])
    paint(box(xm - 12.75, xm - 3, 24, 30, 4, 16), left_cortex)
    paint(box(xm - 9, xm - 6, 26, 28, 8, 12), left_core)
    paint(box(xm + 3, xm + 12.75, 24, 30, 4, 16), right_cortex)
    paint(box(xm + 6, xm + 9, 26, 28, 8, 12), right_core)
    paint(box(xm - 1.5, xm + 1.5, 2, 4, 34, 37), DISTRACTOR_LABEL)

    labels.setflags(write=False)
    return labels


def _center_offset(spec: PhantomSpec) -> float:
    """Distance along x from the brainstem axis to the VS centre."""
    r, gap = spec.tumor_radius_mm, spec.brainstem_gap_mm
    if spec.grade == 3:
        return BRAINSTEM_RADIUS + r - GRADE3_OVERLAP
    return BRAINSTEM_RADIUS + gap + r


def validate_spec(spec: PhantomSpec) -> None:
    if len(spec.dims) != 3 or any(int(n) < 1 for n in spec.dims):
        raise InvalidSpec(f"dims must be 3 positive integers; got {spec.dims}")
    if len(spec.spacing) != 3 or not all(
        math.isfinite(s) and s > 0 for s in spec.spacing
    ):
        raise InvalidSpec(f"spacing must be 3 positive reals; got {spec.spacing}")
    extent = tuple((n - 1) * s for n, s in zip(spec.dims, spec.spacing))
    if any(e < need for e, need in zip(extent, TEMPLATE_EXTENT)):
        raise InvalidSpec(
            f"grid extent {extent} mm cannot hold the template (needs {TEMPLATE_EXTENT})"
        )
    if spec.grade not in (1, 2, 3, 4):
        raise InvalidSpec(f"grade must be 1..4; got {spec.grade}")
    if not isinstance(spec.side, Side):
        raise InvalidSpec(f"side must be Left or Right; got {spec.side!r}")
    r, gap = spec.tumor_radius_mm, spec.brainstem_gap_mm
    if not (math.isfinite(r) and r > 0 and math.isfinite(gap)):
        raise InvalidSpec(f"radius {r} and gap {gap} must be finite, radius positive")

    volume = _sphere_volume(r)
    consistent = {
        1: r <= R1 and gap >= G_FAR,
        2: r > R1 and G_NEAR <= gap < G_FAR,
        3: gap == 0 and volume < VOLUME_SPLIT,
        4: gap < 0 and -gap < BRAINSTEM_RADIUS and volume >= VOLUME_SPLIT,
    }[spec.grade]
    if not consistent:
        raise InvalidSpec(
            f"grade {spec.grade} is inconsistent with radius {r} mm and gap {gap} mm"
        )

    xm = _x_mid(spec.dims, spec.spacing)
    sign = 1.0 if spec.side is Side.Right else -1.0
    center = (xm + sign * _center_offset(spec), VS_Y, VS_Z)
    for axis, (c, n, s) in enumerate(zip(center, spec.dims, spec.spacing)):
        # sub-voxel jitter moves y/z by at most a quarter voxel
        slack = 0.25 * s if axis else 0.0
        low, high = MARGIN_VOXELS * s, (n - 1 - MARGIN_VOXELS) * s
        if c - r - slack < low or c + r + slack > high:
            raise InvalidSpec(
                f"tumour of radius {r} mm at {center} leaves the grid margin on axis {axis}"
            )


def _sphere(spec: PhantomSpec, center: Tuple[float, float, float]) -> np.ndarray:
    x, y, z = _grid(spec.dims, spec.spacing)
    cx, cy, cz = center
    inside = (x - cx) ** 2 + (y - cy) ** 2 + (z - cz) ** 2 <= spec.tumor_radius_mm**2
    return np.broadcast_to(inside, spec.dims).copy()


def _shell_count(bits: np.ndarray) -> int:
    """Voxels of ``bits`` with at least one 6-neighbour outside it."""
    padded = np.pad(bits, 1, constant_values=False)
    interior = bits.copy()
    for axis in range(3):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return int(np.count_nonzero(bits & ~interior))


def generate_phantom(spec: PhantomSpec) -> Tuple[LabelVolume, PhantomExpectation, int]:
    validate_spec(spec)
    vs_label = min(PHANTOM_LABELS[StructureId.VS])
    brainstem_label = min(PHANTOM_LABELS[StructureId.Brainstem])
    template = _template(tuple(spec.dims), tuple(float(s) for s in spec.spacing))

    rng = child_rng(spec.seed, 0)
    dy, dz = rng.uniform(-0.25, 0.25, size=2) * np.asarray(spec.spacing[1:])
    sign = 1.0 if spec.side is Side.Right else -1.0
    xm = _x_mid(spec.dims, spec.spacing)
    offset = _center_offset(spec)

    for _ in range(4):
        center = (xm + sign * offset, VS_Y + float(dy), VS_Z + float(dz))
        sphere = _sphere(spec, center)
        labels = template.copy()
        if spec.grade == 3:
            paint = sphere & (labels != brainstem_label)
        else:
            paint = sphere
        labels[paint] = vs_label
        if spec.grade != 3:
            break
        vs = BinaryMask(labels == vs_label, spec.spacing)
        brainstem = BinaryMask(labels == brainstem_label, spec.spacing)
        if surf_vs(vs, brainstem) > 0:
            break
        # move one voxel towards the brainstem until the masks touch
        offset -= spec.spacing[0]
    else:
        raise InvariantViolation(f"grade 3 tumour never touched the brainstem: {spec}")

    if not paint.any():
        raise InvalidSpec(f"tumour of radius {spec.tumor_radius_mm} mm covers no voxel")

    voxel_volume = float(np.prod(spec.spacing))
    excluded = int(np.count_nonzero(sphere & ~paint))
    tolerance = (_shell_count(sphere) + excluded) * voxel_volume
    if spec.grade in (1, 2):
        gap = spec.brainstem_gap_mm
        bounds = (gap, gap + math.sqrt(sum(s * s for s in spec.spacing)))
    else:
        bounds = (min(spec.spacing), spec.spacing[0])
    expectation = PhantomExpectation(
        vs_volume=_sphere_volume(spec.tumor_radius_mm),
        volume_tolerance=tolerance,
        dist_brainstem_bounds=bounds,
    )
    return LabelVolume(labels, spec.spacing), expectation, spec.grade


def grade_from_features(fv: FeatureVector) -> int:
    """The generator's own regime thresholds applied to a feature vector."""
    if fv.dist_brainstem >= G_FAR:
        return 1
    if fv.dist_brainstem >= G_NEAR:
        return 2
    return 3 if fv.vs_volume < VOLUME_SPLIT else 4


def case_spec(
    index: int,
    grade: int,
    seed: int,
    dims: Tuple[int, int, int] = DEFAULT_DIMS,
    spacing: Tuple[float, float, float] = DEFAULT_SPACING,
) -> PhantomSpec:
    rng = child_rng(seed, index)
    (r_low, r_high), (g_low, g_high) = GRADE_RANGES[grade]
    radius = float(rng.uniform(r_low, r_high))
    gap = float(rng.uniform(g_low, g_high))
    side = Side.Right if rng.integers(0, 2) else Side.Left
    return PhantomSpec(
        grade=grade,
        side=side,
        tumor_radius_mm=radius,
        brainstem_gap_mm=gap,
        seed=mix_seed(seed, index),
        dims=dims,
        spacing=spacing,
    )


def case_id(index: int) -> str:
    return f"phantom_{index:04d}"


def _generate_case(index: int, grade: int, seed: int, dims, spacing):
    spec = case_spec(index, grade, seed, dims, spacing)
    vol, _, grade = generate_phantom(spec)
    return vol, CaseRecord(case_id(index), extract_case(vol, PHANTOM_ATLAS), grade)


def generate_dataset(
    per_grade: int,
    seed: int,
    dims: Tuple[int, int, int] = DEFAULT_DIMS,
    spacing: Tuple[float, float, float] = DEFAULT_SPACING,
    threads: int = 1,
) -> List[Tuple[LabelVolume, CaseRecord]]:
    """``per_grade`` cases of each grade, grades ascending, case ids in order."""
    if per_grade < 1:
        raise ValueError(f"per_grade must be at least 1; got {per_grade}")
    cases = Parallel(n_jobs=threads, prefer="threads")(
        delayed(_generate_case)(index, index // per_grade + 1, seed, dims, spacing)
        for index in range(4 * per_grade)
    )
    logger.info("generated %d phantom case(s) with seed %d", len(cases), seed)
    return cases
