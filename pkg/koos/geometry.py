"""Geometric primitives on binary voxel masks, all in millimetres.

Distances are voxel centre to voxel centre; a foreground voxel is at distance
0 from itself. The distance transform is exact: three separable passes of the
lower envelope of parabolas, one per axis, each stepping by that axis's voxel
spacing. Contact surfaces count shared faces between 6-adjacent voxels.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from enum import Enum

import numba
import numpy as np
from numba import njit, prange

from .errors import KoosError

ABSENT_DISTANCE = -1.0

# numba's default workqueue layer aborts on concurrent parallel launches
_EDT_LOCK = threading.Lock()


class GeometryError(KoosError):
    code = "geometry_error"


class EmptyForeground(GeometryError):
    code = "empty_foreground"


class ShapeMismatch(GeometryError):
    code = "shape_mismatch"


class OverlappingMasks(GeometryError):
    code = "overlapping_masks"


class Side(Enum):
    Left = "Left"
    Right = "Right"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    bits: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise ValueError(f"mask must be 3D; got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)  # type: ignore[return-value]

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def empty(self) -> bool:
        return not self.bits.any()


@dataclass(frozen=True, eq=False)
class DistanceField:
    values: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape)  # type: ignore[return-value]


def configure_threads(threads: int) -> None:
    """Cap the EDT's line-parallel passes; results do not depend on it."""
    numba.set_num_threads(max(1, min(int(threads), numba.config.NUMBA_NUM_THREADS)))


@njit(cache=True, nogil=True)
def _envelope_line(f, step, out, sites, bounds):
    n = f.shape[0]
    k = -1
    for q in range(n):
        fq = f[q]
        if fq == np.inf:
            continue
        if k < 0:
            k = 0
            sites[0] = q
            bounds[0] = -np.inf
            bounds[1] = np.inf
            continue
        xq = q * step
        s = 0.0
        while True:
            xp = sites[k] * step
            s = ((fq + xq * xq) - (f[sites[k]] + xp * xp)) / (2.0 * (xq - xp))
            if s <= bounds[k]:
                k -= 1
            else:
                break
        k += 1
        sites[k] = q
        bounds[k] = s
        bounds[k + 1] = np.inf
    if k < 0:
        for q in range(n):
            out[q] = np.inf
        return
    k = 0
    for q in range(n):
        while bounds[k + 1] < q * step:
            k += 1
        d = (q - sites[k]) * step
        out[q] = d * d + f[sites[k]]


@njit(cache=True, nogil=True, parallel=True)
def _envelope_lines(lines, step):
    count, n = lines.shape
    out = np.empty_like(lines)
    for i in prange(count):
        sites = np.empty(n, dtype=np.int64)
        bounds = np.empty(n + 1, dtype=np.float64)
        _envelope_line(lines[i], step, out[i], sites, bounds)
    return out


def squared_edt(bits: np.ndarray, spacing: tuple[float, float, float]) -> np.ndarray:
    """Squared distance (mm²) from every voxel to the nearest set voxel; inf if none."""
    field = np.where(bits, 0.0, np.inf)
    for axis in range(3):
        moved = np.moveaxis(field, axis, -1)
        lines = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
        with _EDT_LOCK:
            done = _envelope_lines(lines, float(spacing[axis]))
        done = done.reshape(moved.shape)
        field = np.moveaxis(done, -1, axis)
    return np.ascontiguousarray(field)


def edt(mask: BinaryMask) -> DistanceField:
    if mask.empty:
        raise EmptyForeground("distance transform of an empty mask is undefined")
    return DistanceField(np.sqrt(squared_edt(mask.bits, mask.spacing)), mask.spacing)


def _same_grid(a, b) -> None:
    if a.dims != b.dims or a.spacing != b.spacing:
        raise ShapeMismatch(
            f"grids differ: dims {a.dims} vs {b.dims}, "
            f"spacing {a.spacing} vs {b.spacing}"
        )


def structure_volume(mask: BinaryMask) -> float:
    sx, sy, sz = mask.spacing
    return mask.count * sx * sy * sz


def dist_vs(structure: BinaryMask, vs_field: DistanceField) -> float:
    """Shortest VS distance over the structure's voxels; -1 when the structure is absent."""
    _same_grid(structure, vs_field)
    if structure.empty:
        return ABSENT_DISTANCE
    return float(vs_field.values[structure.bits].min())


def _lo_hi(bits: np.ndarray, axis: int) -> tuple[np.ndarray, np.ndarray]:
    n = bits.shape[axis]
    return bits.take(range(n - 1), axis=axis), bits.take(range(1, n), axis=axis)


def surf_vs(vs: BinaryMask, other: BinaryMask) -> float:
    """Area (mm²) of the faces shared by 6-adjacent voxel pairs, one in each mask."""
    _same_grid(vs, other)
    if (vs.bits & other.bits).any():
        raise OverlappingMasks("contact surface needs disjoint masks")
    sx, sy, sz = vs.spacing
    face_areas = (sy * sz, sx * sz, sx * sy)
    total = 0.0
    for axis, area in enumerate(face_areas):
        a_lo, a_hi = _lo_hi(vs.bits, axis)
        b_lo, b_hi = _lo_hi(other.bits, axis)
        pairs = np.count_nonzero(a_lo & b_hi) + np.count_nonzero(b_lo & a_hi)
        total += pairs * area
    return total


def centroid_world(mask: BinaryMask, affine: np.ndarray) -> np.ndarray:
    if mask.empty:
        raise EmptyForeground("centroid of an empty mask is undefined")
    mean_index = np.argwhere(mask.bits).mean(axis=0)
    affine = np.asarray(affine, dtype=np.float64)
    return affine[:3, :3] @ mean_index + affine[:3, 3]


def resolve_laterality(
    vs: BinaryMask, brainstem: BinaryMask, affine: np.ndarray
) -> Side:
    """Side of the VS relative to the brainstem midline in a right-positive world x."""
    vs_x = centroid_world(vs, affine)[0]
    if brainstem.empty:
        center = (np.asarray(vs.dims, dtype=np.float64) - 1.0) / 2.0
        affine = np.asarray(affine, dtype=np.float64)
        midline_x = float((affine[:3, :3] @ center + affine[:3, 3])[0])
    else:
        midline_x = float(centroid_world(brainstem, affine)[0])
    return Side.Right if vs_x >= midline_x else Side.Left
