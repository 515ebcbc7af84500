"""Distance transform, contact surface, volume and laterality."""

import numpy as np
import pytest

from koos.geometry import (
    ABSENT_DISTANCE,
    BinaryMask,
    EmptyForeground,
    OverlappingMasks,
    ShapeMismatch,
    Side,
    centroid_world,
    configure_threads,
    dist_vs,
    edt,
    resolve_laterality,
    squared_edt,
    structure_volume,
    surf_vs,
)
from tests.factories import brute_force_contact, brute_force_edt


def _mask(shape, *boxes, spacing=(1.0, 1.0, 1.0)):
    bits = np.zeros(shape, dtype=bool)
    for (x0, x1), (y0, y1), (z0, z1) in boxes:
        bits[x0:x1, y0:y1, z0:z1] = True
    return BinaryMask(bits, spacing)


@pytest.mark.parametrize("trial", range(20))
def test_edt_matches_brute_force_on_random_masks(trial):
    rng = np.random.default_rng(1000 + trial)
    spacing = tuple(rng.uniform(0.4, 2.0, size=3))
    bits = rng.random((16, 16, 8)) < rng.uniform(0.005, 0.2)
    bits[tuple(rng.integers(0, n) for n in bits.shape)] = True

    field = edt(BinaryMask(bits, spacing))

    assert np.allclose(field.values, brute_force_edt(bits, spacing), rtol=0, atol=1e-9)


def test_edt_is_zero_exactly_on_the_foreground():
    mask = _mask((6, 5, 4), ((1, 3), (1, 2), (0, 4)), spacing=(0.5, 0.7, 1.3))

    values = edt(mask).values

    assert (values[mask.bits] == 0.0).all()
    assert (values[~mask.bits] > 0.0).all()


def test_edt_uses_per_axis_spacing():
    mask = _mask((5, 5, 5), ((2, 3), (2, 3), (2, 3)), spacing=(0.5, 2.0, 3.0))

    values = edt(mask).values

    assert values[4, 2, 2] == pytest.approx(1.0)
    assert values[2, 4, 2] == pytest.approx(4.0)
    assert values[2, 2, 0] == pytest.approx(6.0)
    assert values[3, 3, 3] == pytest.approx(np.sqrt(0.25 + 4.0 + 9.0))


def test_edt_of_an_empty_mask_is_rejected():
    with pytest.raises(EmptyForeground):
        edt(_mask((3, 3, 3)))


def test_squared_edt_without_sites_is_infinite():
    assert np.isinf(squared_edt(np.zeros((2, 3, 4), dtype=bool), (1.0, 1.0, 1.0))).all()


def test_edt_does_not_depend_on_the_thread_count():
    rng = np.random.default_rng(5)
    bits = rng.random((20, 12, 9)) < 0.05
    bits[0, 0, 0] = True
    mask = BinaryMask(bits, (0.6, 0.9, 1.7))

    configure_threads(1)
    single = edt(mask).values
    configure_threads(4)
    multi = edt(mask).values
    configure_threads(1)

    assert np.array_equal(single, multi)


@pytest.mark.parametrize(
    "spacing",
    ((1.0, 1.0, 1.0), (0.5, 0.5, 1.0), (0.25, 1.5, 2.0), (2.0, 0.5, 0.75), (1.5, 1.5, 0.5)),
)
@pytest.mark.parametrize(
    "a_box, b_box, faces",
    (
        # b sits on a's +x face: a's y-z cross-section is shared
        ((((0, 2), (0, 3), (0, 4))), (((2, 5), (0, 3), (0, 4))), {0: 12}),
        # partial overlap of the touching faces
        ((((0, 2), (0, 3), (0, 4))), (((2, 4), (1, 5), (2, 6))), {0: 4}),
        # b stacked on a along z, smaller footprint
        ((((1, 4), (1, 4), (0, 2))), (((2, 3), (1, 4), (2, 3))), {2: 3}),
        # corner contact only: no shared face
        ((((0, 2), (0, 2), (0, 2))), (((2, 4), (2, 4), (0, 2))), {}),
        # one voxel gap
        ((((0, 2), (0, 2), (0, 2))), (((3, 5), (0, 2), (0, 2))), {}),
    ),
)
def test_box_contact_area_is_exact(spacing, a_box, b_box, faces):
    a = _mask((6, 6, 7), a_box, spacing=spacing)
    b = _mask((6, 6, 7), b_box, spacing=spacing)
    sx, sy, sz = spacing
    area = {0: sy * sz, 1: sx * sz, 2: sx * sy}

    expected = sum(count * area[axis] for axis, count in faces.items())

    assert surf_vs(a, b) == expected
    assert surf_vs(b, a) == expected
    assert surf_vs(a, b) == brute_force_contact(a.bits, b.bits, spacing)


@pytest.mark.parametrize("trial", range(10))
def test_contact_matches_neighbour_walk_on_random_masks(trial):
    rng = np.random.default_rng(trial)
    spacing = (0.5, 0.25, 1.5)
    draw = rng.integers(0, 3, size=(7, 6, 5))
    a, b = draw == 1, draw == 2

    result = surf_vs(BinaryMask(a, spacing), BinaryMask(b, spacing))

    assert result == brute_force_contact(a, b, spacing)


def test_contact_with_an_empty_mask_is_zero():
    a = _mask((4, 4, 4), ((0, 2), (0, 2), (0, 2)))

    assert surf_vs(a, _mask((4, 4, 4))) == 0.0


def test_overlapping_masks_are_rejected():
    a = _mask((4, 4, 4), ((0, 2), (0, 2), (0, 2)))
    b = _mask((4, 4, 4), ((1, 3), (1, 3), (1, 3)))

    with pytest.raises(OverlappingMasks):
        surf_vs(a, b)


def test_grids_must_agree():
    a = _mask((4, 4, 4), ((0, 1), (0, 1), (0, 1)))

    with pytest.raises(ShapeMismatch):
        surf_vs(a, _mask((4, 4, 5)))
    with pytest.raises(ShapeMismatch):
        dist_vs(_mask((4, 4, 4), spacing=(1.0, 1.0, 2.0)), edt(a))


@pytest.mark.parametrize("spacing", ((1.0, 1.0, 1.0), (0.5, 0.5, 1.0), (0.25, 1.5, 2.0)))
def test_volume_is_voxel_count_times_voxel_volume(spacing):
    mask = _mask((6, 6, 6), ((0, 3), (1, 5), (2, 4)), spacing=spacing)

    assert structure_volume(mask) == 24 * spacing[0] * spacing[1] * spacing[2]


def test_absent_structure_has_sentinel_distance():
    vs = _mask((5, 5, 5), ((0, 1), (0, 1), (0, 1)))

    assert dist_vs(_mask((5, 5, 5)), edt(vs)) == ABSENT_DISTANCE


def test_distance_is_centre_to_centre():
    vs = _mask((8, 3, 3), ((0, 1), (1, 2), (1, 2)), spacing=(0.5, 1.0, 1.0))
    far = _mask((8, 3, 3), ((5, 8), (0, 3), (0, 3)), spacing=(0.5, 1.0, 1.0))
    touching = _mask((8, 3, 3), ((1, 2), (1, 2), (1, 2)), spacing=(0.5, 1.0, 1.0))
    field = edt(vs)

    assert dist_vs(far, field) == pytest.approx(2.5)
    assert dist_vs(touching, field) == pytest.approx(0.5)


def test_laterality_follows_the_brainstem_midline():
    brainstem = _mask((10, 4, 4), ((4, 6), (0, 4), (0, 4)))
    right = _mask((10, 4, 4), ((8, 10), (1, 2), (1, 2)))
    left = _mask((10, 4, 4), ((0, 2), (1, 2), (1, 2)))
    affine = np.eye(4)

    assert resolve_laterality(right, brainstem, affine) is Side.Right
    assert resolve_laterality(left, brainstem, affine) is Side.Left


def test_laterality_honours_a_flipped_x_axis():
    brainstem = _mask((10, 4, 4), ((4, 6), (0, 4), (0, 4)))
    high_index = _mask((10, 4, 4), ((8, 10), (1, 2), (1, 2)))
    affine = np.diag([-1.0, 1.0, 1.0, 1.0])

    assert resolve_laterality(high_index, brainstem, affine) is Side.Left


def test_laterality_without_a_brainstem_uses_the_grid_centre():
    vs = _mask((10, 4, 4), ((7, 8), (1, 2), (1, 2)))

    assert resolve_laterality(vs, _mask((10, 4, 4)), np.eye(4)) is Side.Right


def test_laterality_tie_resolves_to_right():
    brainstem = _mask((9, 3, 3), ((4, 5), (0, 3), (0, 3)))
    vs = _mask((9, 3, 3), ((4, 5), (1, 2), (1, 2)))

    assert resolve_laterality(vs, brainstem, np.eye(4)) is Side.Right


def test_centroid_of_single_and_paired_voxels():
    single = _mask((5, 5, 5), ((2, 3), (3, 4), (4, 5)))
    pair = _mask((3, 1, 1), ((0, 1), (0, 1), (0, 1)), ((2, 3), (0, 1), (0, 1)))

    assert centroid_world(single, np.eye(4)).tolist() == [2.0, 3.0, 4.0]
    assert centroid_world(pair, np.eye(4)).tolist() == [1.0, 0.0, 0.0]


@pytest.mark.parametrize("trial", range(10))
def test_centroid_matches_per_voxel_transform(trial):
    rng = np.random.default_rng(200 + trial)
    bits = rng.random((7, 6, 5)) < 0.3
    bits[0, 0, 0] = True
    affine = np.eye(4)
    affine[:3, :] = rng.normal(size=(3, 4))

    points = [affine @ np.array([*index, 1.0]) for index in np.argwhere(bits)]
    expected = np.mean(points, axis=0)[:3]

    result = centroid_world(BinaryMask(bits, (1.0, 1.0, 1.0)), affine)

    assert np.allclose(result, expected, rtol=0, atol=1e-9)


def test_centroid_of_an_empty_mask_is_rejected():
    with pytest.raises(EmptyForeground):
        centroid_world(_mask((2, 2, 2)), np.eye(4))


def _random_pair(rng, shape=(9, 8, 6)):
    draw = rng.integers(0, 4, size=shape)
    vs, other = draw == 1, draw == 2
    vs[0, 0, 0], other[0, 0, 0] = True, False
    vs[1, 0, 0], other[1, 0, 0] = False, True
    return vs, other


@pytest.mark.parametrize("k", (2.0, 3.0, 0.7))
@pytest.mark.parametrize("trial", range(5))
def test_scaling_every_spacing_scales_each_measure(trial, k):
    rng = np.random.default_rng(300 + trial)
    vs_bits, other_bits = _random_pair(rng)
    spacing = tuple(rng.uniform(0.4, 2.0, size=3))
    scaled = tuple(k * s for s in spacing)

    vs, other = BinaryMask(vs_bits, spacing), BinaryMask(other_bits, spacing)
    vs_k, other_k = BinaryMask(vs_bits, scaled), BinaryMask(other_bits, scaled)

    assert np.allclose(edt(vs_k).values, k * edt(vs).values, rtol=1e-12, atol=0)
    assert dist_vs(other_k, edt(vs_k)) == pytest.approx(k * dist_vs(other, edt(vs)))
    assert structure_volume(vs_k) == pytest.approx(k**3 * structure_volume(vs))
    assert surf_vs(vs_k, other_k) == pytest.approx(k**2 * surf_vs(vs, other))


@pytest.mark.parametrize("trial", range(10))
def test_shifting_the_foreground_shifts_the_distance_field(trial):
    rng = np.random.default_rng(400 + trial)
    spacing = tuple(rng.uniform(0.4, 2.0, size=3))
    bits = rng.random((8, 7, 5)) < 0.08
    bits[tuple(rng.integers(0, n) for n in bits.shape)] = True
    offset = tuple(int(v) for v in rng.integers(1, 4, size=3))

    grid = tuple(n + 6 for n in bits.shape)
    window = tuple(slice(o, o + n) for o, n in zip(offset, bits.shape))
    shifted = np.zeros(grid, dtype=bool)
    shifted[window] = bits
    shifted_window = edt(BinaryMask(shifted, spacing)).values[window]

    # voxels of the original grid keep their distance; padding adds no sites
    assert np.allclose(shifted_window, edt(BinaryMask(bits, spacing)).values, rtol=0, atol=1e-9)


@pytest.mark.parametrize("trial", range(20))
def test_contact_means_a_one_voxel_gap_on_an_isotropic_grid(trial):
    rng = np.random.default_rng(500 + trial)
    s = float(rng.uniform(0.3, 2.5))
    vs_bits, other_bits = _random_pair(rng)
    vs, other = BinaryMask(vs_bits, (s, s, s)), BinaryMask(other_bits, (s, s, s))

    assert surf_vs(vs, other) > 0
    assert dist_vs(other, edt(vs)) == pytest.approx(s, rel=0, abs=1e-12)


@pytest.mark.parametrize("trial", range(20))
def test_contact_bounds_the_distance_by_a_spacing_on_anisotropic_grids(trial):
    rng = np.random.default_rng(600 + trial)
    spacing = tuple(rng.uniform(0.3, 2.5, size=3))
    vs_bits, other_bits = _random_pair(rng)
    vs, other = BinaryMask(vs_bits, spacing), BinaryMask(other_bits, spacing)

    assert surf_vs(vs, other) > 0
    assert 0.0 < dist_vs(other, edt(vs)) <= max(spacing)
