"""Synthetic graded phantoms."""

import math

import numpy as np
import pytest

from koos.atlas import StructureId, bundled_atlas, mask_of, partition_counts
from koos.features import extract_case
from koos.geometry import BinaryMask, Side, structure_volume, surf_vs
from koos.nifti import write_volume
from koos.phantom import (
    DISTRACTOR_LABEL,
    PHANTOM_ATLAS,
    VOLUME_SPLIT,
    InvalidSpec,
    PhantomSpec,
    case_spec,
    generate_dataset,
    generate_phantom,
    grade_from_features,
)


def _contact(vol):
    vs = mask_of(vol, PHANTOM_ATLAS, StructureId.VS)
    brainstem = mask_of(vol, PHANTOM_ATLAS, StructureId.Brainstem)
    return surf_vs(vs, brainstem)


def test_grade_three_tumour_touches_without_carving():
    spec = PhantomSpec(grade=3, side=Side.Right, tumor_radius_mm=4.5, brainstem_gap_mm=0.0)

    vol, expectation, grade = generate_phantom(spec)
    fv = extract_case(vol, PHANTOM_ATLAS)

    assert grade == 3
    assert _contact(vol) > 0
    assert fv.dist_brainstem == 0.5
    assert expectation.dist_brainstem_bounds == (0.5, 0.5)


def test_small_sphere_volume_is_close_to_analytic():
    spec = PhantomSpec(grade=1, side=Side.Left, tumor_radius_mm=3.0, brainstem_gap_mm=6.2)

    vol, expectation, _ = generate_phantom(spec)
    measured = structure_volume(mask_of(vol, PHANTOM_ATLAS, StructureId.VS))

    assert expectation.vs_volume == pytest.approx(4 / 3 * math.pi * 27)
    assert abs(measured - expectation.vs_volume) <= 0.15 * expectation.vs_volume
    assert abs(measured - expectation.vs_volume) <= expectation.volume_tolerance


def test_finer_grid_tightens_the_volume():
    coarse = PhantomSpec(grade=1, side=Side.Right, tumor_radius_mm=3.0, brainstem_gap_mm=6.2)
    fine = PhantomSpec(
        grade=1,
        side=Side.Right,
        tumor_radius_mm=3.0,
        brainstem_gap_mm=6.2,
        dims=(128, 128, 80),
        spacing=(0.25, 0.25, 0.5),
    )

    errors = []
    tolerances = []
    for spec in (coarse, fine):
        vol, expectation, _ = generate_phantom(spec)
        measured = structure_volume(mask_of(vol, PHANTOM_ATLAS, StructureId.VS))
        errors.append(abs(measured - expectation.vs_volume) / expectation.vs_volume)
        tolerances.append(expectation.volume_tolerance)

    assert tolerances[1] < tolerances[0]
    assert errors[1] < 0.05


def test_same_spec_gives_identical_bytes():
    spec = case_spec(3, 2, seed=77)

    first, _, _ = generate_phantom(spec)
    second, _, _ = generate_phantom(spec)

    assert write_volume(first, compress=True) == write_volume(second, compress=True)


def test_left_and_right_tumours_have_the_same_features():
    right = PhantomSpec(grade=2, side=Side.Right, tumor_radius_mm=4.5, brainstem_gap_mm=1.5)
    left = PhantomSpec(grade=2, side=Side.Left, tumor_radius_mm=4.5, brainstem_gap_mm=1.5)

    right_fv = extract_case(generate_phantom(right)[0], PHANTOM_ATLAS)
    left_fv = extract_case(generate_phantom(left)[0], PHANTOM_ATLAS)

    assert right_fv == left_fv
    assert right_fv.dist_ipsi_cerebellum < right_fv.dist_contra_cerebellum


@pytest.mark.parametrize(
    "grade, radius, gap",
    (
        (1, 5.0, 6.5),
        (1, 2.0, 3.0),
        (2, 3.0, 2.0),
        (2, 4.5, 6.5),
        (3, 4.5, 1.0),
        (3, 6.0, 0.0),
        (4, 4.0, -1.5),
        (4, 5.8, -3.0),
        (4, 5.8, 1.0),
        (2, 12.0, 1.5),
        (1, -1.0, 6.5),
        (5, 2.0, 6.5),
    ),
)
def test_inconsistent_or_oversized_specs_are_rejected(grade, radius, gap):
    spec = PhantomSpec(grade=grade, side=Side.Right, tumor_radius_mm=radius, brainstem_gap_mm=gap)

    with pytest.raises(InvalidSpec):
        generate_phantom(spec)


def test_grid_too_small_for_the_template_is_rejected():
    spec = PhantomSpec(
        grade=1, side=Side.Right, tumor_radius_mm=2.0, brainstem_gap_mm=6.5, dims=(32, 32, 20)
    )

    with pytest.raises(InvalidSpec, match="template"):
        generate_phantom(spec)


def test_generated_cases_meet_their_expectations():
    for index in range(12):
        spec = case_spec(index, index % 4 + 1, seed=2024)
        vol, expectation, grade = generate_phantom(spec)
        fv = extract_case(vol, PHANTOM_ATLAS)
        low, high = expectation.dist_brainstem_bounds

        assert grade == spec.grade
        assert abs(fv.vs_volume - expectation.vs_volume) <= expectation.volume_tolerance
        assert low - 1e-9 <= fv.dist_brainstem <= high + 1e-9


def test_dataset_is_balanced_and_ordered():
    cases = generate_dataset(2, seed=5)

    assert [record.grade for _, record in cases] == [1, 1, 2, 2, 3, 3, 4, 4]
    assert [record.case_id for _, record in cases] == [f"phantom_{i:04d}" for i in range(8)]


def test_dataset_is_deterministic_across_thread_counts():
    first = generate_dataset(1, seed=9, threads=1)
    second = generate_dataset(1, seed=9, threads=3)

    assert [r for _, r in first] == [r for _, r in second]
    assert all(np.array_equal(a.labels, b.labels) for (a, _), (b, _) in zip(first, second))


def test_empty_dataset_request_is_rejected():
    with pytest.raises(ValueError):
        generate_dataset(0, seed=1)


def test_grade_is_recoverable_from_features():
    cases = generate_dataset(6, seed=31337)

    for _, record in cases:
        assert grade_from_features(record.features) == record.grade


def test_grade_four_contact_is_larger_than_grade_three():
    contact = {3: [], 4: []}
    for index in range(50):
        for grade in (3, 4):
            vol, _, _ = generate_phantom(case_spec(index, grade, seed=404))
            contact[grade].append(_contact(vol))
            if grade == 4:
                fv = extract_case(vol, PHANTOM_ATLAS)
                assert fv.dist_brainstem == 0.5
                assert fv.vs_volume >= VOLUME_SPLIT

    assert min(contact[3]) > 0
    assert np.mean(contact[4]) > np.mean(contact[3])


def test_phantoms_partition_under_the_shipped_atlas():
    atlas = bundled_atlas("phantom")
    vol, _, _ = generate_phantom(case_spec(0, 4, seed=1))

    counts = partition_counts(vol, atlas)

    assert atlas.label_ids == PHANTOM_ATLAS.label_ids
    assert sum(counts.values()) == vol.labels.size
    assert all(counts[s] > 0 for s in StructureId)
    assert DISTRACTOR_LABEL in np.unique(vol.labels)
    assert mask_of(vol, atlas, StructureId.Background).bits[vol.labels == DISTRACTOR_LABEL].all()


def test_template_is_not_mutated_between_cases():
    a, _, _ = generate_phantom(case_spec(0, 4, seed=1))
    generate_phantom(case_spec(1, 3, seed=1))
    b, _, _ = generate_phantom(case_spec(0, 4, seed=1))

    assert np.array_equal(a.labels, b.labels)
    assert BinaryMask(a.labels == 3, a.spacing).count > 0
