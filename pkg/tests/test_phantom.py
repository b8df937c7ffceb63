import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gliograde.errors import ValidationError
from gliograde.rng import rng_stream
from gliograde.phantom import (
    PhantomSpec, generate, generate_cohort, normalized_radius, rim_core_discriminator, tumour_geometry,
)
from oracles import ellipsoid_voxel_count

SMALL = dict(dims=(20, 22, 18), brain_half_axes=(8.0, 9.0, 7.5), tumour_half_axis_range=(2.5, 4.5),
             tumour_offset_range=2.0)


def test_noiseless_gbm_has_exact_ring_values():
    spec = PhantomSpec(noise_sigma=0.0, tumour_center=(23.5, 23.5, 23.5), tumour_half_axes=(8.0, 7.0, 6.0))
    case = generate(spec)
    t1ce = case.modalities["T1ce"].values
    r = normalized_radius(spec.dims, spec.tumour_center, spec.tumour_half_axes)
    assert np.all(t1ce[(r <= 1) & (r > spec.rim_fraction)] == np.float32(2.0))
    assert np.all(t1ce[r <= spec.rim_fraction] == np.float32(0.3))
    brain_only = (case.modalities["T1"].values > 0) & (r > 1)
    assert np.all(t1ce[brain_only] == 1.0)
    assert np.all(case.modalities["FLAIR"].values[r <= 1] == np.float32(1.8))


def test_noiseless_lgg_is_isointense_on_t1ce():
    case = generate(PhantomSpec(grade="LGG", noise_sigma=0.0))
    t1ce = case.modalities["T1ce"].values
    assert set(np.unique(t1ce)) == {0.0, 1.0}


def test_same_seed_is_bit_identical():
    a, b = generate(PhantomSpec(seed=11)), generate(PhantomSpec(seed=11))
    for m in a.modalities:
        assert a.modalities[m].values.tobytes() == b.modalities[m].values.tobytes()
    assert a.segmentation.values.tobytes() == b.segmentation.values.tobytes()
    c = generate(PhantomSpec(seed=12))
    assert c.segmentation.values.tobytes() != a.segmentation.values.tobytes()


@settings(max_examples=10)
@given(st.integers(0, 2**32))
def test_mask_matches_voxel_counting_oracle(seed):
    spec = PhantomSpec(seed=seed, **SMALL)
    case = generate(spec)
    # generate() draws the geometry first from the phantom stream
    center, axes = tumour_geometry(spec, rng_stream(seed, "phantom"))
    assert int(case.segmentation.values.sum()) == ellipsoid_voxel_count(spec.dims, center, axes)


def test_tumour_outside_brain_is_rejected():
    with pytest.raises(ValidationError):
        generate(PhantomSpec(tumour_center=(40.0, 23.5, 23.5), tumour_half_axes=(8.0, 8.0, 8.0)))


def test_omitting_a_modality_leaves_the_rest_unchanged():
    full = generate(PhantomSpec(seed=4))
    partial = generate(PhantomSpec(seed=4, omit=("T2",)))
    assert partial.modalities["T2"] is None
    for m in ("T1", "T1ce", "FLAIR"):
        assert partial.modalities[m].values.tobytes() == full.modalities[m].values.tobytes()
    with pytest.raises(ValidationError):
        generate(PhantomSpec(omit=("T1ce",)))


def test_cohort_alternates_grades_and_is_order_free():
    cohort = generate_cohort(4, seed=9, **SMALL)
    assert [c.grade for c in cohort] == ["LGG", "GBM", "LGG", "GBM"]
    assert [c.case_id for c in cohort] == ["phantom_000", "phantom_001", "phantom_002", "phantom_003"]
    longer = generate_cohort(6, seed=9, **SMALL)
    assert longer[3].modalities["T1ce"].values.tobytes() == cohort[3].modalities["T1ce"].values.tobytes()


@pytest.mark.parametrize("noise", [0.0, 0.05, 0.1])
def test_hand_coded_discriminator_separates_grades(noise):
    cohort = generate_cohort(40, seed=1, noise_sigma=noise)
    assert all(rim_core_discriminator(c) == c.grade for c in cohort)
