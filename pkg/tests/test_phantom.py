import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from casnet.atlas import age_group
from casnet.diffeo import IntegrationConfig
from casnet.phantom import (
    AGE_RANGE,
    CORTEX,
    PhantomSpec,
    boundary_voxel_count,
    gen_dataset,
    gen_phantom,
    ripple_amplitude,
    smooth_velocity,
    split_indices,
    stratified_ages,
    warp_phantom,
)
from casnet.pipeline import dice
from casnet.volume import DTYPE, GridSpec, argmax_labels, check_label_volume, one_hot
from helpers import interior


def classes_of(subject):
    return argmax_labels(subject.labels)


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(age=40.0)
    with pytest.raises(ValueError):
        PhantomSpec(noise_sd=-0.1)
    with pytest.raises(ValueError):
        gen_phantom(PhantomSpec(grid=GridSpec.cube(12)))


def test_generation_is_bit_exact():
    a = gen_phantom(PhantomSpec(noise_sd=0.0, seed=9))
    b = gen_phantom(PhantomSpec(noise_sd=0.0, seed=9))
    assert a.image.numpy().tobytes() == b.image.numpy().tobytes()
    assert torch.equal(a.labels, b.labels)
    c, d = gen_phantom(PhantomSpec(seed=9)), gen_phantom(PhantomSpec(seed=9))
    assert torch.equal(c.image, d.image)


def test_ripple_vanishes_at_youngest_age():
    assert ripple_amplitude(PhantomSpec(age=20.6)) == 0.0
    smooth = gen_phantom(PhantomSpec(age=20.6, seed=1, fold_amplitude_per_week=0.0))
    youngest = gen_phantom(PhantomSpec(age=20.6, seed=1))
    assert torch.equal(smooth.labels, youngest.labels)


def test_older_cortex_is_more_folded():
    young = boundary_voxel_count(classes_of(gen_phantom(PhantomSpec(age=24.0, seed=4))))
    old = boundary_voxel_count(classes_of(gen_phantom(PhantomSpec(age=36.0, seed=4))))
    assert old > young


def test_boundary_count_loop_oracle(rng):
    classes = torch.as_tensor(rng.integers(0, 3, (5, 4, 6)))
    want = 0
    c = classes.numpy()
    for idx in np.ndindex(c.shape):
        if c[idx] != CORTEX:
            continue
        for axis in range(3):
            for d in (-1, 1):
                j = list(idx)
                j[axis] += d
                if 0 <= j[axis] < c.shape[axis] and c[tuple(j)] != CORTEX:
                    want += 1
                    break
            else:
                continue
            break
    assert boundary_voxel_count(classes) == want


@settings(max_examples=15)
@given(st.floats(20.6, 38.2), st.floats(20.6, 38.2), st.integers(0, 2**32 - 1))
def test_boundary_count_non_decreasing_in_age(a, b, seed):
    lo, hi = sorted((a, b))
    count = lambda age: boundary_voxel_count(classes_of(gen_phantom(PhantomSpec(age=age, seed=seed))))
    assert count(lo) <= count(hi)


@pytest.mark.parametrize("age", [20.6, 29.0, 38.2])
def test_every_class_present_and_one_hot(age):
    subject = gen_phantom(PhantomSpec(age=age, seed=2))
    check_label_volume(subject.labels)
    assert set(subject.labels.unique().tolist()) == {0.0, 1.0}
    assert classes_of(subject).unique().tolist() == list(range(10))


def test_intensities_follow_labels():
    subject = gen_phantom(PhantomSpec(noise_sd=0.0, seed=3))
    cls = classes_of(subject)
    for k in range(10):
        values = subject.image[cls == k]
        assert values.max() == values.min()


def test_stratified_ages_cover_groups():
    ages = stratified_ages(4)
    assert sorted(age_group(a) for a in ages) == [0, 1, 2, 3]
    counts = np.bincount([age_group(a) for a in stratified_ages(64, seed=5)], minlength=4)
    assert np.abs(counts - 16).max() <= 1
    assert all(AGE_RANGE[0] <= a <= AGE_RANGE[1] for a in stratified_ages(64))
    with pytest.raises(ValueError):
        stratified_ages(0)


def test_dataset_is_reproducible():
    a, b = gen_dataset(3, base_seed=11), gen_dataset(3, base_seed=11)
    for x, y in zip(a, b):
        assert x.age == y.age and x.seed == y.seed and torch.equal(x.image, y.image)
    assert len({s.seed for s in a}) == 3
    assert gen_dataset(3, base_seed=12)[0].seed != a[0].seed


def test_splits_are_disjoint():
    s = split_indices(10, 2, 3)
    assert s == {"train": [0, 1, 2, 3, 4], "val": [5, 6], "test": [7, 8, 9]}
    with pytest.raises(ValueError):
        split_indices(3, 2, 1)


def test_warp_zero_velocity_is_unchanged():
    subject = gen_phantom(PhantomSpec(seed=4))
    out = warp_phantom(subject, torch.zeros(32, 32, 32, 3, dtype=DTYPE))
    assert torch.equal(out.image, subject.image) and torch.equal(out.labels, subject.labels)
    assert not out.true_svf.any()


def test_warp_integer_translation():
    subject = gen_phantom(PhantomSpec(seed=4))
    V = torch.zeros(32, 32, 32, 3, dtype=DTYPE)
    V[..., 2] = 1.0
    out = warp_phantom(subject, V)
    assert torch.equal(interior(out.labels[:, :, :-1], 2), interior(subject.labels[:, :, 1:], 2))


def test_warp_grid_mismatch():
    with pytest.raises(ValueError):
        warp_phantom(gen_phantom(PhantomSpec(seed=4)), torch.zeros(16, 16, 16, 3))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_warp_round_trip_labels(seed):
    subject = gen_phantom(PhantomSpec(seed=seed))
    V = smooth_velocity(GridSpec.cube(32), seed + 40)
    there = warp_phantom(subject, V, IntegrationConfig())
    back = warp_phantom(there, -V)
    truth, got = classes_of(subject), classes_of(back)
    assert np.mean([dice(got, truth, k) for k in range(1, 10)]) >= 0.98
