import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from casnet.volume import (
    CorruptFieldError,
    DeformationField,
    GridMismatchError,
    GridSpec,
    argmax_labels,
    check_label_volume,
    check_same_grid,
    check_vector_field,
    identity_grid,
    one_hot,
    spatial_gradient,
    trilinear_sample,
    warp,
)
from helpers import interior, naive_gradient, naive_trilinear


def ramp(shape, axis=0):
    return torch.as_tensor(np.indices(shape)[axis], dtype=torch.float64)


def translation(grid, u):
    return DeformationField(torch.zeros(*grid.shape, 3, dtype=torch.float64) + torch.tensor(u, dtype=torch.float64))


# -- grid and validation ------------------------------------------------------

def test_grid_rejects_degenerate_axes():
    with pytest.raises(ValueError):
        GridSpec(1, 4, 4)
    assert GridSpec.cube(3).shape == (3, 3, 3)
    assert GridSpec(2, 3, 4).size == 24


def test_label_volume_validation(rng):
    good = one_hot(torch.as_tensor(rng.integers(0, 3, (4, 4, 4))), 3)
    check_label_volume(good)
    with pytest.raises(ValueError):
        check_label_volume(good * 0.5)
    bad = good.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(CorruptFieldError):
        check_label_volume(bad)


def test_vector_field_validation():
    with pytest.raises(ValueError):
        check_vector_field(torch.zeros(4, 4, 4, 2))
    f = torch.zeros(4, 4, 4, 3)
    f[1, 1, 1, 0] = float("inf")
    with pytest.raises(CorruptFieldError):
        check_vector_field(f)


def test_grid_mismatch():
    with pytest.raises(GridMismatchError):
        check_same_grid(torch.zeros(4, 4, 4), torch.zeros(4, 4, 5))
    with pytest.raises(GridMismatchError):
        warp(torch.zeros(4, 4, 4), DeformationField.identity(GridSpec.cube(5)))


def test_identity_field():
    phi = DeformationField.identity(GridSpec(3, 4, 5))
    assert phi.is_identity()
    assert torch.equal(phi.positions(), identity_grid(GridSpec(3, 4, 5)))


# -- trilinear sampling -----------------------------------------------------------

def test_sample_ramp_half_voxel():
    assert trilinear_sample(ramp((4, 4, 4)), torch.tensor([2.5, 0.0, 0.0])).item() == 2.5


def test_sample_integer_position_is_exact(rng):
    vol = torch.as_tensor(rng.normal(size=(5, 6, 7)))
    pos = identity_grid(GridSpec(5, 6, 7))
    assert torch.equal(trilinear_sample(vol, pos), vol)


def test_sample_cube_centre_is_corner_mean():
    vol = torch.arange(8, dtype=torch.float64).reshape(2, 2, 2)
    assert trilinear_sample(vol, torch.tensor([0.5, 0.5, 0.5])).item() == 3.5


def test_sample_matches_naive_loop(rng):
    vol = rng.normal(size=(5, 4, 6))
    pos = rng.uniform(-1.5, 6.5, size=(200, 3))
    got = trilinear_sample(torch.as_tensor(vol), torch.as_tensor(pos)).numpy()
    want = np.array([naive_trilinear(vol, p) for p in pos])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)


def test_sample_channels_independently(rng):
    vol = torch.as_tensor(rng.normal(size=(4, 4, 4, 3)))
    pos = torch.as_tensor(rng.uniform(0, 3, size=(10, 3)))
    joint = trilinear_sample(vol, pos)
    for k in range(3):
        assert torch.equal(joint[:, k], trilinear_sample(vol[..., k], pos))


def test_sample_clamps_out_of_range():
    vol = ramp((4, 4, 4))
    out = trilinear_sample(vol, torch.tensor([[-3.0, 1.0, 1.0], [9.0, 1.0, 1.0]]))
    assert out.tolist() == [0.0, 3.0]


def test_sample_rejects_non_finite_positions():
    with pytest.raises(CorruptFieldError):
        trilinear_sample(torch.zeros(3, 3, 3), torch.tensor([0.0, float("nan"), 0.0]))


@given(coef=arrays(np.float64, 4, elements=st.floats(-3, 3)),
       pos=arrays(np.float64, (6, 3), elements=st.floats(0, 4)))
def test_sample_reproduces_affine_functions(coef, pos):
    x = np.indices((5, 5, 5)).astype(float)
    vol = torch.as_tensor(coef[0] * x[0] + coef[1] * x[1] + coef[2] * x[2] + coef[3])
    got = trilinear_sample(vol, torch.as_tensor(pos)).numpy()
    np.testing.assert_allclose(got, pos @ coef[:3] + coef[3], atol=1e-11)


def test_sample_adjoint_against_autograd_gradcheck(rng):
    vol = torch.as_tensor(rng.normal(size=(4, 5, 3, 2)), dtype=torch.float64).requires_grad_(True)
    # keep positions away from voxel planes and the clamp boundary
    base = rng.integers(-1, 5, size=(12, 3)).astype(float)
    pos = torch.as_tensor(base + rng.uniform(0.1, 0.9, size=(12, 3))).requires_grad_(True)
    assert torch.autograd.gradcheck(trilinear_sample, (vol, pos), eps=1e-6, atol=1e-8)


def test_sample_zero_position_gradient_outside_grid():
    vol = ramp((4, 4, 4))
    pos = torch.tensor([[5.0, 1.5, 1.5]], requires_grad=True)
    trilinear_sample(vol, pos).sum().backward()
    assert pos.grad[0, 0].item() == 0.0


# -- warp ---------------------------------------------------------------------------

def test_warp_identity_is_exact(rng):
    vol = torch.as_tensor(rng.normal(size=(5, 5, 5)))
    assert torch.equal(warp(vol, DeformationField.identity(GridSpec.cube(5))), vol)
    lab = one_hot(torch.as_tensor(rng.integers(0, 4, (5, 5, 5))), 4)
    assert torch.equal(warp(lab, DeformationField.identity(GridSpec.cube(5))), lab)


def test_warp_integer_translation(rng):
    vol = torch.as_tensor(rng.normal(size=(10, 10, 10)))
    out = warp(vol, translation(GridSpec.cube(10), (1.0, 0.0, 0.0)))
    assert torch.equal(out[:-1], vol[1:])


def test_warp_ramp_half_voxel_shift():
    vol = ramp((10, 10, 10))
    out = warp(vol, translation(GridSpec.cube(10), (0.5, 0.0, 0.0)))
    assert torch.equal(interior(out), interior(vol) + 0.5)


def test_warp_is_linear_in_volume(rng):
    grid = GridSpec.cube(6)
    X, Y = (torch.as_tensor(rng.normal(size=(6, 6, 6, 3))) for _ in range(2))
    phi = DeformationField(torch.as_tensor(rng.normal(0, 1.5, size=(6, 6, 6, 3))))
    lhs = warp(2.5 * X - 0.7 * Y, phi, labels=False)
    rhs = 2.5 * warp(X, phi, labels=False) - 0.7 * warp(Y, phi, labels=False)
    assert grid == GridSpec.of(lhs)
    assert (lhs - rhs).abs().max() < 1e-12


def test_warp_keeps_labels_normalised(rng):
    lab = torch.softmax(torch.as_tensor(rng.normal(size=(6, 6, 6, 5))), -1)
    phi = DeformationField(torch.as_tensor(rng.normal(0, 2, size=(6, 6, 6, 3))))
    check_label_volume(warp(lab, phi))


# -- gradient and labels --------------------------------------------------------------

def test_gradient_of_zero_field():
    assert not spatial_gradient(torch.zeros(4, 4, 4, 3)).any()


def test_gradient_of_linear_field():
    U = torch.zeros(6, 6, 6, 3, dtype=torch.float64)
    U[..., 0] = 2 * ramp((6, 6, 6))
    J = spatial_gradient(U)
    expected = torch.zeros(3, 3, dtype=torch.float64)
    expected[0, 0] = 2.0
    assert torch.equal(J[1:-1, 1:-1, 1:-1], expected.expand(4, 4, 4, 3, 3))


def test_gradient_matches_loop_oracle(rng):
    U = rng.normal(size=(4, 5, 3, 3))
    np.testing.assert_allclose(spatial_gradient(torch.as_tensor(U)).numpy(), naive_gradient(U), atol=1e-15)


def test_argmax_examples():
    lab = one_hot(torch.tensor([[[2, 0], [1, 3]], [[0, 0], [3, 2]]]), 4)
    assert torch.equal(argmax_labels(lab), torch.tensor([[[2, 0], [1, 3]], [[0, 0], [3, 2]]]))
    assert not argmax_labels(torch.full((2, 2, 2, 5), 0.2)).any()
    assert argmax_labels(torch.tensor([0.2, 0.5, 0.3]).expand(2, 2, 2, 3)).unique().tolist() == [1]
