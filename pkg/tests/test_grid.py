import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from sanereg.grid import (ShapeError, back_project, check_grid, identity_grid,
                          jacobian_determinants, sample_linear, warp_image, warp_labels)

finite = st.floats(-10, 10, allow_nan=False)


def test_check_grid_rejects_small_and_wrong_rank():
    assert check_grid([4, 5]) == (4, 5)
    with pytest.raises(ShapeError):
        check_grid((1, 5))
    with pytest.raises(ShapeError):
        check_grid((5,))


def test_sample_constant_image():
    img = np.full((4, 5), 3.25)
    pts = np.array([[0.3, -2.0, 7.5], [1.2, 9.0, 4.4]])
    np.testing.assert_allclose(sample_linear(img, pts), 3.25, rtol=1e-15)


def test_sample_1d_quarter():
    assert sample_linear(np.array([0.0, 1.0]), np.array([0.25])) == pytest.approx(0.25)


def test_sample_bilinear_center():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert sample_linear(img, np.array([0.5, 0.5])) == pytest.approx(1.5)


def test_sample_clamps_outside():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert sample_linear(img, np.array([-4.0, 9.0])) == 1.0
    assert sample_linear(img, np.array([5.0, 0.5])) == pytest.approx(2.5)


def test_sample_vector_volume_matches_componentwise(rng):
    vol = rng.normal(size=(2, 5, 6))
    pts = rng.uniform(-1, 6, size=(2, 7))
    out = sample_linear(vol, pts)
    for c in range(2):
        np.testing.assert_allclose(out[c], sample_linear(vol[c], pts))


def test_warp_zero_field_is_identity(rng):
    img = rng.random((6, 7))
    np.testing.assert_array_equal(warp_image(img, np.zeros((2, 6, 7))), img)


def test_warp_1d_shift_with_clamp():
    out = warp_image(np.array([0.0, 1.0, 2.0, 3.0]), np.ones((1, 4)))
    np.testing.assert_allclose(out, [1.0, 2.0, 3.0, 3.0])


def test_warp_checkerboard_half_shift():
    board = (np.add.outer(np.arange(6), np.arange(6)) % 2).astype(float)
    out = warp_image(board, np.full((2, 6, 6), 0.5))
    quad = (board[:-1, :-1] + board[1:, :-1] + board[:-1, 1:] + board[1:, 1:]) / 4
    np.testing.assert_allclose(out[:-1, :-1], quad)


def test_warp_shape_mismatch():
    with pytest.raises(ShapeError):
        warp_image(np.zeros((4, 4)), np.zeros((2, 4, 5)))


def test_warp_labels_rounds_to_nearest():
    labels = np.zeros((6, 6), np.uint16)
    labels[2:4, 2:4] = 3
    np.testing.assert_array_equal(warp_labels(labels, np.full((2, 6, 6), 0.4)), labels)
    shifted = warp_labels(labels, np.full((2, 6, 6), 0.6))
    assert shifted[1, 1] == 3 and shifted[3, 3] == 0


def test_back_project_zero_forward_returns_reverse(rng):
    g_ba = rng.normal(size=(2, 4, 4))
    np.testing.assert_array_equal(back_project(np.zeros((2, 4, 4)), g_ba), g_ba)


def test_back_project_translation_is_inverse_consistent():
    t = np.array([0.7, -0.4]).reshape(2, 1, 1)
    g_ab = np.broadcast_to(t, (2, 8, 8)).copy()
    gt = back_project(g_ab, -g_ab)
    np.testing.assert_allclose(g_ab + gt, 0.0, atol=1e-15)


def _scalar_bilinear(vol, y, x):
    h, w = vol.shape
    y = min(max(y, 0.0), h - 1.0)
    x = min(max(x, 0.0), w - 1.0)
    i = min(int(np.floor(y)), h - 2)
    j = min(int(np.floor(x)), w - 2)
    a, b = y - i, x - j
    return ((1 - a) * (1 - b) * vol[i, j] + (1 - a) * b * vol[i, j + 1]
            + a * (1 - b) * vol[i + 1, j] + a * b * vol[i + 1, j + 1])


def test_back_project_matches_scalar_oracle(rng):
    g_ab = rng.normal(size=(2, 4, 4))
    g_ba = rng.normal(size=(2, 4, 4))
    out = back_project(g_ab, g_ba)
    for i in range(4):
        for j in range(4):
            y, x = i + g_ab[0, i, j], j + g_ab[1, i, j]
            for c in range(2):
                assert out[c, i, j] == pytest.approx(_scalar_bilinear(g_ba[c], y, x), abs=1e-14)


def test_jacobian_identity():
    np.testing.assert_array_equal(jacobian_determinants(np.zeros((2, 5, 6))), 1.0)


def test_jacobian_uniform_scaling():
    s = 1.7
    u = (s - 1.0) * identity_grid((6, 7))
    np.testing.assert_allclose(jacobian_determinants(u), s ** 2, atol=1e-12)
    u3 = (s - 1.0) * identity_grid((4, 5, 3))
    np.testing.assert_allclose(jacobian_determinants(u3), s ** 3, atol=1e-12)


def test_jacobian_fold():
    u = np.zeros((2, 6, 6))
    u[0] = -2.0 * identity_grid((6, 6))[0]
    np.testing.assert_allclose(jacobian_determinants(u)[1:-1, 1:-1], -1.0)


@given(hnp.arrays(float, (2, 2), elements=st.floats(-2, 2)),
       hnp.arrays(float, 2, elements=st.floats(-5, 5)))
def test_jacobian_affine_closed_form(a, b):
    p = identity_grid((5, 6))
    u = np.einsum("ij,j...->i...", a, p) + b.reshape(2, 1, 1)
    expected = np.linalg.det(np.eye(2) + a)
    np.testing.assert_allclose(jacobian_determinants(u), expected, atol=1e-10)


@given(hnp.arrays(float, (5, 4), elements=finite),
       hnp.arrays(float, (2, 9), elements=st.floats(-3, 8)))
def test_sampling_stays_within_range(img, pts):
    out = sample_linear(img, pts)
    assert np.all(out >= img.min() - 1e-12) and np.all(out <= img.max() + 1e-12)


@given(hnp.arrays(float, 3, elements=finite),
       hnp.arrays(float, (2, 10), elements=st.floats(0, 1)))
def test_sampling_reproduces_affine_images(coef, unit):
    p = identity_grid((6, 5))
    img = coef[0] * p[0] + coef[1] * p[1] + coef[2]
    pts = unit * np.array([[5.0], [4.0]])
    expected = coef[0] * pts[0] + coef[1] * pts[1] + coef[2]
    np.testing.assert_allclose(sample_linear(img, pts), expected, atol=1e-12)


def test_back_project_zero_zero():
    np.testing.assert_array_equal(back_project(np.zeros((2, 3, 3)), np.zeros((2, 3, 3))), 0.0)
