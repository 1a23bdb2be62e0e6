import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from homographyad.errors import DegenerateCorrespondence, PointAtInfinity
from homographyad.geometry import (
    CornerDisplacement,
    HomographyMatrix,
    ImageFrame,
    apply_homography,
    compose,
    displacement_to_homography,
    displacement_to_rotation,
    dlt_solve,
    homography_to_displacement,
    invert,
    perturbed_view,
    reflect_index,
    rotation_matrix,
    rotation_to_displacement,
    similarity_matrix,
    warp_image,
)
from homographyad.synthesis.variants import sample_inward_perturbation

FRAME = ImageFrame(128, 128)


def random_h(rng):
    d = sample_inward_perturbation(rng, 32, FRAME)
    return displacement_to_homography(d, FRAME)


def test_identity_and_translation_trivia():
    assert dlt_solve(FRAME.corners, FRAME.corners).is_identity(1e-12)
    H = dlt_solve(FRAME.corners, FRAME.corners + [10, 5])
    np.testing.assert_allclose(H.h, HomographyMatrix.translation(10, 5).h, atol=1e-12)
    d = homography_to_displacement(HomographyMatrix.translation(10, 5), FRAME)
    np.testing.assert_allclose(d.deltas, [[10, 5]] * 4, atol=1e-12)
    assert homography_to_displacement(HomographyMatrix.identity(), FRAME) == CornerDisplacement.zeros()


def test_matrix_normalization_and_rejection():
    H = HomographyMatrix(2 * np.eye(3))
    assert H.h[2, 2] == 1.0 and H.is_identity()
    with pytest.raises(ValueError):
        HomographyMatrix(np.diag([1.0, 1.0, 0.0]))
    assert HomographyMatrix.from_list(H.to_list()) == H


def test_dlt_rejects_collinear():
    src = np.array([[0, 0], [1, 1], [2, 2], [0, 5]], float)
    with pytest.raises(DegenerateCorrespondence):
        dlt_solve(src, FRAME.corners)
    with pytest.raises(DegenerateCorrespondence):
        dlt_solve(FRAME.corners, src)


def test_point_at_infinity():
    H = HomographyMatrix([[1, 0, 0], [0, 1, 0], [1, 0, 1]])
    with pytest.raises(PointAtInfinity):
        apply_homography(H, [[-1.0, 0.0]])


def test_round_trips_random(rng):
    for _ in range(200):
        d = sample_inward_perturbation(rng, 32, FRAME)
        H = displacement_to_homography(d, FRAME)
        np.testing.assert_allclose(apply_homography(H, FRAME.corners), FRAME.corners + d.deltas, atol=1e-9)
        np.testing.assert_allclose(homography_to_displacement(H, FRAME).deltas, d.deltas, atol=1e-9)
        np.testing.assert_allclose(compose(H, invert(H)).h, np.eye(3), atol=1e-9)


def test_compose_associative_and_order(rng):
    A, B, C = (random_h(rng) for _ in range(3))
    np.testing.assert_allclose(compose(compose(A, B), C).h, compose(A, compose(B, C)).h, atol=1e-9)
    p = np.array([[20.0, 30.0]])
    np.testing.assert_allclose(apply_homography(compose(A, B), p), apply_homography(A, apply_homography(B, p)), atol=1e-9)
    np.testing.assert_allclose(invert(HomographyMatrix.translation(10, 5)).h, HomographyMatrix.translation(-10, -5).h)


@pytest.mark.parametrize("angle", [-90, -45, 0, 30, 90, 180])
def test_rotation_to_displacement_analytic(angle):
    d = rotation_to_displacement(angle, FRAME)
    H = displacement_to_homography(d, FRAME)
    t = np.deg2rad(angle)
    c, s = np.cos(t), np.sin(t)
    cx, cy = FRAME.center
    R = np.array([[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy], [0, 0, 1]])
    np.testing.assert_allclose(H.h, R, atol=1e-9)
    assert displacement_to_rotation(d, FRAME) == pytest.approx(angle if angle != -180 else 180, abs=1e-9)


def test_rotation_zero_is_exact_zero():
    assert np.all(rotation_to_displacement(0, FRAME).deltas == 0)


def test_similarity_structure():
    H = similarity_matrix(25, 1.1, 3, -4, FRAME).h
    blk = H[:2, :2] / 1.1
    np.testing.assert_allclose(blk @ blk.T, np.eye(2), atol=1e-9)
    np.testing.assert_allclose(H[2], [0, 0, 1], atol=1e-12)


def test_reflect_index_reflect101():
    np.testing.assert_array_equal(reflect_index(np.arange(-3, 8), 5), [3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1])


def test_warp_identity_bit_exact(rng):
    img = rng.random((32, 40, 3)).astype(np.float32)
    out = warp_image(img, HomographyMatrix.identity())
    assert out.dtype == img.dtype and np.array_equal(out, img)
    u8 = (img * 255).astype(np.uint8)
    assert np.array_equal(warp_image(u8, HomographyMatrix.identity(), interpolation="nearest"), u8)


def test_warp_translation_matches_shift(rng):
    img = rng.random((20, 20)).astype(np.float64)
    out = warp_image(img, HomographyMatrix.translation(3, 2), fill="constant", cval=-1.0)
    np.testing.assert_array_equal(out[2:, 3:], img[:-2, :-3])
    assert np.all(out[:2] == -1.0)


def test_warp_reflection_fill_and_rotation_roundtrip(rng):
    img = rng.random((31, 31, 3))
    R = rotation_matrix(90, ImageFrame(31, 31))
    back = warp_image(warp_image(img, R), invert(R))
    np.testing.assert_allclose(back, img, atol=1e-9)
    out = warp_image(img, HomographyMatrix.translation(5, 0), fill="reflection")
    np.testing.assert_allclose(out[:, :5], img[:, 5:0:-1], atol=1e-12)


def test_perturbed_view_has_no_empty_border(rng):
    img = np.ones((64, 64, 3))
    d = sample_inward_perturbation(rng, 16, ImageFrame(64, 64))
    out = perturbed_view(img, d, fill="constant")
    assert np.allclose(out, 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_inverse_roundtrip(seed):
    H = random_h(np.random.default_rng(seed))
    pts = np.random.default_rng(seed + 1).uniform(0, 127, (10, 2))
    np.testing.assert_allclose(apply_homography(invert(H), apply_homography(H, pts)), pts, atol=1e-9)
