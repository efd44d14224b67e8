import numpy as np
import pytest

from etvae import autodiff as ad
from etvae.autodiff import Tensor
from etvae.errors import ShapeError
from etvae.geometry import (TWO_PI, bilinear_sample, disc_mask, from_polar, pixel_grid, relative_l2,
                            rotate_image, shift_columns, to_polar)
from etvae.gradcheck import check_gradients

S, R, A = 64, 64, 64
R_MAX = S / 2.0
GRAD_TOL = 1e-6


def centred_gaussian(size=S, sigma=8.0):
    x, y = pixel_grid(size)
    return np.exp(-(x**2 + y**2) / (2 * sigma**2))[None]


def away_from_cell_edges(rng, shape, lo, hi):
    """Continuous coordinates whose fractional part avoids the bilinear kinks."""
    base = rng.integers(lo, hi, size=shape).astype(float)
    return base + rng.uniform(0.1, 0.9, size=shape)


# -- bilinear_sample --------------------------------------------------------------


def test_sampling_at_pixel_centres_reproduces_pixels():
    img = np.random.default_rng(0).uniform(size=(1, 6, 6))
    x, y = pixel_grid(6)
    out = bilinear_sample(Tensor(img), Tensor(x), Tensor(y)).data
    np.testing.assert_array_equal(out, img)


def test_midpoint_between_zero_and_one():
    img = np.zeros((1, 2, 2))
    img[0, :, 1] = 1.0
    out = bilinear_sample(Tensor(img), Tensor([0.0]), Tensor([-0.5])).data
    assert out[0, 0] == 0.5


def test_out_of_bounds_reads_zero():
    img = np.ones((1, 4, 4))
    out = bilinear_sample(Tensor(img), Tensor([10.0, -3.0]), Tensor([0.0, 5.0])).data
    np.testing.assert_array_equal(out, 0.0)


def test_coordinate_shape_mismatch():
    with pytest.raises(ShapeError):
        bilinear_sample(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros(3)), Tensor(np.zeros(2)))


def test_bilinear_gradients_image_and_coordinates():
    rng = np.random.default_rng(1)
    x, y = pixel_grid(8)
    smooth = np.exp(-(x**2 + y**2) / 18.0)[None]
    for _ in range(10):
        img = Tensor(smooth + 0.1 * rng.normal(size=smooth.shape), requires_grad=True)
        xs = Tensor(away_from_cell_edges(rng, (5,), -3, 3) - 0.5, requires_grad=True)
        ys = Tensor(away_from_cell_edges(rng, (5,), -3, 3) - 0.5, requires_grad=True)
        w = rng.normal(size=(1, 5))
        assert check_gradients(lambda: ad.sum(ad.mul(bilinear_sample(img, xs, ys), w)), [img, xs, ys]) <= GRAD_TOL


def test_batched_bilinear_gradients():
    rng = np.random.default_rng(2)
    for _ in range(10):
        img = Tensor(rng.uniform(size=(2, 2, 6, 6)), requires_grad=True)
        xs = Tensor(away_from_cell_edges(rng, (2, 4), -2, 2) - 0.5, requires_grad=True)
        ys = Tensor(away_from_cell_edges(rng, (2, 4), -2, 2) - 0.5, requires_grad=True)
        w = rng.normal(size=(2, 2, 4))
        assert check_gradients(lambda: ad.sum(ad.mul(bilinear_sample(img, xs, ys), w)), [img, xs, ys]) <= GRAD_TOL


# -- rotate_image --------------------------------------------------------------------


def test_rotate_zero_is_identity():
    img = np.random.default_rng(3).uniform(size=(1, 16, 16))
    np.testing.assert_allclose(rotate_image(Tensor(img), 0.0).data, img, atol=1e-15)


def test_rotate_quarter_turn_moves_bright_pixel():
    size = 17
    c = (size - 1) // 2
    img = np.zeros((1, size, size))
    img[0, c, c + 5] = 1.0  # x = 5, y = 0
    out = rotate_image(Tensor(img), np.pi / 2).data[0]
    # oracle: R(pi/2) (5, 0) = (0, 5) -> row c + 5, col c
    ang = np.pi / 2
    x_new = 5 * np.cos(ang) - 0 * np.sin(ang)
    y_new = 5 * np.sin(ang) + 0 * np.cos(ang)
    r, q = int(round(c + y_new)), int(round(c + x_new))
    assert np.unravel_index(np.argmax(out), out.shape) == (r, q)
    assert out[r, q] == pytest.approx(1.0, abs=1e-9)


def test_rotate_round_trip_on_smooth_images(blob_corpus):
    mask = disc_mask(S, 0.9 * R_MAX)
    rng = np.random.default_rng(4)
    for img in blob_corpus:
        a = rng.uniform(0, TWO_PI)
        back = rotate_image(rotate_image(Tensor(img), a), -a).data
        assert relative_l2(back[0], img[0], mask) <= 0.02


def test_rotate_angle_gradient():
    rng = np.random.default_rng(5)
    x, y = pixel_grid(8)
    img = Tensor(np.exp(-((x - 1) ** 2 + y**2) / 6.0)[None], requires_grad=True)
    for _ in range(10):
        a = Tensor(rng.uniform(0.05, 1.5), requires_grad=True)
        w = rng.normal(size=(1, 8, 8))
        assert check_gradients(lambda: ad.sum(ad.mul(rotate_image(img, a), w)), [img, a]) <= GRAD_TOL


# -- to_polar ----------------------------------------------------------------------


def test_symmetric_image_rows_are_constant():
    # a constant frame is the one discrete image that bilinear resampling keeps exactly symmetric
    p = to_polar(Tensor(np.full((1, S, S), 0.8)), R, A, R_MAX).data[0, :-1]
    assert np.max(p.max(axis=1) - p.min(axis=1)) <= 1e-6


def test_gaussian_rows_constant_up_to_interpolation_error():
    sigma = 8.0
    p = to_polar(Tensor(centred_gaussian(sigma=sigma)), R, A, R_MAX).data[0]
    # bilinear error on a unit grid is at most (max|f_xx| + max|f_yy|) / 8
    bound = 2 * (1 / sigma**2) / 8
    assert np.max(p.max(axis=1) - p.min(axis=1)) <= 2 * bound


def test_constant_image_gives_constant_polar():
    c = 0.37
    p = to_polar(Tensor(np.full((1, S, S), c)), R, A, R_MAX).data
    # the outermost ring reaches past the edge pixel centres
    np.testing.assert_allclose(p[:, :-1], c, atol=1e-6)


def test_r_max_too_large():
    with pytest.raises(ShapeError):
        to_polar(Tensor(np.zeros((1, S, S))), R, A, S / 2.0 + 1)


def test_grid_rotation_is_column_shift_on_blobs(blob_corpus):
    keep = slice(0, int(0.9 * R))
    x = Tensor(blob_corpus)
    base = to_polar(x, R, A, R_MAX).data
    for k in (1, 7, 16, 33, 50):
        rot = to_polar(rotate_image(x, TWO_PI * k / A), R, A, R_MAX).data
        for i in range(len(blob_corpus)):
            assert relative_l2(rot[i, :, keep], shift_columns(base[i], k)[:, keep]) <= 0.05


def test_to_polar_gradients():
    rng = np.random.default_rng(6)
    for _ in range(10):
        img = Tensor(rng.uniform(size=(1, 8, 8)), requires_grad=True)
        ang = Tensor(rng.uniform(0, TWO_PI), requires_grad=True)
        w = rng.normal(size=(1, 4, 8))
        assert check_gradients(lambda: ad.sum(ad.mul(to_polar(img, 4, 8, 3.5, angle=ang), w)), [img, ang]) <= GRAD_TOL


def test_to_polar_angle_matches_rotating_first(blob_corpus):
    x = Tensor(blob_corpus[:5])
    a = 0.7
    direct = to_polar(x, R, A, R_MAX, angle=a).data
    two_pass = to_polar(rotate_image(x, -a), R, A, R_MAX).data
    keep = slice(0, int(0.9 * R))
    assert relative_l2(direct[..., keep, :], two_pass[..., keep, :]) <= 0.02


# -- from_polar -------------------------------------------------------------------


def test_round_trip_on_smooth_images(blob_corpus):
    mask = disc_mask(S, 0.9 * R_MAX)
    for img in blob_corpus:
        back = from_polar(to_polar(Tensor(img), R, A, R_MAX), S, R_MAX).data
        assert relative_l2(back[0], img[0], mask) <= 0.08


def test_constant_polar_gives_disc():
    c = 0.6
    out = from_polar(Tensor(np.full((1, R, A), c)), S, R_MAX).data[0]
    inner = disc_mask(S, R_MAX - 1)
    np.testing.assert_allclose(out[inner], c, atol=1e-6)
    assert np.all(out[~disc_mask(S, R_MAX)] == 0.0)


def test_column_shift_gives_rotation(blob_corpus):
    mask = disc_mask(S, 0.9 * R_MAX)
    for img in blob_corpus[:10]:
        p = to_polar(Tensor(img), R, A, R_MAX).data
        k = 9
        shifted = from_polar(Tensor(shift_columns(p, k)), S, R_MAX).data[0]
        rotated = rotate_image(from_polar(Tensor(p), S, R_MAX), TWO_PI * k / A).data[0]
        assert relative_l2(shifted, rotated, mask) <= 0.05


def test_from_polar_gradients():
    rng = np.random.default_rng(7)
    for _ in range(10):
        p = Tensor(rng.uniform(size=(1, 4, 8)), requires_grad=True)
        ang = Tensor(rng.uniform(0, TWO_PI), requires_grad=True)
        w = rng.normal(size=(1, 8, 8))
        assert check_gradients(lambda: ad.sum(ad.mul(from_polar(p, 8, 4.0, angle=ang), w)), [p, ang]) <= GRAD_TOL


def test_geometry_determinism(blob_corpus):
    x = Tensor(blob_corpus[:3])
    assert to_polar(x, R, A, R_MAX).data.tobytes() == to_polar(x, R, A, R_MAX).data.tobytes()
