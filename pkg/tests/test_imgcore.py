import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polarseg.imgcore import (
    PolarGeometry,
    cart_to_polar,
    default_geometry,
    polar_sample_points,
    polar_to_cart,
    resize,
    sample_bilinear,
    sample_bilinear_many,
)


def disk(shape, center, radius):
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    return (ys - center[0]) ** 2 + (xs - center[1]) ** 2 <= radius ** 2


def dice(a, b):
    return 2 * np.count_nonzero(a & b) / (np.count_nonzero(a) + np.count_nonzero(b))


def smooth_image(shape=(256, 256), seed=0):
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    img = np.zeros(shape)
    for _ in range(4):
        cy, cx = rng.uniform(40, shape[0] - 40, size=2)
        s = rng.uniform(25, 45)
        img += rng.uniform(0.5, 1.0) * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))
    return img


def test_geometry_invariants():
    with pytest.raises(ValueError):
        PolarGeometry(0, 0, 1, 8, 10.0)
    with pytest.raises(ValueError):
        PolarGeometry(0, 0, 8, 8, 0.0)
    g = PolarGeometry(-50.0, 400.0, 4, 4, 3.0)  # origin outside any image is fine
    assert g.shape == (4, 4)


def test_default_geometry_reaches_farthest_corner():
    g = default_geometry((10.0, 20.0), (100, 50))
    assert g.max_radius == pytest.approx(math.hypot(89, 29))
    assert g.shape == (256, 256)


def test_sample_bilinear_grid_points_are_exact():
    img = np.arange(12, dtype=float).reshape(3, 4)
    for r in range(3):
        for c in range(4):
            assert sample_bilinear(img, r, c) == img[r, c]


def test_sample_bilinear_outside_returns_pad():
    img = np.ones((4, 4))
    assert sample_bilinear(img, -5.0, 2.0, pad=-7.0) == -7.0
    assert sample_bilinear(img, 1.0, 4.5, pad=3.5) == 3.5


def test_sample_bilinear_center_of_2x2():
    assert sample_bilinear(np.array([[0.0, 1.0], [2.0, 3.0]]), 0.5, 0.5) == 1.5


def test_sample_bilinear_partial_neighbours_blend_pad():
    img = np.full((2, 2), 4.0)
    # half of the taps are out of bounds
    assert sample_bilinear(img, 0.0, 1.5, pad=0.0) == pytest.approx(2.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(5, 250), st.floats(5, 250), st.floats(-1, 1), st.floats(-1, 1), st.integers(0, 5))
def test_sample_bilinear_is_lipschitz(row, col, dr, dc, seed):
    img = smooth_image(seed=seed)
    gy, gx = np.gradient(img)
    bound = 2 * np.abs(np.stack([gy, gx])).max()
    eps = 1e-3
    a = sample_bilinear(img, row, col)
    b = sample_bilinear(img, row + eps * dr, col + eps * dc)
    assert abs(a - b) <= eps * math.hypot(dr, dc) * bound + 1e-12


def test_polar_row_zero_is_the_origin_pixel():
    img = np.random.default_rng(1).random((40, 50))
    g = default_geometry((13.0, 21.0), img.shape, 32, 64)
    polar = cart_to_polar(img, g)
    assert polar.shape == (32, 64)
    assert np.all(polar[0] == img[13, 21])


def test_angle_convention():
    g = PolarGeometry(10.0, 10.0, 11, 4, 10.0)
    rows, cols = polar_sample_points(g)
    # theta = 0 -> right, pi/2 -> up (smaller row index)
    assert (rows[-1, 0], cols[-1, 0]) == pytest.approx((10.0, 20.0))
    assert (rows[-1, 1], cols[-1, 1]) == pytest.approx((0.0, 10.0))


@pytest.mark.parametrize("radius", [5.0, 17.5, 40.0])
def test_polar_disk_occupies_leading_rows(radius):
    shape = (128, 128)
    center = (64.0, 60.0)
    mask = disk(shape, center, radius)
    g = default_geometry(center, shape, 128, 96)
    polar = cart_to_polar(mask, g, pad=False, mode="nearest")
    # analytic oracle: the row whose radius crosses the disk edge
    edge = math.floor(radius * (g.radial_bins - 1) / g.max_radius)
    for col in range(g.angular_bins):
        fg = np.flatnonzero(polar[:, col])
        assert fg[0] == 0
        assert np.all(np.diff(fg) == 1)
        assert abs(fg[-1] - edge) <= 1


def test_constant_image_is_value_or_pad():
    shape = (64, 80)
    c, pad = 3.25, -1.0
    img = np.full(shape, c)
    origin = (31.5, 39.5)
    g = default_geometry(origin, shape, 64, 64)
    polar = cart_to_polar(img, g, pad=pad)
    rows, cols = polar_sample_points(g)
    # analytic bounds check of the four bilinear taps
    r0, c0 = np.floor(rows), np.floor(cols)
    inside_r0 = (r0 >= 0) & (r0 < shape[0])
    inside_r1 = (r0 + 1 >= 0) & (r0 + 1 < shape[0])
    inside_c0 = (c0 >= 0) & (c0 < shape[1])
    inside_c1 = (c0 + 1 >= 0) & (c0 + 1 < shape[1])
    exact_r = rows == r0
    exact_c = cols == c0
    all_in = inside_r0 & (inside_r1 | exact_r) & inside_c0 & (inside_c1 | exact_c)
    none_in = ~((inside_r0 | (inside_r1 & ~exact_r)) & (inside_c0 | (inside_c1 & ~exact_c)))
    assert np.all(polar[all_in] == c)
    assert np.all(polar[none_in] == pad)
    band = ~(all_in | none_in)
    assert np.all((polar[band] >= pad) & (polar[band] <= c))
    assert np.count_nonzero(none_in) > 0


def test_polar_to_cart_of_zero_is_zero():
    g = default_geometry((20.0, 20.0), (40, 40), 32, 32)
    assert not np.any(polar_to_cart(np.zeros((32, 32)), g, 40, 40))


def test_polar_to_cart_rejects_wrong_shape():
    g = default_geometry((20.0, 20.0), (40, 40), 32, 32)
    with pytest.raises(ValueError):
        polar_to_cart(np.zeros((16, 32)), g, 40, 40)


@pytest.mark.parametrize("k", [10, 37, 80])
def test_leading_rows_map_back_to_disk(k):
    shape = (200, 200)
    center = (99.0, 101.0)
    g = default_geometry(center, shape)
    polar = np.zeros(g.shape)
    polar[:k + 1] = 1.0
    cart = polar_to_cart(polar, g, *shape) >= 0.5
    radius = k * g.max_radius / (g.radial_bins - 1)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]]
    dist = np.hypot(ys - center[0], xs - center[1])
    assert np.all(cart[dist <= radius - 1])
    assert not np.any(cart[dist >= radius + 1])


def test_angular_seam_blends_last_and_first_column():
    g = PolarGeometry(50.0, 50.0, 8, 8, 40.0)
    polar = np.zeros(g.shape)
    polar[:, -1] = 1.0
    out = polar_to_cart(polar, g, 101, 101)
    ys, xs = np.mgrid[0:101, 0:101].astype(float)
    theta = np.mod(np.arctan2(50.0 - ys, xs - 50.0), 2 * np.pi)
    radius = np.hypot(ys - 50.0, xs - 50.0)
    frac = theta * 8 / (2 * np.pi) - 7
    seam = (frac > 0) & (radius < 35.0)
    # linear blend between column 7 (value 1) and column 0 (value 0)
    assert np.count_nonzero(seam) > 100
    assert np.allclose(out[seam], 1 - frac[seam], atol=1e-12)


def test_round_trip_centred_disk():
    shape = (256, 256)
    mask = disk(shape, (127.0, 128.0), 40)
    g = default_geometry((127.0, 128.0), shape)
    back = polar_to_cart(cart_to_polar(mask.astype(float), g), g, *shape) >= 0.5
    assert dice(back, mask) >= 0.99


def test_rotation_shifts_polar_columns():
    shape = (256, 256)
    origin = (127.5, 127.5)
    ys, xs = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    bumps = [(60.0, 0.3, 1.0, 30.0), (40.0, 2.0, 0.7, 22.0), (80.0, 4.0, 0.5, 35.0)]

    def render(phi):
        img = np.zeros(shape)
        for rad, ang, amp, s in bumps:
            a = ang + phi
            cy, cx = origin[0] - rad * math.sin(a), origin[1] + rad * math.cos(a)
            img += amp * np.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / (2 * s * s))
        return img

    g = PolarGeometry(*origin, 128, 256, 110.0)
    for k in (1, 5, 64):
        phi = k * 2 * math.pi / g.angular_bins
        base = cart_to_polar(render(0.0), g)
        rotated = cart_to_polar(render(phi), g)
        assert np.abs(np.roll(base, k, axis=1) - rotated).max() <= 1e-3


def test_resampling_is_deterministic():
    img = smooth_image(seed=3)
    g = default_geometry((100.2, 90.7), img.shape)
    a = polar_to_cart(cart_to_polar(img, g), g, *img.shape)
    b = polar_to_cart(cart_to_polar(img.copy(), g), g, *img.shape)
    assert a.tobytes() == b.tobytes()


def test_resize_identity():
    img = np.random.default_rng(0).random((17, 23))
    assert np.allclose(resize(img, 17, 23), img, atol=1e-6)


def test_resize_nearest_replicates_blocks():
    out = resize(np.array([[0, 1], [2, 3]]), 4, 4, mode="nearest")
    assert out.tolist() == [[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 3, 3], [2, 2, 3, 3]]


@pytest.mark.parametrize("shape", [(1, 1), (7, 300), (256, 256), (512, 666)])
def test_resize_constant_stays_constant(shape):
    out = resize(np.full((30, 41), 2.5), *shape)
    assert out.shape == shape
    assert np.all(out == 2.5)


def test_resize_nearest_keeps_masks_binary():
    mask = np.random.default_rng(2).random((33, 47)) > 0.5
    out = resize(mask, 256, 256, mode="nearest")
    assert out.dtype == bool


def test_sample_many_matches_scalar():
    img = smooth_image(seed=4)
    rng = np.random.default_rng(5)
    rows, cols = rng.uniform(-3, 259, 50), rng.uniform(-3, 259, 50)
    many = sample_bilinear_many(img, rows, cols, pad=0.25)
    assert many.tolist() == [sample_bilinear(img, r, c, 0.25) for r, c in zip(rows, cols)]
