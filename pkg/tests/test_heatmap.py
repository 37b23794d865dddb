import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hsjp.heatmap import (HeatmapStack, decode_peaks, default_sigma, heatmap_mosaic, masked_mse,
                          masked_mse_gradient, render_targets, side_by_side_png, sigma_bound)
from hsjp.codecs import decode_png
from hsjp.imaging import AffineTransform


def test_value_at_center_is_one():
    t = render_targets([[10.5, 7.5]], 1.5, 20, 20)
    assert t.data[0, 7, 10] == 1.0


def test_value_one_sigma_away():
    t = render_targets([[10.5, 7.5]], 1.5, 20, 20)
    # centre shifted by exactly sigma along x lands on a fractional pixel; evaluate the formula
    t2 = render_targets([[10.5 - 1.5, 7.5]], 1.5, 20, 20)
    assert t2.data[0, 7, 10] == pytest.approx(math.exp(-0.5), abs=1e-15)
    assert t.data[0, 7, 11] == pytest.approx(math.exp(-1 / (2 * 1.5 ** 2)), abs=1e-15)


@pytest.mark.parametrize("center", [(-3, 10), (10, -0.01), (56, 3), (3, 56), (np.nan, 3)])
def test_out_of_frame_masked(center):
    t = render_targets([center, (20, 20)], 1.5, 56, 56)
    assert not t.mask[0] and t.mask[1]
    assert not t.data[0].any()


def test_invisible_flag_masks():
    t = render_targets([[5, 5], [9, 9]], 1.0, 16, 16, visible=[True, False])
    assert t.mask.tolist() == [True, False]
    assert not t.data[1].any()


@pytest.mark.parametrize("n,out,expected", [(6, 56, 56 / 36), (1, 56, 56 / 6), (8, 56, 56 / 48)])
def test_sigma_bound(n, out, expected):
    assert sigma_bound(n, out) == pytest.approx(expected)


def test_sigma_bound_examples_rounded():
    assert round(sigma_bound(6, 56), 4) == 1.5556
    assert round(sigma_bound(1, 56), 3) == 9.333
    assert round(sigma_bound(8, 56), 4) == 1.1667


@given(st.integers(1, 12), st.sampled_from([24, 56]))
def test_default_sigma_strictly_below_bound(n, out):
    s = default_sigma(n, out)
    assert 0 < s < sigma_bound(n, out) and s <= 1.5


def test_mse_identity_zero(gen):
    g = HeatmapStack(gen.random((3, 56, 56)), np.ones(3, bool))
    assert masked_mse(g, g.data.copy()) == 0.0


def test_mse_all_masked_zero(gen):
    g = HeatmapStack(gen.random((3, 8, 8)), np.zeros(3, bool))
    assert masked_mse(g, gen.random((3, 8, 8)) * 100) == 0.0


@pytest.mark.parametrize("delta", [1.0, 0.5, -0.3, 2.0])
def test_mse_single_pixel(delta):
    g = HeatmapStack(np.zeros((1, 56, 56)), np.ones(1, bool))
    h = np.zeros((1, 56, 56))
    h[0, 17, 40] = delta
    assert abs(masked_mse(g, h) - delta ** 2 / 3136) < 1e-12


def test_mse_batch_is_mean_of_items(gen):
    d = gen.random((4, 2, 6, 6))
    m = gen.random((4, 2)) > 0.3
    h = gen.random((4, 2, 6, 6))
    per = [masked_mse(HeatmapStack(d[i], m[i]), h[i]) for i in range(4)]
    assert masked_mse(HeatmapStack(d, m), h) == pytest.approx(np.mean(per), abs=1e-15)


def test_mse_symmetry(gen):
    g = HeatmapStack(gen.random((3, 6, 6)), np.array([True, False, True]))
    h = gen.random((3, 6, 6))
    assert masked_mse(g, h) == pytest.approx(masked_mse(HeatmapStack(h, g.mask), g.data), abs=1e-15)


def test_gradient_zero_cases(gen):
    d = gen.random((3, 6, 6))
    g = HeatmapStack(d, np.array([True, False, True]))
    np.testing.assert_array_equal(masked_mse_gradient(g, d.copy()), 0.0)
    grad = masked_mse_gradient(g, gen.random((3, 6, 6)))
    np.testing.assert_array_equal(grad[1], 0.0)


def test_gradient_finite_differences(gen):
    target = HeatmapStack(gen.random((2, 3, 5, 5)), gen.random((2, 3)) > 0.3)
    pred = gen.random((2, 3, 5, 5))
    grad = masked_mse_gradient(target, pred)
    h = 1e-6
    num = np.zeros_like(pred)
    for idx in np.ndindex(pred.shape):
        p, m = pred.copy(), pred.copy()
        p[idx] += h
        m[idx] -= h
        num[idx] = (masked_mse(target, p) - masked_mse(target, m)) / (2 * h)
    denom = np.maximum(np.abs(num), np.abs(grad))
    rel = np.where(denom > 1e-12, np.abs(num - grad) / np.where(denom > 0, denom, 1), 0.0)
    assert rel.max() < 1e-6


def test_decode_known_center():
    t = render_targets([[20.0, 30.0]], 1.5, 56, 56)
    p = decode_peaks(t)
    assert np.hypot(*(p.points[0] - (20.0, 30.0))) <= 0.5
    assert p.valid[0]


def test_decode_zero_channel():
    p = decode_peaks(np.zeros((1, 8, 8)))
    # argmax ties at index 0; no shift at the border
    np.testing.assert_array_equal(p.points[0], (0.5, 0.5))
    assert p.scores[0] == 0.0


def test_decode_picks_taller_peak():
    a = render_targets([[10.0, 10.0]], 1.5, 40, 40).data[0]
    b = 0.7 * render_targets([[30.0, 25.0]], 1.5, 40, 40).data[0]
    p = decode_peaks((a + b)[None])
    assert np.hypot(*(p.points[0] - (10.0, 10.0))) <= 0.5


def test_decode_quarter_shift():
    hm = np.zeros((1, 5, 5))
    hm[0, 2, 2] = 1.0
    hm[0, 2, 3] = 0.5
    hm[0, 1, 2] = 0.2
    np.testing.assert_allclose(decode_peaks(hm).points[0], (2.75, 2.25))


@given(st.floats(0.5, 1.5), st.data())
def test_roundtrip_within_half_pixel(sigma, data):
    lo, hi = 3 * sigma, 56 - 3 * sigma
    c = (data.draw(st.floats(lo, hi)), data.draw(st.floats(lo, hi)))
    p = decode_peaks(render_targets([c], sigma, 56, 56))
    assert np.hypot(*(p.points[0] - c)) <= 0.5


@given(st.floats(5, 50), st.floats(5, 50), st.floats(0.5, 3))
def test_radial_decay_along_rays(cx, cy, sigma):
    d = render_targets([[cx, cy]], sigma, 56, 56).data[0]
    r, c = int(cy), int(cx)
    right = d[r, c + 1:]
    assert np.all(np.diff(right) <= 0)
    down = d[r + 1:, c]
    assert np.all(np.diff(down) <= 0)


@given(st.floats(-30, 30), st.floats(0.8, 1.2), st.floats(60, 160), st.floats(60, 160))
def test_render_decode_tracks_transform(theta, s, x, y):
    a = AffineTransform.rotation(theta, (112, 112)).compose(AffineTransform.scaling(s, (112, 112)))
    p = a.apply([x, y]) / 4
    dec = decode_peaks(render_targets([p], 1.5, 56, 56))
    assert np.hypot(*(dec.points[0] - p)) <= 0.5


def test_mosaic_shapes():
    m = heatmap_mosaic(np.ones((9, 4, 4)))
    assert m.shape == (14, 14, 1)
    img = decode_png(side_by_side_png(np.zeros((4, 4, 4)), np.ones((4, 4, 4))))
    assert img.shape == (9, 20, 1)
    assert img[0, 0, 0] == 0 and img[0, -1, 0] == 1
