import colorsys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skyreid.augment import (
    JitterParams,
    adjust_hue,
    flip_and_erase,
    hsv_to_rgb,
    jitter_tracklet,
    rgb_to_hsv,
    sample_erase_box,
    sample_jitter,
)


def test_rgb_hsv_matches_colorsys(rng):
    pixels = rng.random((40, 3))
    got = rgb_to_hsv(pixels)
    for pixel, hsv in zip(pixels, got):
        want = colorsys.rgb_to_hsv(*pixel)
        assert np.abs(hsv - np.array(want)).max() <= 1e-9


def test_hsv_rgb_matches_colorsys(rng):
    hsv = rng.random((40, 3))
    got = hsv_to_rgb(hsv)
    for pixel, rgb in zip(hsv, got):
        want = colorsys.hsv_to_rgb(*pixel)
        assert np.abs(rgb - np.array(want)).max() <= 1e-9


@given(seed=st.integers(min_value=0, max_value=10_000))
@settings(max_examples=40, deadline=None)
def test_rgb_hsv_round_trip(seed):
    gen = np.random.default_rng(seed)
    pixels = gen.random((10, 3))
    back = hsv_to_rgb(rgb_to_hsv(pixels))
    assert np.abs(back - pixels).max() <= 1e-9


def test_adjust_hue_matches_colorsys_oracle(rng):
    image = rng.random((5, 4, 3))
    shift = 0.23
    got = adjust_hue(image, shift)
    for i in range(5):
        for j in range(4):
            h, s, v = colorsys.rgb_to_hsv(*image[i, j])
            want = colorsys.hsv_to_rgb((h + shift) % 1.0, s, v)
            assert np.abs(got[i, j] - np.array(want)).max() <= 1e-9


def test_adjust_hue_preserves_value_and_saturation(rng):
    image = rng.random((6, 6, 3))
    shifted = adjust_hue(image, 0.37)
    assert np.abs(shifted.max(axis=-1) - image.max(axis=-1)).max() <= 1e-9
    assert np.abs(shifted.min(axis=-1) - image.min(axis=-1)).max() <= 1e-9


def test_adjust_hue_third_circle_rotates_channels(rng):
    # +1/3 of the circle maps (r, g, b) -> (b, r, g) exactly
    image = rng.random((6, 5, 3))
    got = adjust_hue(image, 1.0 / 3.0)
    want = np.roll(image, 1, axis=-1)
    assert np.abs(got - want).max() <= 1e-9


def test_adjust_hue_whole_circle_is_identity(rng):
    image = rng.random((3, 3, 3))
    for shift in (0.0, 1.0, -1.0, 2.0):
        out = adjust_hue(image, shift)
        assert np.array_equal(out, image)
        assert out is not image


def test_adjust_hue_validation():
    with pytest.raises(ValueError):
        adjust_hue(np.zeros((4, 4, 4)), 0.1)


def test_sample_jitter_bounds_and_distribution():
    gen = np.random.default_rng(0)
    phis = []
    applied = 0
    for _ in range(2000):
        params = sample_jitter(gen, max_shift=0.3, prob=0.5)
        assert -0.3 <= params.phi <= 0.3
        phis.append(params.phi)
        applied += params.applied
    # empirical frequency and spread of the uniform draw
    assert 0.4 <= applied / 2000 <= 0.6
    assert abs(np.mean(phis)) <= 0.02
    assert abs(np.std(phis) - 0.3 / np.sqrt(3.0)) <= 0.02


def test_sample_jitter_validation():
    gen = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_jitter(gen, max_shift=0.6, prob=0.5)
    with pytest.raises(ValueError):
        sample_jitter(gen, max_shift=0.3, prob=1.5)


def test_jitter_tracklet_shares_one_shift_across_frames(rng):
    frame = rng.random((8, 6, 3))
    frames = np.repeat(frame[None], 5, axis=0)
    out = jitter_tracklet(frames, JitterParams(applied=True, phi=0.2))
    # identical inputs and one shared phi: identical outputs, bit for bit
    for t in range(1, 5):
        assert np.array_equal(out[t], out[0])
    assert np.array_equal(out[0], adjust_hue(frame, 0.2))


def test_jitter_tracklet_identity_when_not_applied(rng):
    frames = rng.random((4, 5, 5, 3))
    out = jitter_tracklet(frames, JitterParams(applied=False, phi=0.4))
    assert out is frames


def test_erase_box_in_bounds():
    gen = np.random.default_rng(3)
    for _ in range(200):
        top, left, eh, ew = sample_erase_box(gen, 56, 28)
        assert 0 <= top and top + eh <= 56
        assert 0 <= left and left + ew <= 28
        assert eh >= 1 and ew >= 1


def test_erase_box_validation():
    with pytest.raises(ValueError):
        sample_erase_box(np.random.default_rng(0), 0, 10)


def test_flip_is_per_tracklet_and_erase_per_frame(rng):
    frames = rng.random((6, 16, 12, 3))
    gen = np.random.default_rng(5)
    out = flip_and_erase(frames, gen, flip_prob=1.0, erase_prob=0.0)
    assert np.array_equal(out, frames[:, :, ::-1, :])

    gen = np.random.default_rng(5)
    out = flip_and_erase(frames, gen, flip_prob=0.0, erase_prob=1.0)
    changed = [not np.array_equal(out[t], frames[t]) for t in range(6)]
    assert all(changed)
    # erased regions are exactly the fill value
    for t in range(6):
        diff = out[t] != frames[t]
        assert np.all(out[t][diff.any(axis=-1)] == 0.0)


def test_flip_and_erase_leaves_input_unchanged(rng):
    frames = rng.random((3, 8, 8, 3))
    before = frames.copy()
    flip_and_erase(frames, np.random.default_rng(1), flip_prob=1.0, erase_prob=1.0)
    assert np.array_equal(frames, before)


def test_flip_and_erase_validation(rng):
    with pytest.raises(ValueError):
        flip_and_erase(rng.random((8, 8, 3)), np.random.default_rng(0))
