"""Synthetic pair generator and corruption."""

import numpy as np
import pytest

from grove.synthetic import corrupt, make_pairs


def test_shapes_and_determinism():
    a = make_pairs(20, 8, q=3, seed=1)
    b = make_pairs(20, 8, q=3, seed=1)
    assert a.image.shape == (20, 8)
    assert a.text.shape == (20, 8)
    assert a.latent.shape == (20, 3)
    assert a.noise_scale.shape == (20,)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.text, b.text)
    assert not np.array_equal(a.image, make_pairs(20, 8, q=3, seed=2).image)


def test_modalities_share_signal():
    # With no noise and no offsets the two modalities coincide exactly.
    pairs = make_pairs(10, 6, seed=3, offset_scale=0.0, noise_lo=0.0, noise_hi=0.0)
    np.testing.assert_array_equal(pairs.image, pairs.text)


def test_noise_scales_within_bounds():
    pairs = make_pairs(50, 4, seed=4, noise_lo=0.05, noise_hi=0.2)
    assert np.all(pairs.noise_scale >= 0.05)
    assert np.all(pairs.noise_scale <= 0.2)


def test_corrupt_level_zero_is_identity():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((4, 10))
    out = corrupt(z, 0.0)
    np.testing.assert_array_equal(out, z)
    assert out is not z


def test_corrupt_perturbation_matches_level():
    rng = np.random.default_rng(6)
    z = rng.standard_normal((200, 20))
    out = corrupt(z, 0.25, seed=7)
    assert not np.array_equal(out, z)
    # The injected noise has std level * z.std(); with 4000 samples the
    # empirical std should land well within 10% of that.
    resid = out - z
    assert abs(resid.std() / (0.25 * z.std()) - 1.0) < 0.1


def test_corrupt_monotone_in_level():
    rng = np.random.default_rng(8)
    z = rng.standard_normal((50, 16))
    devs = [np.linalg.norm(corrupt(z, lv, seed=9) - z) for lv in (0.25, 0.5, 0.75)]
    assert devs[0] < devs[1] < devs[2]


def test_corrupt_deterministic_in_seed():
    rng = np.random.default_rng(10)
    z = rng.standard_normal((8, 6))
    np.testing.assert_array_equal(corrupt(z, 0.5, seed=3), corrupt(z, 0.5, seed=3))
    assert not np.array_equal(corrupt(z, 0.5, seed=3), corrupt(z, 0.5, seed=4))


def test_validation():
    with pytest.raises(ValueError):
        make_pairs(0, 4)
    with pytest.raises(ValueError):
        corrupt(np.zeros((2, 2)), -0.1)
    with pytest.raises(ValueError):
        corrupt(np.zeros(4), 0.5)
