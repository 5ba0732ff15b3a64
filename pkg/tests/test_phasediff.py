import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from va_lds.dataio import SynthConfig, generate_synthetic_dataset
from va_lds.errors import ConfigError, ValidationError
from va_lds.phasediff import (
    build_filter_bank,
    cache_path,
    cached_video_features,
    decompose,
    load_phase_cache,
    phase_difference,
    save_phase_cache,
    sequence_phase_diffs,
    video_phase_features,
    wrap,
)


def grating(size, wavelength, theta, shift=0.0):
    """cos grating varying along direction theta, translated by `shift` px along it."""
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    proj = xx * np.cos(theta) + yy * np.sin(theta)
    return 0.5 + 0.3 * np.cos(2 * np.pi * (proj - shift) / wavelength)


@pytest.fixture(scope="module")
def bank():
    return build_filter_bank(2, 4, 64)


def test_bank_construction(bank):
    assert bank.filters.shape == (2, 4, 64, 64)
    assert bank.center_wavelengths == (4.0, 8.0)
    np.testing.assert_allclose(bank.orientations, [0, np.pi / 4, np.pi / 2, 3 * np.pi / 4])
    again = build_filter_bank(2, 4, 64)
    assert np.array_equal(again.filters, bank.filters)


def test_filters_are_analytic(bank):
    # a quadrature filter passes only one of each +/- frequency pair
    f = bank.filters
    flipped = np.roll(f[..., ::-1, ::-1], 1, axis=(-2, -1))
    assert np.all((np.abs(f) < 1e-12) | (np.abs(flipped) < 1e-12))
    assert np.all(f[..., 0, 0] == 0)


@pytest.mark.parametrize("kw", [dict(image_size=8), dict(n_scales=0), dict(n_scales=6),
                                dict(n_orientations=1), dict(n_orientations=9)])
def test_bank_rejects_bad_params(kw):
    with pytest.raises(ConfigError):
        build_filter_bank(**{"n_scales": 2, "n_orientations": 4, "image_size": 32, **kw})


def test_constant_image_has_no_response(bank):
    pm = decompose(np.full((64, 64), 0.7), bank)
    assert pm.amplitude.max() < 1e-6 * 0.7


def test_dominant_filter_for_horizontal_sinusoid(bank):
    pm = decompose(grating(64, 4.0, 0.0), bank)
    energy = pm.amplitude.mean(axis=(2, 3))
    assert np.unravel_index(energy.argmax(), energy.shape) == (0, 0)
    pm = decompose(grating(64, 8.0, np.pi / 2), bank)
    energy = pm.amplitude.mean(axis=(2, 3))
    assert np.unravel_index(energy.argmax(), energy.shape) == (1, 2)


def test_phase_range(bank):
    rng = np.random.default_rng(0)
    pm = decompose(rng.random((64, 64)), bank)
    assert pm.phase.min() > -np.pi and pm.phase.max() <= np.pi
    assert pm.amplitude.min() >= 0


def test_size_mismatch(bank):
    with pytest.raises(ValidationError):
        decompose(np.zeros((32, 32)), bank)


def test_wrap_arithmetic():
    assert np.isclose(wrap(np.pi / 2 - (-3 * np.pi / 4)), -3 * np.pi / 4)
    assert wrap(np.pi) == np.pi
    assert wrap(-np.pi) == np.pi


def test_identical_frames_zero_diff(bank):
    pm = decompose(grating(64, 8.0, 0.3), bank)
    assert np.all(phase_difference(pm, pm, 0.5).diff == 0)


@pytest.mark.parametrize("scale", [0, 1])
@pytest.mark.parametrize("orient", [0, 2])
@pytest.mark.parametrize("d", [0.25, 0.5, 1.0])
def test_translation_gives_analytic_phase_shift(bank, scale, orient, d):
    lam = bank.center_wavelengths[scale]
    theta = bank.orientations[orient]
    a = decompose(grating(64, lam, theta), bank)
    b = decompose(grating(64, lam, theta, shift=d), bank)
    st_ = phase_difference(a, b, 0.5)
    m = st_.mask[scale, orient]
    assert m.mean() > 0.9
    measured = st_.diff[scale, orient][m].mean()
    expected = 2 * np.pi * d / lam
    assert abs(measured - expected) <= 0.05 * expected


def test_masked_entries_are_zero(bank):
    rng = np.random.default_rng(1)
    st_ = phase_difference(decompose(rng.random((64, 64)), bank),
                           decompose(rng.random((64, 64)), bank), 0.7)
    assert np.all(st_.diff[~st_.mask] == 0)
    assert 0 < st_.mask.mean() < 0.3


def test_shape_mismatch(bank):
    small = build_filter_bank(2, 4, 32)
    with pytest.raises(ValidationError):
        phase_difference(decompose(np.zeros((64, 64)), bank), decompose(np.zeros((32, 32)), small))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(-0.5, 0.5), st.floats(0.2, 5.0))
def test_offset_and_gain_invariance(seed, offset, gain):
    bank = build_filter_bank(2, 4, 16)
    rng = np.random.default_rng(seed)
    f0, f1 = rng.random((2, 16, 16))
    base = phase_difference(decompose(f0, bank), decompose(f1, bank))
    shifted = phase_difference(decompose(f0 + offset, bank), decompose(f1 + offset, bank))
    np.testing.assert_allclose(shifted.diff, base.diff, atol=1e-7)
    p0, p1 = decompose(gain * f0, bank), decompose(gain * f1, bank)
    np.testing.assert_allclose(p0.amplitude, gain * decompose(f0, bank).amplitude, rtol=1e-9, atol=1e-12)
    scaled = phase_difference(p0, p1)
    agree = scaled.mask == base.mask
    assert agree.mean() > 0.999
    np.testing.assert_allclose(scaled.diff[agree], base.diff[agree], atol=1e-7)


def test_sequence_length_contract():
    bank = build_filter_bank(2, 4, 16)
    vid = generate_synthetic_dataset(SynthConfig(1, 2, 16))[0]
    assert len(sequence_phase_diffs(vid, bank)) == 1
    static = np.repeat(vid.images()[:1], 5, axis=0)
    stacks = sequence_phase_diffs(static, bank)
    assert len(stacks) == 4
    assert all(np.all(s.diff == 0) for s in stacks)
    with pytest.raises(ValidationError):
        sequence_phase_diffs(static[:1], bank)


def test_reversal_negates_diffs():
    bank = build_filter_bank(2, 4, 32)
    frames = generate_synthetic_dataset(SynthConfig(1, 6, 32, seed=9))[0].images()
    fwd = sequence_phase_diffs(frames, bank)
    bwd = sequence_phase_diffs(frames[::-1], bank)
    for f, b in zip(fwd, bwd[::-1]):
        assert np.array_equal(f.mask, b.mask)
        m = f.mask & (np.abs(np.abs(f.diff) - np.pi) > 1e-9)
        np.testing.assert_allclose(b.diff[m], -f.diff[m], atol=1e-12)


def test_batched_features_match_per_frame():
    bank = build_filter_bank(2, 3, 16)
    frames = generate_synthetic_dataset(SynthConfig(1, 7, 16, seed=2))[0].images()
    feats = video_phase_features(frames, bank, 0.5, chunk=3)
    ref = sequence_phase_diffs(frames, bank, 0.5)
    assert feats.shape == (6, 6, 16, 16)
    for t, s in enumerate(ref):
        np.testing.assert_allclose(feats[t], s.diff.reshape(6, 16, 16), atol=1e-6)


def test_cache_roundtrip(tmp_path):
    bank = build_filter_bank(2, 4, 16)
    vid = generate_synthetic_dataset(SynthConfig(1, 5, 16, seed=2))[0]
    feats = cached_video_features(vid, bank, 0.5, tmp_path)
    path = cache_path(tmp_path, vid.video_id, bank, 0.5)
    assert path.exists()
    assert np.array_equal(load_phase_cache(path), feats)
    assert np.array_equal(cached_video_features(vid, bank, 0.5, tmp_path), feats)
    save_phase_cache(tmp_path / "x.pdiff", feats, 2, 4)
    assert load_phase_cache(tmp_path / "x.pdiff").shape == (4, 8, 16, 16)
