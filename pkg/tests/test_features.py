import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats as sps

from byols.features import (
    BASE_LLD_NAMES,
    D_SUP,
    FEATURE_NAMES,
    FUNCTIONAL_NAMES,
    LLD_NAMES,
    FeatureError,
    LldFrameMatrix,
    apply_functionals,
    extract_features,
    extract_llds,
    features_from_bytes,
    features_to_bytes,
    features_to_csv,
    fit_standardizer,
)
from byols.frontend import LOG_FLOOR, AudioClip

SR = 16000


def row(name):
    return LLD_NAMES.index(name)


def naive_functionals(x):
    i = np.arange(len(x))
    slope, offset = np.polyfit(i, x, 1)
    p25, p50, p75 = (np.percentile(x, q, method="linear") for q in (25, 50, 75))
    return [
        x.mean(), x.std(), x.min(), x.max(), x.max() - x.min(),
        sps.skew(x, bias=True), sps.kurtosis(x, fisher=False, bias=True),
        p25, p50, p75, slope, offset,
    ]


def test_dimensions_and_ordering():
    assert len(BASE_LLD_NAMES) == 20 and len(LLD_NAMES) == 40 and len(FUNCTIONAL_NAMES) == 12
    assert D_SUP == 480 == len(FEATURE_NAMES)
    assert FEATURE_NAMES[0] == "mfcc0__mean" and FEATURE_NAMES[12] == "mfcc1__mean"
    assert FEATURE_NAMES[-1] == "spectral_rolloff85_delta__offset"


def test_alternating_signal_has_unit_zcr():
    x = np.where(np.arange(8000) % 2 == 0, 1.0, -1.0)
    llds = extract_llds(AudioClip(x, SR)).values
    np.testing.assert_array_equal(llds[row("zcr")], 1.0)


def test_silence():
    llds = extract_llds(AudioClip(np.zeros(8000), SR)).values
    np.testing.assert_array_equal(llds[row("log_energy")], np.log(LOG_FLOOR))
    np.testing.assert_array_equal(llds[row("f0")], 0.0)
    np.testing.assert_array_equal(llds[20:], 0.0)


def test_f0_of_220hz_sine():
    t = np.arange(SR) / SR
    f0 = extract_llds(AudioClip(np.sin(2 * np.pi * 220.0 * t), SR)).values[row("f0")]
    np.testing.assert_allclose(f0[2:-2], 220.0, atol=5.0)


def test_short_clip_rejected():
    with pytest.raises(FeatureError):
        extract_llds(AudioClip(np.zeros(500), SR))


def test_functionals_constant_and_ramp():
    llds = LldFrameMatrix(np.vstack([np.full(50, 2.5), 0.3 * np.arange(50) - 1.0]), ["c", "ramp"])
    v = apply_functionals(llds).values.reshape(2, 12)
    f = dict(zip(FUNCTIONAL_NAMES, v[0]))
    assert f["mean"] == 2.5 and f["std"] == 0 and f["range"] == 0 and f["slope"] == 0
    g = dict(zip(FUNCTIONAL_NAMES, v[1]))
    assert g["slope"] == pytest.approx(0.3, abs=1e-9) and g["offset"] == pytest.approx(-1.0, abs=1e-9)


@given(st.integers(0, 10_000), st.integers(3, 200))
def test_functionals_match_naive_oracle(seed, n):
    x = np.random.default_rng(seed).normal(size=n) * 3 + 1
    got = apply_functionals(LldFrameMatrix(x[None], ["x"])).values
    np.testing.assert_allclose(got, naive_functionals(x), rtol=1e-9, atol=1e-12)


def test_amplitude_covariance(rng):
    t = np.arange(SR) / SR
    x = np.sin(2 * np.pi * 300 * t) + 0.05 * rng.standard_normal(SR)
    a = extract_llds(AudioClip(x, SR)).values
    b = extract_llds(AudioClip(0.25 * x, SR)).values
    np.testing.assert_allclose(b[row("log_energy")], a[row("log_energy")] + np.log(0.25), atol=1e-9)
    for name in ("zcr", "f0", "spectral_centroid"):
        np.testing.assert_allclose(b[row(name)], a[row(name)], rtol=1e-9, atol=1e-9)


def test_extraction_deterministic(rng):
    clip = AudioClip(rng.standard_normal(12000), SR)
    v = extract_features(clip).values
    assert v.shape == (480,) and np.all(np.isfinite(v))
    np.testing.assert_array_equal(v, extract_features(clip).values)


def test_standardizer_examples(rng):
    v = rng.normal(size=480)
    np.testing.assert_array_equal(fit_standardizer([v]).apply(v), 0.0)
    s = fit_standardizer([v, -v])
    np.testing.assert_allclose(s.mean, 0.0, atol=1e-15)
    np.testing.assert_allclose(s.apply(v), v / np.abs(v), atol=1e-12)
    corpus = rng.normal(3.0, 5.0, size=(500, 480))
    z = fit_standardizer(list(corpus)).apply(corpus)
    assert np.abs(z.mean(axis=0)).max() < 1e-6 and np.abs(z.std(axis=0) - 1).max() < 1e-6
    with pytest.raises(FeatureError):
        fit_standardizer([])


def test_hcf1_and_csv(rng):
    vec = extract_features(AudioClip(rng.standard_normal(8000), SR))
    blob = features_to_bytes(vec)
    assert blob[:4] == b"HCF1" and len(blob) == 8 + 4 * 480
    np.testing.assert_array_equal(features_from_bytes(blob).values, vec.values.astype(np.float32))
    with pytest.raises(FeatureError):
        features_from_bytes(blob[:-1])
    lines = features_to_csv([("a", vec)]).splitlines()
    assert lines[0].split(",") == ["id"] + FEATURE_NAMES
    assert len(lines) == 2 and lines[1].startswith("a,")
