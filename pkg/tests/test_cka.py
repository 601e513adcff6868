import json

import numpy as np
import pytest
from scipy.stats import ortho_group

from byols.cka import (
    ActivationMatrix,
    CkaError,
    centered_gram,
    flatten_activation,
    layer_activations,
    linear_cka,
    model_similarity,
    plot_matrix,
    probe_batch,
    write_matrix_csv,
    write_matrix_json,
)
from byols.encoders import EncoderConfig, build_encoder
from byols.frontend import AudioClip, NormalizationStats


def gram_oracle(x):
    n = len(x)
    k = [[sum(x[i][f] * x[j][f] for f in range(len(x[0]))) for j in range(n)] for i in range(n)]
    row = [sum(k[i][j] for j in range(n)) / n for i in range(n)]
    col = [sum(k[i][j] for i in range(n)) / n for j in range(n)]
    tot = sum(row) / n
    return np.array([[k[i][j] - row[i] - col[j] + tot for j in range(n)] for i in range(n)])


def test_centered_gram_loop_oracle(rng):
    for _ in range(10):
        x = rng.normal(size=(5, 3))
        np.testing.assert_allclose(centered_gram(x), gram_oracle(x.tolist()), rtol=0, atol=1e-12)


def test_centered_gram_equals_hkh(rng):
    x = rng.normal(size=(7, 4))
    h = np.eye(7) - np.ones((7, 7)) / 7
    np.testing.assert_allclose(centered_gram(x), h @ x @ x.T @ h, atol=1e-12)


def test_centered_gram_special_cases(rng):
    assert np.abs(centered_gram(np.tile(rng.normal(size=(1, 4)), (6, 1)))).max() < 1e-12
    x = rng.normal(size=(8, 3))
    x -= x.mean(axis=0)
    np.testing.assert_allclose(centered_gram(x), x @ x.T, atol=1e-9)


def test_self_similarity_and_invariances(rng):
    x = rng.normal(size=(40, 12))
    assert abs(linear_cka(x, x) - 1.0) <= 1e-9
    q = ortho_group.rvs(12, random_state=1)
    y = rng.normal(size=(40, 7))
    base = linear_cka(x, y)
    assert abs(linear_cka(x @ q, y) - base) <= 1e-9
    assert abs(linear_cka(-3.7 * x, y) - base) <= 1e-9
    assert abs(linear_cka(x, 1e3 * y) - base) <= 1e-9
    assert abs(linear_cka(x, 2.5 * x @ q) - 1.0) <= 1e-9


def test_symmetry_and_range(rng):
    for _ in range(20):
        x = rng.normal(size=(15, int(rng.integers(1, 9))))
        y = rng.normal(size=(15, int(rng.integers(1, 9))))
        assert abs(linear_cka(x, y) - linear_cka(y, x)) <= 1e-12
        assert -1e-9 <= linear_cka(x, y) <= 1 + 1e-9


def test_independent_data_below_permutation_null(rng):
    x = rng.normal(size=(100, 50))
    y = rng.normal(size=(100, 50))
    observed = linear_cka(x, y)
    null = [linear_cka(x, y[rng.permutation(100)]) for _ in range(200)]
    assert observed < np.percentile(null, 99)


def test_translation_invariance(rng):
    x = rng.normal(size=(20, 5))
    y = rng.normal(size=(20, 5))
    assert abs(linear_cka(x + 10.0, y) - linear_cka(x, y)) <= 1e-9


def test_errors(rng):
    with pytest.raises(CkaError, match="constant"):
        linear_cka(np.ones((5, 3)), rng.normal(size=(5, 3)))
    with pytest.raises(CkaError):
        linear_cka(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))
    with pytest.raises(CkaError):
        ActivationMatrix(np.zeros((1, 3)))
    with pytest.raises(CkaError):
        ActivationMatrix(np.array([[np.nan, 1.0], [0.0, 1.0]]))


def test_flatten_conventions():
    a = np.arange(2 * 3 * 4 * 5, dtype=float).reshape(2, 3, 4, 5)
    np.testing.assert_allclose(flatten_activation(a), a.mean(axis=-1).reshape(2, -1))
    b = np.arange(2 * 6 * 4, dtype=float).reshape(2, 6, 4)
    np.testing.assert_allclose(flatten_activation(b), b.mean(axis=1))
    assert flatten_activation(np.ones((3, 7))).shape == (3, 7)


# --- model level ---------------------------------------------------------------


@pytest.fixture(scope="module")
def probe():
    rng = np.random.default_rng(0)
    clips = [AudioClip(0.1 * rng.standard_normal(8000) + np.sin(np.arange(8000) * (0.05 + 0.01 * i)), 16000) for i in range(34)]
    return probe_batch(clips, NormalizationStats(-3.0, 3.0))


def test_model_self_similarity_diagonal(probe):
    enc = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=0))
    m = model_similarity(enc, enc, probe)
    assert m.layer_names_a == m.layer_names_b and len(m.layer_names_a) >= 3
    np.testing.assert_allclose(np.diag(m.values), 1.0, atol=1e-6)
    assert np.all((m.values >= 0) & (m.values <= 1))


def test_model_similarity_probe_order_invariant(probe):
    a = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=0))
    b = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=1))
    perm = np.random.default_rng(1).permutation(len(probe))
    m1 = model_similarity(a, b, probe)
    m2 = model_similarity(a, b, probe[perm])
    np.testing.assert_allclose(m1.values, m2.values, atol=1e-9)
    m3 = model_similarity(a, b, probe)
    np.testing.assert_allclose(m1.values, m3.values, rtol=0, atol=1e-9)


def test_cross_architecture_matrix_shape(probe):
    a = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=0))
    b = build_encoder(EncoderConfig("Clstm", 0.0625, seed=0))
    m = model_similarity(a, b, probe)
    assert m.values.shape == (len(layer_activations(a, probe[:2])), len(layer_activations(b, probe[:2])))


def test_model_similarity_errors(probe):
    enc = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=0))
    with pytest.raises(CkaError, match="at least"):
        model_similarity(enc, enc, probe[:10])
    with pytest.raises(CkaError, match="mismatched"):
        model_similarity(enc, enc, probe, probe[:, :, :40])
    with pytest.raises(CkaError, match="mismatched"):
        probe_batch([AudioClip(np.zeros(8000), 16000), AudioClip(np.zeros(9600), 16000)], NormalizationStats(0.0, 1.0))
    assert probe_batch([AudioClip(np.zeros(8000), 16000), AudioClip(np.zeros(9600), 16000)], NormalizationStats(0.0, 1.0), frames=96).shape == (2, 64, 96)


def test_matrix_outputs(tmp_path, probe):
    enc = build_encoder(EncoderConfig("DefaultCnn", 0.0625, seed=0))
    m = model_similarity(enc, enc, probe)
    write_matrix_json(tmp_path / "m.json", m)
    d = json.loads((tmp_path / "m.json").read_text())
    assert d["layer_names_a"] == m.layer_names_a and np.allclose(d["values"], m.values)
    write_matrix_csv(tmp_path / "m.csv", m)
    rows = (tmp_path / "m.csv").read_text().splitlines()
    assert len(rows) == 1 + len(m.layer_names_a)
    plot_matrix(tmp_path / "m.png", m)
    assert (tmp_path / "m.png").read_bytes()[:4] == b"\x89PNG"
