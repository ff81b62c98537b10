import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pcamil.data import FeatureBag
from pcamil.embed import EigenBasis, patient_embedding, read_eigenbasis, write_eigenbasis
from pcamil.errors import BadMagic, DegenerateBag, InvalidK


def dense_oracle(x: np.ndarray):
    """Eigenpairs of the d x d sample covariance, descending."""
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (len(x) - 1)
    w, v = np.linalg.eigh(cov)
    return w[::-1], v[:, ::-1].T


def random_bag(rng, n, d, scale=1.0):
    return FeatureBag("p", rng.normal(size=(n, d)) * scale)


def test_diagonal_example():
    bag = FeatureBag("p", np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0]]))
    e = patient_embedding(bag, k=2)
    assert e.k == 1
    np.testing.assert_allclose(e.vectors[0], [np.sqrt(0.5), np.sqrt(0.5)], atol=1e-12)
    assert e.eigenvalues[0] == pytest.approx(2.0, rel=1e-12)


def test_identical_patches_are_degenerate():
    with pytest.raises(DegenerateBag):
        patient_embedding(FeatureBag("p", np.tile([0.1, 0.7, 0.3], (5, 1))), k=3)


def test_invalid_k():
    with pytest.raises(InvalidK):
        patient_embedding(random_bag(np.random.default_rng(0), 4, 3), k=0)


def test_small_bag_caps_k():
    e = patient_embedding(random_bag(np.random.default_rng(0), 5, 100), k=90)
    assert e.k <= 4
    assert e.k_requested == 90


@pytest.mark.parametrize("seed", range(10))
def test_gram_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(3, 21)), int(rng.integers(21, 51))
    x = rng.normal(size=(n, d))
    e = patient_embedding(FeatureBag("p", x), k=d)
    w, v = dense_oracle(x)
    k = e.k
    assert k == n - 1
    np.testing.assert_allclose(e.eigenvalues, w[:k], rtol=1e-8)
    overlap = np.abs(np.sum(e.vectors * v[:k], axis=1))
    np.testing.assert_allclose(overlap, 1.0, atol=1e-8)


def test_direct_path_when_n_ge_d():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(30, 6))
    e = patient_embedding(FeatureBag("p", x), k=4)
    w, v = dense_oracle(x)
    np.testing.assert_allclose(e.eigenvalues, w[:4], rtol=1e-10)
    np.testing.assert_allclose(np.abs(np.sum(e.vectors * v[:4], axis=1)), 1.0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 20), st.integers(2, 40), st.integers(0, 2**32 - 1))
def test_orthonormal_sorted_and_signed(n, d, seed):
    e = patient_embedding(random_bag(np.random.default_rng(seed), n, d), k=d)
    np.testing.assert_allclose(e.vectors @ e.vectors.T, np.eye(e.k), atol=1e-8)
    assert np.all(np.diff(e.eigenvalues) <= 0)
    assert np.all(e.eigenvalues > 0)
    assert e.k <= min(n - 1, d)
    lead = e.vectors[np.arange(e.k), np.argmax(np.abs(e.vectors), axis=1)]
    assert np.all(lead > 0)


def test_rotation_leaves_eigenvalues():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(12, 30))
    q, _ = np.linalg.qr(rng.normal(size=(30, 30)))
    a = patient_embedding(FeatureBag("p", x), k=30)
    b = patient_embedding(FeatureBag("p", x @ q), k=30)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-8)


def test_sign_determinism():
    x = np.random.default_rng(8).normal(size=(9, 25))
    a = patient_embedding(FeatureBag("p", x), k=5)
    b = patient_embedding(FeatureBag("p", x.copy()), k=5)
    assert a.vectors.tobytes() == b.vectors.tobytes()


def test_first_direction_beats_random_directions():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(15, 40)) * np.linspace(3, 0.1, 40)
    e = patient_embedding(FeatureBag("p", x), k=3)
    xc = x - x.mean(axis=0)
    best = np.var(xc @ e.vectors[0], ddof=1)
    dirs = rng.normal(size=(100, 40))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    assert np.all(best >= np.var(xc @ dirs.T, axis=0, ddof=1))


def test_relative_rank_tolerance_survives_rescaling():
    x = np.random.default_rng(10).normal(size=(6, 20))
    assert patient_embedding(FeatureBag("p", x * 1e-6), k=20).k == patient_embedding(FeatureBag("p", x), k=20).k == 5


def test_truncate_and_scaling():
    e = patient_embedding(random_bag(np.random.default_rng(11), 8, 12), k=5)
    t = e.truncate(2)
    np.testing.assert_array_equal(t.vectors, e.vectors[:2])
    np.testing.assert_allclose(np.linalg.norm(e.instances("sqrt"), axis=1), np.sqrt(e.eigenvalues))


def test_cache_round_trip(tmp_path):
    e = patient_embedding(random_bag(np.random.default_rng(12), 8, 12), k=5)
    write_eigenbasis(e, tmp_path / "p.mile")
    raw = (tmp_path / "p.mile").read_bytes()
    assert raw[:4] == b"MILE"
    back = read_eigenbasis(tmp_path / "p.mile")
    np.testing.assert_array_equal(back.eigenvalues, e.eigenvalues)
    np.testing.assert_array_equal(back.vectors, e.vectors.astype(np.float32))


def test_cache_bad_magic(tmp_path):
    (tmp_path / "p.mile").write_bytes(b"MILB" + bytes(12))
    with pytest.raises(BadMagic):
        read_eigenbasis(tmp_path / "p.mile")
