import numpy as np
import pytest

from pinact import pca
from pinact.linalg import SeededRng


def random_basis(d, n, seed=0, with_mean=True):
    rng = np.random.default_rng(seed)
    q = np.linalg.qr(rng.standard_normal((d, d)))[0][:, :n]
    mean = rng.random(d) * 0.2 if with_mean else np.zeros(d)
    return pca.EigenBasis(mean, q, np.sort(rng.random(n))[::-1])


def test_fit_rank_one_pair():
    v = np.array([0.3, 0.0, 0.4, 0.0])
    base = np.full(4, 0.5)
    basis = pca.fit(np.stack([base + v, base - v]), 1)
    unit = v / np.linalg.norm(v)
    assert min(
        np.linalg.norm(basis.eigenvectors[:, 0] - unit),
        np.linalg.norm(basis.eigenvectors[:, 0] + unit),
    ) < 1e-12
    assert np.allclose(basis.mean, base)


def test_fit_matches_direct_covariance():
    rng = SeededRng(11, 0)
    imgs = rng.uniform(20 * 64).reshape(20, 64)
    basis = pca.fit(imgs, 10)
    centered = imgs - imgs.mean(axis=0)
    ref_vals, ref_vecs = np.linalg.eigh(centered.T @ centered / 20)
    ref_vals, ref_vecs = ref_vals[::-1], ref_vecs[:, ::-1]
    assert np.max(np.abs(basis.eigenvalues - ref_vals[:10])) < 1e-8
    for j in range(10):
        assert abs(float(basis.eigenvectors[:, j] @ ref_vecs[:, j])) > 1 - 1e-8


def test_fit_rejects_too_many_components():
    imgs = SeededRng(0, 0).uniform(5 * 16).reshape(5, 16)
    with pytest.raises(ValueError, match="n_components"):
        pca.fit(imgs, 6)


def test_fit_rejects_identical_images():
    imgs = np.tile(np.linspace(0, 1, 16), (4, 1))
    with pytest.raises(ValueError, match="identical"):
        pca.fit(imgs, 1)


def test_project_empty_mask_gives_mean():
    basis = random_basis(12, 4, seed=1)
    x = np.random.default_rng(2).random(12)
    out = pca.project(basis, np.zeros(4), x)
    assert np.allclose(out, np.clip(basis.mean, 0, 1))


def test_project_complete_basis_identity():
    imgs = SeededRng(3, 0).uniform(40 * 16).reshape(40, 16)
    basis = pca.fit(imgs, 16)
    x = SeededRng(3, 1).uniform(16)
    out = pca.project(basis, np.ones(16), x)
    assert np.max(np.abs(out - x)) < 1e-6


def test_project_coordinate_toy():
    basis = pca.EigenBasis(
        np.zeros(4), np.eye(4)[:, :2], np.array([2.0, 1.0])
    )
    out = pca.project_raw(basis, np.array([1.0, 0.0]), np.array([3.0, 4.0, 5.0, 6.0]))
    assert np.allclose(out, [3.0, 0.0, 0.0, 0.0])


@pytest.mark.parametrize("seed", range(10))
def test_projection_laws(seed):
    rng = np.random.default_rng(seed)
    basis = random_basis(20, 6, seed=seed)
    mask = (rng.random(6) < 0.5).astype(float)
    x = rng.random(20)
    once = pca.project_raw(basis, mask, x)
    twice = pca.project_raw(basis, mask, once)
    assert np.max(np.abs(once - twice)) <= 1e-8

    # noise orthogonal to the selected span is annihilated
    span = basis.eigenvectors[:, mask.astype(bool)]
    noise = rng.standard_normal(20)
    if span.shape[1]:
        noise = noise - span @ (span.T @ noise)
    perturbed = pca.project_raw(basis, mask, x + noise)
    clean = pca.project_raw(basis, mask, x)
    assert np.max(np.abs(perturbed - clean)) <= 1e-8

    # linearity of the centered map
    u, v = rng.standard_normal(20), rng.standard_normal(20)
    a, b = rng.standard_normal(2)
    left = pca.project_raw(basis, mask, basis.mean + a * u + b * v) - basis.mean
    right = a * (
        pca.project_raw(basis, mask, basis.mean + u) - basis.mean
    ) + b * (pca.project_raw(basis, mask, basis.mean + v) - basis.mean)
    assert np.max(np.abs(left - right)) <= 1e-8


def test_reconstruction_error_monotone_in_k():
    imgs = SeededRng(7, 0).uniform(30 * 36).reshape(30, 36)
    basis = pca.fit(imgs, 20)
    errors = []
    for k in range(0, 21, 4):
        recon = [pca.project_raw(basis, pca.top_k_mask(basis, k), x) for x in imgs]
        errors.append(float(np.mean((np.stack(recon) - imgs) ** 2)))
    assert all(e2 <= e1 + 1e-12 for e1, e2 in zip(errors, errors[1:]))


def test_classical_defend_edges():
    imgs = SeededRng(9, 0).uniform(40 * 16).reshape(40, 16)
    basis = pca.fit(imgs, 16)
    x = SeededRng(9, 1).uniform(16)
    assert np.max(np.abs(pca.classical_pca_defend(basis, 16, x) - x)) < 1e-6
    assert np.allclose(
        pca.classical_pca_defend(basis, 0, x), np.clip(basis.mean, 0, 1)
    )
    with pytest.raises(ValueError):
        pca.top_k_mask(basis, 17)


def test_basis_validation():
    with pytest.raises(ValueError, match="orthonormal"):
        pca.EigenBasis(np.zeros(4), np.ones((4, 2)), np.array([2.0, 1.0]))
    with pytest.raises(ValueError, match="descending"):
        pca.EigenBasis(np.zeros(4), np.eye(4)[:, :2], np.array([1.0, 2.0]))


def test_basis_file_round_trip(tmp_path):
    imgs = SeededRng(5, 0).uniform(30 * 25).reshape(30, 25)
    basis = pca.fit(imgs, 8)
    path = tmp_path / "basis.impb"
    pca.save_basis(path, basis)
    back = pca.load_basis(path)
    assert np.array_equal(back.mean, basis.mean)
    assert np.array_equal(back.eigenvectors, basis.eigenvectors)
    assert np.array_equal(back.eigenvalues, basis.eigenvalues)
    assert back.fit_hash == basis.fit_hash
