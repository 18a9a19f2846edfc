"""Eigenbasis estimation from clean images and masked projection.

The defense's mathematical core: fit an orthonormal eigenbasis of the clean
image covariance (via the Gram shortcut when samples are fewer than pixels),
then reconstruct an input from a selected subset of components around the
clean mean. Selection is a binary mask over components; classical top-K
selection is a special case of the same projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pinact import linalg

BASIS_MAGIC = b"IMPB"


@dataclass
class EigenBasis:
    """Mean image plus N orthonormal covariance eigenvectors (descending)."""

    mean: np.ndarray
    eigenvectors: np.ndarray
    eigenvalues: np.ndarray
    fit_hash: bytes = b"\x00" * 32

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.eigenvectors = np.asarray(self.eigenvectors, dtype=np.float64)
        self.eigenvalues = np.asarray(self.eigenvalues, dtype=np.float64).reshape(-1)
        d, n = self.eigenvectors.shape
        if self.mean.size != d or self.eigenvalues.size != n:
            raise ValueError("basis field shapes disagree")
        if np.any(np.diff(self.eigenvalues) > 1e-12) or np.any(
            self.eigenvalues < -1e-10
        ):
            raise ValueError("eigenvalues must be non-negative and descending")
        gram = self.eigenvectors.T @ self.eigenvectors
        if np.max(np.abs(gram - np.eye(n))) > 1e-8:
            raise ValueError("eigenvector columns are not orthonormal within 1e-8")

    @property
    def dim(self):
        return self.eigenvectors.shape[0]

    @property
    def n_components(self):
        return self.eigenvectors.shape[1]


def fit(images, n_components):
    """Fit an EigenBasis from clean images (rows)."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least two images to fit a basis")
    n, d = x.shape
    if n_components < 1 or n_components > min(d, n):
        raise ValueError(
            f"n_components={n_components} must lie in [1, min(D={d}, n={n})]"
        )
    mean = x.mean(axis=0)
    centered = x - mean
    if not np.any(centered):
        raise ValueError("all images identical: covariance is zero, nothing to fit")
    if n < d:
        values, vectors = linalg.gram_eigenbasis(centered)
    else:
        values, vectors = linalg.sym_eigendecompose(centered.T @ centered / n)
        keep = values > max(values[0], 0.0) * 1e-12
        values, vectors = values[keep], vectors[:, keep]
    if values.size < n_components:
        raise ValueError(
            f"sample covariance rank {values.size} is below the requested "
            f"{n_components} components"
        )
    return EigenBasis(
        mean=mean,
        eigenvectors=vectors[:, :n_components],
        eigenvalues=values[:n_components],
        fit_hash=linalg.content_hash(x),
    )


def coefficients(basis, v):
    """Component coordinates of a deviation vector: B^T v."""
    return basis.eigenvectors.T @ v


def project_raw(basis, mask, x):
    """Masked reconstruction around the mean, without clamping."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    mask = np.asarray(mask, dtype=np.float64).reshape(-1)
    if mask.size != basis.n_components:
        raise ValueError("selection mask length must equal the component count")
    if x.size != basis.dim:
        raise ValueError("image dimension does not match the basis")
    coords = coefficients(basis, x - basis.mean)
    return basis.eigenvectors @ (mask * coords) + basis.mean


def project(basis, mask, x):
    """Masked reconstruction, clamped to valid image range."""
    return np.clip(project_raw(basis, mask, x), 0.0, 1.0)


def top_k_mask(basis, k):
    if k < 0 or k > basis.n_components:
        raise ValueError(f"k={k} out of range [0, {basis.n_components}]")
    mask = np.zeros(basis.n_components)
    mask[:k] = 1.0
    return mask


def classical_pca_defend(basis, k, x):
    """Fixed top-K reconstruction: the non-learned baseline defense."""
    return project(basis, top_k_mask(basis, k), x)


def save_basis(path, basis):
    linalg.write_container(
        path,
        BASIS_MAGIC,
        basis.fit_hash,
        [basis.mean, basis.eigenvalues, basis.eigenvectors],
    )


def load_basis(path):
    fit_hash, arrays = linalg.read_container(path, BASIS_MAGIC)
    mean, values, vectors = arrays
    return EigenBasis(
        mean=mean.reshape(-1),
        eigenvectors=vectors,
        eigenvalues=values.reshape(-1),
        fit_hash=fit_hash,
    )


def basis_hash(basis):
    return linalg.content_hash(
        basis.mean, basis.eigenvalues, basis.eigenvectors
    ).hex()
