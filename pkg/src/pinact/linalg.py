"""Dense float64 linear algebra and seeded randomness.

Everything downstream (PCA bases, network training, attacks) builds on the
three primitives here: a cyclic-Jacobi symmetric eigendecomposition, the
Gram/snapshot shortcut for covariance eigenbases when samples are fewer than
pixels, and counter-based random streams that reproduce bit-for-bit from a
(seed, stream) pair.
"""

from __future__ import annotations

import hashlib
import struct
import warnings

import numpy as np

ARRAY_MAGIC = b"IMSP"
FORMAT_VERSION = 1
DEFAULT_DIM_CAP = 4096


class EigenConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap; carries the residual off-norm."""

    def __init__(self, residual, sweeps):
        super().__init__(
            f"eigendecomposition did not converge after {sweeps} sweeps "
            f"(off-diagonal residual {residual:.3e})"
        )
        self.residual = residual
        self.sweeps = sweeps


def ensure_finite(arr, name="array"):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def _sign_fix(vectors):
    """Make each column's largest-magnitude component positive (in place)."""
    if vectors.size == 0:
        return vectors
    idx = np.argmax(np.abs(vectors), axis=0)
    flip = vectors[idx, np.arange(vectors.shape[1])] < 0
    vectors[:, flip] *= -1.0
    return vectors


def sym_eigendecompose(a, tol=1e-10, dim_cap=DEFAULT_DIM_CAP, max_sweeps=64):
    """Eigendecompose a symmetric matrix with cyclic Jacobi rotations.

    Returns (eigenvalues descending, eigenvectors as orthonormal columns),
    so that a ~= V @ diag(w) @ V.T. Rejects matrices that are not symmetric
    within `tol` (relative to the largest entry) and raises
    EigenConvergenceError if the off-diagonal mass does not vanish.
    """
    a = ensure_finite(a, "matrix")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n > dim_cap:
        raise ValueError(f"dimension {n} exceeds cap {dim_cap}")
    scale = max(1.0, np.max(np.abs(a)))
    if np.max(np.abs(a - a.T)) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")

    work = 0.5 * (a + a.T)  # symmetrize roundoff before rotating
    vecs = np.eye(n)
    if n == 1:
        return work.diagonal().copy(), vecs

    frob = np.linalg.norm(work)
    stop = max(1e-14 * frob, 1e-300)

    def _off_norm():
        # direct sum over off-diagonal entries; the sum(A^2)-sum(diag^2) form
        # has a cancellation floor around sqrt(eps)*||A|| and never reaches stop
        od = work.copy()
        np.fill_diagonal(od, 0.0)
        return np.linalg.norm(od)

    for _ in range(max_sweeps):
        off = _off_norm()
        if off <= stop:
            break
        # rotations below this threshold cannot help this sweep
        skip = off / (n * n)
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = work[p, q]
                if abs(apq) <= skip * 1e-3:
                    continue
                theta = (work[q, q] - work[p, p]) / (2.0 * apq)
                if abs(theta) > 1e100:  # theta**2 would overflow
                    t = 0.5 / theta
                elif theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                col_p = work[:, p].copy()
                col_q = work[:, q].copy()
                work[:, p] = c * col_p - s * col_q
                work[:, q] = s * col_p + c * col_q
                row_p = work[p, :].copy()
                row_q = work[q, :].copy()
                work[p, :] = c * row_p - s * row_q
                work[q, :] = s * row_p + c * row_q
                work[p, q] = 0.0
                work[q, p] = 0.0
                vcol_p = vecs[:, p].copy()
                vcol_q = vecs[:, q].copy()
                vecs[:, p] = c * vcol_p - s * vcol_q
                vecs[:, q] = s * vcol_p + c * vcol_q
    else:
        off = _off_norm()
        if off > stop:
            raise EigenConvergenceError(off, max_sweeps)

    eigenvalues = work.diagonal().copy()
    order = np.argsort(-eigenvalues, kind="stable")
    eigenvalues = eigenvalues[order]
    vecs = vecs[:, order]
    _sign_fix(vecs)
    return eigenvalues, vecs


def gram_eigenbasis(x_centered, rel_tol=1e-12):
    """Nonzero eigenpairs of the covariance (1/n) X^T X via the n x n Gram matrix.

    `x_centered` is n x D with n < D and rows already mean-centered. Columns of
    the returned eigenvector matrix are unit-norm; eigenvalues descend. An
    all-zero input yields an empty basis with a warning.
    """
    x = ensure_finite(x_centered, "centered samples")
    if x.ndim != 2:
        raise ValueError("expected a 2-D sample matrix")
    n, d = x.shape
    if n >= d:
        raise ValueError(f"gram trick needs fewer samples than dims (n={n}, D={d})")
    if not np.any(x):
        warnings.warn("all-zero sample matrix: returning an empty eigenbasis")
        return np.zeros(0), np.zeros((d, 0))

    gram = (x @ x.T) / n
    gram_vals, gram_vecs = sym_eigendecompose(gram)
    keep = gram_vals > max(gram_vals[0], 0.0) * rel_tol
    gram_vals = gram_vals[keep]
    mapped = x.T @ gram_vecs[:, keep]
    norms = np.linalg.norm(mapped, axis=0)
    mapped /= norms
    _sign_fix(mapped)
    return gram_vals, mapped


# --- seeded randomness ------------------------------------------------------

_U64 = (1 << 64) - 1


class SeededRng:
    """Counter-based random stream: identical (seed, stream) replays exactly.

    Distinct stream ids give statistically independent sequences; derive()
    hashes a substream label into a fresh stream so per-image / per-worker
    streams never collide with the parent.
    """

    algorithm = "philox4x64"

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _U64
        self.stream = int(stream) & _U64
        self._gen = np.random.Generator(
            np.random.Philox(key=np.array([self.seed, self.stream], dtype=np.uint64))
        )

    def derive(self, substream):
        digest = hashlib.blake2b(
            f"{self.stream}/{substream}".encode(), digest_size=8
        ).digest()
        return SeededRng(self.seed, int.from_bytes(digest, "little"))

    def standard_normal(self, n):
        return self._gen.standard_normal(int(n))

    def uniform(self, n):
        return self._gen.random(int(n))

    def integers(self, low, high, n=None):
        return self._gen.integers(low, high, size=n)

    def shuffle(self, items):
        self._gen.shuffle(items)

    def choice(self, n, size, replace=True):
        return self._gen.choice(n, size=size, replace=replace)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


def gaussian_draw(rng, n):
    """n i.i.d. standard normal draws from the stream."""
    if n < 1:
        raise ValueError("need at least one draw")
    return rng.standard_normal(n)


# --- binary array container --------------------------------------------------

def _pack_array(arr):
    arr = ensure_finite(arr, "array")
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError("container stores 1-D or 2-D arrays only")
    rows, cols = arr.shape
    header = struct.pack("<II", rows, cols)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _unpack_array(buf, offset, where):
    if offset + 8 > len(buf):
        raise ValueError(f"truncated record header at byte {offset} in {where}")
    rows, cols = struct.unpack_from("<II", buf, offset)
    offset += 8
    nbytes = rows * cols * 8
    if offset + nbytes > len(buf):
        raise ValueError(f"truncated payload at byte {offset} in {where}")
    arr = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset)
    return arr.reshape(rows, cols).astype(np.float64), offset + nbytes


def write_array(path, arr):
    """Single-array file: magic, format version, rows, cols, row-major f64."""
    payload = _pack_array(arr)
    with open(path, "wb") as fh:
        fh.write(ARRAY_MAGIC + struct.pack("<I", FORMAT_VERSION) + payload)


def read_array(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != ARRAY_MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r}")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    arr, end = _unpack_array(buf, 8, str(path))
    if end != len(buf):
        raise ValueError(f"{path}: {len(buf) - end} trailing bytes")
    return arr


def write_container(path, magic, header_hash, arrays):
    """Multi-record container: magic, version, 32-byte hash, count, records."""
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    if len(header_hash) != 32:
        raise ValueError("header hash must be 32 bytes")
    blob = magic + struct.pack("<I", FORMAT_VERSION) + header_hash
    blob += struct.pack("<I", len(arrays))
    for arr in arrays:
        blob += _pack_array(arr)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_container(path, magic):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != magic:
        raise ValueError(f"{path}: bad magic {buf[:4]!r} (want {magic!r})")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    header_hash = buf[8:40]
    (count,) = struct.unpack_from("<I", buf, 40)
    offset = 44
    arrays = []
    for _ in range(count):
        arr, offset = _unpack_array(buf, offset, str(path))
        arrays.append(arr)
    if offset != len(buf):
        raise ValueError(f"{path}: {len(buf) - offset} trailing bytes")
    return header_hash, arrays


def content_hash(*chunks):
    """sha256 over byte chunks; the provenance hash used in file headers."""
    h = hashlib.sha256()
    for chunk in chunks:
        if isinstance(chunk, np.ndarray):
            h.update(np.ascontiguousarray(chunk, dtype="<f8").tobytes())
        elif isinstance(chunk, bytes):
            h.update(chunk)
        else:
            h.update(str(chunk).encode())
    return h.digest()
