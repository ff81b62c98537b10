"""Per-patient eigenvector embedding of a patch-feature bag."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from pcamil.data import FeatureBag
from pcamil.errors import (
    BadMagic,
    DataError,
    DegenerateBag,
    InvalidK,
    MissingFile,
    TruncatedPayload,
    VersionMismatch,
)

EIGEN_MAGIC = b"MILE"
EIGEN_VERSION = 1
_EIGEN_HEADER = struct.Struct("<4sIII")
DEFAULT_EPS_RANK = 1e-10


@dataclass(frozen=True)
class EigenBasis:
    """Top principal directions of one patient's centered patch features.

    ``vectors`` holds one unit-norm eigenvector per row, ordered by
    non-increasing ``eigenvalues``.
    """

    patient_id: str
    vectors: np.ndarray
    eigenvalues: np.ndarray
    k_requested: int

    @property
    def k(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def truncate(self, k: int) -> "EigenBasis":
        """Keep the leading ``k`` pairs (the result of embedding with a smaller k)."""
        if k < 1:
            raise InvalidK(f"k must be >= 1, got {k}")
        return EigenBasis(self.patient_id, self.vectors[:k], self.eigenvalues[:k], k)

    def instances(self, scaling: str = "none") -> np.ndarray:
        """MIL instances: unit eigenvectors, or rows scaled by sqrt(eigenvalue)."""
        if scaling == "none":
            return self.vectors
        if scaling == "sqrt":
            return self.vectors * np.sqrt(self.eigenvalues)[:, None]
        raise ValueError(f"unknown eigenvector scaling {scaling!r}")


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    # argmax returns the first index on ties
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def patient_embedding(bag: FeatureBag, k: int, eps_rank: float | None = None) -> EigenBasis:
    """Top-``k`` eigenpairs of the sample covariance of ``bag``.

    Rows are centered by the patient's patch mean and the covariance uses an
    ``N - 1`` denominator. When ``N < d`` the ``N x N`` Gram matrix is
    decomposed instead of the ``d x d`` covariance.

    Eigenpairs with eigenvalue ``<= eps_rank`` are dropped, so fewer than
    ``k`` rows come back for small bags (at most ``N - 1`` after centering).
    ``eps_rank`` defaults to ``1e-10`` times the largest eigenvalue.
    """
    if k < 1:
        raise InvalidK(f"k must be >= 1, got {k}")
    x = np.asarray(bag.features, dtype=np.float64)
    n, d = x.shape
    if np.all(x == x[0]):
        raise DegenerateBag(f"bag {bag.patient_id}: all patches identical")
    xc = x - x.mean(axis=0)

    if n < d:
        gram = (xc @ xc.T) / (n - 1)
        evals, u = np.linalg.eigh(gram)
        order = np.argsort(evals)[::-1]
        evals, u = evals[order], u[:, order]
        keep = _surviving(evals, eps_rank)
        evals, u = evals[keep], u[:, keep]
        vecs = (xc.T @ u).T
        vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    else:
        cov = (xc.T @ xc) / (n - 1)
        evals, v = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, v = evals[order], v[:, order]
        keep = _surviving(evals, eps_rank)
        evals, vecs = evals[keep], v[:, keep].T

    if len(evals) == 0:
        raise DegenerateBag(f"bag {bag.patient_id}: no eigenvalue above rank tolerance")
    evals, vecs = evals[:k], vecs[:k]
    return EigenBasis(bag.patient_id, np.ascontiguousarray(_fix_signs(vecs)), evals.copy(), k)


def _surviving(evals_desc: np.ndarray, eps_rank: float | None) -> np.ndarray:
    top = evals_desc[0]
    if top <= 0:
        return np.zeros(len(evals_desc), dtype=bool)
    tol = DEFAULT_EPS_RANK * top if eps_rank is None else eps_rank
    return evals_desc > tol


def embed_all(bags, k: int, eps_rank: float | None = None) -> dict[str, EigenBasis]:
    return {pid: patient_embedding(bag, k, eps_rank) for pid, bag in bags.items()}


# ---------------------------------------------------------------- cache files


def write_eigenbasis(basis: EigenBasis, path) -> None:
    k, d = basis.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_EIGEN_HEADER.pack(EIGEN_MAGIC, EIGEN_VERSION, k, d))
        fh.write(np.ascontiguousarray(basis.eigenvalues, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(basis.vectors, dtype="<f4").tobytes())


def read_eigenbasis(path, patient_id: str | None = None) -> EigenBasis:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"eigenbasis file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _EIGEN_HEADER.size:
        raise TruncatedPayload(f"{path}: file shorter than header")
    magic, version, k, d = _EIGEN_HEADER.unpack_from(raw)
    if magic != EIGEN_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != EIGEN_VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {EIGEN_VERSION}")
    off = _EIGEN_HEADER.size
    if len(raw) < off + 8 * k + 4 * k * d:
        raise TruncatedPayload(f"{path}: payload shorter than declared {k}x{d}")
    evals = np.frombuffer(raw, dtype="<f8", count=k, offset=off).astype(np.float64)
    vecs = np.frombuffer(raw, dtype="<f4", count=k * d, offset=off + 8 * k)
    vecs = vecs.reshape(k, d).astype(np.float64)
    if not (np.all(np.isfinite(evals)) and np.all(np.isfinite(vecs))):
        raise DataError(f"{path}: non-finite entries")
    return EigenBasis(patient_id if patient_id is not None else path.stem, vecs, evals, k)
