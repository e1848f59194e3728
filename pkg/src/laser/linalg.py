"""Dense linear-algebra kernels used by the subspace tracker.

Everything operates on 2-D float64 numpy arrays.  Bases are stored as
``D x k`` matrices with orthonormal columns; activation batches are ``B x D``
with one sample per row.
"""

from __future__ import annotations

import numpy as np

from .errors import AllColumnsDegenerate, NotOrthonormal, RankTooLarge

DROP_TOL = 1e-10


def as_matrix(X, name: str = "X") -> np.ndarray:
    """Validate and return ``X`` as a finite 2-D float64 array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D matrix, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite entries")
    return X


def frobenius_norm(X) -> float:
    X = np.asarray(X, dtype=np.float64)
    return float(np.sqrt(np.sum(X * X)))


def orthonormality_error(Q: np.ndarray) -> float:
    """Max-abs deviation of ``Q^T Q`` from the identity."""
    k = Q.shape[1]
    return float(np.max(np.abs(Q.T @ Q - np.eye(k)))) if k else 0.0


def _gram_schmidt2(M: np.ndarray, ref: float, drop_tol: float, basis=None) -> np.ndarray:
    # Classical Gram-Schmidt with a full second re-orthogonalization pass
    # (CGS2); columns whose residual falls below drop_tol * ref are skipped.
    D = M.shape[0]
    out = np.empty((D, M.shape[1]))
    fixed = basis if basis is not None else np.empty((D, 0))
    n = 0
    for j in range(M.shape[1]):
        v = M[:, j].copy()
        for _ in range(2):
            if fixed.shape[1]:
                v -= fixed @ (fixed.T @ v)
            if n:
                v -= out[:, :n] @ (out[:, :n].T @ v)
        nv = np.linalg.norm(v)
        if nv <= drop_tol * ref:
            continue
        out[:, n] = v / nv
        n += 1
    return out[:, :n]


def orthonormalize(M, drop_tol: float = DROP_TOL) -> np.ndarray:
    """Orthonormal basis for the column span of ``M``.

    Columns whose residual against the preceding columns is below
    ``drop_tol`` times the largest column norm are dropped, so the result
    may have fewer columns than ``M``.

    Raises:
        AllColumnsDegenerate: if every column is dropped.
    """
    M = as_matrix(M, "M")
    ref = float(np.max(np.linalg.norm(M, axis=0)))
    if ref == 0.0:
        raise AllColumnsDegenerate("all columns are zero")
    if M.shape[1] <= M.shape[0]:
        # Householder QR; the diagonal of R is the Gram-Schmidt residual norm.
        Q, R = np.linalg.qr(M)
        if np.all(np.abs(np.diag(R)) > drop_tol * ref):
            return Q
    Q = _gram_schmidt2(M, ref, drop_tol)
    if Q.shape[1] == 0:
        raise AllColumnsDegenerate("every column fell below the drop tolerance")
    return Q


def extend_basis(Q: np.ndarray, V: np.ndarray, refs=None, drop_tol: float = DROP_TOL) -> np.ndarray:
    """Columns of ``V`` orthonormalized against ``Q`` and each other.

    Returns only the new columns.  A column is dropped when its residual is
    below ``drop_tol * refs[j]`` (default: the column's own norm).
    """
    keep = []
    for j in range(V.shape[1]):
        v = V[:, j]
        ref = np.linalg.norm(v) if refs is None else refs[j]
        if ref == 0.0:
            continue
        basis = np.hstack([Q] + keep) if keep else Q
        w = _gram_schmidt2(v[:, None], ref, drop_tol, basis=basis)
        if w.shape[1]:
            keep.append(w)
    if not keep:
        return np.empty((Q.shape[0], 0))
    return np.hstack(keep)


def _fix_signs(V: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(V), axis=0)
    signs = np.sign(V[idx, np.arange(V.shape[1])])
    signs[signs == 0] = 1.0
    return V * signs


def truncated_svd(X, k: int) -> np.ndarray:
    """Top-``k`` right singular vectors of ``X`` as a ``D x k`` basis.

    Uses a symmetric eigendecomposition of the smaller Gram matrix.  Columns
    are ordered by descending singular value and signed so that the
    largest-magnitude entry of each column is positive.
    """
    X = as_matrix(X)
    B, D = X.shape
    if not 1 <= k <= min(B, D):
        raise RankTooLarge(f"rank {k} outside [1, {min(B, D)}] for a {B}x{D} matrix")
    if D <= B:
        w, V = np.linalg.eigh(X.T @ X)
        V = V[:, ::-1][:, :k]
    else:
        w, U = np.linalg.eigh(X @ X.T)
        w, U = w[::-1][:k], U[:, ::-1][:, :k]
        sig = np.sqrt(np.clip(w, 0.0, None))
        good = sig > DROP_TOL * max(sig[0], np.finfo(float).tiny)
        V = (X.T @ U[:, good]) / sig[good]
        if V.shape[1] < k:
            # Rank-deficient batch: pad with an arbitrary orthonormal complement.
            V = np.hstack([V, extend_basis(V, np.eye(D))[:, : k - V.shape[1]]])
        # Gram route loses orthogonality as sigma shrinks; one QR pass restores it.
        Qr, R = np.linalg.qr(V)
        V = Qr * np.sign(np.where(np.diag(R) == 0, 1.0, np.diag(R)))
    return _fix_signs(V)


def principal_angles(Q1, Q2, tol: float = 1e-6) -> np.ndarray:
    """Principal angles (radians, ascending) between two orthonormal bases."""
    Q1 = as_matrix(Q1, "Q1")
    Q2 = as_matrix(Q2, "Q2")
    for name, Q in (("Q1", Q1), ("Q2", Q2)):
        if orthonormality_error(Q) > tol:
            raise NotOrthonormal(f"{name} is not orthonormal within {tol}")
    if Q1.shape[0] != Q2.shape[0]:
        raise ValueError("bases live in different ambient dimensions")
    if Q1.shape[1] < Q2.shape[1]:
        Q1, Q2 = Q2, Q1
    # Q2 is the smaller basis. Cosines are accurate for large angles, sines
    # (from the residual of Q2 off span(Q1)) for small ones.
    cos = np.clip(np.linalg.svd(Q1.T @ Q2, compute_uv=False), 0.0, 1.0)
    angles = np.arccos(cos)
    resid = Q2 - Q1 @ (Q1.T @ Q2)
    sin = np.clip(np.linalg.svd(resid, compute_uv=False), 0.0, 1.0)[::-1]
    small = np.arcsin(sin[: len(cos)])
    angles = np.where(cos**2 > 0.5, small, angles)
    return np.sort(angles)
