"""Symmetric PSD linear algebra: cyclic Jacobi eigendecomposition and the
matrix square root used by the Frechet distance."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 64):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with a ≈ V diag(w) V^T. Adequate
    for the <=64x64 covariance matrices this package produces.
    """
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    norm = np.linalg.norm(a)
    if norm == 0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2) * 2)
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    return np.diag(a).copy(), v


def sqrtm_psd(m, sym_tol: float = 1e-8, eig_floor: float = -1e-10):
    """Principal square root of a symmetric PSD matrix.

    Eigenvalues within `eig_floor` of zero are clamped to zero; anything
    more negative, or asymmetry beyond `sym_tol` (relative), is rejected.
    """
    was_tensor = isinstance(m, Tensor)
    a = np.asarray(m.data if was_tensor else m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite entries in matrix")
    scale = max(1.0, np.abs(a).max())
    if np.abs(a - a.T).max() > sym_tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    a = 0.5 * (a + a.T)
    w, v = jacobi_eigh(a)
    if w.min() < eig_floor * scale:
        raise ValueError(f"matrix is not PSD: min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    s = (v * np.sqrt(w)) @ v.T
    s = 0.5 * (s + s.T)
    return Tensor(s, dtype=np.float64) if was_tensor else s
