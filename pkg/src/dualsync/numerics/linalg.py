"""Symmetric eigendecomposition by cyclic Jacobi rotations and the PSD square root."""

from __future__ import annotations

import numpy as np

from dualsync.errors import DimensionError, NumericalError


def _as_square(m) -> np.ndarray:
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise NumericalError("non-finite entry in matrix")
    return a


def jacobi_eigh(m, tol: float = 1e-15, max_sweeps: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and orthonormal eigenvectors of a symmetric matrix.

    The input is symmetrised as (m + m.T) / 2. Sweeps stop once the
    off-diagonal Frobenius norm falls below ``tol`` times the full norm.
    """
    a = _as_square(m)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if n == 1 or scale == 0.0:
        return np.diag(a).copy(), v

    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                tau = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(tau) > 1e150:
                    t = 0.5 / tau
                else:
                    sign = 1.0 if tau >= 0.0 else -1.0
                    t = sign / (abs(tau) + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                col_p = a[:, p].copy()
                col_q = a[:, q]
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :]
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericalError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")

    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def psd_sqrt_with_clamp(m) -> tuple[np.ndarray, float]:
    """PSD square root plus the magnitude of the most negative eigenvalue
    that was clamped to zero (0.0 when nothing was clamped)."""
    w, v = jacobi_eigh(m)
    clamp = float(max(-w.min(), 0.0))
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T), clamp


def psd_sqrt(m) -> np.ndarray:
    """Symmetric square root S of a PSD matrix, S @ S ~= m."""
    return psd_sqrt_with_clamp(m)[0]
