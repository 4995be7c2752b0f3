"""Dense matrix helpers, truncated SVD and percentile selection."""

import logging
from typing import Literal, Tuple

import numpy as np

from app.core.exceptions import NumericalError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

JACOBI_MAX_SWEEPS = 100
JACOBI_TOLERANCE = 1e-12


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a float64 matrix, checking shape and finiteness"""
    m = np.array(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"expected {rows * cols} values, got {m.size}")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"matrix must be 2-D, got {m.ndim}-D")
    if not np.all(np.isfinite(m)):
        raise ParameterError("matrix contains NaN or Inf")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def jacobi_svd(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided Jacobi rotations.

    Rotations orthogonalise the columns of ``a`` (or of ``a.T`` when ``a`` is
    wide, so the Gram dimension is the smaller one). Sweeps visit column pairs
    in a fixed order. Raises NumericalError when the off-diagonal measure is
    still above tolerance after the sweep cap.
    """
    transposed = a.shape[1] > a.shape[0]
    work = (a.T if transposed else a).astype(np.float64, copy=True)
    n = work.shape[1]
    v = np.eye(n)

    for sweep in range(JACOBI_MAX_SWEEPS):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = work[:, p] @ work[:, p]
                beta = work[:, q] @ work[:, q]
                gamma = work[:, p] @ work[:, q]
                if alpha == 0.0 or beta == 0.0:
                    continue
                off = max(off, abs(gamma) / np.sqrt(alpha * beta))
                if abs(gamma) <= JACOBI_TOLERANCE * np.sqrt(alpha * beta):
                    continue
                zeta = (beta - alpha) / (2.0 * gamma)
                t = np.sign(zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta)) if zeta != 0 else 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                wp = work[:, p].copy()
                work[:, p] = c * wp - s * work[:, q]
                work[:, q] = s * wp + c * work[:, q]
                vp = v[:, p].copy()
                v[:, p] = c * vp - s * v[:, q]
                v[:, q] = s * vp + c * v[:, q]
        if off <= JACOBI_TOLERANCE:
            logger.debug("jacobi converged after %d sweeps", sweep + 1)
            break
    else:
        raise NumericalError(
            "jacobi SVD did not converge",
            diagnostics={"sweeps": JACOBI_MAX_SWEEPS, "off_diagonal": off},
        )

    sigma = np.linalg.norm(work, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    work = work[:, order]
    v = v[:, order]

    u = np.zeros_like(work)
    nonzero = sigma > 0
    u[:, nonzero] = work[:, nonzero] / sigma[nonzero]
    if not np.all(nonzero):
        u = _complete_orthonormal(u, nonzero)

    if transposed:
        # a.T = U S V^T  =>  a = V S U^T
        return v, sigma, u.T
    return u, sigma, v.T


def _complete_orthonormal(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Replace zero columns of u with unit vectors orthogonal to the rest"""
    basis = u[:, filled]
    out = u.copy()
    for j in np.flatnonzero(~filled):
        for e in np.eye(u.shape[0]):
            cand = e - basis @ (basis.T @ e)
            norm = np.linalg.norm(cand)
            if norm > 1e-8:
                out[:, j] = cand / norm
                basis = np.column_stack([basis, out[:, j]])
                break
    return out


def truncated_svd(
    w0: np.ndarray,
    r: int,
    method: Literal["lapack", "jacobi"] = "lapack",
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-r singular triplets of w0.

    Returns (u_r, sigma_r, v_r_t) with shapes (rows, r), (r,), (r, cols);
    sigma_r is non-increasing.
    """
    rows, cols = w0.shape
    if not 1 <= r <= min(rows, cols):
        raise ParameterError(f"rank {r} outside [1, {min(rows, cols)}]")

    if method == "jacobi":
        u, sigma, vt = jacobi_svd(w0)
    else:
        try:
            u, sigma, vt = np.linalg.svd(w0, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("SVD did not converge", diagnostics={"shape": w0.shape}) from exc

    return u[:, :r].copy(), sigma[:r].copy(), vt[:r, :].copy()


def _check_percentile_input(values: np.ndarray, s: float) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ParameterError("percentile of an empty vector")
    if not 0.0 <= s <= 1.0:
        raise ParameterError(f"fraction {s} outside [0, 1]")
    return values


def below_threshold(values: np.ndarray, s: float) -> np.ndarray:
    """Boolean mask of the floor(s*len) smallest entries.

    Ties are broken by parameter index, so the mask is the same wherever the
    same vector is evaluated.
    """
    values = _check_percentile_input(values, s)
    k = int(np.floor(s * values.size))
    mask = np.zeros(values.size, dtype=bool)
    if k:
        order = np.argsort(values, kind="stable")
        mask[order[:k]] = True
    return mask


def percentile_threshold(values: np.ndarray, s: float) -> float:
    """Magnitude at the boundary of the floor(s*len) smallest entries.

    -inf when nothing is below the threshold, +inf when everything is.
    """
    values = _check_percentile_input(values, s)
    k = int(np.floor(s * values.size))
    if k == 0:
        return float("-inf")
    if k >= values.size:
        return float("inf")
    return float(np.sort(values, kind="stable")[k])
