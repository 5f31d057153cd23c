"""Dense Householder-reflection kernel.

Everything here is float64 and pure: reflections are applied as rank-1
updates in O(M), the explicit reflection matrix exists only so tests can
cross-check the rank-1 path against a dense product, and
`decompose_orthogonal` factors any orthogonal matrix into at most M
reflectors plus a diagonal of signs by sequential triangularization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateReflector, DimensionMismatch, NotOrthogonal

# Reflectors with norm at or below this floor are rejected (2*v*v'/|v|^2 is
# numerically unstable near zero); during triangularization they are skipped.
NORM_FLOOR = 1e-8

# Default tolerances for the orthogonality precondition and the
# factor-product reconstruction guarantee.
ORTHOGONALITY_TOL = 1e-8
RECONSTRUCTION_TOL = 1e-8


def as_vector(data) -> np.ndarray:
    """Validate and return a finite float64 1-D array."""
    v = np.asarray(data, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise DimensionMismatch(f"expected a 1-D vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise DimensionMismatch("vector entries must be finite")
    return v


def as_matrix(data) -> np.ndarray:
    """Validate and return a finite float64 2-D array."""
    m = np.asarray(data, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise DimensionMismatch("matrix entries must be finite")
    return m


@dataclass(frozen=True)
class OrthogonalDecomposition:
    """Reflectors v_1..v_K (each full-dimension) plus a +/-1 diagonal.

    The source matrix is recovered as the product of the reflection
    matrices, in reflector order, applied to ``diag(sign_diag)``:
    ``U = H(v_1) @ H(v_2) @ ... @ H(v_K) @ diag(sign_diag)``.
    """

    reflectors: list[np.ndarray]
    sign_diag: np.ndarray


def householder_apply(v, z) -> np.ndarray:
    """Reflect ``z`` about the hyperplane orthogonal to ``v``.

    Computes ``z - 2 v (v.z) / |v|^2`` as a rank-1 update; never forms the
    reflection matrix. Norm-preserving to machine precision.
    """
    v = as_vector(v)
    z = as_vector(z)
    if v.shape != z.shape:
        raise DimensionMismatch(f"reflector dim {v.size} != vector dim {z.size}")
    nsq = float(v @ v)
    if np.sqrt(nsq) <= NORM_FLOOR:
        raise DegenerateReflector(f"reflector norm {np.sqrt(nsq):.3e} <= {NORM_FLOOR:g}")
    return z - (2.0 * (v @ z) / nsq) * v


def householder_matrix(v) -> np.ndarray:
    """Explicit reflection matrix ``I - 2 v v' / |v|^2``.

    Test support only; the training path applies reflections as rank-1
    updates and never materializes this matrix.
    """
    v = as_vector(v)
    nsq = float(v @ v)
    if np.sqrt(nsq) <= NORM_FLOOR:
        raise DegenerateReflector(f"reflector norm {np.sqrt(nsq):.3e} <= {NORM_FLOOR:g}")
    return np.eye(v.size) - (2.0 / nsq) * np.outer(v, v)


def is_orthogonal(m, tol: float) -> bool:
    """True iff ``max|M M' - I| <= tol`` elementwise. ``M`` must be square."""
    m = as_matrix(m)
    if m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {m.shape}")
    resid = m @ m.T - np.eye(m.shape[0])
    return bool(np.max(np.abs(resid)) <= tol)


def decompose_orthogonal(u, tol: float = ORTHOGONALITY_TOL) -> OrthogonalDecomposition:
    """Factor an orthogonal matrix into <= M reflectors and a sign diagonal.

    Sequential Householder triangularization: column j is mapped onto
    ``sign(x_0) * e_1`` of its trailing block, which for an orthogonal input
    leaves a +/-1 diagonal. Columns that are already triangular would yield
    a reflector with norm below ``NORM_FLOOR`` and are skipped; the residual
    signs are absorbed into ``sign_diag`` so reconstruction is exact for
    both determinant signs.
    """
    u = as_matrix(u)
    dim = u.shape[0]
    if u.shape[0] != u.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {u.shape}")
    if not is_orthogonal(u, tol):
        resid = float(np.max(np.abs(u @ u.T - np.eye(dim))))
        raise NotOrthogonal(f"max|UU' - I| = {resid:.3e} exceeds tol {tol:g}")

    r = u.copy()
    reflectors: list[np.ndarray] = []
    for j in range(dim - 1):
        x = r[j:, j]
        tail_sq = float(x[1:] @ x[1:])
        norm_x = np.sqrt(x[0] * x[0] + tail_sq)
        s = 1.0 if x[0] >= 0.0 else -1.0
        # v = x - s*|x|*e1, with v[0] written in cancellation-free form.
        v_local = x.copy()
        v_local[0] = -s * tail_sq / (norm_x + abs(x[0]))
        if np.sqrt(float(v_local @ v_local)) <= NORM_FLOOR:
            continue
        nsq = float(v_local @ v_local)
        r[j:, :] -= (2.0 / nsq) * np.outer(v_local, v_local @ r[j:, :])
        v_full = np.zeros(dim)
        v_full[j:] = v_local
        reflectors.append(v_full)

    sign_diag = np.sign(np.diag(r))
    return OrthogonalDecomposition(reflectors=reflectors, sign_diag=sign_diag)


def reconstruct_orthogonal(dec: OrthogonalDecomposition) -> np.ndarray:
    """Multiply the decomposition factors back into a dense matrix."""
    m = np.diag(dec.sign_diag.astype(np.float64))
    for v in reversed(dec.reflectors):
        m = householder_matrix(v) @ m
    return m


def basis_kernel_factors(reflectors: list[np.ndarray], dim: int):
    """Accumulate a reflector product into basis/kernel form ``I - Y S Y'``.

    Built by the rank-1 recursion
    ``(I - Y S Y')(I - 2 w w') = I - [Y w] [[S, -2 S Y'w], [0, 2]] [Y w]'``
    over unit-normalized reflectors. Returns ``(Y, S)`` with Y of shape
    (dim, K) and S upper triangular nonsingular; K == len(reflectors).
    Empty input yields K == 0 factors (the identity).
    """
    k = len(reflectors)
    y = np.zeros((dim, k))
    s = np.zeros((k, k))
    for i, v in enumerate(reflectors):
        v = as_vector(v)
        if v.size != dim:
            raise DimensionMismatch(f"reflector {i} has dim {v.size}, expected {dim}")
        w = v / np.linalg.norm(v)
        if i > 0:
            s[:i, i] = -2.0 * (s[:i, :i] @ (y[:, :i].T @ w))
        y[:, i] = w
        s[i, i] = 2.0
    return y, s
