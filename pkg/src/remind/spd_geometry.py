"""Symmetric eigendecomposition and Log-Euclidean geometry of SPD matrices.

Every function accepts a single ``(C, C)`` matrix or a stack ``(..., C, C)``
and operates on the trailing two axes. All arithmetic is float64.
"""

from typing import NamedTuple

import numpy as np

from .errors import (
    ArityError,
    ConvergenceError,
    DegenerateMapError,
    NotPositiveDefiniteError,
    ParameterError,
    ShapeError,
    SymmetryError,
    WeightError,
)

SYMMETRY_TOL = 1e-10
SPD_MIN_EIG = 1e-9
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
DEGENERATE_GAP = 1e-10
MIN_SINGULAR = 1e-8
DEFAULT_SHRINKAGE = 1e-3
DEFAULT_FLOOR = 1e-6


class EigenDecomp(NamedTuple):
    """Eigenvalues in ascending order and orthonormal eigenvectors as columns."""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def _as_square(A, name="matrix"):
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeError(f"{name} must be square in its last two axes, got {A.shape}")
    return A


def check_symmetric(A, tol=SYMMETRY_TOL):
    """Raise :class:`SymmetryError` if ``A`` is not symmetric within ``tol``.

    The tolerance is absolute for entries of magnitude up to one and scales
    with the largest entry beyond that.
    """
    A = _as_square(A)
    if A.size == 0:
        return A
    scale = max(1.0, float(np.max(np.abs(A))))
    err = float(np.max(np.abs(A - np.swapaxes(A, -1, -2))))
    if not err <= tol * scale:
        raise SymmetryError(f"asymmetry {err:.3e} exceeds tolerance {tol * scale:.3e}")
    return A


def symmetrize(A):
    A = np.asarray(A, dtype=np.float64)
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def _off_norm(A):
    off = A * (1.0 - np.eye(A.shape[-1]))
    return np.sqrt(np.sum(off * off, axis=(-2, -1)))


def round_robin_pairs(C):
    """All index pairs in a fixed cyclic order, grouped into rounds of
    disjoint pairs (circle method)."""
    m = C + (C % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = []
        for i in range(m // 2):
            p, q = players[i], players[m - 1 - i]
            if p < C and q < C:
                pairs.append((min(p, q), max(p, q)))
        if pairs:
            pairs.sort()
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def sym_eigen(A, tol=JACOBI_TOL, max_sweeps=JACOBI_MAX_SWEEPS):
    """Eigendecomposition of symmetric matrices by cyclic Jacobi rotations.

    A sweep visits every index pair once in a fixed round-robin order; the
    disjoint pairs of one round are rotated together. Matrices of a stack are
    processed together, but each one is frozen as soon as its off-diagonal
    Frobenius norm drops below ``tol * ||A||_F``, so the result for a matrix
    does not depend on the other members of the stack.

    Parameters
    ----------
    A : ndarray, shape (..., C, C)
        Symmetric matrices.
    tol : float
        Relative off-diagonal tolerance.
    max_sweeps : int
        Sweeps allowed before :class:`ConvergenceError` is raised.

    Returns
    -------
    EigenDecomp
        ``eigenvalues`` of shape (..., C), ascending, and ``eigenvectors`` of
        shape (..., C, C) with ``A = V diag(w) V^T``.
    """
    A = check_symmetric(A)
    shape = A.shape
    C = shape[-1]
    a = symmetrize(A).reshape(-1, C, C).copy()
    B = a.shape[0]
    eye = np.eye(C)
    v = np.broadcast_to(eye, (B, C, C)).copy()

    thresh = tol * np.sqrt(np.sum(a * a, axis=(-2, -1)))
    active = _off_norm(a) > thresh
    rounds = round_robin_pairs(C)
    sweeps = 0
    while active.any():
        if sweeps >= max_sweeps:
            raise ConvergenceError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps"
            )
        for ps, qs in rounds:
            apq = a[:, ps, qs]
            rot = active[:, None] & (apq != 0.0)
            if not rot.any():
                continue
            safe = np.where(rot, apq, 1.0)
            with np.errstate(over="ignore"):
                tau = (a[:, qs, qs] - a[:, ps, ps]) / (2.0 * safe)
                t = np.where(tau >= 0.0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            c = np.where(rot, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s = np.where(rot, t * c, 0.0)
            J = np.broadcast_to(eye, (B, C, C)).copy()
            J[:, ps, ps] = c
            J[:, qs, qs] = c
            J[:, ps, qs] = s
            J[:, qs, ps] = -s
            a = np.swapaxes(J, -1, -2) @ a @ J
            a[:, ps, qs] = np.where(rot, 0.0, a[:, ps, qs])
            a[:, qs, ps] = np.where(rot, 0.0, a[:, qs, ps])
            v = v @ J
        sweeps += 1
        active = _off_norm(a) > thresh

    w = np.diagonal(a, axis1=-2, axis2=-1).copy()
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    v = np.take_along_axis(v, order[:, None, :], axis=-1)
    return EigenDecomp(w.reshape(shape[:-1]), v.reshape(shape))


def eig_apply(U, values):
    """Rebuild ``U diag(values) U^T`` for stacks of eigenbases."""
    return symmetrize(np.einsum("...ik,...k,...jk->...ij", U, values, U))


def _check_pd(w):
    if np.any(w <= 0.0):
        raise NotPositiveDefiniteError(
            f"matrix has non-positive eigenvalue {float(np.min(w)):.3e}"
        )


def spd_log(P):
    """Matrix logarithm of SPD matrices."""
    w, U = sym_eigen(P)
    _check_pd(w)
    return eig_apply(U, np.log(w))


def spd_exp(S):
    """Matrix exponential of symmetric matrices; the result is SPD."""
    w, U = sym_eigen(S)
    return eig_apply(U, np.exp(w))


def check_spd(P, min_eig=SPD_MIN_EIG):
    """Raise unless every matrix in ``P`` is symmetric with eigenvalues > ``min_eig``."""
    w, _ = sym_eigen(P)
    if np.any(w <= min_eig):
        raise NotPositiveDefiniteError(
            f"minimum eigenvalue {float(np.min(w)):.3e} <= {min_eig:.1e}"
        )
    return P


def min_eigenvalue(P):
    return np.min(sym_eigen(P).eigenvalues, axis=-1)


def le_distance(P, Q):
    """Log-Euclidean distance ``||log P - log Q||_F`` (broadcast over stacks)."""
    P = _as_square(P, "P")
    Q = _as_square(Q, "Q")
    if P.shape[-1] != Q.shape[-1]:
        raise ShapeError(f"dimension mismatch {P.shape[-1]} vs {Q.shape[-1]}")
    diff = spd_log(P) - spd_log(Q)
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def weighted_le_mean(weights, mats):
    """Weighted Log-Euclidean mean ``exp(sum_i w_i log P_i)``.

    Parameters
    ----------
    weights : array_like, shape (n,)
        Non-negative weights summing to one.
    mats : array_like, shape (n, C, C)
        SPD matrices.
    """
    mats = _as_square(mats, "mats")
    weights = np.asarray(weights, dtype=np.float64)
    if mats.ndim != 3 or mats.shape[0] == 0:
        raise ArityError("need a non-empty sequence of matrices")
    if weights.shape != (mats.shape[0],):
        raise WeightError(f"expected {mats.shape[0]} weights, got shape {weights.shape}")
    if np.any(weights < 0.0) or abs(float(np.sum(weights)) - 1.0) > 1e-9:
        raise WeightError("weights must be non-negative and sum to one")
    return spd_exp(np.einsum("i,ijk->jk", weights, spd_log(mats)))


def congruence(W, P):
    """Congruence map ``W P W^T``; rejects rank-deficient ``W``."""
    W = _as_square(W, "W")
    P = _as_square(P, "P")
    if W.shape[-1] != P.shape[-1]:
        raise ShapeError(f"W is {W.shape[-2:]} but P is {P.shape[-2:]}")
    smin = np.min(np.linalg.svd(W, compute_uv=False), axis=-1)
    if np.any(smin < MIN_SINGULAR):
        raise DegenerateMapError(f"smallest singular value {float(np.min(smin)):.3e} < {MIN_SINGULAR}")
    return symmetrize(W @ P @ np.swapaxes(W, -1, -2))


def to_spd(G, gamma=DEFAULT_SHRINKAGE, eps=DEFAULT_FLOOR, return_eig=False):
    """Shrink toward the identity, then floor the eigenvalues at ``eps``.

    With ``return_eig`` the eigendecomposition of the shrunk matrix is also
    returned as ``(result, EigenDecomp)`` so callers can differentiate.
    """
    if not 0.0 <= gamma < 1.0:
        raise ParameterError(f"shrinkage must lie in [0, 1), got {gamma}")
    if not eps > 0.0:
        raise ParameterError(f"eigenvalue floor must be positive, got {eps}")
    G = check_symmetric(G)
    C = G.shape[-1]
    A = (1.0 - gamma) * G + gamma * np.eye(C)
    dec = sym_eigen(A)
    out = eig_apply(dec.eigenvectors, np.maximum(dec.eigenvalues, eps))
    if return_eig:
        return out, dec
    return out


# ---------------------------------------------------------------------------
# adjoints of spectral matrix functions


def loewner_matrix(w, f, fprime, kind=None, gap=DEGENERATE_GAP):
    """First divided differences of ``f`` on the spectrum ``w``.

    ``K[i, j] = (f(w_i) - f(w_j)) / (w_i - w_j)``, replaced by ``f'(w_i)`` when
    ``|w_i - w_j| < gap``. For ``kind`` in {"log", "exp"} the off-diagonal
    quotient is evaluated in a cancellation-free form.
    """
    wi = w[..., :, None]
    wj = w[..., None, :]
    diff = wi - wj
    close = np.abs(diff) < gap
    safe = np.where(close, 1.0, diff)
    if kind == "log":
        ratio = np.log1p(safe / wj) / safe
    elif kind == "exp":
        ratio = np.exp(wj) * np.expm1(safe) / safe
    else:
        fw = f(w)
        ratio = (fw[..., :, None] - fw[..., None, :]) / safe
    deriv = np.broadcast_to(fprime(w)[..., :, None], diff.shape)
    return np.where(close, deriv, ratio)


def eigfunc_backward(U, K, grad_out):
    """Pull back a gradient through ``F(A) = U f(diag(w)) U^T``.

    ``K`` is the Loewner matrix of ``f`` at the eigenvalues of ``A``. The
    returned gradient is symmetric.
    """
    Ut = np.swapaxes(U, -1, -2)
    inner = Ut @ symmetrize(grad_out) @ U
    return symmetrize(U @ (K * inner) @ Ut)


def log_loewner(w):
    return loewner_matrix(w, np.log, lambda x: 1.0 / x, kind="log")


def exp_loewner(w):
    return loewner_matrix(w, np.exp, np.exp, kind="exp")


def floor_loewner(w, eps):
    # derivative of max(w, eps) taken as 1 above the floor, 0 at or below it
    return loewner_matrix(
        w,
        lambda x: np.maximum(x, eps),
        lambda x: (x > eps).astype(np.float64),
    )
