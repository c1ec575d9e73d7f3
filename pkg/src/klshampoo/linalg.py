"""Dense symmetric linear-algebra kernels.

Matrices are plain ``numpy`` float64 arrays. Vectorisation is row-major
throughout, so that ``kron(Sa, Sb) @ vec(G) == vec(Sa @ G @ Sb.T)``.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import (
    InvalidInput,
    NotPositiveDefinite,
    NotSymmetric,
    RankDeficient,
    ShapeError,
    SingularPower,
)

SYM_TOL = 1e-10
RANK_TOL = 1e-12

_MODES = {"a": 0, "b": 1, "c": 2}


class EigenPair(NamedTuple):
    """Orthonormal eigenbasis (columns) and matching eigenvalues."""

    basis: np.ndarray
    values: np.ndarray


def _as_square(S, name="matrix") -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeError(f"{name} must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise InvalidInput(f"{name} has non-finite entries")
    return S


def check_symmetric(S, tol: float = SYM_TOL) -> np.ndarray:
    S = _as_square(S)
    scale = max(np.linalg.norm(S), 1.0)
    if np.linalg.norm(S - S.T) > tol * scale:
        raise NotSymmetric(f"asymmetry {np.linalg.norm(S - S.T):.3e} exceeds tolerance")
    return S


def sym_eigen(S) -> EigenPair:
    """Eigendecomposition of a symmetric matrix, eigenvalues descending.

    Ties keep the order in which LAPACK returned them.
    """
    S = check_symmetric(S)
    values, basis = np.linalg.eigh(0.5 * (S + S.T))
    order = np.argsort(-values, kind="stable")
    return EigenPair(basis[:, order], values[order])


def _sign_fix(Q: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each column made positive; first index wins ties
    idx = np.argmax(np.abs(Q), axis=0)
    signs = np.sign(Q[idx, np.arange(Q.shape[1])])
    signs[signs == 0] = 1.0
    return Q * signs


def qr_orthonormalize(M) -> np.ndarray:
    """Orthonormal basis of ``range(M)`` via Householder QR, with a fixed sign convention."""
    M = _as_square(M)
    Q, R = np.linalg.qr(M)
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= RANK_TOL * max(diag.max(), np.finfo(float).tiny):
        raise RankDeficient(f"R diagonal min {diag.min():.3e} vs max {diag.max():.3e}")
    return _sign_fix(Q)


def matrix_power_from_eigen(e: EigenPair, p: float) -> np.ndarray:
    Q, lam = e
    n = lam.shape[0]
    if p == 0:
        return np.eye(n)
    if p < 0 and np.any(lam <= 0):
        raise SingularPower(f"negative power {p} of a matrix with eigenvalue {lam.min():.3e}")
    if float(p) != int(p) and np.any(lam < 0):
        raise SingularPower(f"fractional power {p} of a negative eigenvalue {lam.min():.3e}")
    out = (Q * lam**p) @ Q.T
    return 0.5 * (out + out.T)


def kron(A, B) -> np.ndarray:
    return np.kron(np.asarray(A, dtype=np.float64), np.asarray(B, dtype=np.float64))


def vec(G) -> np.ndarray:
    """Row-major flatten."""
    return np.asarray(G, dtype=np.float64).reshape(-1)


def mat(v, d_a: int, d_b: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size != d_a * d_b:
        raise ShapeError(f"cannot reshape length {v.size} into {d_a}x{d_b}")
    return v.reshape(d_a, d_b)


def _mode_index(mode) -> int:
    if isinstance(mode, str):
        if mode not in _MODES:
            raise ShapeError(f"unknown mode {mode!r}")
        return _MODES[mode]
    return int(mode)


def mode_unfold(T, mode) -> np.ndarray:
    """Mode-``k`` unfolding; remaining indices flattened row-major in (a, b, c) order."""
    T = np.asarray(T, dtype=np.float64)
    k = _mode_index(mode)
    if not 0 <= k < T.ndim:
        raise ShapeError(f"mode {mode!r} out of range for a {T.ndim}-way tensor")
    return np.moveaxis(T, k, 0).reshape(T.shape[k], -1)


def mode_fold(M, mode, dims) -> np.ndarray:
    k = _mode_index(mode)
    dims = tuple(dims)
    rest = dims[:k] + dims[k + 1 :]
    M = np.asarray(M, dtype=np.float64)
    if M.shape != (dims[k], int(np.prod(rest))):
        raise ShapeError(f"unfolding shape {M.shape} does not match dims {dims}")
    return np.moveaxis(M.reshape((dims[k],) + rest), 0, k)


def _spd_eigen(S) -> EigenPair:
    e = sym_eigen(S)
    if e.values[-1] <= 0:
        raise NotPositiveDefinite(f"smallest eigenvalue {e.values[-1]:.3e}")
    return e


def spd_logdet(S) -> float:
    return float(np.sum(np.log(_spd_eigen(S).values)))


def matrix_log(S) -> np.ndarray:
    Q, lam = _spd_eigen(S)
    return (Q * np.log(lam)) @ Q.T


def matrix_exp(S) -> np.ndarray:
    Q, lam = sym_eigen(S)
    return (Q * np.exp(lam)) @ Q.T


def is_spd(S) -> bool:
    try:
        np.linalg.cholesky(np.asarray(S, dtype=np.float64))
    except np.linalg.LinAlgError:
        return False
    return True
