"""KL, Frobenius and von Neumann divergences between a second moment and a
Kronecker-structured (or dense) preconditioner.

All contractions are taken from the dense second moment ``H`` itself, reshaped
into a ``2n``-way tensor, so this module never touches raw gradient samples.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg
from .errors import NotPositiveDefinite, ShapeError

AUTO_DAMP_FACTOR = 1e-12


@dataclass(frozen=True)
class SecondMoment:
    """Empirical ``E[g g^T]`` over row-major flattened gradients, plus damping ``kappa``."""

    H: np.ndarray
    dims: tuple[int, ...]
    kappa: float = 0.0

    def __post_init__(self):
        n = int(np.prod(self.dims))
        if self.H.shape != (n, n):
            raise ShapeError(f"H has shape {self.H.shape}, expected {(n, n)} for dims {self.dims}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")

    @classmethod
    def from_samples(cls, samples, kappa: float = 0.0, auto_damp: bool = False) -> "SecondMoment":
        samples = np.asarray(samples, dtype=np.float64)
        dims = samples.shape[1:]
        flat = samples.reshape(samples.shape[0], -1)
        H = flat.T @ flat / samples.shape[0]
        H = 0.5 * (H + H.T)
        if auto_damp and kappa == 0.0:
            kappa = auto_kappa(H)
        return cls(H, tuple(int(d) for d in dims), float(kappa))

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def X(self) -> np.ndarray:
        """Damped target ``H + kappa I``."""
        return self.H + self.kappa * np.eye(self.dim)

    def tensor(self) -> np.ndarray:
        return self.X.reshape(self.dims + self.dims)


def auto_kappa(H) -> float:
    """Tiny damping for a singular ``H``; zero when ``H`` is already positive definite."""
    if linalg.is_spd(H):
        return 0.0
    return AUTO_DAMP_FACTOR * float(np.trace(H)) / H.shape[0]


@dataclass(frozen=True)
class KronPrecond:
    """``S = factors[0] (x) factors[1] (x) ...``, every factor SPD."""

    factors: tuple[np.ndarray, ...] = field()

    def __init__(self, *factors):
        if len(factors) == 1 and not isinstance(factors[0], np.ndarray):
            factors = tuple(factors[0])
        object.__setattr__(self, "factors", tuple(np.asarray(f, dtype=np.float64) for f in factors))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.shape[0] for f in self.factors)

    @property
    def Sa(self):
        return self.factors[0]

    @property
    def Sb(self):
        return self.factors[1]

    def dense(self) -> np.ndarray:
        out = np.ones((1, 1))
        for f in self.factors:
            out = np.kron(out, f)
        return out

    def scaled(self, c: float) -> "KronPrecond":
        return KronPrecond(self.factors[0] * c, *self.factors[1:])

    def normalized(self) -> "KronPrecond":
        """Move all scale into the last factor so that ``Tr(S_k) = d_k`` for the others."""
        fs = [f.copy() for f in self.factors]
        for k in range(len(fs) - 1):
            c = np.trace(fs[k]) / fs[k].shape[0]
            fs[k] /= c
            fs[-1] *= c
        return KronPrecond(*fs)


def contract_mode(m: SecondMoment, k: int, mats: Sequence[np.ndarray | None]) -> np.ndarray:
    """``E[G_(k) (kron of mats[j], j != k) G_(k)^T]`` read off the damped ``H``.

    ``mats[j] = None`` stands for the identity.
    """
    n = len(m.dims)
    letters = string.ascii_letters
    row = list(letters[:n])
    col = list(letters[n : 2 * n])
    operands = [m.tensor()]
    subs = ["".join(row) + "".join(col)]
    for j in range(n):
        if j == k:
            continue
        if mats[j] is None:
            col[j] = row[j]
        else:
            operands.append(mats[j])
            subs.append(row[j] + col[j])
    subs[0] = "".join(row) + "".join(col)
    out = row[k] + col[k]
    return np.einsum(",".join(subs) + "->" + out, *operands, optimize=True)


def _as_dense(s) -> np.ndarray:
    return s.dense() if isinstance(s, KronPrecond) else np.asarray(s, dtype=np.float64)


def _precisions(s: KronPrecond) -> list[np.ndarray]:
    out = []
    for f in s.factors:
        e = linalg.sym_eigen(f)
        if e.values[-1] <= 0:
            raise NotPositiveDefinite(f"factor smallest eigenvalue {e.values[-1]:.3e}")
        out.append(linalg.matrix_power_from_eigen(e, -1.0))
    return out


def _logdet_kron(s: KronPrecond) -> float:
    N = int(np.prod(s.dims))
    total = 0.0
    for f in s.factors:
        total += (N // f.shape[0]) * linalg.spd_logdet(f)
    return total


def kl_objective(m: SecondMoment, s) -> float:
    """``1/2 (logdet S + Tr(X S^-1))``; valid even when ``X`` is singular."""
    if isinstance(s, KronPrecond):
        P = _precisions(s)
        n = len(P)
        letters = string.ascii_letters
        row, col = letters[:n], letters[n : 2 * n]
        subs = [row + col] + [col[j] + row[j] for j in range(n)]
        tr = np.einsum(",".join(subs) + "->", m.tensor(), *P, optimize=True)
        return 0.5 * (_logdet_kron(s) + float(tr))
    S = linalg.check_symmetric(_as_dense(s))
    logdet = linalg.spd_logdet(S)
    return 0.5 * (logdet + float(np.trace(np.linalg.solve(S, m.X))))


def kl_div(m: SecondMoment, s) -> float:
    """Full Gaussian KL ``KL(N(0, H + kappa I) || N(0, S))``; zero iff ``S = H + kappa I``."""
    return kl_objective(m, s) - 0.5 * (linalg.spd_logdet(m.X) + m.dim)


def kl_grad_precision(m: SecondMoment, s: KronPrecond) -> tuple[np.ndarray, ...]:
    """Gradient of the KL w.r.t. each precision factor ``P_k = S_k^-1``.

    For two factors this is ``(1/2 (-d_b S_a + E[G P_b G^T]), 1/2 (-d_a S_b + E[G^T P_a G]))``.
    """
    P = _precisions(s)
    N = int(np.prod(s.dims))
    grads = []
    for k, S_k in enumerate(s.factors):
        C = contract_mode(m, k, P)
        grads.append(0.5 * (-(N // S_k.shape[0]) * S_k + C))
    return tuple(grads)


def kl_grad_factors(m: SecondMoment, s: KronPrecond) -> tuple[np.ndarray, ...]:
    """Gradient of the KL w.r.t. each factor ``S_k`` (chain rule through the inverse)."""
    P = _precisions(s)
    return tuple(-Pk @ g @ Pk for Pk, g in zip(P, kl_grad_precision(m, s)))


def frob_obj(m: SecondMoment, s) -> float:
    return float(np.linalg.norm(m.X - _as_dense(s)))


def vn_div(m: SecondMoment, s) -> float:
    """``Tr(X (LogM X - LogM S)) - Tr X + Tr S`` with ``X = H + kappa I``."""
    X = m.X
    tr_x_logx = float(np.sum(X * linalg.matrix_log(X)))
    if isinstance(s, KronPrecond):
        # LogM of a Kronecker product is the Kronecker sum of the factor logs
        tr_x_logs = 0.0
        ident = [None] * len(s.factors)
        for k, f in enumerate(s.factors):
            marginal = contract_mode(m, k, ident)
            tr_x_logs += float(np.sum(marginal * linalg.matrix_log(f)))
        tr_s = float(np.prod([np.trace(f) for f in s.factors]))
    else:
        S = _as_dense(s)
        tr_x_logs = float(np.sum(X * linalg.matrix_log(S)))
        tr_s = float(np.trace(S))
    return tr_x_logx - tr_x_logs - float(np.trace(X)) + tr_s
