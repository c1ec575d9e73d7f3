"""Second-moment estimation rules for Kronecker-factored preconditioners.

Every rule here is a pure function returning new state. Gradients may be given
as a single sample (``G.ndim == order``) or as a stack of samples
(``G.ndim == order + 1``); a stack replaces the instantaneous outer products by
their population mean, which is how the fixed-population checks drive these
rules.

Factor updates are simultaneous: both sides read the *old* value of the other
factor, matching a proximal step taken at the current iterate.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import linalg
from .errors import DegenerateScale, NotPositiveDefinite, ShapeError, StateError

EIG_FLOOR = 1e-30


@dataclass(frozen=True)
class EmaConfig:
    beta2: float
    kappa: float = 0.0
    eig_floor: float = EIG_FLOOR

    def __post_init__(self):
        if not 0.0 <= self.beta2 <= 1.0:
            raise ValueError(f"beta2 must lie in [0, 1], got {self.beta2}")
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.eig_floor <= 0:
            raise ValueError("eig_floor must be positive")


@dataclass(frozen=True)
class SpdFactor:
    """One Kronecker factor ``S_k`` with a (possibly stale) eigen cache.

    ``values`` is ``None`` for methods that never estimate eigenvalues (SOAP).
    """

    S: np.ndarray
    basis: np.ndarray | None
    values: np.ndarray | None
    stale: bool = False

    @classmethod
    def identity(cls, d: int, init_scale: float = 1.0, with_values: bool = True) -> "SpdFactor":
        return cls(
            S=init_scale * np.eye(d),
            basis=np.eye(d),
            values=np.full(d, float(init_scale)) if with_values else None,
        )

    @property
    def dim(self) -> int:
        return self.S.shape[0]

    def _require_eigen(self):
        if self.basis is None or self.values is None:
            raise StateError("factor has no eigen cache")

    def precision(self, kappa: float = 0.0) -> np.ndarray:
        """``P_k = Q diag(1/(lambda + kappa)) Q^T`` from the cached eigenpair."""
        self._require_eigen()
        lam = self.values
        if not np.all(np.isfinite(lam)) or np.any(lam + kappa <= 0):
            raise NotPositiveDefinite(f"cached eigenvalue {np.min(lam):.3e} is not positive")
        return (self.basis / (lam + kappa)) @ self.basis.T

    def weighted(self) -> np.ndarray:
        """``Q diag(lambda) Q^T`` from the cached eigenpair."""
        self._require_eigen()
        return (self.basis * self.values) @ self.basis.T

    def nbytes_elements(self) -> int:
        n = self.S.size
        if self.basis is not None:
            n += self.basis.size
        if self.values is not None:
            n += self.values.size
        return n


def _stack(G, order: int) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim == order:
        return G[None]
    if G.ndim == order + 1:
        return G
    raise ShapeError(f"expected a {order}-way gradient or a stack of them, got ndim {G.ndim}")


def _check_dims(factors: Sequence[SpdFactor], Gs: np.ndarray):
    dims = tuple(f.dim for f in factors)
    if Gs.shape[1:] != dims:
        raise ShapeError(f"gradient shape {Gs.shape[1:]} does not match factor dims {dims}")


def _mode_apply(Gs: np.ndarray, M: np.ndarray, axis: int) -> np.ndarray:
    """Multiply every sample along ``axis`` (sample axis excluded) by ``M``."""
    out = np.tensordot(Gs, M, axes=([axis + 1], [1]))
    return np.moveaxis(out, -1, axis + 1)


def _mode_gram(Gs: np.ndarray, k: int, mats: Sequence[np.ndarray | None]) -> np.ndarray:
    """Population mean of ``G_(k) (kron_{j != k} mats[j]) G_(k)^T``."""
    W = Gs
    for j, M in enumerate(mats):
        if j != k and M is not None:
            W = _mode_apply(W, M, j)
    axes = [0] + [j + 1 for j in range(Gs.ndim - 1) if j != k]
    out = np.tensordot(Gs, W, axes=(axes, axes)) / Gs.shape[0]
    return 0.5 * (out + out.T)


def factor_ema(f: SpdFactor, delta: np.ndarray, beta2: float) -> SpdFactor:
    S = (1.0 - beta2) * f.S + beta2 * delta
    return replace(f, S=0.5 * (S + S.T), stale=True)


def refresh_eigen(f: SpdFactor) -> SpdFactor:
    """Exact eigendecomposition of ``S_k`` (the eigen path)."""
    e = linalg.sym_eigen(f.S)
    return replace(f, basis=e.basis, values=e.values, stale=False)


# --- increments -----------------------------------------------------------


def shampoo_deltas(fa: SpdFactor, fb: SpdFactor, G) -> tuple[np.ndarray, np.ndarray]:
    Gs = _stack(G, 2)
    _check_dims((fa, fb), Gs)
    return _mode_gram(Gs, 0, [None, None]), _mode_gram(Gs, 1, [None, None])


def kl_deltas(factors: Sequence[SpdFactor], G, c: EmaConfig) -> list[np.ndarray]:
    """``Delta_k = d_k / N * E[G_(k) (kron_{j != k} P_j) G_(k)^T]`` for any tensor order."""
    Gs = _stack(G, len(factors))
    _check_dims(factors, Gs)
    P = [f.precision(c.kappa) for f in factors]
    N = int(np.prod(Gs.shape[1:]))
    return [_mode_gram(Gs, k, P) * (f.dim / N) for k, f in enumerate(factors)]


def f_deltas(fa: SpdFactor, fb: SpdFactor, G, variant: str) -> tuple[np.ndarray, np.ndarray]:
    Gs = _stack(G, 2)
    _check_dims((fa, fb), Gs)
    if variant == "v1":
        Ma, Mb = fa.S, fb.S
        den_a, den_b = float(np.sum(fb.S * fb.S)), float(np.sum(fa.S * fa.S))
    elif variant == "v2":
        Ma, Mb = fa.weighted(), fb.weighted()
        den_a, den_b = float(np.sum(fb.values**2)), float(np.sum(fa.values**2))
    else:
        raise ValueError(f"unknown variant {variant!r}")
    if den_a <= 0 or den_b <= 0:
        raise DegenerateScale("zero trace in Frobenius normalisation")
    return _mode_gram(Gs, 0, [None, Mb]) / den_a, _mode_gram(Gs, 1, [Ma, None]) / den_b


def vn_deltas(fa: SpdFactor, fb: SpdFactor, G, variant: str) -> tuple[np.ndarray, np.ndarray]:
    da, db = shampoo_deltas(fa, fb, G)
    if variant == "v1":
        return da, db
    if variant != "v2":
        raise ValueError(f"unknown variant {variant!r}")
    fa._require_eigen()
    fb._require_eigen()
    sa, sb = float(np.sum(fa.values)), float(np.sum(fb.values))
    if sa <= 0 or sb <= 0:
        raise DegenerateScale("non-positive eigenvalue sum")
    return da / sb, db / sa


# --- factor EMAs ----------------------------------------------------------


def shampoo_factor_ema(fa: SpdFactor, fb: SpdFactor, G, c: EmaConfig) -> tuple[SpdFactor, SpdFactor]:
    da, db = shampoo_deltas(fa, fb, G)
    return factor_ema(fa, da, c.beta2), factor_ema(fb, db, c.beta2)


def kl_factor_ema(fa: SpdFactor, fb: SpdFactor, G, c: EmaConfig) -> tuple[SpdFactor, SpdFactor]:
    """Two-sided KL update; the inverses come from each factor's eigen cache."""
    da, db = kl_deltas((fa, fb), G, c)
    return factor_ema(fa, da, c.beta2), factor_ema(fb, db, c.beta2)


def tensor_kl_factor_ema(fa: SpdFactor, fb: SpdFactor, fc: SpdFactor, T, c: EmaConfig):
    deltas = kl_deltas((fa, fb, fc), T, c)
    return tuple(factor_ema(f, d, c.beta2) for f, d in zip((fa, fb, fc), deltas))


def f_shampoo_ema(fa, fb, G, c: EmaConfig, variant: str = "v1") -> tuple[SpdFactor, SpdFactor]:
    da, db = f_deltas(fa, fb, G, variant)
    return factor_ema(fa, da, c.beta2), factor_ema(fb, db, c.beta2)


def vn_trace_scale(fa: SpdFactor, fb: SpdFactor, variant: str) -> float:
    if variant == "v2":
        return 1.0
    tr = float(np.trace(fa.S)) * float(np.trace(fb.S))
    if not tr > 0:
        raise DegenerateScale("non-positive factor traces")
    return 1.0 / np.sqrt(tr)


def vn_shampoo_ema(fa, fb, G, c: EmaConfig, variant: str = "v1"):
    """Trace-scaled Shampoo update; returns the new factors and the scale ``tau``."""
    da, db = vn_deltas(fa, fb, G, variant)
    fa, fb = factor_ema(fa, da, c.beta2), factor_ema(fb, db, c.beta2)
    return fa, fb, vn_trace_scale(fa, fb, variant)


# --- eigen caches ---------------------------------------------------------


def eigenvalue_ema(f: SpdFactor, delta: np.ndarray, c: EmaConfig) -> np.ndarray:
    """``lambda <- (1 - beta2) lambda + beta2 diag(Q^T Delta Q)``, floored."""
    f._require_eigen()
    proj = np.einsum("ij,ik,kj->j", f.basis, delta, f.basis)
    lam = (1.0 - c.beta2) * f.values + c.beta2 * proj
    return np.maximum(lam, c.eig_floor)


def eigenvalue_ema_kl(fa: SpdFactor, fb: SpdFactor, G, c: EmaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalue correction under a possibly stale basis, using pre-update eigenvalues."""
    da, db = kl_deltas((fa, fb), G, c)
    return eigenvalue_ema(fa, da, c), eigenvalue_ema(fb, db, c)


def eigenbasis_qr_refresh(f: SpdFactor) -> SpdFactor:
    """One step of orthogonal iteration, ``Q <- qr(S Q)``; eigenvalues are left alone."""
    if f.basis is None:
        raise StateError("factor has no eigenbasis to refresh")
    return replace(f, basis=linalg.qr_orthonormalize(f.S @ f.basis), stale=False)


def project(G: np.ndarray, bases: Sequence[np.ndarray]) -> np.ndarray:
    """``G x_1 Q_1^T x_2 Q_2^T ...``; for matrices ``Q_a^T G Q_b``."""
    out = np.asarray(G, dtype=np.float64)
    for k, Q in enumerate(bases):
        out = np.moveaxis(np.tensordot(out, Q, axes=([k], [0])), -1, k)
    return out


def unproject(U: np.ndarray, bases: Sequence[np.ndarray]) -> np.ndarray:
    """Inverse of :func:`project`; for matrices ``Q_a U Q_b^T``."""
    out = np.asarray(U, dtype=np.float64)
    for k, Q in enumerate(bases):
        out = np.moveaxis(np.tensordot(out, Q, axes=([k], [1])), -1, k)
    return out


def augmented_eigen_ema(d: np.ndarray, fa: SpdFactor, fb: SpdFactor, G, c: EmaConfig) -> np.ndarray:
    """RMSProp second moment of the rotated gradient ``vec(Q_a^T G Q_b)``."""
    Gs = _stack(G, 2)
    _check_dims((fa, fb), Gs)
    if fa.basis is None or fb.basis is None:
        raise StateError("augmented update needs both eigenbases")
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (fa.dim * fb.dim,):
        raise ShapeError(f"d has shape {d.shape}, expected {(fa.dim * fb.dim,)}")
    rot = np.einsum("ia,nij,jb->nab", fa.basis, Gs, fb.basis)
    sq = np.mean(rot.reshape(rot.shape[0], -1) ** 2, axis=0)
    return (1.0 - c.beta2) * d + c.beta2 * sq


def adafactor_diag_ema(ra, rb, G, c: EmaConfig) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal factors: row sums of ``G**2`` and column sums divided by the total."""
    Gs = _stack(G, 2)
    sq = Gs**2
    rows = sq.sum(axis=2).mean(axis=0)
    cols = sq.sum(axis=1).mean(axis=0)
    total = float(sq.sum(axis=(1, 2)).mean())
    cols = cols / total if total > 0 else np.zeros_like(cols)
    ra = (1.0 - c.beta2) * np.asarray(ra, dtype=np.float64) + c.beta2 * rows
    rb = (1.0 - c.beta2) * np.asarray(rb, dtype=np.float64) + c.beta2 * cols
    return ra, rb
