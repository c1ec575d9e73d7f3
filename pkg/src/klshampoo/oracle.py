"""Brute-force reference solvers used to check the closed-form estimation rules.

Everything here works from the dense second moment ``H`` (or dense Kronecker
products), never from the sample-based kernels in :mod:`klshampoo.estimators`,
so that each comparison pits two independent computations against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import divergence as dv
from . import linalg
from .divergence import KronPrecond, SecondMoment
from .errors import NoConvergence, OracleMismatch, ShapeError

NUMERIC_TOL = 1e-10
NUMERIC_MAX_ITER = 10_000


# --- populations ----------------------------------------------------------


@dataclass(frozen=True)
class GradientPopulation:
    """A finite sample of gradients standing in for the expectation."""

    samples: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim < 3 or s.shape[0] == 0:
            raise ShapeError("population needs a non-empty stack of matrices or tensors")
        if not np.all(np.isfinite(s)):
            raise ValueError("population has non-finite entries")
        object.__setattr__(self, "samples", s)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.samples.shape[1:]

    def __len__(self):
        return self.samples.shape[0]

    def second_moment(self, kappa: float = 0.0, auto_damp: bool = False) -> SecondMoment:
        return SecondMoment.from_samples(self.samples, kappa=kappa, auto_damp=auto_damp)


def random_orthogonal(d: int, rng: np.random.Generator) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    return Q * np.sign(np.diag(R))


def random_spd(d: int, rng: np.random.Generator, cond: float = 10.0) -> np.ndarray:
    Q = random_orthogonal(d, rng)
    lam = np.exp(rng.uniform(0.0, np.log(cond), size=d))
    S = (Q * lam) @ Q.T
    return 0.5 * (S + S.T)


def _sqrtm(S):
    return linalg.matrix_power_from_eigen(linalg.sym_eigen(S), 0.5)


def matrix_normal(factors, n: int, seed: int) -> GradientPopulation:
    """Samples ``G = A^1/2 Z B^1/2 (...)`` whose row-major second moment is ``A (x) B (x) ...``."""
    rng = np.random.default_rng(seed)
    dims = tuple(f.shape[0] for f in factors)
    Z = rng.standard_normal((n,) + dims)
    for k, f in enumerate(factors):
        Z = np.moveaxis(np.tensordot(Z, _sqrtm(f), axes=([k + 1], [1])), -1, k + 1)
    return GradientPopulation(Z, seed)


def mixed_population(dims, n: int, seed: int, components: int = 3) -> GradientPopulation:
    """Mixture of matrix normals with unrelated factors: its second moment is not Kronecker."""
    rng = np.random.default_rng(seed)
    parts = []
    sizes = rng.multinomial(n - components, np.full(components, 1.0 / components)) + 1
    for size in sizes:
        factors = [random_spd(d, rng, cond=20.0) for d in dims]
        parts.append(matrix_normal(factors, int(size), int(rng.integers(2**31))).samples)
    return GradientPopulation(np.concatenate(parts), seed)


# --- flip-flop (two-sided KL) ---------------------------------------------


@dataclass
class FlipFlopResult:
    precond: KronPrecond
    residuals: tuple[float, ...]
    kl_history: list[float] = field(default_factory=list)
    sweeps: int = 0


def _inv(S):
    return linalg.matrix_power_from_eigen(linalg.sym_eigen(S), -1.0)


def _sym(S):
    return 0.5 * (S + S.T)


def kl_fixed_point_rhs(m: SecondMoment, factors, k: int) -> np.ndarray:
    """Right-hand side of the two-sided KL fixed-point equation for factor ``k``."""
    P = [_inv(f) for f in factors]
    N = int(np.prod(m.dims))
    return _sym(dv.contract_mode(m, k, P)) * (factors[k].shape[0] / N)


def flip_flop_kl(pop, tol: float = 1e-10, max_iter: int = NUMERIC_MAX_ITER, kappa: float = 0.0) -> FlipFlopResult:
    """Alternating (Gauss-Seidel) solve of the matrix/tensor-normal MLE condition.

    Each half-sweep is an exact block minimisation, so the KL objective never
    increases. The result is normalised so ``Tr(S_k) = d_k`` for all but the
    last factor.
    """
    m = pop if isinstance(pop, SecondMoment) else pop.second_moment(kappa, auto_damp=True)
    factors = [np.eye(d) for d in m.dims]
    history = []
    res = (np.inf,) * len(factors)
    for sweep in range(1, max_iter + 1):
        for k in range(len(factors)):
            factors[k] = kl_fixed_point_rhs(m, factors, k)
        history.append(dv.kl_objective(m, KronPrecond(*factors)))
        res = stationarity_residuals(m, KronPrecond(*factors), "kl")
        if max(res) <= tol:
            out = KronPrecond(*factors).normalized()
            return FlipFlopResult(out, stationarity_residuals(m, out, "kl"), history, sweep)
    raise NoConvergence(f"flip-flop residuals {res} after {max_iter} sweeps")


# --- one-sided KL (Shampoo) -----------------------------------------------


def _tril_unpack(x, d):
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = x
    idx = np.arange(d)
    L[idx, idx] = np.exp(L[idx, idx])
    return L


def _tril_pack_grad(gL, L):
    d = L.shape[0]
    g = gL.copy()
    idx = np.arange(d)
    g[idx, idx] *= L[idx, idx]
    return g[np.tril_indices(d)]


def numeric_one_sided_kl_min(pop, side: str = "a") -> np.ndarray:
    """Minimise ``KL(H, (S_a/d_b) (x) I)`` (or the mirrored problem) over SPD ``S``.

    ``S = L L^T`` with ``L`` lower triangular and a log-parameterised diagonal;
    the objective and gradient are evaluated through the dense-``H`` divergence
    code, not through any closed form.
    """
    m = pop if isinstance(pop, SecondMoment) else pop.second_moment()
    if len(m.dims) != 2:
        raise ShapeError("one-sided problem is defined for matrices")
    da, db = m.dims
    d, other = (da, db) if side == "a" else (db, da)
    eye = np.eye(other)

    def precond(S):
        F = S / other
        return KronPrecond(F, eye) if side == "a" else KronPrecond(eye, F)

    # start from a scaled identity at the right overall magnitude
    scale = np.trace(m.X) / (da * db)
    x0 = np.zeros(d * (d + 1) // 2)
    diag_pos = [i * (i + 1) // 2 + i for i in range(d)]
    x0[diag_pos] = 0.5 * np.log(scale * other)
    k = 0 if side == "a" else 1

    def fun(x):
        L = _tril_unpack(x, d)
        S = L @ L.T
        p = precond(S)
        val = dv.kl_objective(m, p)
        grad_F = dv.kl_grad_factors(m, p)[k]
        grad_S = _sym(grad_F) / other
        return val, _tril_pack_grad(2.0 * grad_S @ L, L)

    res = optimize.minimize(
        fun, x0, jac=True, method="BFGS",
        options={"gtol": NUMERIC_TOL, "maxiter": NUMERIC_MAX_ITER},
    )
    L = _tril_unpack(res.x, d)
    # polish with Newton-free fixed-point refinement is deliberately avoided; BFGS
    # alone must land on the optimum for the cross-check to mean anything
    return L @ L.T


def one_sided_kl_min(pop, side: str = "a", check: bool = True, rtol: float = 1e-6) -> np.ndarray:
    """Closed-form one-sided minimiser ``E[G G^T]`` (or ``E[G^T G]``).

    With ``check`` the numeric minimiser is run as well and any disagreement
    beyond ``rtol`` raises :class:`OracleMismatch`.
    """
    samples = pop.samples
    if side == "a":
        closed = np.einsum("nij,nkj->ik", samples, samples) / len(pop)
    elif side == "b":
        closed = np.einsum("nji,njk->ik", samples, samples) / len(pop)
    else:
        raise ValueError(f"side must be 'a' or 'b', got {side!r}")
    closed = _sym(closed)
    if check:
        numeric = numeric_one_sided_kl_min(pop, side)
        gap = np.linalg.norm(numeric - closed) / np.linalg.norm(closed)
        if gap > rtol:
            raise OracleMismatch(f"one-sided closed form off by {gap:.3e} relative")
    return closed


# --- Frobenius (Van Loan-Pitsianis) ---------------------------------------


def nearest_kron_frobenius(m: SecondMoment, d_a: int | None = None, d_b: int | None = None) -> KronPrecond:
    """Frobenius-optimal ``S_a (x) S_b`` from the best rank-1 approximation of the rearranged ``H``."""
    da, db = (d_a, d_b) if d_a is not None else m.dims
    X4 = m.X.reshape(da, db, da, db)
    R = X4.transpose(0, 2, 1, 3).reshape(da * da, db * db)
    U, s, Vt = np.linalg.svd(R)
    A = np.sqrt(s[0]) * U[:, 0].reshape(da, da)
    B = np.sqrt(s[0]) * Vt[0].reshape(db, db)
    if np.trace(A) < 0:
        A, B = -A, -B
    return KronPrecond(_sym(A), _sym(B)).normalized()


# --- augmented diagonal ---------------------------------------------------


def diag_kl_min(pop, Q_a, Q_b, probes: int = 100, seed: int = 0, spread: float = 0.1, slack: float = 1e-12):
    """``d* = diag(Q^T H Q)`` for ``Q = Q_a (x) Q_b``, with a random-probe optimality check."""
    m = pop if isinstance(pop, SecondMoment) else pop.second_moment()
    Q = linalg.kron(Q_a, Q_b)
    d_star = np.einsum("ij,ik,kj->j", Q, m.X, Q)

    def obj(d):
        return dv.kl_objective(m, (Q * d) @ Q.T)

    if probes:
        rng = np.random.default_rng(seed)
        base = obj(d_star)
        for _ in range(probes):
            cand = d_star * np.exp(spread * rng.standard_normal(d_star.shape))
            if obj(cand) < base - slack * max(1.0, abs(base)):
                raise OracleMismatch("random probe found a lower KL than the closed-form diagonal")
    return d_star


# --- proximal step --------------------------------------------------------


@dataclass(frozen=True)
class ProxProblem:
    """Proximal subproblem around ``S_t`` with step ``beta2`` and block Fisher-Rao weights."""

    S_t: KronPrecond
    beta2: float

    def __post_init__(self):
        if not self.beta2 > 0:
            raise ValueError("beta2 must be positive")

    def weight(self, k: int) -> np.ndarray:
        """``W_k = (N / (2 d_k)) P_k (x) P_k`` acting on row-major ``vec``."""
        S = self.S_t.factors[k]
        P = _inv(S)
        N = int(np.prod(self.S_t.dims))
        return 0.5 * (N // S.shape[0]) * np.kron(P, P)


def prox_solve(pb: ProxProblem, grad_at_t, tol: float = 1e-12, max_iter: int = 100) -> KronPrecond:
    """Damped Newton on each block quadratic ``<g, X> + |X - S|_W^2 / (2 beta2)``."""
    out = []
    for k, (S, g) in enumerate(zip(pb.S_t.factors, grad_at_t)):
        W = pb.weight(k) / pb.beta2
        s = S.reshape(-1)
        gv = np.asarray(g, dtype=np.float64).reshape(-1)

        def f(x):
            r = x - s
            return gv @ x + 0.5 * r @ W @ r

        x = s.copy()
        scale = max(np.linalg.norm(gv), np.linalg.norm(W @ s), 1.0)
        for _ in range(max_iter):
            grad = gv + W @ (x - s)
            if np.linalg.norm(grad) <= tol * scale:
                break
            step = -np.linalg.solve(W, grad)
            t, fx = 1.0, f(x)
            while f(x + t * step) > fx + 1e-4 * t * grad @ step and t > 1e-8:
                t *= 0.5
            x = x + t * step
        else:
            raise NoConvergence("proximal Newton did not converge")
        out.append(_sym(x.reshape(S.shape)))
    return KronPrecond(*out)


# --- stationarity ---------------------------------------------------------


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.finfo(float).tiny))


def stationarity_residuals(m, s: KronPrecond, divergence: str = "kl") -> tuple[float, ...]:
    """Normalised residuals of the stationarity equations for the chosen divergence."""
    if isinstance(m, GradientPopulation):
        m = m.second_moment()
    fs = s.factors
    if divergence == "kl":
        return tuple(_rel(f, kl_fixed_point_rhs(m, fs, k)) for k, f in enumerate(fs))
    if len(fs) != 2:
        raise ShapeError(f"{divergence} residuals are defined for two factors")
    Sa, Sb = fs
    if divergence == "frob":
        ra = dv.contract_mode(m, 0, [None, Sb]) / np.sum(Sb * Sb)
        rb = dv.contract_mode(m, 1, [Sa, None]) / np.sum(Sa * Sa)
    elif divergence == "vn":
        ra = dv.contract_mode(m, 0, [None, None]) / np.trace(Sb)
        rb = dv.contract_mode(m, 1, [None, None]) / np.trace(Sa)
    else:
        raise ValueError(f"unknown divergence {divergence!r}")
    return _rel(Sa, _sym(ra)), _rel(Sb, _sym(rb))


def vn_closed_form(m: SecondMoment) -> KronPrecond:
    """``(E[G G^T], E[G^T G] / Tr E[G G^T])``, the trace-scaled Shampoo solution."""
    ga = dv.contract_mode(m, 0, [None, None])
    gb = dv.contract_mode(m, 1, [None, None])
    return KronPrecond(_sym(ga), _sym(gb) / np.trace(ga))


def optimal_scale(m: SecondMoment, s: KronPrecond) -> float:
    """Scalar ``c`` minimising ``KL(H, c S)``: ``Tr(H S^-1) / dim``."""
    tr = 2.0 * dv.kl_objective(m, s) - sum(
        (int(np.prod(s.dims)) // f.shape[0]) * linalg.spd_logdet(f) for f in s.factors
    )
    return tr / m.dim


# --- reference optimizer path ---------------------------------------------


@dataclass
class EigenPathState:
    """State of the idealised KL-Shampoo that re-decomposes its factors exactly."""

    Sa: np.ndarray
    Sb: np.ndarray
    Qa: np.ndarray
    Qb: np.ndarray
    la: np.ndarray
    lb: np.ndarray
    step: int = 0

    @classmethod
    def identity(cls, da: int, db: int) -> "EigenPathState":
        return cls(np.eye(da), np.eye(db), np.eye(da), np.eye(db), np.ones(da), np.ones(db))


def eigen_path_kl_shampoo_step(st: EigenPathState, theta, G, gamma: float, beta2: float, T: int = 1):
    """Idealised KL-Shampoo with exact eigendecomposition every ``T`` steps (no momentum)."""
    da, db = G.shape
    st.step += 1
    Pa = (st.Qa / st.la) @ st.Qa.T
    Pb = (st.Qb / st.lb) @ st.Qb.T
    Sa = (1 - beta2) * st.Sa + beta2 * G @ Pb @ G.T / db
    Sb = (1 - beta2) * st.Sb + beta2 * G.T @ Pa @ G / da
    st.Sa, st.Sb = _sym(Sa), _sym(Sb)
    if st.step % T == 0:
        st.la, st.Qa = np.linalg.eigh(st.Sa)
        st.lb, st.Qb = np.linalg.eigh(st.Sb)
    U = st.Qa.T @ G @ st.Qb
    U = U / np.sqrt(st.la)[:, None] / np.sqrt(st.lb)[None, :]
    return theta - gamma * st.Qa @ U @ st.Qb.T
