"""Cross-checks of the closed-form estimation rules against the brute-force oracles.

Each check takes a seed, builds a random instance and returns a residual
(smaller is better). :func:`run_claims` runs every check across a seed grid and
compares the worst residual with a tolerance profile.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .. import divergence as dv
from .. import estimators as est
from .. import oracle
from ..divergence import KronPrecond, SecondMoment
from ..errors import EmptyGrid, InvalidInput, OracleMismatch
from ..estimators import EmaConfig, SpdFactor

DEFAULT_GRID = tuple(range(20))
STRICT_FACTOR = 100.0
PROX_BETAS = (0.1, 0.3, 1.0)


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(np.linalg.norm(b), 1e-300))


def _dims(rng, lo, hi, n=2):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=n))


def _fresh(S) -> SpdFactor:
    return est.refresh_eigen(SpdFactor(np.asarray(S, dtype=np.float64), None, None))


# --- individual checks ----------------------------------------------------


def check_one_sided(seed: int) -> float:
    """Closed-form one-sided minimiser vs. BFGS on the dense KL objective."""
    rng = np.random.default_rng(seed)
    dims = _dims(rng, 2, 4)
    n = int(rng.integers(10, 101))
    pop = oracle.GradientPopulation(rng.standard_normal((n,) + dims), seed)
    worst = 0.0
    for side in "ab":
        closed = oracle.one_sided_kl_min(pop, side, check=False)
        worst = max(worst, _rel(oracle.numeric_one_sided_kl_min(pop, side), closed))
    return worst


def _mixed(seed, lo=2, hi=6, n=1000):
    rng = np.random.default_rng(seed)
    return oracle.mixed_population(_dims(rng, lo, hi), n, seed)


def check_flip_flop(seed: int) -> tuple[float, float]:
    """Worst stationarity residual and worst relative KL increase between sweeps."""
    res = oracle.flip_flop_kl(_mixed(seed))
    h = np.asarray(res.kl_history)
    rise = np.max(np.diff(h) / np.abs(h[:-1]), initial=0.0)
    return max(res.residuals), max(float(rise), 0.0)


def kl_gap(seed: int) -> tuple[float, float]:
    """Best-scaled KL of the two-sided fixed point and of the one-sided pair."""
    pop = _mixed(seed)
    m = pop.second_moment()
    two = oracle.flip_flop_kl(m).precond
    one = KronPrecond(oracle.one_sided_kl_min(pop, "a", check=False), oracle.one_sided_kl_min(pop, "b", check=False))
    return (
        dv.kl_div(m, two.scaled(oracle.optimal_scale(m, two))),
        dv.kl_div(m, one.scaled(oracle.optimal_scale(m, one))),
    )


def check_prox(seed: int, beta2: float) -> float:
    """One two-sided EMA step vs. Newton on the proximal subproblem."""
    rng = np.random.default_rng(seed)
    dims = _dims(rng, 2, 4)
    pop = oracle.GradientPopulation(rng.standard_normal((20,) + dims), seed)
    Sa, Sb = (oracle.random_spd(d, rng) for d in dims)
    fa, fb = est.kl_factor_ema(_fresh(Sa), _fresh(Sb), pop.samples, EmaConfig(beta2))
    m = pop.second_moment()
    S_t = KronPrecond(Sa, Sb)
    prox = oracle.prox_solve(oracle.ProxProblem(S_t, beta2), dv.kl_grad_factors(m, S_t))
    return max(_rel(fa.S, prox.Sa), _rel(fb.S, prox.Sb))


def check_eigenvalue_ema(seed: int) -> float:
    """With exact current eigenpairs, the eigenvalue EMA equals diag(Q^T S_new Q)."""
    rng = np.random.default_rng(seed)
    dims = _dims(rng, 2, 5)
    pop = oracle.GradientPopulation(rng.standard_normal((8,) + dims), seed)
    fa, fb = (_fresh(oracle.random_spd(d, rng)) for d in dims)
    c = EmaConfig(float(rng.uniform(0.05, 1.0)))
    la, lb = est.eigenvalue_ema_kl(fa, fb, pop.samples, c)
    na, nb = est.kl_factor_ema(fa, fb, pop.samples, c)
    want_a = np.einsum("ij,ik,kj->j", fa.basis, na.S, fa.basis)
    want_b = np.einsum("ij,ik,kj->j", fb.basis, nb.S, fb.basis)
    return max(_rel(la, want_a), _rel(lb, want_b))


def check_augmented(seed: int, probes: int = 100) -> float:
    """RMSProp in a fixed product basis vs. the diagonal KL minimiser (with probes)."""
    rng = np.random.default_rng(seed)
    dims = _dims(rng, 2, 4)
    pop = oracle.GradientPopulation(rng.standard_normal((30,) + dims), seed)
    Qa, Qb = (oracle.random_orthogonal(d, rng) for d in dims)
    try:
        d_star = oracle.diag_kl_min(pop, Qa, Qb, probes=probes, seed=seed)
    except OracleMismatch:
        return float("inf")
    fa, fb = SpdFactor(np.eye(dims[0]), Qa, None), SpdFactor(np.eye(dims[1]), Qb, None)
    d = est.augmented_eigen_ema(np.zeros(int(np.prod(dims))), fa, fb, pop.samples, EmaConfig(1.0))
    return _rel(d, d_star)


def check_vn(seed: int) -> float:
    rng = np.random.default_rng(seed)
    pop = oracle.GradientPopulation(rng.standard_normal((25,) + _dims(rng, 2, 5)), seed)
    m = pop.second_moment()
    return max(oracle.stationarity_residuals(m, oracle.vn_closed_form(m), "vn"))


def check_adafactor(seed: int) -> float:
    """Diagonal of the trace-scaled closed form vs. the Adafactor update on one sample."""
    rng = np.random.default_rng(seed)
    da, db = _dims(rng, 1, 6)
    G = rng.standard_normal((da, db))
    vn = oracle.vn_closed_form(SecondMoment.from_samples(G[None]))
    ra, rb = est.adafactor_diag_ema(np.zeros(da), np.zeros(db), G, EmaConfig(1.0))
    return max(_rel(ra, np.diag(vn.Sa)), _rel(rb, np.diag(vn.Sb)))


def frobenius_fixed_point(pop, beta2: float = 0.5, tol: float = 1e-13, max_iter: int = 10_000) -> KronPrecond:
    """Iterate the two-sided Frobenius EMA on a fixed population until stationary."""
    m = pop.second_moment()
    fa, fb = (SpdFactor.identity(d) for d in pop.dims)
    c = EmaConfig(beta2)
    for _ in range(max_iter):
        fa, fb = est.f_shampoo_ema(fa, fb, pop.samples, c, "v1")
        s = KronPrecond(fa.S, fb.S)
        if max(oracle.stationarity_residuals(m, s, "frob")) < tol:
            return s
    return s


def check_frobenius(seed: int) -> float:
    rng = np.random.default_rng(seed)
    pop = oracle.mixed_population(_dims(rng, 2, 4), 200, seed)
    m = pop.second_moment()
    fp = dv.frob_obj(m, frobenius_fixed_point(pop))
    svd = dv.frob_obj(m, oracle.nearest_kron_frobenius(m))
    return abs(fp - svd) / svd


def tensor_fixed_point(pop, beta2: float = 0.5, tol: float = 1e-13, max_iter: int = 10_000) -> KronPrecond:
    m = pop.second_moment()
    fs = [SpdFactor.identity(d) for d in pop.dims]
    c = EmaConfig(beta2)
    for _ in range(max_iter):
        fs = [est.refresh_eigen(f) for f in est.tensor_kl_factor_ema(*fs, pop.samples, c)]
        s = KronPrecond(*[f.S for f in fs])
        if max(oracle.stationarity_residuals(m, s, "kl")) < tol:
            break
    return s.normalized()


def fd_kl_grad(m: SecondMoment, s: KronPrecond, h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the KL objective along symmetric unit perturbations."""
    out = []
    for k, S in enumerate(s.factors):
        d = S.shape[0]
        g = np.zeros((d, d))
        for i in range(d):
            for j in range(i, d):
                E = np.zeros((d, d))
                E[i, j] = E[j, i] = 1.0
                fs_p = list(s.factors)
                fs_m = list(s.factors)
                fs_p[k] = S + h * E
                fs_m[k] = S - h * E
                diff = (dv.kl_objective(m, KronPrecond(*fs_p)) - dv.kl_objective(m, KronPrecond(*fs_m))) / (2 * h)
                g[i, j] = g[j, i] = diff if i == j else diff / 2
        out.append(g)
    return out


def check_tensor_fd(seed: int) -> float:
    pop = oracle.mixed_population((2, 3, 4), 500, seed)
    s = tensor_fixed_point(pop)
    return max(float(np.abs(g).max()) for g in fd_kl_grad(pop.second_moment(), s))


def check_tensor_reduction(seed: int) -> float:
    """A trailing unit mode leaves one two-sided update of the other modes unchanged.

    The 1x1 factor takes its own EMA and so carries scale; only the matrix
    factors are compared.
    """
    rng = np.random.default_rng(seed)
    da, db = _dims(rng, 2, 5)
    G = rng.standard_normal((4, da, db))
    Sa, Sb = oracle.random_spd(da, rng), oracle.random_spd(db, rng)
    c = EmaConfig(0.3)
    ma, mb = est.kl_factor_ema(_fresh(Sa), _fresh(Sb), G, c)
    ta, tb, _ = est.tensor_kl_factor_ema(_fresh(Sa), _fresh(Sb), _fresh(np.eye(1)), G[..., None], c)
    return max(_rel(ta.S, ma.S), _rel(tb.S, mb.S))


# --- suite ----------------------------------------------------------------


@dataclass(frozen=True)
class ClaimResult:
    name: str
    instances: int
    max_residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.max_residual <= self.tol)


DEFAULT_TOLS = {
    "one_sided_closed_form": 1e-6,
    "flip_flop_residual": 1e-10,
    "flip_flop_monotone": 1e-12,
    "kl_gap_ordering": 0.05,
    "ema_is_proximal_step": 1e-6,
    "eigenvalue_ema_fresh_basis": 1e-10,
    "augmented_diagonal_optimum": 1e-12,
    "vn_closed_form_stationarity": 1e-10,
    "adafactor_restriction": 1e-12,
    "frobenius_fixed_point_vs_svd": 1e-6,
    "tensor_fixed_point_gradient": 1e-6,
    "tensor_unit_mode_reduction": 1e-12,
}


def tolerances(profile: str) -> dict:
    if profile == "default":
        return dict(DEFAULT_TOLS)
    if profile == "strict":
        return {k: v / STRICT_FACTOR for k, v in DEFAULT_TOLS.items()}
    raise InvalidInput(f"unknown tolerance profile {profile!r}")


def run_claims(tol_profile: str = "default", grid=DEFAULT_GRID) -> dict:
    """Run every check over ``grid`` and report worst residuals against the profile."""
    seeds = [int(s) for s in grid]
    if not seeds:
        raise EmptyGrid("claim grid has no seeds")
    tols = tolerances(tol_profile)
    ff = [check_flip_flop(s) for s in seeds]
    gaps = [kl_gap(s) for s in seeds]
    losses = sum(1 for two, one in gaps if two > one)
    raw = {
        "one_sided_closed_form": [check_one_sided(s) for s in seeds],
        "flip_flop_residual": [r for r, _ in ff],
        "flip_flop_monotone": [r for _, r in ff],
        "kl_gap_ordering": [losses / len(seeds)] * len(seeds),
        "ema_is_proximal_step": [check_prox(s, b) for s in seeds for b in PROX_BETAS],
        "eigenvalue_ema_fresh_basis": [check_eigenvalue_ema(s) for s in seeds],
        "augmented_diagonal_optimum": [check_augmented(s) for s in seeds],
        "vn_closed_form_stationarity": [check_vn(s) for s in seeds],
        "adafactor_restriction": [check_adafactor(s) for s in seeds],
        "frobenius_fixed_point_vs_svd": [check_frobenius(s) for s in seeds],
        "tensor_fixed_point_gradient": [check_tensor_fd(s) for s in seeds[:3]],
        "tensor_unit_mode_reduction": [check_tensor_reduction(s) for s in seeds],
    }
    results = [ClaimResult(k, len(v), float(max(v)), tols[k]) for k, v in raw.items()]
    dominant = sorted(results, key=lambda r: r.max_residual / r.tol, reverse=True)
    return {
        "profile": tol_profile,
        "seeds": seeds,
        "passed": all(r.passed for r in results),
        "claims": [{**asdict(r), "passed": r.passed} for r in results],
        "dominant": [r.name for r in dominant if not r.passed],
    }


def format_report(report: dict) -> str:
    lines = [f"profile={report['profile']} seeds={len(report['seeds'])}"]
    for c in report["claims"]:
        flag = "PASS" if c["passed"] else "FAIL"
        lines.append(f"{flag} {c['name']:<32} n={c['instances']:<4} max={c['max_residual']:.3e} tol={c['tol']:.1e}")
    if report["dominant"]:
        lines.append("dominant: " + ", ".join(report["dominant"]))
    return "\n".join(lines)
