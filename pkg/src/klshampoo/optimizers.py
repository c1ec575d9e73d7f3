"""Full optimizer steps built from the estimators.

A step is split in two: :func:`estimate` folds the gradient into the state
(factor EMA, eigenvalue EMA, basis refresh, augmented diagonal), then
:func:`precondition` maps the gradient through the current state. Momentum
(heavy ball on the preconditioned update) and decoupled weight decay are
applied last, identically for every variant.

Basis refreshes happen at the end of estimation on steps where
``step % T == 0`` (steps are counted from 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import estimators as est
from .errors import InvalidInput, StateError, UnsupportedShape
from .estimators import EmaConfig, SpdFactor


class Variant(str, Enum):
    SHAMPOO = "shampoo"
    SOAP = "soap"
    KL_SHAMPOO = "kl_shampoo"
    KL_SOAP = "kl_soap"
    F_SHAMPOO_V1 = "f_shampoo_v1"
    F_SHAMPOO_V2 = "f_shampoo_v2"
    VN_SHAMPOO_V1 = "vn_shampoo_v1"
    VN_SHAMPOO_V2 = "vn_shampoo_v2"
    ADAM = "adam"
    SGD = "sgd"


TENSOR_VARIANTS = {Variant.KL_SHAMPOO, Variant.SGD, Variant.ADAM}
# variants that keep Kronecker eigenvalues (lambda) in their factor caches
_WITH_LAMBDA = {
    Variant.SHAMPOO,
    Variant.KL_SHAMPOO,
    Variant.KL_SOAP,
    Variant.F_SHAMPOO_V1,
    Variant.F_SHAMPOO_V2,
    Variant.VN_SHAMPOO_V1,
    Variant.VN_SHAMPOO_V2,
}


@dataclass(frozen=True)
class OptimizerConfig:
    """Hyperparameters shared by all variants.

    ``beta2`` is the EMA *weight on the new sample* (one minus Adam's beta2).
    ``p`` is the matrix power used by plain Shampoo only; every eigenvalue-based
    variant preconditions with the inverse square root.
    """

    variant: Variant = Variant.KL_SHAMPOO
    gamma: float = 1e-2
    beta1: float = 0.0
    beta2: float = 0.05
    kappa: float = 0.0
    p: float = 0.5
    T: int = 10
    weight_decay: float = 0.0
    grafting: bool = False
    epsilon: float = 1e-8
    bias_correction: bool = False
    init_scale: float = 1.0
    eig_floor: float = est.EIG_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        if not self.gamma > 0:
            raise InvalidInput("gamma must be positive")
        if not 0.0 <= self.beta1 < 1.0:
            raise InvalidInput("beta1 must lie in [0, 1)")
        if not 0.0 < self.beta2 <= 1.0:
            raise InvalidInput("beta2 must lie in (0, 1]")
        if self.kappa < 0 or self.weight_decay < 0:
            raise InvalidInput("kappa and weight_decay must be non-negative")
        if self.p not in (0.25, 0.5):
            raise InvalidInput("p must be 1/4 or 1/2")
        if int(self.T) != self.T or self.T < 1:
            raise InvalidInput("T must be an integer >= 1")
        if self.grafting and self.variant is not Variant.SHAMPOO:
            raise InvalidInput("grafting is only defined for plain Shampoo")
        if not self.epsilon > 0:
            raise InvalidInput("epsilon must be positive")
        if not self.init_scale > 0:
            raise InvalidInput("init_scale must be positive")

    @property
    def ema(self) -> EmaConfig:
        return EmaConfig(self.beta2, self.kappa, self.eig_floor)


@dataclass
class ParamState:
    """Per-parameter buffers; exactly those the variant needs, nothing else.

    ``adam_v`` is Adam's second moment (standalone Adam, or the grafting
    reference for Shampoo). For standalone Adam ``momentum`` holds the first
    moment.
    """

    shape: tuple[int, ...]
    factors: list[SpdFactor] = field(default_factory=list)
    d: np.ndarray | None = None
    momentum: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    step: int = 0
    tau: float = 1.0

    def buffer_elements(self) -> int:
        n = sum(f.nbytes_elements() for f in self.factors)
        for buf in (self.d, self.momentum, self.adam_v):
            if buf is not None:
                n += buf.size
        return n


def init_state(shape, cfg: OptimizerConfig) -> ParamState:
    shape = tuple(int(s) for s in shape)
    v = cfg.variant
    if len(shape) not in (2, 3) or min(shape) < 1:
        raise UnsupportedShape(f"parameters must be 2-D or 3-D, got {shape}")
    if len(shape) == 3 and v not in TENSOR_VARIANTS:
        raise UnsupportedShape(f"{v.value} does not support 3-D parameters")
    st = ParamState(shape=shape, momentum=np.zeros(shape))
    if v in (Variant.SGD, Variant.ADAM):
        if v is Variant.ADAM:
            st.adam_v = np.zeros(shape)
        return st
    st.factors = [
        SpdFactor.identity(d, cfg.init_scale, with_values=v in _WITH_LAMBDA) for d in shape
    ]
    if v in (Variant.SOAP, Variant.KL_SOAP):
        st.d = np.zeros(int(np.prod(shape)))
    if cfg.grafting:
        st.adam_v = np.zeros(shape)
    if v in (Variant.VN_SHAMPOO_V1,):
        st.tau = est.vn_trace_scale(*st.factors, "v1")
    return st


# --- estimation -----------------------------------------------------------


def _refresh_due(st: ParamState, cfg: OptimizerConfig) -> bool:
    return st.step % cfg.T == 0


def _eigen_step(st: ParamState, deltas, cfg: OptimizerConfig):
    """Factor EMA, eigenvalue EMA under the current basis, then an occasional QR refresh."""
    c = cfg.ema
    new = []
    for f, delta in zip(st.factors, deltas):
        lam = est.eigenvalue_ema(f, delta, c)
        f = est.factor_ema(f, delta, c.beta2)
        new.append(SpdFactor(f.S, f.basis, lam, stale=True))
    if _refresh_due(st, cfg):
        new = [est.eigenbasis_qr_refresh(f) for f in new]
    st.factors = new


def _check_variant(st: ParamState, cfg: OptimizerConfig, *allowed: Variant):
    if cfg.variant not in allowed:
        raise StateError(f"state step for {[a.value for a in allowed]} called with {cfg.variant.value}")
    if st.momentum is None:
        raise StateError("state was not initialised")


def estimate(st: ParamState, G: np.ndarray, cfg: OptimizerConfig) -> None:
    """Fold one gradient into ``st`` (increments the step counter)."""
    G = np.asarray(G, dtype=np.float64)
    if G.shape != st.shape:
        raise StateError(f"gradient shape {G.shape} does not match state {st.shape}")
    st.step += 1
    v, c = cfg.variant, cfg.ema
    if v is Variant.SGD:
        return
    if v is Variant.ADAM:
        st.momentum = cfg.beta1 * st.momentum + (1.0 - cfg.beta1) * G
        st.adam_v = (1.0 - c.beta2) * st.adam_v + c.beta2 * G**2
        return
    if v is Variant.SHAMPOO:
        fa, fb = est.shampoo_factor_ema(*st.factors, G, c)
        if _refresh_due(st, cfg):
            fa, fb = (est.refresh_eigen(f) for f in (fa, fb))
            fa, fb = (
                SpdFactor(f.S, f.basis, np.maximum(f.values, c.eig_floor)) for f in (fa, fb)
            )
        st.factors = [fa, fb]
        if cfg.grafting:
            st.adam_v = (1.0 - c.beta2) * st.adam_v + c.beta2 * G**2
        return
    if v is Variant.SOAP:
        fa, fb = est.shampoo_factor_ema(*st.factors, G, c)
        if _refresh_due(st, cfg):
            fa, fb = est.eigenbasis_qr_refresh(fa), est.eigenbasis_qr_refresh(fb)
        st.factors = [fa, fb]
        st.d = est.augmented_eigen_ema(st.d, fa, fb, G, c)
        return
    if v in (Variant.KL_SHAMPOO, Variant.KL_SOAP):
        _eigen_step(st, est.kl_deltas(st.factors, G, c), cfg)
        if v is Variant.KL_SOAP:
            st.d = est.augmented_eigen_ema(st.d, *st.factors, G, c)
        return
    if v in (Variant.F_SHAMPOO_V1, Variant.F_SHAMPOO_V2):
        _eigen_step(st, est.f_deltas(*st.factors, G, v.value[-2:]), cfg)
        return
    if v in (Variant.VN_SHAMPOO_V1, Variant.VN_SHAMPOO_V2):
        variant = v.value[-2:]
        _eigen_step(st, est.vn_deltas(*st.factors, G, variant), cfg)
        st.tau = est.vn_trace_scale(*st.factors, variant)
        return
    raise StateError(f"unhandled variant {v}")


# --- preconditioning ------------------------------------------------------


def _kron_eigen_apply(st: ParamState, G: np.ndarray, power: float, kappa: float, floor: float):
    bases = [f.basis for f in st.factors]
    U = est.project(G, bases)
    for k, f in enumerate(st.factors):
        scale = np.maximum(f.values, floor) + kappa
        shape = [1] * U.ndim
        shape[k] = -1
        U = U * (scale**power).reshape(shape)
    return est.unproject(U, bases)


def _augmented_apply(st: ParamState, G: np.ndarray, eps: float):
    bases = [f.basis for f in st.factors]
    U = est.project(G, bases)
    U = U / np.sqrt(st.d.reshape(U.shape) + eps)
    return est.unproject(U, bases)


def adam_direction(st: ParamState, G: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
    """Adam/RMSProp direction from the stored second moment.

    For standalone Adam the numerator is the first moment; for the grafting
    reference it is the raw gradient.
    """
    v = st.adam_v
    num = st.momentum if cfg.variant is Variant.ADAM else G
    if cfg.bias_correction and st.step > 0:
        v = v / (1.0 - (1.0 - cfg.beta2) ** st.step)
        if cfg.variant is Variant.ADAM and cfg.beta1 > 0:
            num = num / (1.0 - cfg.beta1**st.step)
    return num / (np.sqrt(v) + cfg.epsilon)


def precondition(st: ParamState, G: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
    """Preconditioned direction for ``G`` under the current state (no state change)."""
    G = np.asarray(G, dtype=np.float64)
    v = cfg.variant
    if v is Variant.SGD:
        return G.copy()
    if v is Variant.ADAM:
        return adam_direction(st, G, cfg)
    if v is Variant.SHAMPOO:
        u = _kron_eigen_apply(st, G, -cfg.p, cfg.kappa, cfg.eig_floor)
        if cfg.grafting:
            nu = np.linalg.norm(u)
            if nu > 0:
                u = u * (np.linalg.norm(adam_direction(st, G, cfg)) / nu)
        return u
    if v in (Variant.SOAP, Variant.KL_SOAP):
        return _augmented_apply(st, G, cfg.epsilon)
    u = _kron_eigen_apply(st, G, -0.5, cfg.kappa, cfg.eig_floor)
    if v is Variant.VN_SHAMPOO_V1:
        u = u / np.sqrt(st.tau)
    return u


def apply_update(st: ParamState, theta: np.ndarray, u: np.ndarray, cfg: OptimizerConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if cfg.variant is not Variant.ADAM:
        st.momentum = cfg.beta1 * st.momentum + u
        u = st.momentum
    return (1.0 - cfg.gamma * cfg.weight_decay) * theta - cfg.gamma * u


def step(st: ParamState, theta, G, cfg: OptimizerConfig) -> np.ndarray:
    """One optimizer iteration; returns the new parameters and mutates ``st``."""
    if st.momentum is None:
        raise StateError("state was not initialised")
    estimate(st, G, cfg)
    return apply_update(st, theta, precondition(st, G, cfg), cfg)


def _typed_step(*allowed: Variant):
    def run(st: ParamState, theta, G, cfg: OptimizerConfig) -> np.ndarray:
        _check_variant(st, cfg, *allowed)
        return step(st, theta, G, cfg)

    return run


step_shampoo = _typed_step(Variant.SHAMPOO)
step_soap = _typed_step(Variant.SOAP)
step_kl_shampoo = _typed_step(Variant.KL_SHAMPOO)
step_kl_soap = _typed_step(Variant.KL_SOAP)
step_f_shampoo = _typed_step(Variant.F_SHAMPOO_V1, Variant.F_SHAMPOO_V2)
step_vn_shampoo = _typed_step(Variant.VN_SHAMPOO_V1, Variant.VN_SHAMPOO_V2)
step_adam = _typed_step(Variant.ADAM)
step_sgd = _typed_step(Variant.SGD)

