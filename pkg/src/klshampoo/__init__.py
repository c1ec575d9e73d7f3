"""Kronecker-factored preconditioners estimated by KL minimisation, with reference
oracles and a small experiment harness."""

from . import divergence, estimators, linalg, optimizers, oracle
from .divergence import KronPrecond, SecondMoment
from .optimizers import OptimizerConfig, ParamState, Variant, init_state, step

__version__ = "0.1.0"

__all__ = [
    "KronPrecond",
    "OptimizerConfig",
    "ParamState",
    "SecondMoment",
    "Variant",
    "divergence",
    "estimators",
    "init_state",
    "linalg",
    "optimizers",
    "oracle",
    "step",
]
