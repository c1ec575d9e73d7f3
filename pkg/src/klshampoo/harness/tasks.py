"""Small synthetic training problems with seeded, platform-independent data.

Randomness comes from ``numpy.random.Generator`` backed by PCG64, seeded from
the task seed (data) and ``seed + 1`` (mini-batch sampling), so a run is a pure
function of ``(TaskSpec, OptimizerConfig)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import linalg
from ..errors import InvalidInput

MAX_DIM = 64


class TaskKind(str, Enum):
    KRON_QUADRATIC = "kron_quadratic"
    MLP_REGRESSION = "mlp_regression"
    SOFTMAX_CLASSIFICATION = "softmax_classification"
    TENSOR3_QUADRATIC = "tensor3_quadratic"


DEFAULT_DIMS = {
    TaskKind.KRON_QUADRATIC: (8, 6),
    TaskKind.MLP_REGRESSION: (6, 16, 3),
    TaskKind.SOFTMAX_CLASSIFICATION: (10, 4),
    TaskKind.TENSOR3_QUADRATIC: (2, 3, 4),
}

# Largest step sizes for which every optimizer keeps the smoothed loss of the
# default kron_quadratic task (sampled gradients, batch 16) non-increasing over
# 1000 steps. With exact gradients the one-sided factors become rank one, so
# shampoo and the Frobenius variants need damping there.
STABLE_GAMMA = {v: 1e-3 for v in (
    "adam", "shampoo", "soap", "kl_shampoo", "kl_soap",
    "f_shampoo_v1", "f_shampoo_v2", "vn_shampoo_v1", "vn_shampoo_v2",
)}
STABLE_GAMMA["sgd"] = 0.02


@dataclass(frozen=True)
class TaskSpec:
    """What to run. ``batch <= 0`` asks for exact (full-population) gradients."""

    kind: TaskKind = TaskKind.KRON_QUADRATIC
    dims: tuple[int, ...] = ()
    seed: int = 0
    steps: int = 500
    batch: int = 16

    def __post_init__(self):
        kind = TaskKind(self.kind)
        object.__setattr__(self, "kind", kind)
        dims = tuple(int(d) for d in self.dims) or DEFAULT_DIMS[kind]
        object.__setattr__(self, "dims", dims)
        want = 3 if kind in (TaskKind.MLP_REGRESSION, TaskKind.TENSOR3_QUADRATIC) else 2
        if len(dims) != want:
            raise InvalidInput(f"{kind.value} takes {want} dims, got {dims}")
        if min(dims) < 1 or max(dims) > MAX_DIM:
            raise InvalidInput(f"dims must lie in [1, {MAX_DIM}], got {dims}")
        if int(self.steps) < 1:
            raise InvalidInput("steps must be >= 1")


def _spd(d, rng, cond=10.0):
    Q, R = np.linalg.qr(rng.standard_normal((d, d)))
    Q = Q * np.sign(np.diag(R))
    lam = np.exp(rng.uniform(0.0, np.log(cond), size=d))
    S = (Q * lam) @ Q.T
    S = 0.5 * (S + S.T)
    return S * (d / np.trace(S))


@dataclass
class Task:
    """A loss over a list of parameter arrays with exact and sampled gradients."""

    spec: TaskSpec
    params0: list[np.ndarray]
    data: dict = field(default_factory=dict)

    def loss(self, params) -> float:
        raise NotImplementedError

    def grad(self, params, rng) -> list[np.ndarray]:
        raise NotImplementedError


class KronQuadratic(Task):
    """``1/2 vec(Theta)^T (A (x) B (x) ...) vec(Theta)`` as a realizable regression.

    Each sample ``X`` is matrix (tensor) normal with factors ``A, B, ...`` and
    contributes ``1/2 <X, Theta>^2``, so the exact loss is the quadratic above
    and the gradient noise vanishes at the optimum. Its second moment is
    ``2 L (A (x) B) + 2 H theta theta^T H`` for single samples, i.e. Kronecker
    up to a rank-one term.
    """

    def __init__(self, spec: TaskSpec):
        rng = np.random.default_rng(spec.seed)
        factors = [_spd(d, rng) for d in spec.dims]
        roots = [linalg.matrix_power_from_eigen(linalg.sym_eigen(f), 0.5) for f in factors]
        theta0 = rng.standard_normal(spec.dims)
        super().__init__(spec, [theta0], {"factors": factors, "roots": roots})

    def _apply(self, T, mats):
        for k, M in enumerate(mats):
            T = np.moveaxis(np.tensordot(T, M, axes=([k + T.ndim - len(mats)], [1])), -1, k + T.ndim - len(mats))
        return T

    def hess_apply(self, theta):
        return self._apply(theta, self.data["factors"])

    def loss(self, params) -> float:
        theta = params[0]
        return 0.5 * float(np.sum(theta * self.hess_apply(theta)))

    def grad(self, params, rng) -> list[np.ndarray]:
        theta = params[0]
        if self.spec.batch <= 0:
            return [self.hess_apply(theta)]
        X = rng.standard_normal((self.spec.batch,) + self.spec.dims)
        X = self._apply(X, self.data["roots"])
        r = np.tensordot(X, theta, axes=theta.ndim)
        return [np.tensordot(r, X, axes=1) / self.spec.batch]


class MlpRegression(Task):
    """One tanh hidden layer fit to a fixed random teacher; biases folded into the weights."""

    N_TRAIN = 512

    def __init__(self, spec: TaskSpec):
        d_in, hidden, d_out = spec.dims
        rng = np.random.default_rng(spec.seed)
        X = rng.standard_normal((self.N_TRAIN, d_in))
        Xb = np.hstack([X, np.ones((self.N_TRAIN, 1))])
        T1 = rng.standard_normal((hidden, d_in + 1)) / np.sqrt(d_in + 1)
        T2 = rng.standard_normal((d_out, hidden + 1)) / np.sqrt(hidden + 1)
        Y = self._forward([T1, T2], Xb)[0]
        W1 = rng.standard_normal((hidden, d_in + 1)) / np.sqrt(d_in + 1)
        W2 = rng.standard_normal((d_out, hidden + 1)) / np.sqrt(hidden + 1)
        super().__init__(spec, [W1, W2], {"X": Xb, "Y": Y})

    @staticmethod
    def _forward(params, X):
        W1, W2 = params
        h = np.tanh(X @ W1.T)
        hb = np.hstack([h, np.ones((X.shape[0], 1))])
        return hb @ W2.T, h, hb

    def _loss_grad(self, params, X, Y):
        out, h, hb = self._forward(params, X)
        r = out - Y
        n = X.shape[0]
        loss = 0.5 * float(np.sum(r * r)) / n
        g2 = r.T @ hb / n
        back = (r @ params[1][:, :-1]) * (1.0 - h * h)
        g1 = back.T @ X / n
        return loss, [g1, g2]

    def loss(self, params) -> float:
        return self._loss_grad(params, self.data["X"], self.data["Y"])[0]

    def grad(self, params, rng):
        X, Y = self.data["X"], self.data["Y"]
        if self.spec.batch > 0:
            idx = rng.integers(0, X.shape[0], size=self.spec.batch)
            X, Y = X[idx], Y[idx]
        return self._loss_grad(params, X, Y)[1]


class SoftmaxClassification(Task):
    """Multinomial logistic regression on Gaussian clusters; ``dims = (features, classes)``."""

    N_TRAIN = 512

    def __init__(self, spec: TaskSpec):
        d_in, classes = spec.dims
        rng = np.random.default_rng(spec.seed)
        centers = 2.0 * rng.standard_normal((classes, d_in))
        labels = rng.integers(0, classes, size=self.N_TRAIN)
        X = centers[labels] + rng.standard_normal((self.N_TRAIN, d_in))
        W = np.zeros((classes, d_in))
        super().__init__(spec, [W], {"X": X, "y": labels})

    def _loss_grad(self, W, X, y):
        z = X @ W.T
        z = z - z.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        n = X.shape[0]
        loss = -float(logp[np.arange(n), y].mean())
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return loss, p.T @ X / n

    def loss(self, params) -> float:
        return self._loss_grad(params[0], self.data["X"], self.data["y"])[0]

    def grad(self, params, rng):
        X, y = self.data["X"], self.data["y"]
        if self.spec.batch > 0:
            idx = rng.integers(0, X.shape[0], size=self.spec.batch)
            X, y = X[idx], y[idx]
        return [self._loss_grad(params[0], X, y)[1]]


def make_task(spec: TaskSpec) -> Task:
    if spec.kind in (TaskKind.KRON_QUADRATIC, TaskKind.TENSOR3_QUADRATIC):
        return KronQuadratic(spec)
    if spec.kind is TaskKind.MLP_REGRESSION:
        return MlpRegression(spec)
    return SoftmaxClassification(spec)
