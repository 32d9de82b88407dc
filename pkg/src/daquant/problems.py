"""Learning tasks: per-sample loss and gradient, exact risk, smoothness constants.

A data point is the vector ``z`` that goes through the quantizer plus an
optional integer label.  Regression targets ride inside ``z`` and get
quantized with the features; class labels are sent losslessly beside it.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from daquant.quant.scalar import scalar_1bit_decode, scalar_1bit_encode


class TaskKind(str, enum.Enum):
    LEAST_SQUARES = "least_squares"
    LOGISTIC = "logistic"
    POLY_LOGISTIC = "poly_logistic"
    MLP2 = "mlp2"


@dataclass(frozen=True)
class TaskSpec:
    kind: TaskKind = TaskKind.LEAST_SQUARES
    d: int = 10
    N: int = 1000
    B: float = 1.0
    hidden: int = 16
    degree: int = 3
    activation: str = "tanh"
    noise: float = 0.1
    seed: int = 0
    data_path: str | None = None
    C_z: float | None = None
    C_w: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TaskKind(self.kind))


class Task:
    """Base class; subclasses fill in the model."""

    kind: TaskKind
    # True when the loss is guaranteed nonnegative and gradients Lipschitz
    theory_ready = True

    def __init__(self, spec: TaskSpec, Z: np.ndarray, labels: np.ndarray | None, scale: float):
        if Z.shape[0] == 0:
            raise ValueError("empty dataset")
        self.spec = spec
        self.Z = Z
        self.labels = labels
        self.scale = scale
        self.B = float(spec.B)
        self.d = spec.d

    # -- sizes -----------------------------------------------------------
    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def zdim(self) -> int:
        return self.Z.shape[1]

    @property
    def num_classes(self) -> int | None:
        return None if self.labels is None else 2

    @property
    def label_bits(self) -> int:
        c = self.num_classes
        return 0 if c is None else (c - 1).bit_length()

    def label_code(self, y) -> int:
        return 0 if y is None else int(y > 0)

    def label_from_code(self, code: int):
        return None if self.labels is None else (1 if code else -1)

    def point(self, i: int):
        return self.Z[i], (None if self.labels is None else int(self.labels[i]))

    # -- model -------------------------------------------------------------
    h: int

    def init_w(self) -> np.ndarray:
        return np.zeros(self.h)

    def loss(self, w, z, y=None) -> float:
        raise NotImplementedError

    def grad(self, w, z, y=None) -> np.ndarray:
        raise NotImplementedError

    def full_risk(self, w) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def Cz_analytic(self, radius: float | None) -> float | None:
        return self.spec.C_z

    def Cw_analytic(self, radius: float | None = None) -> float | None:
        return self.spec.C_w

    def _check(self, w, z) -> tuple[np.ndarray, np.ndarray]:
        w = np.asarray(w, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if w.shape != (self.h,):
            raise ValueError(f"w must have shape ({self.h},), got {w.shape}")
        if z.shape != (self.zdim,):
            raise ValueError(f"z must have shape ({self.zdim},), got {z.shape}")
        return w, z


def _with_bias(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X, np.ones(X.shape[:-1] + (1,))], axis=-1)


class LeastSquaresTask(Task):
    """``0.5 * (w_x . x + w_b - y)**2`` with ``z = [x; y]``."""

    kind = TaskKind.LEAST_SQUARES

    @property
    def h(self) -> int:
        return self.zdim  # d weights + bias

    def _split(self, z):
        return z[..., :-1], z[..., -1]

    def loss(self, w, z, y=None) -> float:
        w, z = self._check(w, z)
        x, t = self._split(z)
        r = w[:-1] @ x + w[-1] - t
        return 0.5 * r * r

    def grad(self, w, z, y=None) -> np.ndarray:
        w, z = self._check(w, z)
        x, t = self._split(z)
        r = w[:-1] @ x + w[-1] - t
        return r * np.append(x, 1.0)

    def full_risk(self, w):
        X, t = self._split(self.Z)
        Xb = _with_bias(X)
        r = Xb @ w - t
        return 0.5 * float(np.mean(r * r)), Xb.T @ r / self.N

    def optimum(self) -> np.ndarray:
        X, t = self._split(self.Z)
        Xb = _with_bias(X)
        return np.linalg.solve(Xb.T @ Xb, Xb.T @ t)

    def Cz_analytic(self, radius):
        if self.spec.C_z is not None:
            return self.spec.C_z
        if radius is None:
            return None
        # ||dg/dz|| <= |r| + ||[x;1]|| * ||[w_x; -1]||
        B, R = self.B, radius
        return math.sqrt(R * R + 1) * B + R + math.sqrt(B * B + 1) * math.sqrt(R * R + 1)

    def Cw_analytic(self, radius=None):
        if self.spec.C_w is not None:
            return self.spec.C_w
        return self.B**2 + 1.0


class LogisticTask(Task):
    """``log(1 + exp(-y (w_x . x + w_b)))`` with ``z = x`` and labels in {-1, +1}."""

    kind = TaskKind.LOGISTIC

    @property
    def h(self) -> int:
        return self.zdim + 1

    def loss(self, w, z, y=None) -> float:
        w, z = self._check(w, z)
        return float(np.logaddexp(0.0, -y * (w[:-1] @ z + w[-1])))

    def grad(self, w, z, y=None) -> np.ndarray:
        w, z = self._check(w, z)
        s = -y * expit(-y * (w[:-1] @ z + w[-1]))
        return s * np.append(z, 1.0)

    def full_risk(self, w):
        Xb = _with_bias(self.Z)
        u = self.labels * (Xb @ w)
        s = -self.labels * expit(-u)
        return float(np.mean(np.logaddexp(0.0, -u))), Xb.T @ s / self.N

    def optimum(self, radius: float | None = None) -> np.ndarray:
        return _minimize_risk(self, radius)

    def Cz_analytic(self, radius):
        if self.spec.C_z is not None:
            return self.spec.C_z
        if radius is None:
            return None
        # ||dg/dx|| <= s + s(1-s) K with s = sigma(-u), K = ||[x;1]|| ||w_x||;
        # the sup over s in [0, 1] is (1+K)^2 / 4K once K >= 1.
        K = radius * math.sqrt(self.B**2 + 1)
        return 1.0 if K <= 1.0 else (1.0 + K) ** 2 / (4.0 * K)

    def Cw_analytic(self, radius=None):
        if self.spec.C_w is not None:
            return self.spec.C_w
        return 0.25 * (self.B**2 + 1)


class PolyLogisticTask(Task):
    """Scalar ``z`` in [-1, 1], features ``[1, z, ..., z**(h-1)]``, loss
    ``log(1 + exp(-y w.v(z))) / sqrt(h)``, weights kept in the unit ball."""

    kind = TaskKind.POLY_LOGISTIC

    @property
    def h(self) -> int:
        return self.spec.degree + 1

    def features(self, z) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)[..., :1] ** np.arange(self.h)

    def loss(self, w, z, y=None) -> float:
        w, z = self._check(w, z)
        return float(np.logaddexp(0.0, -y * (w @ self.features(z)))) / math.sqrt(self.h)

    def grad(self, w, z, y=None) -> np.ndarray:
        w, z = self._check(w, z)
        v = self.features(z)
        return -y * expit(-y * (w @ v)) * v / math.sqrt(self.h)

    def full_risk(self, w):
        V = self.features(self.Z)
        u = self.labels * (V @ w)
        s = -self.labels * expit(-u)
        root = math.sqrt(self.h)
        return float(np.mean(np.logaddexp(0.0, -u))) / root, V.T @ s / (self.N * root)

    def Cz_analytic(self, radius):
        if self.spec.C_z is not None:
            return self.spec.C_z
        R = 1.0 if radius is None else radius
        v1 = math.sqrt(sum(i * i for i in range(1, self.h)))  # bound on ||v'(z)||
        return v1 * (0.25 * R + 1.0 / math.sqrt(self.h))

    def Cw_analytic(self, radius=None):
        if self.spec.C_w is not None:
            return self.spec.C_w
        return 0.25 * math.sqrt(self.h)


_ACTIVATIONS = {
    "tanh": (np.tanh, lambda p, a: 1.0 - a * a),
    "softplus": (lambda p: np.logaddexp(0.0, p), lambda p, a: expit(p)),
    # not differentiable at 0: only for the empirical variant
    "relu": (lambda p: np.maximum(p, 0.0), lambda p, a: (p > 0).astype(np.float64)),
}


class MLP2Task(Task):
    """Two-layer perceptron, binary logistic output.

    Parameters are packed as ``[W1 (hidden x d), b1, v, c]``.
    """

    kind = TaskKind.MLP2

    def __init__(self, spec, Z, labels, scale):
        super().__init__(spec, Z, labels, scale)
        if spec.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {spec.activation!r}")
        self.act, self.dact = _ACTIVATIONS[spec.activation]
        self.theory_ready = spec.activation != "relu"

    @property
    def H(self) -> int:
        return self.spec.hidden

    @property
    def h(self) -> int:
        return self.H * (self.zdim + 1) + self.H + 1

    def unpack(self, w):
        H, d = self.H, self.zdim
        W1 = w[: H * d].reshape(H, d)
        b1 = w[H * d : H * d + H]
        v = w[H * d + H : H * d + 2 * H]
        return W1, b1, v, w[-1]

    def init_w(self) -> np.ndarray:
        rng = np.random.default_rng([self.spec.seed, 0x5EED])
        w = np.zeros(self.h)
        W1, _, v, _ = self.unpack(w)
        W1[:] = rng.normal(scale=1.0 / math.sqrt(self.zdim), size=W1.shape)
        v[:] = rng.normal(scale=1.0 / math.sqrt(self.H), size=v.shape)
        return w

    def _forward(self, w, z):
        W1, b1, v, c = self.unpack(w)
        pre = W1 @ z + b1
        a = self.act(pre)
        return pre, a, float(v @ a + c)

    def loss(self, w, z, y=None) -> float:
        w, z = self._check(w, z)
        return float(np.logaddexp(0.0, -y * self._forward(w, z)[2]))

    def grad(self, w, z, y=None) -> np.ndarray:
        w, z = self._check(w, z)
        W1, b1, v, c = self.unpack(w)
        pre, a, out = self._forward(w, z)
        s = -y * expit(-y * out)
        dpre = s * v * self.dact(pre, a)
        return np.concatenate([np.outer(dpre, z).ravel(), dpre, s * a, [s]])

    def full_risk(self, w):
        W1, b1, v, c = self.unpack(w)
        pre = self.Z @ W1.T + b1
        a = self.act(pre)
        u = self.labels * (a @ v + c)
        s = -self.labels * expit(-u)
        dpre = (s[:, None] * v) * self.dact(pre, a)
        g = np.concatenate([(dpre.T @ self.Z).ravel(), dpre.sum(0), a.T @ s, [s.sum()]])
        return float(np.mean(np.logaddexp(0.0, -u))), g / self.N


_TASKS = {
    TaskKind.LEAST_SQUARES: LeastSquaresTask,
    TaskKind.LOGISTIC: LogisticTask,
    TaskKind.POLY_LOGISTIC: PolyLogisticTask,
    TaskKind.MLP2: MLP2Task,
}


def normalize_rows(Z: np.ndarray, B: float) -> tuple[np.ndarray, float]:
    """Scale all rows by one constant so the largest l2 norm is exactly ``B``."""
    norms = np.linalg.norm(Z, axis=1)
    top = float(norms.max(initial=0.0))
    if top == 0.0:
        return Z.copy(), 1.0
    scale = B / top
    Z = Z * scale
    over = np.linalg.norm(Z, axis=1) > B
    while np.any(over):
        Z[over] = Z[over] * (1 - 2**-52)
        over = np.linalg.norm(Z, axis=1) > B
    return Z, scale


def _synthetic(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng([spec.seed, 0xDA7A])
    N, d = spec.N, spec.d
    if spec.kind is TaskKind.POLY_LOGISTIC:
        z = rng.uniform(-1, 1, size=(N, 1))
        coef = rng.normal(size=spec.degree + 1)
        score = (z ** np.arange(spec.degree + 1)) @ coef
        y = np.where(score + spec.noise * rng.normal(size=N) > 0, 1, -1)
        return z, y
    X = rng.normal(size=(N, d))
    if spec.kind is TaskKind.LEAST_SQUARES:
        w_true = rng.normal(size=d) / math.sqrt(d)
        t = X @ w_true + 0.5 + spec.noise * rng.normal(size=N)
        return X, t
    if spec.kind is TaskKind.LOGISTIC:
        w_true = rng.normal(size=d)
        score = X @ w_true / math.sqrt(d) + 0.2
    else:
        H = max(4, spec.hidden // 4)
        W = rng.normal(size=(H, d)) / math.sqrt(d)
        score = np.tanh(X @ W.T) @ rng.normal(size=H)
    y = np.where(score + spec.noise * rng.normal(size=N) > 0, 1, -1)
    return X, y


def load_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Rows of comma-separated reals; last column is the label or target."""
    data = np.loadtxt(path, delimiter=",", ndmin=2)
    if data.shape[1] < 2:
        raise ValueError(f"{path}: need at least one feature column and a label column")
    return data[:, :-1], data[:, -1]


def build_task(spec: TaskSpec) -> Task:
    if spec.data_path:
        X, t = load_dataset(spec.data_path)
        spec = TaskSpec(**{**spec.__dict__, "d": X.shape[1], "N": X.shape[0]})
    else:
        X, t = _synthetic(spec)
    if spec.kind is TaskKind.LEAST_SQUARES:
        Z, scale = normalize_rows(np.column_stack([X, t]), spec.B)
        labels = None
    else:
        if spec.kind is TaskKind.POLY_LOGISTIC:
            if X.shape[1] != 1:
                raise ValueError("poly_logistic needs scalar data (d = 1)")
            if spec.B != 1.0:
                raise ValueError("poly_logistic is defined on |z| <= 1 (B = 1)")
        Z, scale = normalize_rows(X, spec.B)
        labels = np.where(np.asarray(t) > 0, 1, -1).astype(np.int64)
    return _TASKS[spec.kind](spec, Z, labels, scale)


def _minimize_risk(task: Task, radius: float | None = None) -> np.ndarray:
    from scipy.optimize import minimize

    def fg(w):
        L, g = task.full_risk(w)
        return L, g

    res = minimize(fg, task.init_w(), jac=True, method="L-BFGS-B",
                   options={"maxiter": 10_000, "gtol": 1e-12, "ftol": 1e-15})
    w = res.x
    if radius is not None and np.linalg.norm(w) > radius:
        # projected gradient refinement inside the ball
        w = w * radius / np.linalg.norm(w)
        step = 1.0 / task.Cw_analytic(radius)
        for _ in range(20_000):
            w = project_ball(w - step * task.full_risk(w)[1], radius)
    return w


def project_ball(w: np.ndarray, radius: float | None) -> np.ndarray:
    if radius is None:
        return w
    norm = np.linalg.norm(w)
    return w if norm <= radius else w * (radius / norm)


# -- oracles and probes ------------------------------------------------------

def fd_gradient(task: Task, w, z, y=None, step: float = 1e-5) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    out = np.empty_like(w)
    for i in range(w.shape[0]):
        wp, wm = w.copy(), w.copy()
        wp[i] += step
        wm[i] -= step
        out[i] = (task.loss(wp, z, y) - task.loss(wm, z, y)) / (2 * step)
    return out


def fd_relative_error(task: Task, w, z, y=None, step: float = 1e-5, floor: float = 1e-6) -> float:
    """Max over coordinates of ``|g - fd| / max(|g|, |fd|, floor)``."""
    g = task.grad(w, z, y)
    fd = fd_gradient(task, w, z, y, step)
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)))


def sample_ball(rng: np.random.Generator, dim: int, radius: float) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v) * radius * rng.random() ** (1.0 / dim)


def estimate_Cz(task, trials: int, rng: np.random.Generator, *, m: int | None = None,
                w_radius: float = 1.0, center=None) -> float:
    """Largest observed ``||g_z(w) - g_z'(w)|| / ||z - z'||``.

    ``w`` is drawn from a ball around ``center`` (default: the origin).  With
    ``m`` set, ``z'`` is the deterministic quantization of ``z``; otherwise
    another dataset point.
    """
    from daquant.quant.dataq import QuantConfig, dataq_decode, dataq_encode

    if trials < 1:
        raise ValueError("trials must be >= 1")
    center = np.zeros(task.h) if center is None else np.asarray(center, dtype=np.float64)
    cfg = QuantConfig(m=m, B=task.B, d=task.zdim) if m is not None else None
    best = 0.0
    for _ in range(trials):
        w = center + sample_ball(rng, task.h, w_radius)
        z, y = task.point(int(rng.integers(task.N)))
        if cfg is not None:
            z2 = dataq_decode(dataq_encode(z, cfg)[1], cfg)
        else:
            z2 = task.point(int(rng.integers(task.N)))[0]
        gap = float(np.linalg.norm(z - z2))
        if gap == 0.0:
            continue
        best = max(best, float(np.linalg.norm(task.grad(w, z, y) - task.grad(w, z2, y))) / gap)
    return best


class Example1Task:
    """``l(w, z) = (z / sqrt(h)) * sum(w)`` for scalar ``|z| <= 1``: a gradient
    that only moves along the all-ones direction."""

    theory_ready = False  # loss can be negative

    def __init__(self, h: int, N: int = 100, seed: int = 0):
        self.h = h
        self.B = 1.0
        self.d = 1
        rng = np.random.default_rng([seed, 0xE1])
        self.Z = rng.uniform(-1, 1, size=(N, 1))
        self.labels = None

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    @property
    def zdim(self) -> int:
        return 1

    def point(self, i: int):
        return self.Z[i], None

    def loss(self, w, z, y=None) -> float:
        return float(np.asarray(z)[0]) * float(np.sum(w)) / math.sqrt(self.h)

    def grad(self, w, z, y=None) -> np.ndarray:
        return np.full(self.h, float(np.asarray(z)[0]) / math.sqrt(self.h))


def example1_baseline(w, z: float, rng: np.random.Generator) -> tuple[int, np.ndarray]:
    """One bit per sample; the agent's estimate is ``(Q(z) / sqrt(h)) * 1``."""
    h = np.asarray(w).shape[0]
    bit = scalar_1bit_encode(z, rng)
    return bit, np.full(h, scalar_1bit_decode(bit) / math.sqrt(h))
