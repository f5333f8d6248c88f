"""Desk-scale problems with analytic gradients, and the experiment runner.

All problems compute in float64. ``batch`` arguments are opaque to callers:
``sample_batch(rng)`` produces one and ``full_batch()`` returns the whole
dataset (or ``None`` for data-free problems).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .optim import AdamConfig, AdamWOracle, MemoryReport, STQuantAdamW
from .policy import BitPolicy
from .trace import TraceRecord, make_trace_record

OPTIMIZERS = ("oracle32", "fixed8", "stquant")


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class Problem:
    name = "problem"
    # reference depth/batch for the default annealing constant
    depth = 1
    batch_size = 256

    def __init__(self, layers: Sequence[LayerSpec], params0: Sequence[np.ndarray]):
        self.layers = list(layers)
        self._params0 = [np.array(p, dtype=np.float64) for p in params0]

    @property
    def n_params(self) -> int:
        return sum(l.size for l in self.layers)

    def init_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self._params0]

    def sample_batch(self, rng: np.random.Generator):
        return None

    def full_batch(self):
        return None

    def loss(self, params, batch=None) -> float:
        return self.loss_and_grad(params, batch)[0]

    def grad(self, params, batch=None) -> list[np.ndarray]:
        return self.loss_and_grad(params, batch)[1]

    def loss_and_grad(self, params, batch=None) -> tuple[float, list[np.ndarray]]:
        raise NotImplementedError


class QuadraticProblem(Problem):
    """f(theta) = 0.5 theta^T A theta - b^T theta with A = H^T diag(eig) H.

    H is a product of Householder reflections, so A is dense-looking but
    matrix-vector products stay O(dim).
    """

    name = "quadratic"

    def __init__(self, eigenvalues, b, theta0, reflectors=()):
        self.eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        if np.any(self.eigenvalues <= 0):
            raise ValueError("A must be positive definite")
        self.b = np.asarray(b, dtype=np.float64)
        self.reflectors = [np.asarray(u, dtype=np.float64) for u in reflectors]
        dim = self.eigenvalues.size
        super().__init__([LayerSpec("theta", (dim,))], [theta0])

    def _h(self, x):
        for u in self.reflectors:
            x = x - 2.0 * u * (u @ x)
        return x

    def _ht(self, x):
        for u in reversed(self.reflectors):
            x = x - 2.0 * u * (u @ x)
        return x

    def matvec(self, x):
        return self._ht(self.eigenvalues * self._h(x))

    def matrix(self) -> np.ndarray:
        return np.stack([self.matvec(e) for e in np.eye(self.eigenvalues.size)], axis=1)

    def minimizer(self) -> np.ndarray:
        return self._ht(self._h(self.b) / self.eigenvalues)

    def min_loss(self) -> float:
        return float(-0.5 * self.b @ self.minimizer())

    def loss_and_grad(self, params, batch=None):
        (theta,) = params
        a_theta = self.matvec(theta)
        return float(0.5 * theta @ a_theta - self.b @ theta), [a_theta - self.b]


def make_quadratic(dim: int, condition_number: float = 100.0, seed: int = 0, n_reflectors: int = 3) -> QuadraticProblem:
    if dim < 1 or condition_number < 1:
        raise ValueError("dim >= 1 and condition_number >= 1 required")
    rng = np.random.default_rng(seed)
    eig = np.logspace(0.0, np.log10(condition_number), dim)
    refl = []
    for _ in range(n_reflectors if dim > 1 else 0):
        u = rng.standard_normal(dim)
        refl.append(u / np.linalg.norm(u))
    b = rng.standard_normal(dim)
    theta0 = rng.standard_normal(dim)
    return QuadraticProblem(eig, b, theta0, refl)


class LogisticProblem(Problem):
    """Binary cross-entropy with L2 on the weights; full-batch."""

    name = "logistic"

    def __init__(self, x, y, l2: float = 1e-3, weight0=None):
        self.x = np.asarray(x, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.l2 = l2
        dim = self.x.shape[1]
        w0 = np.zeros(dim) if weight0 is None else weight0
        super().__init__([LayerSpec("weight", (dim,)), LayerSpec("bias", (1,))], [w0, np.zeros(1)])
        self.batch_size = self.x.shape[0]

    def full_batch(self):
        return (self.x, self.y)

    def sample_batch(self, rng):
        return (self.x, self.y)

    def loss_and_grad(self, params, batch=None):
        x, y = batch if batch is not None else (self.x, self.y)
        w, b = params
        z = x @ w + b[0]
        loss = np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * self.l2 * (w @ w)
        resid = (0.5 * (1.0 + np.tanh(0.5 * z)) - y) / x.shape[0]
        return float(loss), [x.T @ resid + self.l2 * w, np.array([resid.sum()])]


def make_logistic(
    n_samples: int = 512, dim: int = 20, seed: int = 0, l2: float = 1e-3, flip: float = 0.05
) -> LogisticProblem:
    """Gaussian inputs labelled by a random hyperplane, a fraction ``flip`` of
    labels inverted."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n_samples, dim))
    w_true = rng.standard_normal(dim) * 3.0 / np.sqrt(dim)
    y = (x @ w_true > 0).astype(np.float64)
    flips = rng.random(n_samples) < flip
    y[flips] = 1.0 - y[flips]
    p = LogisticProblem(x, y, l2)
    p.w_true = w_true
    return p


class MLPProblem(Problem):
    """L dense layers, tanh between them, softmax cross-entropy head.

    Each weight matrix and each bias vector is a separate policy layer.
    """

    name = "mlp"

    def __init__(self, x, labels, dims: Sequence[int], params0, batch_size: int = 256):
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.dims = list(dims)
        self.depth = len(dims) - 1
        self.batch_size = min(batch_size, self.x.shape[0])
        specs = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            specs += [LayerSpec(f"fc{i}.weight", (a, b)), LayerSpec(f"fc{i}.bias", (b,))]
        super().__init__(specs, params0)

    def full_batch(self):
        return (self.x, self.labels)

    def sample_batch(self, rng):
        idx = rng.choice(self.x.shape[0], size=self.batch_size, replace=False)
        return (self.x[idx], self.labels[idx])

    def loss_and_grad(self, params, batch=None):
        x, labels = batch if batch is not None else (self.x, self.labels)
        n_lin = self.depth
        acts = [x]
        h = x
        for i in range(n_lin):
            z = h @ params[2 * i] + params[2 * i + 1]
            h = np.tanh(z) if i < n_lin - 1 else z
            acts.append(h)
        logits = acts[-1]
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(x.shape[0])
        loss = float(-logp[rows, labels].mean())

        dz = np.exp(logp)
        dz[rows, labels] -= 1.0
        dz /= x.shape[0]
        grads: list[np.ndarray] = [None] * (2 * n_lin)  # type: ignore[list-item]
        for i in reversed(range(n_lin)):
            grads[2 * i] = acts[i].T @ dz
            grads[2 * i + 1] = dz.sum(axis=0)
            if i > 0:
                dh = dz @ params[2 * i].T
                dz = dh * (1.0 - acts[i] ** 2)
        return loss, grads


def make_mlp(
    layers: int = 3,
    width: int = 32,
    seed: int = 0,
    in_dim: int = 16,
    n_classes: int = 4,
    n_samples: int = 2048,
    batch_size: int = 256,
) -> MLPProblem:
    if layers < 1:
        raise ValueError("layers must be >= 1")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_classes, in_dim)) * 0.5
    labels = rng.integers(0, n_classes, size=n_samples)
    x = centers[labels] + rng.standard_normal((n_samples, in_dim))
    dims = [in_dim] + [width] * (layers - 1) + [n_classes]
    params = []
    for a, b in zip(dims[:-1], dims[1:]):
        params += [rng.standard_normal((a, b)) / np.sqrt(a), np.zeros(b)]
    return MLPProblem(x, labels, dims, params, batch_size)


def mlp_param_count(dims: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(dims[:-1], dims[1:]))


def gradient_check(problem: Problem, params, batch=None, h: float = 1e-6) -> float:
    """Relative error ||g_fd - g|| / max(||g_fd||, ||g||, 1e-12) using central
    differences on every coordinate."""
    _, analytic = problem.loss_and_grad(params, batch)
    work = [p.copy() for p in params]
    err_sq = 0.0
    scale_sq_a = 0.0
    scale_sq_n = 0.0
    for li, p in enumerate(work):
        flat = p.reshape(-1)
        ga = analytic[li].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = problem.loss(work, batch)
            flat[j] = orig - h
            fm = problem.loss(work, batch)
            flat[j] = orig
            fd = (fp - fm) / (2 * h)
            err_sq += (fd - ga[j]) ** 2
            scale_sq_a += ga[j] ** 2
            scale_sq_n += fd**2
    return float(np.sqrt(err_sq) / max(np.sqrt(scale_sq_a), np.sqrt(scale_sq_n), 1e-12))


@dataclass
class RunRecord:
    problem: str
    optimizer: str
    seed: int
    losses: list[float]
    final_loss: float
    policy_history: list[BitPolicy]
    memory: MemoryReport
    trace: list[TraceRecord]
    layer_names: list[str]
    wall_time: float = field(default=0.0, compare=False)
    final_params: list[np.ndarray] = field(default_factory=list, compare=False, repr=False)


def arm_config(optimizer: str, config: AdamConfig) -> AdamConfig:
    if optimizer not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {optimizer!r}; choose from {OPTIMIZERS}")
    if optimizer == "fixed8":
        return replace(config, policy=replace(config.policy, fixed_bits=8))
    return config


def run_experiment(
    problem: Problem,
    optimizer: str = "stquant",
    steps: int = 500,
    seed: int = 0,
    config: AdamConfig | None = None,
) -> RunRecord:
    """Train ``problem`` for ``steps`` steps.

    Batches come from ``default_rng(seed)`` so every optimizer arm sees the
    same data order. ``losses[t-1]`` is the batch loss evaluated before
    step ``t``; ``final_loss`` is the full-batch loss after the last step.
    """
    config = arm_config(optimizer, config or AdamConfig())
    rng = np.random.default_rng(seed)
    params = problem.init_params()
    names = [l.name for l in problem.layers]
    sizes = [l.size for l in problem.layers]
    opt = AdamWOracle(sizes, config) if optimizer == "oracle32" else STQuantAdamW(sizes, config)
    losses: list[float] = []
    history: list[BitPolicy] = []
    trace: list[TraceRecord] = []
    start = time.perf_counter()
    for _ in range(steps):
        batch = problem.sample_batch(rng)
        loss, grads = problem.loss_and_grad(params, batch)
        losses.append(loss)
        tel = opt.step(params, grads)
        if tel is not None and tel.refreshed:
            history.append(tel.policy)
            trace.append(make_trace_record(tel.t, tel.stats, names, sizes, tel.policy))
    wall = time.perf_counter() - start
    final = problem.loss(params, problem.full_batch())
    return RunRecord(
        problem=problem.name,
        optimizer=optimizer,
        seed=seed,
        losses=losses,
        final_loss=final,
        policy_history=history,
        memory=opt.memory_report(names),
        trace=trace,
        layer_names=names,
        wall_time=wall,
        final_params=params,
    )
