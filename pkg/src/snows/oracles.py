"""Brute-force references and baselines for the solver stack.

Everything here runs in double precision and on a single thread. Dense linear
algebra (LU with partial pivoting, Cholesky as a definiteness test) is written
out here and checked against hand-inverted small systems.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from snows import autodiff as ad
from snows import masks as M
from snows import netgraph, newton, recon, solver
from snows import tensor as T
from snows.errors import (
    DimensionError,
    NumericalError,
    SingularSystemError,
    StructuralError,
    ValidationError,
)

logger = logging.getLogger(__name__)

DENSE_CAP = 512


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(float(np.linalg.norm(b)), np.finfo(np.float64).tiny)
    return float(np.linalg.norm(a - b)) / scale


# -- dense linear algebra -----------------------------------------------------


def lu_factor(a: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Doolittle LU with partial pivoting; ``L`` (unit diagonal) and ``U`` packed together."""
    lu = np.array(a, dtype=np.float64, copy=True)
    n = lu.shape[0]
    if lu.shape != (n, n):
        raise DimensionError(f"LU needs a square matrix, got {lu.shape}")
    piv = np.arange(n)
    scale = max(float(np.max(np.abs(lu))) if n else 0.0, np.finfo(np.float64).tiny)
    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[p, k]) <= 1e-14 * scale:
            raise SingularSystemError(f"matrix is singular to working precision at column {k}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            piv[[k, p]] = piv[[p, k]]
        lu[k + 1 :, k] /= lu[k, k]
        lu[k + 1 :, k + 1 :] -= np.outer(lu[k + 1 :, k], lu[k, k + 1 :])
    return lu, piv


def lu_solve(factors: Tuple[np.ndarray, np.ndarray], b: np.ndarray) -> np.ndarray:
    lu, piv = factors
    n = lu.shape[0]
    y = np.array(b, dtype=np.float64)[piv]
    for i in range(n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in reversed(range(n)):
        y[i] = (y[i] - lu[i, i + 1 :] @ y[i + 1 :]) / lu[i, i]
    return y


def solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return lu_solve(lu_factor(a), b)


def is_positive_definite(a: np.ndarray) -> bool:
    """Cholesky succeeds."""
    l = np.zeros_like(a, dtype=np.float64)
    for j in range(a.shape[0]):
        d = a[j, j] - l[j, :j] @ l[j, :j]
        if d <= 0.0:
            return False
        l[j, j] = math.sqrt(d)
        l[j + 1 :, j] = (a[j + 1 :, j] - l[j + 1 :, :j] @ l[j, :j]) / l[j, j]
    return True


def smallest_eigenvalue_estimate(a: np.ndarray, iters: int = 200) -> float:
    """Power iteration on ``rho I - A`` where ``rho`` bounds the spectrum (Gershgorin)."""
    n = a.shape[0]
    rho = float(np.max(np.sum(np.abs(a), axis=1))) if n else 0.0
    v = np.random.Generator(np.random.Philox(0)).standard_normal(n)
    v /= np.linalg.norm(v)
    shifted = rho * np.eye(n) - a
    top = 0.0
    for _ in range(iters):
        w = shifted @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            break
        top = float(v @ w)
        v = w / norm
    return rho - top


# -- explicit systems ---------------------------------------------------------


@dataclass
class DenseSystem:
    h: np.ndarray
    g: np.ndarray
    cap: int = DENSE_CAP

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=np.float64)
        self.g = np.asarray(self.g, dtype=np.float64)
        m = self.g.shape[0]
        if self.h.shape != (m, m):
            raise DimensionError(f"H of shape {self.h.shape} vs g of length {m}")
        if m > self.cap:
            raise ValidationError(f"dense system of size {m} exceeds the cap of {self.cap}")
        asym = float(np.max(np.abs(self.h - self.h.T))) if m else 0.0
        if asym > 1e-8 * max(float(np.max(np.abs(self.h))) if m else 0.0, 1.0):
            raise NumericalError(f"H is not symmetric (max |H - H^T| = {asym:.3e})")

    @property
    def m(self) -> int:
        return int(self.g.shape[0])


def direct_newton(system: DenseSystem, lam: float) -> np.ndarray:
    """``-(H + lam I)^{-1} g`` by LU; refuses systems that are not positive definite."""
    a = system.h + lam * np.eye(system.m)
    if not is_positive_definite(a):
        raise SingularSystemError("H + lambda I is not positive definite", smallest_eigenvalue_estimate(a))
    return -solve(a, system.g)


def promote(task: recon.ReconstructionTask) -> recon.ReconstructionTask:
    """The same task in double precision, single-threaded."""
    g = task.graph.with_dtype(np.float64)
    sub = g.subnetwork(task.sub.start, task.horizon)
    inputs = netgraph.Activation(
        task.inputs.x.astype(np.float64), tuple(s.astype(np.float64) for s in task.inputs.skips)
    )
    targets = [t.astype(np.float64) for t in task.targets]
    return recon.ReconstructionTask(sub, task.w_names, task.masks, inputs, targets, task.chunk_size, 1)


def brute_hessian(
    task: recon.ReconstructionTask,
    w_hat: np.ndarray,
    cap: int = DENSE_CAP,
    cross_check: bool = False,
    step: float = 1e-4,
    tolerance: float = 1e-4,
) -> DenseSystem:
    """Active-set Hessian assembled from exact HVPs on basis vectors.

    With ``cross_check`` each column is compared against second-order central
    differences of the loss; a discrepancy above ``tolerance`` (relative to the
    largest entry) raises ``NumericalError``.
    """
    task = promote(task)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    if task.m > cap:
        raise ValidationError(f"active set of size {task.m} exceeds the dense cap of {cap}")
    operator = solver.HessianOperator(task, w_hat)
    h = np.zeros((task.m, task.m))
    for j in range(task.m):
        e = np.zeros(task.m)
        e[j] = 1.0
        h[:, j] = operator(e)
    if cross_check:
        reference = loss_fd_hessian(task, w_hat, step)
        scale = max(float(np.max(np.abs(h))), 1e-12)
        worst = float(np.max(np.abs(h - reference))) / scale if task.m else 0.0
        if worst > tolerance:
            raise NumericalError(f"HVP-assembled Hessian differs from finite differences by {worst:.3e}")
    return DenseSystem(h, recon.grad_active(task, w_hat), cap)


def fd_hessian(task: recon.ReconstructionTask, w_hat: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Active-set Hessian by central differences of the reverse-mode gradient."""
    task = promote(task)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    h = np.zeros((task.m, task.m))
    for j in range(task.m):
        e = solver.scatter(task, np.eye(task.m)[j]) * step
        h[:, j] = (recon.grad_active(task, w_hat + e) - recon.grad_active(task, w_hat - e)) / (2 * step)
    return h


def loss_fd_hessian(task: recon.ReconstructionTask, w_hat: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Active-set Hessian by second-order central differences of the loss alone."""
    task = promote(task)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    basis = [solver.scatter(task, np.eye(task.m)[j]) * step for j in range(task.m)]

    def at(shift):
        return recon.loss(task, w_hat + shift)

    h = np.zeros((task.m, task.m))
    for i in range(task.m):
        for j in range(i, task.m):
            value = (
                at(basis[i] + basis[j])
                - at(basis[i] - basis[j])
                - at(-basis[i] + basis[j])
                + at(-basis[i] - basis[j])
            ) / (4 * step * step)
            h[i, j] = h[j, i] = value
    return h


def masked_full_hessian(task: recon.ReconstructionTask, w_hat: np.ndarray) -> np.ndarray:
    """Hessian of ``w -> L(w * Z)`` over every coordinate of the packed weight."""
    task = promote(task)
    full_masks = [M.ones_mask(z.shape) for z in task.masks]
    dense_task = recon.ReconstructionTask(task.sub, task.w_names, full_masks, task.inputs, task.targets)
    operator = solver.HessianOperator(dense_task, np.asarray(w_hat, dtype=np.float64))
    keep = task.pattern.astype(np.float64)
    h = np.zeros((task.numel, task.numel))
    for j in range(task.numel):
        if keep[j]:
            h[:, j] = operator(np.eye(task.numel)[j]) * keep
    return h


# -- closed forms ---------------------------------------------------------------


def closed_form_k0(
    task: recon.ReconstructionTask,
    ridge: float = 0.0,
    anchor: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Masked least squares for a K = 0 dense or conv layer, one output at a time.

    Solves ``(2 X_S^T X_S + ridge I) w_S = 2 X_S^T y + ridge * anchor_S`` on each
    output's active support ``S``. With ``anchor`` set to the starting weights
    this is exactly one damped Newton step with ``lam = ridge``.
    """
    task = promote(task)
    g = task.graph
    spec = g.ops[task.sub.start]
    if task.horizon != 0 or task.sub.target_indices[0] != task.sub.start:
        raise StructuralError("closed form needs K = 0 with the pruned op as its own target")
    if spec.kind not in ("dense", "attention_out", "conv2d") or len(task.w_names) != 1:
        raise StructuralError(f"closed form covers dense and conv layers, not {spec.kind}")
    w = g.weights[task.w_names[0]]
    x = task.inputs.x
    y = task.targets[0]
    if spec.kind == "conv2d":
        d_out, d_in, kh, kw = w.shape
        stride = int(spec.params.get("stride", 1))
        pad = int(spec.params.get("padding", 0))
        design = ad._im2col(x, kh, kw, stride, pad)
        y_mat = np.transpose(y, (0, 2, 3, 1)).reshape(-1, d_out)
        pattern = task.masks[0].pattern.reshape(d_out, -1).T
    else:
        d_out = w.shape[1]
        design = x.reshape(-1, w.shape[0])
        y_mat = y.reshape(-1, d_out)
        pattern = task.masks[0].pattern
    if len(spec.weight_names) > 1:
        y_mat = y_mat - g.weights[spec.weight_names[1]][None, :]
    if anchor is None:
        anchor_mat = np.zeros(pattern.shape)
    else:
        anchor = np.asarray(anchor, dtype=np.float64)
        anchor_mat = anchor.reshape(d_out, -1).T if spec.kind == "conv2d" else anchor
    solution = np.zeros(pattern.shape)
    for j in range(d_out):
        support = np.flatnonzero(pattern[:, j])
        if support.size == 0:
            continue
        xs = design[:, support]
        a = 2.0 * xs.T @ xs + ridge * np.eye(support.size)
        b = 2.0 * xs.T @ y_mat[:, j] + ridge * anchor_mat[support, j]
        try:
            solution[support, j] = solve(a, b)
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"normal equations for output {j} are singular; add a ridge term ({exc})"
            ) from exc
    if spec.kind == "conv2d":
        return np.ascontiguousarray(solution.T.reshape(w.shape))
    return solution


# -- baselines ------------------------------------------------------------------


def fisher_matrix(task: recon.ReconstructionTask, w_hat: np.ndarray) -> np.ndarray:
    """``F = (1/N) sum_i g_i g_i^T`` from per-sample active gradients."""
    grads = recon.per_sample_grads(promote(task), np.asarray(w_hat, dtype=np.float64))
    return grads.T @ grads / grads.shape[0]


def fisher_matvec(grads: np.ndarray):
    n = grads.shape[0]
    return lambda v: grads.T @ (grads @ v) / n


def fisher_newton_step(
    task_batch: recon.ReconstructionTask,
    w_hat: np.ndarray,
    lam: float,
    explicit: Optional[bool] = None,
    cap: int = DENSE_CAP,
    cg_tol: float = 1e-10,
) -> np.ndarray:
    """``-(F + lam I)^{-1} grad L`` on the active set.

    ``explicit`` defaults to forming ``F`` when ``m <= cap`` and running CG on the
    matrix-free product otherwise.
    """
    task = promote(task_batch)
    w_hat = np.asarray(w_hat, dtype=np.float64)
    grads = recon.per_sample_grads(task, w_hat)
    g = grads.sum(axis=0)
    if explicit is None:
        explicit = task.m <= cap
    if explicit:
        f = grads.T @ grads / grads.shape[0]
        return direct_newton(DenseSystem(f, g, max(cap, task.m)), lam)
    report = solver.conjugate_gradient(fisher_matvec(grads), g, cg_tol, max(10 * task.m, 1), lam)
    return report.solution


@dataclass
class SgdResult:
    weights: np.ndarray
    losses: List[float]
    dists: List[float]
    diverged: bool = False


def sgd_baseline(
    task: recon.ReconstructionTask,
    lr: float,
    steps: int,
    rng: np.random.Generator,
    batch_size: Optional[int] = None,
    w_init: Optional[np.ndarray] = None,
) -> SgdResult:
    """Plain SGD on the masked objective, active coordinates only.

    ``losses[t]`` and ``dists[t]`` are the full-task loss and
    ``||W_t - W_0||^2 / ||W_0||^2`` after ``t`` steps (``t = 0`` is the start).
    """
    if lr <= 0:
        raise ValidationError(f"learning rate must be positive, got {lr}")
    w0 = task.initial_weights() if w_init is None else task.check_weights(w_init)
    w = w0.copy()
    norm0 = float(np.sum(w0.astype(np.float64) ** 2)) or 1.0
    losses = [recon.loss(task, w)]
    dists = [0.0]
    batch_size = batch_size or task.n
    count = recon.batch_count(task, batch_size)
    order = task.shuffled_order(rng)
    for t in range(steps):
        b = t % count
        if b == 0 and t:
            order = task.shuffled_order(rng)
        view = recon.batch_view(task, b, batch_size, order)
        g = recon.grad_active(view, w)
        w = (w - w.dtype.type(lr) * solver.scatter(task, g)).astype(w.dtype)
        current = recon.loss(task, w)
        if not np.isfinite(current):
            logger.warning("sgd diverged at step %d (lr = %g)", t + 1, lr)
            losses.append(float(current))
            dists.append(float("nan"))
            return SgdResult(w, losses, dists, True)
        losses.append(current)
        dists.append(float(np.sum((w - w0).astype(np.float64) ** 2)) / norm0)
    return SgdResult(w, losses, dists)


# -- two-dimensional quadratic ----------------------------------------------------


@dataclass
class ToyQuadraticReport:
    kappa: float
    sgd_iterations: Optional[int]
    sgd_iterations_numeric: Optional[int]
    newton_steps: int
    newton_final_norm: float
    w2_after_one_sgd_step: float
    diverged: bool
    trajectory: List[Tuple[float, float]] = field(default_factory=list)


def toy_quadratic_task(l1: float, l2: float) -> recon.ReconstructionTask:
    """``L(w) = (l1 w1^2 + l2 w2^2) / 2`` as a K = 0 dense reconstruction task.

    Two samples ``x = diag(sqrt(l1/2), sqrt(l2/2))`` through a ``(2, 1)`` dense
    layer whose dense weights are zero, so the targets vanish.
    """
    if l1 <= 0 or l2 <= 0:
        raise ValidationError(f"curvatures must be positive, got {l1}, {l2}")
    doc = {
        "format": netgraph.MANIFEST_FORMAT,
        "version": netgraph.MANIFEST_VERSION,
        "input_shape": [2],
        "dtype": "float64",
        "ops": [{"name": "w", "kind": "dense", "params": {}, "weights": ["w"], "target": True}],
        "weight_shapes": {"w": [2, 1]},
        "prunable": ["w"],
    }
    g = netgraph.NetworkGraph.from_manifest(doc, {"w": np.zeros((2, 1))})
    x = np.diag([math.sqrt(l1 / 2.0), math.sqrt(l2 / 2.0)])
    return recon.build_task(g, ["w"], x, 0)


def toy_quadratic(
    l1: float = 1.0,
    l2: float = 100.0,
    w0: Sequence[float] = (1.0, 1.0),
    eta: float = 0.01,
    eps: float = 1e-6,
    max_iters: int = 100000,
) -> ToyQuadraticReport:
    """Closed-form and numerical SGD versus one Newton step on the 2-D quadratic."""
    w1, w2 = float(w0[0]), float(w0[1])
    lmax = max(l1, l2)
    diverged = eta >= 2.0 / lmax
    c1 = 1.0 - eta * l1
    closed: Optional[int]
    if abs(w1) <= eps:
        closed = 0
    elif diverged or abs(c1) >= 1.0:
        closed = None
    elif c1 == 0.0:
        closed = 1
    else:
        closed = math.ceil(math.log(eps / abs(w1)) / math.log(abs(c1)))

    task = toy_quadratic_task(l1, l2)
    start = np.array([[w1], [w2]])
    w = start.copy()
    numeric = None
    trajectory = [(w1, w2)]
    w2_one = float("nan")
    if not diverged:
        for k in range(1, max_iters + 1):
            w = w - eta * recon.grad_full(task, w)
            trajectory.append((float(w[0, 0]), float(w[1, 0])))
            if k == 1:
                w2_one = float(w[1, 0])
            if abs(w[0, 0]) <= eps:
                numeric = k
                break

    cfg = newton.NewtonConfig(cg=solver.CgConfig(tol=1e-14, max_iters=10, lam=0.0))
    state = newton.NewtonState(start.copy(), layer="toy-quadratic")
    newton.newton_step(task, state, cfg)
    return ToyQuadraticReport(
        kappa=lmax / min(l1, l2),
        sgd_iterations=closed,
        sgd_iterations_numeric=numeric,
        newton_steps=len(state.trajectory),
        newton_final_norm=float(np.linalg.norm(state.w_hat)),
        w2_after_one_sgd_step=w2_one,
        diverged=diverged,
        trajectory=trajectory,
    )
