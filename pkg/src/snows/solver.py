"""Hessian-vector products on the active set and damped conjugate gradients.

Solves ``(H_Z + lam I) delta = -g`` without forming ``H_Z``. Two product modes:

* exact (``eps_fd == 0``): differentiate ``<grad L, v>`` a second time;
* finite difference: ``(grad L(W + e v) - grad L(W)) / e`` with
  ``e = eps_fd / ||v||``.
"""

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np

from snows import autodiff as ad
from snows import recon
from snows import tensor as T
from snows.errors import ConfigError, CurvatureError, DimensionError, DivergenceError

logger = logging.getLogger(__name__)

Matvec = Callable[[np.ndarray], np.ndarray]


def default_fd_epsilon(dtype) -> float:
    return 1e-4 if T.resolve_dtype(dtype) == np.float32 else 1e-7


@dataclass(frozen=True)
class CgConfig:
    tol: float = 1e-3
    max_iters: int = 100
    lam: float = 1e-4
    eps_fd: float = 0.0
    relative_tol: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError(f"cg tol must be positive, got {self.tol}")
        if self.max_iters < 1:
            raise ConfigError(f"cg max_iters must be at least 1, got {self.max_iters}")
        if self.lam < 0:
            raise ConfigError(f"damping lambda must be non-negative, got {self.lam}")
        if self.eps_fd < 0:
            raise ConfigError(f"eps_fd must be non-negative, got {self.eps_fd}")

    @property
    def exact(self) -> bool:
        return self.eps_fd == 0.0

    def with_lambda(self, lam: float) -> "CgConfig":
        return replace(self, lam=lam)


@dataclass
class CgReport:
    solution: np.ndarray
    iters_used: int
    final_residual_norm: float
    hvp_calls: int
    residual_history: List[float] = field(default_factory=list)

    def write_trace(self, path: Union[str, Path]) -> None:
        """One ``iteration,residual_norm`` row per CG iteration (row 0 is ``||g||``)."""
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iteration", "residual_norm"])
            for i, value in enumerate(self.residual_history):
                writer.writerow([i, repr(float(value))])


def gather(task: "recon.ReconstructionTask", full: np.ndarray) -> np.ndarray:
    full = np.asarray(full)
    if full.size != task.numel:
        raise DimensionError(f"tensor of {full.size} entries, task has {task.numel}")
    return np.ascontiguousarray(full.ravel()[task.active])


def scatter(task: "recon.ReconstructionTask", v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    if v.shape != (task.m,):
        raise DimensionError(f"active vector of shape {v.shape}, task has m = {task.m}")
    full = np.zeros(task.numel, dtype=task.dtype)
    full[task.active] = v
    return full.reshape(task.packed_shape)


class HessianOperator:
    """``v -> H_Z v`` at fixed weights; counts the products it forms."""

    def __init__(
        self,
        task: "recon.ReconstructionTask",
        w_hat: np.ndarray,
        eps_fd: float = 0.0,
        base_grad: Optional[np.ndarray] = None,
    ):
        self.task = task
        self.w_hat = task.check_weights(w_hat)
        self.eps_fd = float(eps_fd)
        self.calls = 0
        if self.eps_fd == 0.0:
            self._graphs = task.differentiable_gradients(self.w_hat)
            self._base = None
        else:
            self._graphs = None
            self._base = recon.grad_active(task, self.w_hat) if base_grad is None else base_grad

    def _exact(self, v_full: np.ndarray) -> np.ndarray:
        direction = ad.constant(v_full)

        def product(pair):
            w, g = pair
            (h,) = ad.grad(ad.vdot(g, direction), [w])
            return h.value

        if self.task.threads > 1 and len(self._graphs) > 1:
            with ThreadPoolExecutor(max_workers=self.task.threads) as pool:
                parts = list(pool.map(product, self._graphs))
        else:
            parts = [product(pair) for pair in self._graphs]
        total = parts[0].copy()
        for part in parts[1:]:
            total += part
        return gather(self.task, total)

    def _finite_difference(self, v: np.ndarray, v_full: np.ndarray) -> np.ndarray:
        eps = self.eps_fd / float(np.linalg.norm(v))
        shifted = (self.w_hat + self.w_hat.dtype.type(eps) * v_full).astype(self.w_hat.dtype)
        return (recon.grad_active(self.task, shifted) - self._base) / self.w_hat.dtype.type(eps)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=self.task.dtype)
        v_full = scatter(self.task, v)
        if not np.any(v):
            return np.zeros_like(v)
        self.calls += 1
        out = self._exact(v_full) if self.eps_fd == 0.0 else self._finite_difference(v, v_full)
        if not np.all(np.isfinite(out)):
            raise DivergenceError(
                f"non-finite Hessian-vector product for {self.task.label} "
                f"(||v|| = {np.linalg.norm(v):.3e}, {int(np.sum(~np.isfinite(out)))} bad entries)"
            )
        return out


def hvp(task: "recon.ReconstructionTask", w_hat: np.ndarray, v: np.ndarray, eps_fd: float = 0.0) -> np.ndarray:
    """``H_Z v`` on the active set; ``eps_fd == 0`` selects the exact mode."""
    return HessianOperator(task, w_hat, eps_fd)(v)


def conjugate_gradient(
    matvec: Matvec,
    g: np.ndarray,
    tol: float,
    max_iters: int,
    lam: float = 0.0,
    relative_tol: bool = False,
) -> CgReport:
    """Damped CG on ``(A + lam I) x = -g`` for a symmetric operator ``A``."""
    g = np.asarray(g)
    delta = np.zeros_like(g)
    r = -g
    p = r.copy()
    rr = float(r @ r)
    rnorm = float(np.sqrt(rr))
    threshold = tol * rnorm if relative_tol else tol
    history = [rnorm]
    iters = 0
    while iters < max_iters and rnorm >= threshold and rnorm > 0.0:
        bp = matvec(p) + g.dtype.type(lam) * p
        curvature = float(p @ bp)
        if not np.isfinite(curvature):
            raise DivergenceError(f"non-finite curvature at CG iteration {iters}")
        if curvature <= 0.0:
            raise CurvatureError(curvature, iters)
        eta = rr / curvature
        delta = delta + g.dtype.type(eta) * p
        r = r - g.dtype.type(eta) * bp
        rr_next = float(r @ r)
        p = r + g.dtype.type(rr_next / rr) * p
        rr = rr_next
        rnorm = float(np.sqrt(rr))
        iters += 1
        history.append(rnorm)
        logger.debug("cg iteration %d: ||r|| = %.6e, eta = %.6e", iters, rnorm, eta)
    return CgReport(delta, iters, rnorm, 0, history)


def cg_solve(
    task: "recon.ReconstructionTask", w_hat: np.ndarray, g: np.ndarray, cfg: CgConfig
) -> CgReport:
    """Approximately solve ``(H_Z + lam I) delta = -g`` with Hessian-free CG."""
    operator = HessianOperator(task, w_hat, cfg.eps_fd, base_grad=g)
    report = conjugate_gradient(operator, g, cfg.tol, cfg.max_iters, cfg.lam, cfg.relative_tol)
    report.hvp_calls = operator.calls
    logger.debug(
        "cg on %s: %d iterations, ||r|| = %.3e, %d HVPs",
        task.label,
        report.iters_used,
        report.final_residual_norm,
        report.hvp_calls,
    )
    return report
