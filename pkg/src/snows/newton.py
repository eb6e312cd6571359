"""Armijo-safeguarded stochastic Newton iterations for one layer.

Each mini-batch step solves the damped Newton system with CG, backtracks on the
step size until the sufficient-decrease test passes and commits the update on
the active set only. When CG meets non-positive curvature or the line search
fails, the damping is multiplied by ``lambda_growth`` and the step retried, up
to ``lambda_retries`` times; after that the batch is skipped.
"""

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Union

import numpy as np

from snows import recon, solver
from snows.errors import ConfigError, CurvatureError, LineSearchError, NonDescentError

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ("layer", "batch", "loss_pre", "loss_post", "alpha", "cg_iters", "delta_norm", "wall_ms")

# Damping tried after a failure at lam == 0, where growth alone would stay at 0.
_LAMBDA_FLOOR = 1e-8


@dataclass(frozen=True)
class NewtonConfig:
    batch_size: Optional[int] = None
    batches: Optional[int] = None
    cg: solver.CgConfig = field(default_factory=solver.CgConfig)
    armijo_beta: float = 1e-5
    armijo_shrink: float = 0.5
    alpha_min: float = 2.0**-20
    max_epochs: int = 1
    lambda_growth: float = 10.0
    lambda_retries: int = 3
    early_stop_rel: Optional[float] = None

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.batches is not None and self.batches < 1:
            raise ConfigError(f"batches must be positive, got {self.batches}")
        if not 0.0 < self.armijo_beta < 1.0:
            raise ConfigError(f"armijo_beta must lie in (0, 1), got {self.armijo_beta}")
        if not 0.0 < self.armijo_shrink < 1.0:
            raise ConfigError(f"armijo_shrink must lie in (0, 1), got {self.armijo_shrink}")
        if not 0.0 < self.alpha_min <= 1.0:
            raise ConfigError(f"alpha_min must lie in (0, 1], got {self.alpha_min}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be at least 1, got {self.max_epochs}")
        if self.lambda_growth <= 1.0:
            raise ConfigError(f"lambda_growth must exceed 1, got {self.lambda_growth}")
        if self.lambda_retries < 0:
            raise ConfigError(f"lambda_retries must be non-negative, got {self.lambda_retries}")
        if self.early_stop_rel is not None and self.early_stop_rel <= 0:
            raise ConfigError(f"early_stop_rel must be positive, got {self.early_stop_rel}")


@dataclass(frozen=True)
class TrajectoryRecord:
    layer: str
    batch: int
    loss_pre: float
    loss_post: float
    alpha: float
    cg_iters: int
    delta_norm: float
    wall_ms: float
    lam: float = 0.0
    accepted: bool = True

    def row(self) -> List[object]:
        return [
            self.layer,
            self.batch,
            repr(self.loss_pre),
            repr(self.loss_post),
            repr(self.alpha),
            self.cg_iters,
            repr(self.delta_norm),
            f"{self.wall_ms:.3f}",
        ]


@dataclass
class NewtonState:
    w_hat: np.ndarray
    trajectory: List[TrajectoryRecord] = field(default_factory=list)
    batch: int = 0
    layer: str = ""


class LineSearch(NamedTuple):
    alpha: float
    loss: float
    backtracks: int


@dataclass
class LayerResult:
    layer: str
    weights: np.ndarray
    trajectory: List[TrajectoryRecord]
    loss_initial: float
    loss_final: float

    @property
    def accepted_steps(self) -> int:
        return sum(1 for r in self.trajectory if r.accepted and r.alpha > 0)


def _step_weights(w_hat: np.ndarray, delta_full: np.ndarray, alpha: float) -> np.ndarray:
    return (w_hat + w_hat.dtype.type(alpha) * delta_full).astype(w_hat.dtype, copy=False)


def armijo_search(
    task_batch: "recon.ReconstructionTask",
    w_hat: np.ndarray,
    delta: np.ndarray,
    g: np.ndarray,
    cfg: NewtonConfig,
    loss0: Optional[float] = None,
) -> LineSearch:
    """Largest ``alpha = shrink**j`` with ``L(W + alpha d) <= L(W) + alpha beta d.g``."""
    slope = float(delta @ g)
    if slope >= 0.0:
        raise NonDescentError(slope)
    if loss0 is None:
        loss0 = recon.loss(task_batch, w_hat)
    delta_full = solver.scatter(task_batch, delta)
    alpha = 1.0
    backtracks = 0
    while True:
        trial = recon.loss(task_batch, _step_weights(w_hat, delta_full, alpha))
        if np.isfinite(trial) and trial <= loss0 + alpha * cfg.armijo_beta * slope:
            return LineSearch(alpha, trial, backtracks)
        alpha *= cfg.armijo_shrink
        backtracks += 1
        logger.debug("armijo backtrack %d: alpha = %.3e, loss = %.6e", backtracks, alpha, trial)
        if alpha < cfg.alpha_min:
            raise LineSearchError(cfg.alpha_min)


def newton_step(
    task_batch: "recon.ReconstructionTask", state: NewtonState, cfg: NewtonConfig
) -> NewtonState:
    """One damped Newton update on ``task_batch``; appends a trajectory record."""
    started = time.perf_counter()
    batch = state.batch
    state.batch += 1
    g = recon.grad_active(task_batch, state.w_hat)
    loss_pre = recon.loss(task_batch, state.w_hat)
    lam = cfg.cg.lam

    def record(loss_post, alpha, cg_iters, delta_norm, accepted):
        state.trajectory.append(
            TrajectoryRecord(
                state.layer,
                batch,
                float(loss_pre),
                float(loss_post),
                float(alpha),
                int(cg_iters),
                float(delta_norm),
                (time.perf_counter() - started) * 1e3,
                lam,
                accepted,
            )
        )
        return state

    if not np.any(g):
        return record(loss_pre, 0.0, 0, 0.0, True)

    cg_iters = 0
    for attempt in range(cfg.lambda_retries + 1):
        try:
            report = solver.cg_solve(task_batch, state.w_hat, g, cfg.cg.with_lambda(lam))
            cg_iters += report.iters_used
            search = armijo_search(task_batch, state.w_hat, report.solution, g, cfg, loss_pre)
        except (CurvatureError, NonDescentError, LineSearchError) as exc:
            if attempt == cfg.lambda_retries:
                logger.warning(
                    "layer %s batch %d skipped after %d damping increases: %s",
                    state.layer,
                    batch,
                    cfg.lambda_retries,
                    exc,
                )
                return record(loss_pre, 0.0, cg_iters, 0.0, False)
            lam = lam * cfg.lambda_growth if lam > 0 else _LAMBDA_FLOOR
            logger.warning(
                "layer %s batch %d: %s; retrying with lambda = %.3e", state.layer, batch, exc, lam
            )
            continue
        step = solver.scatter(task_batch, report.solution)
        state.w_hat = _step_weights(state.w_hat, step, search.alpha)
        delta_norm = search.alpha * float(np.linalg.norm(report.solution))
        logger.debug(
            "layer %s batch %d: loss %.6e -> %.6e, alpha %.3e, %d CG iterations",
            state.layer,
            batch,
            loss_pre,
            search.loss,
            search.alpha,
            report.iters_used,
        )
        return record(search.loss, search.alpha, cg_iters, delta_norm, True)
    raise AssertionError("unreachable")


def optimize_layer(
    task: "recon.ReconstructionTask",
    cfg: NewtonConfig,
    rng: np.random.Generator,
    layer: str = "",
    w_init: Optional[np.ndarray] = None,
) -> LayerResult:
    """Run Newton steps over seeded mini-batches starting from ``W * Z``."""
    layer = layer or task.label
    w0 = task.initial_weights() if w_init is None else task.check_weights(w_init)
    state = NewtonState(w0.copy(), layer=layer)
    loss_initial = recon.loss(task, w0)
    batch_size = cfg.batch_size or task.n
    count = recon.batch_count(task, batch_size)
    per_epoch = min(cfg.batches or count, count)
    stop = False
    for epoch in range(cfg.max_epochs):
        order = task.shuffled_order(rng)
        for b in range(per_epoch):
            view = recon.batch_view(task, b, batch_size, order)
            newton_step(view, state, cfg)
            last = state.trajectory[-1]
            if (
                cfg.early_stop_rel is not None
                and last.accepted
                and last.loss_pre - last.loss_post <= cfg.early_stop_rel * last.loss_pre
            ):
                logger.info("layer %s: relative improvement below %g, stopping", layer, cfg.early_stop_rel)
                stop = True
                break
        if stop:
            break
    loss_final = recon.loss(task, state.w_hat)
    logger.info("layer %s: loss %.6e -> %.6e over %d batches", layer, loss_initial, loss_final, state.batch)
    return LayerResult(layer, state.w_hat, state.trajectory, loss_initial, loss_final)


def write_trajectory(records: Sequence[TrajectoryRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(TRAJECTORY_COLUMNS)
        for record in records:
            writer.writerow(record.row())
