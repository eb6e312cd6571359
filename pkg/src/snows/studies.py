"""Ablation studies that emit plot-ready CSV rows.

============================  ==================================================
study                         columns
============================  ==================================================
``k-sweep``                   K, layer, loss_initial, loss_final
``cg-iters``                  cg_max_iters, batch, loss_pre, loss_post, cg_iters, elapsed_ms
``sgd-vs-newton``             method, lr, step, loss, dist, elapsed_ms
``fisher-vs-newton``          method, step, loss, alpha, elapsed_ms
============================  ==================================================

Studies report raw curves; none of them asserts an ordering between methods.
"""

import csv
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from snows import netgraph, newton, oracles, pipeline, recon, solver
from snows import tensor as T
from snows.errors import LineSearchError, NonDescentError, SingularSystemError, ValidationError

logger = logging.getLogger(__name__)

COLUMNS: Dict[str, Sequence[str]] = {
    "k-sweep": ("K", "layer", "loss_initial", "loss_final"),
    "cg-iters": ("cg_max_iters", "batch", "loss_pre", "loss_post", "cg_iters", "elapsed_ms"),
    "sgd-vs-newton": ("method", "lr", "step", "loss", "dist", "elapsed_ms"),
    "fisher-vs-newton": ("method", "step", "loss", "alpha", "elapsed_ms"),
}


@dataclass
class StudyResult:
    study: str
    rows: List[Dict[str, object]] = field(default_factory=list)
    summary: Dict[str, object] = field(default_factory=dict)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(COLUMNS[self.study]))
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def _ms(started: float) -> float:
    return round((time.perf_counter() - started) * 1e3, 3)


def layer_task(
    g: netgraph.NetworkGraph,
    data: T.Tensor,
    mask: pipeline.MaskSpec,
    horizon: int = 0,
    group: int = 0,
) -> recon.ReconstructionTask:
    """Task for the ``group``-th prunable op of a dense network."""
    groups = g.prunable_groups()
    if not 0 <= group < len(groups):
        raise ValidationError(f"network has {len(groups)} prunable op(s), asked for {group}")
    op_index, names = groups[group]
    state = g.state_at(op_index, T.as_tensor(data, g.dtype))
    masks = [mask.build(n, g.weights[n]) for n in names]
    return recon.build_task(g, names, state, horizon, masks)


def k_sweep(
    g: netgraph.NetworkGraph,
    data: T.Tensor,
    cfg: pipeline.PruneConfig,
    horizons: Sequence[int] = (0, 1, 3, 5),
) -> StudyResult:
    result = StudyResult("k-sweep")
    for k in horizons:
        _, report = pipeline.prune_network(g, replace(cfg, horizon=k), data)
        for layer in report.layers:
            result.rows.append(
                {"K": k, "layer": layer.name, "loss_initial": layer.loss_initial, "loss_final": layer.loss_final}
            )
        logger.info("k-sweep K=%d done", k)
    return result


def cg_iters(
    task: recon.ReconstructionTask,
    cfg: newton.NewtonConfig,
    seed: int = 0,
    budgets: Sequence[int] = (5, 50, 500),
) -> StudyResult:
    """Newton on one layer with different CG iteration caps."""
    result = StudyResult("cg-iters")
    for budget in budgets:
        run_cfg = replace(cfg, cg=replace(cfg.cg, max_iters=budget))
        started = time.perf_counter()
        outcome = newton.optimize_layer(task, run_cfg, T.Rng(seed).stream("shuffle"), task.label)
        for record in outcome.trajectory:
            result.rows.append(
                {
                    "cg_max_iters": budget,
                    "batch": record.batch,
                    "loss_pre": record.loss_pre,
                    "loss_post": record.loss_post,
                    "cg_iters": record.cg_iters,
                    "elapsed_ms": round(record.wall_ms, 3),
                }
            )
        result.summary[f"loss_final@{budget}"] = outcome.loss_final
        result.summary[f"elapsed_ms@{budget}"] = _ms(started)
    return result


def sgd_vs_newton(
    task: recon.ReconstructionTask,
    cfg: newton.NewtonConfig,
    seed: int = 0,
    lrs: Sequence[float] = (1e-3, 1e-2, 1e-1),
    sgd_steps: int = 2000,
    newton_steps: int = 10,
    sgd_batch_size: Optional[int] = None,
) -> StudyResult:
    """Loss and ``||W_t - W_0||^2 / ||W_0||^2`` per step for SGD and Newton."""
    result = StudyResult("sgd-vs-newton")
    rng = T.Rng(seed)
    w0 = task.initial_weights()
    norm0 = float(np.sum(w0.astype(np.float64) ** 2)) or 1.0

    state = newton.NewtonState(w0.copy(), layer=task.label)
    started = time.perf_counter()
    result.rows.append({"method": "newton", "lr": "", "step": 0, "loss": recon.loss(task, w0), "dist": 0.0, "elapsed_ms": 0.0})
    batch_size = cfg.batch_size or task.n
    count = recon.batch_count(task, batch_size)
    order = task.shuffled_order(rng.stream("shuffle"))
    for step in range(1, newton_steps + 1):
        newton.newton_step(recon.batch_view(task, (step - 1) % count, batch_size, order), state, cfg)
        dist = float(np.sum((state.w_hat - w0).astype(np.float64) ** 2)) / norm0
        result.rows.append(
            {"method": "newton", "lr": "", "step": step, "loss": recon.loss(task, state.w_hat), "dist": dist, "elapsed_ms": _ms(started)}
        )
    newton_final = result.rows[-1]["loss"]

    best = None
    for lr in lrs:
        started = time.perf_counter()
        run = oracles.sgd_baseline(task, lr, sgd_steps, rng.stream(f"sgd:{lr!r}"), sgd_batch_size)
        for step, (loss, dist) in enumerate(zip(run.losses, run.dists)):
            result.rows.append({"method": "sgd", "lr": lr, "step": step, "loss": loss, "dist": dist, "elapsed_ms": None})
        result.rows[-1]["elapsed_ms"] = _ms(started)
        final = run.losses[-1]
        if not run.diverged and (best is None or final < best[1]):
            best = (lr, final)
    result.summary = {
        "newton_loss": newton_final,
        "newton_steps": newton_steps,
        "sgd_best_lr": None if best is None else best[0],
        "sgd_best_loss": None if best is None else best[1],
        "sgd_steps": sgd_steps,
    }
    return result


def fisher_vs_newton(
    task: recon.ReconstructionTask,
    cfg: newton.NewtonConfig,
    steps: int = 10,
    seed: int = 0,
) -> StudyResult:
    """Exact-Hessian Newton against Fisher-approximate Newton, both Armijo-safeguarded."""
    result = StudyResult("fisher-vs-newton")
    w0 = task.initial_weights()
    loss0 = recon.loss(task, w0)

    state = newton.NewtonState(w0.copy(), layer=task.label)
    started = time.perf_counter()
    result.rows.append({"method": "newton", "step": 0, "loss": loss0, "alpha": 0.0, "elapsed_ms": 0.0})
    for step in range(1, steps + 1):
        newton.newton_step(task, state, cfg)
        record = state.trajectory[-1]
        result.rows.append(
            {"method": "newton", "step": step, "loss": record.loss_post, "alpha": record.alpha, "elapsed_ms": _ms(started)}
        )

    w = w0.copy()
    started = time.perf_counter()
    result.rows.append({"method": "fisher", "step": 0, "loss": loss0, "alpha": 0.0, "elapsed_ms": 0.0})
    current = loss0
    for step in range(1, steps + 1):
        g = recon.grad_active(task, w)
        alpha = 0.0
        if np.any(g):
            try:
                delta = oracles.fisher_newton_step(task, w, cfg.cg.lam).astype(task.dtype)
                search = newton.armijo_search(task, w, delta, g, cfg, current)
                w = (w + w.dtype.type(search.alpha) * solver.scatter(task, delta)).astype(w.dtype)
                alpha, current = search.alpha, search.loss
            except (LineSearchError, NonDescentError, SingularSystemError) as exc:
                logger.warning("fisher step %d rejected: %s", step, exc)
        result.rows.append({"method": "fisher", "step": step, "loss": current, "alpha": alpha, "elapsed_ms": _ms(started)})
    result.summary = {
        "newton_loss": state.trajectory[-1].loss_post if state.trajectory else loss0,
        "fisher_loss": current,
    }
    return result
