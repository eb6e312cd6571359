"""OpenTelemetry instrumentation for the pruning pipeline.

Spans:

* ``snows.prune_network`` (one per run)
* ``snows.optimize_layer`` (one per prunable op)
* ``snows.newton_step`` (one per mini-batch step)
* ``snows.cg_solve`` (one per CG solve, retries included)

Metrics: ``snows.layers.pruned``, ``snows.newton.steps``,
``snows.cg.iterations`` and ``snows.hvp.calls``.
"""

import importlib
import logging
from typing import Collection

import wrapt
from opentelemetry import metrics, trace
from opentelemetry.instrumentation.instrumentor import BaseInstrumentor
from opentelemetry.instrumentation.utils import unwrap
from opentelemetry.semconv.trace import SpanAttributes
from opentelemetry.trace import get_tracer

from snows.package import _instruments
from snows.version import __version__

logger = logging.getLogger(__name__)

_TARGETS = (
    ("snows.pipeline", "prune_network"),
    ("snows.newton", "optimize_layer"),
    ("snows.newton", "newton_step"),
    ("snows.solver", "cg_solve"),
)


def _arg(args, kwargs, index: int, name: str):
    if name in kwargs:
        return kwargs[name]
    return args[index] if len(args) > index else None


class SnowsInstrumentor(BaseInstrumentor):
    """Traces pruning runs layer by layer, down to individual CG solves."""

    def instrumentation_dependencies(self) -> Collection[str]:
        return _instruments

    def _instrument(self, **kwargs):
        logger.debug("Instrumenting snows")
        tracer = get_tracer(__name__, __version__, kwargs.get("tracer_provider"))
        meter = metrics.get_meter(__name__, __version__, kwargs.get("meter_provider"))

        layers = meter.create_counter(
            name="snows.layers.pruned", description="Prunable ops processed, by status"
        )
        steps = meter.create_counter(
            name="snows.newton.steps", description="Newton steps taken, by acceptance"
        )
        cg_iterations = meter.create_histogram(
            name="snows.cg.iterations", description="CG iterations per solve"
        )
        hvp_calls = meter.create_counter(
            name="snows.hvp.calls", description="Hessian-vector products evaluated"
        )

        def _span(function: str, namespace: str, attributes=None):
            attrs = {SpanAttributes.CODE_FUNCTION: function, SpanAttributes.CODE_NAMESPACE: namespace}
            attrs.update(attributes or {})
            return tracer.start_as_current_span(f"snows.{function}", attributes=attrs)

        def _fail(span, exc):
            span.record_exception(exc)
            span.set_status(trace.Status(trace.StatusCode.ERROR, str(exc)))

        def _prune_network(wrapped, instance, args, kw):
            cfg = _arg(args, kw, 1, "cfg")
            attrs = {}
            if cfg is not None:
                attrs = {"snows.horizon": cfg.horizon, "snows.mask": str(cfg.mask), "snows.seed": cfg.seed}
            with _span("prune_network", "snows.pipeline", attrs) as span:
                try:
                    graph, report = wrapped(*args, **kw)
                except Exception as e:
                    _fail(span, e)
                    raise
                for layer in report.layers:
                    layers.add(1, {"status": layer.status})
                span.set_attribute("snows.layers", len(report.layers))
                span.set_attribute("snows.sparsity", float(report.sparsity))
                return graph, report

        def _optimize_layer(wrapped, instance, args, kw):
            task = _arg(args, kw, 0, "task")
            attrs = {
                "snows.layer": str(_arg(args, kw, 3, "layer") or task.label),
                "snows.horizon": task.horizon,
                "snows.samples": task.n,
                "snows.active": task.m,
            }
            with _span("optimize_layer", "snows.newton", attrs) as span:
                try:
                    result = wrapped(*args, **kw)
                except Exception as e:
                    _fail(span, e)
                    raise
                span.set_attribute("snows.loss_initial", float(result.loss_initial))
                span.set_attribute("snows.loss_final", float(result.loss_final))
                span.set_attribute("snows.accepted_steps", result.accepted_steps)
                return result

        def _newton_step(wrapped, instance, args, kw):
            state = _arg(args, kw, 1, "state")
            with _span("newton_step", "snows.newton", {"snows.batch": state.batch}) as span:
                try:
                    result = wrapped(*args, **kw)
                except Exception as e:
                    _fail(span, e)
                    raise
                if result.trajectory:
                    record = result.trajectory[-1]
                    steps.add(1, {"accepted": bool(record.accepted)})
                    span.set_attribute("snows.alpha", float(record.alpha))
                    span.set_attribute("snows.lambda", float(record.lam))
                    span.set_attribute("snows.loss_pre", float(record.loss_pre))
                    span.set_attribute("snows.loss_post", float(record.loss_post))
                return result

        def _cg_solve(wrapped, instance, args, kw):
            cfg = _arg(args, kw, 3, "cfg")
            attrs = {"snows.cg.lambda": float(cfg.lam), "snows.cg.exact": bool(cfg.exact)} if cfg else {}
            with _span("cg_solve", "snows.solver", attrs) as span:
                try:
                    report = wrapped(*args, **kw)
                except Exception as e:
                    _fail(span, e)
                    raise
                cg_iterations.record(report.iters_used)
                hvp_calls.add(report.hvp_calls)
                span.set_attribute("snows.cg.iterations", report.iters_used)
                span.set_attribute("snows.cg.residual", float(report.final_residual_norm))
                return report

        wrappers = {
            "prune_network": _prune_network,
            "optimize_layer": _optimize_layer,
            "newton_step": _newton_step,
            "cg_solve": _cg_solve,
        }
        for module, name in _TARGETS:
            wrapt.wrap_function_wrapper(module, name, wrappers[name])

    def _uninstrument(self, **kwargs):
        logger.debug("Uninstrumenting snows")
        for module, name in _TARGETS:
            unwrap(importlib.import_module(module), name)
