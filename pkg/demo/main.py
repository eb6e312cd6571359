#!/usr/bin/env python3
"""Minimal SNOWS + OpenTelemetry demo with RichConsole exporter by default."""

import typer
from opentelemetry import trace
from opentelemetry.exporter.richconsole import RichConsoleSpanExporter
from opentelemetry.sdk.resources import Resource
from opentelemetry.sdk.trace import TracerProvider
from opentelemetry.sdk.trace.export import SimpleSpanProcessor

from snows import data as datasets
from snows import pipeline, zoo
from snows import tensor as T
from snows.instrumentation import SnowsInstrumentor

app = typer.Typer(help="Prune a seeded toy network with OpenTelemetry tracing.")


@app.command()
def run_pruning(
    model: str = typer.Option("mlp", help="Toy network: mlp, toy-cnn or resnet-block"),
    horizon: int = typer.Option(1, help="Reconstruction horizon K"),
    mask: str = typer.Option("nm:2:4", help="Mask pattern, e.g. nm:2:4 or unstructured:0.5"),
    samples: int = typer.Option(64, help="Synthetic calibration samples"),
    seed: int = typer.Option(0, help="Master seed"),
):
    resource = Resource.create({"service.name": "snows-pruning-demo"})
    make_output_look_nicer(resource)

    SnowsInstrumentor().instrument()

    builders = {"mlp": zoo.mlp, "toy-cnn": zoo.toy_cnn, "resnet-block": zoo.resnet_block}
    g = zoo.build(builders[model](), seed=seed)
    x, _ = datasets.synthetic_gaussian(T.Rng(seed).child("demo"), samples, g.input_shape)

    cfg = pipeline.PruneConfig(horizon=horizon, mask=pipeline.MaskSpec.parse(mask), seed=seed)
    _, report = pipeline.prune_network(g, cfg, x)
    for layer in report.layers:
        typer.echo(f"{layer.name}: {layer.loss_initial:.4g} -> {layer.loss_final:.4g}")
    typer.echo(f"global sparsity {report.sparsity:.4f}")


def make_output_look_nicer(resource: Resource) -> TracerProvider:
    tracer_provider = TracerProvider(resource=resource)
    tracer_provider.add_span_processor(SimpleSpanProcessor(RichConsoleSpanExporter()))
    trace.set_tracer_provider(tracer_provider)
    return tracer_provider


if __name__ == "__main__":
    app()
