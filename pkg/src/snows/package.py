"""Package information for SNOWS instrumentation."""

_instruments = ("numpy >= 1.22",)
