"""Attention-free speaker verification encoder with a distillation trainer,
analytic cost profiler, detection metrics, and bit-exact file formats.

Submodules are imported lazily so the CLI can pin BLAS thread counts before
numpy loads.
"""

import importlib

__version__ = "0.1.0"

_SUBMODULES = ("tensor", "encoder", "profiler", "distill", "evaluation",
               "trainer", "io", "gradcheck", "cli", "errors")

__all__ = list(_SUBMODULES) + ["__version__"]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(__all__)
