"""Kernel backend selection.

The compiled Cython extension is used when importable.  Setting the
environment variable ``SPARSEDECODE_BACKEND=python`` forces the numpy
fallback; ``SPARSEDECODE_BACKEND=compiled`` makes a missing extension an
ImportError instead of a silent fallback.
"""
from __future__ import annotations

import os
from types import ModuleType

from . import _fallback


def _select() -> tuple[ModuleType, str]:
    choice = os.environ.get("SPARSEDECODE_BACKEND", "auto").lower()
    if choice == "python":
        return _fallback, "python"
    try:
        from . import _kernels
    except ImportError:
        if choice == "compiled":
            raise
        return _fallback, "python"
    return _kernels, "compiled"


_impl, BACKEND = _select()

gather = _impl.gather
scores = _impl.scores
attend = _impl.attend


def backends() -> dict[str, ModuleType]:
    """All importable kernel implementations, keyed by name."""
    out: dict[str, ModuleType] = {"python": _fallback}
    try:
        from . import _kernels

        out["compiled"] = _kernels
    except ImportError:
        pass
    return out
