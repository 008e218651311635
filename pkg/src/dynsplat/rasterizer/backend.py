"""Kernel backend selection: compiled Cython if importable, NumPy otherwise.

``DYNSPLAT_KERNELS=python`` or ``=compiled`` in the environment forces a
choice (forcing ``compiled`` raises if the extension is missing so a benchmark
can't silently measure the wrong thing). ``set_backend`` does the same at
runtime for tests and the backend benchmark.
"""

from __future__ import annotations

import os

from . import _kernels_py

_BACKENDS = {"python": _kernels_py}
try:
    from . import _kernels as _kernels_compiled

    _BACKENDS["compiled"] = _kernels_compiled
except ImportError:
    _kernels_compiled = None

_active = None


def _initial_choice():
    forced = os.environ.get("DYNSPLAT_KERNELS", "").strip().lower()
    if forced:
        if forced not in ("python", "compiled"):
            raise ValueError(f"DYNSPLAT_KERNELS must be 'python' or 'compiled', got {forced!r}")
        if forced not in _BACKENDS:
            raise ImportError("DYNSPLAT_KERNELS=compiled but the extension is not built")
        return forced
    return "compiled" if "compiled" in _BACKENDS else "python"


def set_backend(name):
    """Select the kernel backend by name; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown or unavailable backend {name!r}; have {sorted(_BACKENDS)}")
    prev = active_backend()
    _active = name
    return prev


def active_backend():
    global _active
    if _active is None:
        _active = _initial_choice()
    return _active


def available_backends():
    return sorted(_BACKENDS)


def kernels():
    """Module implementing forward/backward for the active backend."""
    return _BACKENDS[active_backend()]
