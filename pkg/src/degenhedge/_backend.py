"""Numba / numpy backend selection.

The env var DEGENHEDGE_BACKEND chooses the implementation of the hot
kernels:

  auto   (default) use numba when importable, else numpy
  numba  require numba, fail loudly if missing
  numpy  force the pure-numpy reference path

Both paths implement the same recursions; they agree to floating-point
reassociation error (tested), and each is bitwise-deterministic for a
fixed (config, seed).
"""

from __future__ import annotations

import os

try:
    import numba  # noqa: F401

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def backend_name() -> str:
    choice = os.environ.get("DEGENHEDGE_BACKEND", "auto").lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"DEGENHEDGE_BACKEND must be auto|numba|numpy, got {choice!r}")
    if choice == "numba" and not HAVE_NUMBA:
        raise RuntimeError("DEGENHEDGE_BACKEND=numba but numba is not importable")
    if choice == "auto":
        return "numba" if HAVE_NUMBA else "numpy"
    return choice


def use_numba() -> bool:
    return backend_name() == "numba"
