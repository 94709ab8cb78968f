"""Backend selection for the coordinate-descent solver.

The compiled extension is preferred when it imported cleanly; the pure
NumPy implementation is the fallback and the reference for tests.  Set
the environment variable ``DWISPARSE_PURE_PYTHON=1`` to force the
fallback, or call :func:`get_backend` for an explicit choice.  Both
backends solve the same problem to the same tolerance, so results agree
to solver precision regardless of which one is active.
"""

from __future__ import annotations

import os

from . import _cd_ref

__all__ = ["nn_lasso_batch", "get_backend", "BACKEND", "HAVE_COMPILED"]


def _want_pure_python() -> bool:
    return os.environ.get("DWISPARSE_PURE_PYTHON", "").strip().lower() not in (
        "",
        "0",
        "false",
    )


try:
    from . import _cd_fast

    HAVE_COMPILED = True
except ImportError:
    _cd_fast = None
    HAVE_COMPILED = False

if HAVE_COMPILED and not _want_pure_python():
    BACKEND = "compiled"
    nn_lasso_batch = _cd_fast.nn_lasso_batch
else:
    BACKEND = "python"
    nn_lasso_batch = _cd_ref.nn_lasso_batch


def get_backend(name: str = "auto"):
    """Return (backend_name, nn_lasso_batch) for an explicit choice.

    name : 'auto', 'compiled' or 'python'.  'compiled' raises if the
    extension is unavailable.
    """
    if name == "auto":
        return BACKEND, nn_lasso_batch
    if name == "python":
        return "python", _cd_ref.nn_lasso_batch
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError("compiled kernel extension is not available")
        return "compiled", _cd_fast.nn_lasso_batch
    raise ValueError(f"unknown backend {name!r}")
