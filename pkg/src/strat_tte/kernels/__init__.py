"""Backend selection for the numerical hot kernels.

Prefers the compiled Cython extension; falls back to the NumPy reference
implementation when the extension is unavailable. Set the environment
variable ``STRAT_TTE_PURE_PYTHON=1`` to force the fallback (used by the
benchmark suite and backend-agreement tests).
"""

import os

from . import _pyref

if os.environ.get("STRAT_TTE_PURE_PYTHON") == "1":
    _impl = _pyref
else:
    try:
        from . import _core as _impl
    except ImportError:
        _impl = _pyref

cd_solve = _impl.cd_solve
best_split_node = _impl.best_split_node
BACKEND = _impl.BACKEND

__all__ = ["cd_solve", "best_split_node", "BACKEND"]
