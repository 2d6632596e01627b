"""Replay kernels: compiled when the extension is built, numpy otherwise.

Set ``RISERL_PURE_PYTHON=1`` to force the numpy path.
"""

import os

from . import _kernels_py

if os.environ.get("RISERL_PURE_PYTHON") == "1":
    _impl = _kernels_py
else:
    try:
        from . import _ckernels as _impl
    except ImportError:
        _impl = _kernels_py

BACKEND = _impl.BACKEND
tree_set = _impl.tree_set
tree_find = _impl.tree_find
window_index = _impl.window_index
nstep_returns = _impl.nstep_returns


def backends():
    """All importable backends, keyed by name."""
    out = {"python": _kernels_py}
    try:
        from . import _ckernels
        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
