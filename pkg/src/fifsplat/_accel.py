"""Backend selection for the hot rasterization kernels.

Set ``FIFSPLAT_BACKEND=numpy`` to force the pure-numpy path (useful when
numba is unavailable or for debugging). The default is ``numba`` when the
package imports cleanly.
"""

import os

_requested = os.environ.get("FIFSPLAT_BACKEND", "numba").strip().lower()

try:
    import numba

    # TBB on this class of machine is often too old; workqueue is always present
    numba.config.THREADING_LAYER = os.environ.get("NUMBA_THREADING_LAYER", "workqueue")
    _threads = os.environ.get("FIFSPLAT_THREADS")
    if _threads:
        numba.set_num_threads(int(_threads))
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dep in practice
    HAVE_NUMBA = False

if _requested not in ("numba", "numpy"):
    raise ValueError(f"FIFSPLAT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def use_numba(backend=None):
    """Resolve a per-call backend override against the process default."""
    b = BACKEND if backend is None else backend
    if b not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {b!r}")
    if b == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    return b == "numba"
