"""Pick the compiled solver kernel when it is built, else the Python one."""
from __future__ import annotations

from . import _bnb_py

try:
    from . import _bnb_core
except ImportError:  # extension not built
    _bnb_core = None

BACKENDS = {"python": _bnb_py.solve_kernel}
if _bnb_core is not None:
    BACKENDS["compiled"] = _bnb_core.solve_kernel

DEFAULT_BACKEND = "compiled" if _bnb_core is not None else "python"


def get_kernel(backend: str = "auto"):
    if backend == "auto":
        backend = DEFAULT_BACKEND
    try:
        return BACKENDS[backend]
    except KeyError:
        raise ValueError(f"solver backend {backend!r} is not available; "
                         f"have {sorted(BACKENDS)}") from None
