"""Kernel backend selection.

The compiled extension is used when it imports; otherwise (or when
``LMNET_PURE_PYTHON=1`` is set) the numpy twins are used. Forward results
are bit-identical between the two.
"""

import logging
import os

from . import _fallback

log = logging.getLogger(__name__)

_compiled = None
if os.environ.get("LMNET_PURE_PYTHON", "0") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        log.debug("lmnet._kernels unavailable, using numpy fallback")

kernels = _compiled if _compiled is not None else _fallback
name = "compiled" if _compiled is not None else "python"


def use(which: str) -> None:
    """Switch backend at runtime (``"compiled"`` or ``"python"``)."""
    global kernels, name
    if which == "compiled":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available")
        kernels, name = _compiled, which
    elif which == "python":
        kernels, name = _fallback, which
    else:
        raise ValueError(f"unknown backend {which!r}")


def available() -> list[str]:
    return ["compiled", "python"] if _compiled is not None else ["python"]
