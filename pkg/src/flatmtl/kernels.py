"""Backend selection for the inner-loop kernels.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy fallback in ``_kernels_py`` is used. ``FLATMTL_PURE_PYTHON=1`` forces
the fallback. ``BACKEND`` names the active choice and is recorded in run
summaries since the two backends agree only to rounding.
"""
import os

from . import _kernels_py

_FORCE_PURE = os.environ.get("FLATMTL_PURE_PYTHON", "") not in ("", "0")

compiled = None
if not _FORCE_PURE:
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else _kernels_py
BACKEND = "cython" if compiled is not None else "python"

project_simplex = _impl.project_simplex
minnorm_2 = _impl.minnorm_2
minnorm_fw = _impl.minnorm_fw
cagrad_dual = _impl.cagrad_dual
pcgrad_project = _impl.pcgrad_project
two_valley_value_grad = _impl.two_valley_value_grad


def available_backends():
    """Map of backend name to kernel module, for tests and benchmarks."""
    out = {"python": _kernels_py}
    if compiled is not None:
        out["cython"] = compiled
    return out
