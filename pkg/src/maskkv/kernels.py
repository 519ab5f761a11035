"""Backend selection for the hot scoring kernels.

The compiled extension ``maskkv._ckernels`` is used when it was built; otherwise
the numpy implementations in ``maskkv._kernels_py`` are used.  Callers must go
through the module attributes (``kernels.column_vote(...)``) so that
:func:`set_backend` takes effect everywhere.
"""
from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Switch every kernel to backend ``name`` ("cython" or "python")."""
    global BACKEND, column_vote, mass_over, topk_indices, row_cosine
    try:
        impl = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} not available; have {available_backends()}")
    BACKEND = name
    column_vote = impl.column_vote
    mass_over = impl.mass_over
    topk_indices = impl.topk_indices
    row_cosine = impl.row_cosine


BACKEND = "python"
column_vote = mass_over = topk_indices = row_cosine = None
set_backend("cython" if _ckernels is not None else "python")
