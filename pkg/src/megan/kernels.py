"""Backend selection for the bilinear gather/scatter kernels.

The compiled extension is used when it imports; set ``MEGAN_KERNELS=python``
to force the numpy fallback.
"""
import contextlib
import os

import numpy as np

from . import _kernels_py, kinks

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MEGAN_KERNELS", "auto").lower() != "python":
    try:
        from . import _kernels_ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py


def _prep(x, py, px):
    return (
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(py, dtype=np.float64),
        np.ascontiguousarray(px, dtype=np.float64),
    )


def bilinear_gather(x, py, px, backend=None):
    impl = _select(backend)
    x, py, px = _prep(x, py, px)
    if kinks._stack:
        kinks.record(np.floor(py))
        kinks.record(np.floor(px))
    return impl.bilinear_gather(x, py, px)


def bilinear_scatter(dvals, x, py, px, backend=None):
    impl = _select(backend)
    x, py, px = _prep(x, py, px)
    dvals = np.ascontiguousarray(dvals, dtype=np.float64)
    return impl.bilinear_scatter(dvals, x, py, px)


def _select(backend):
    if backend is None:
        return _impl
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        from . import _kernels_ext

        return _kernels_ext
    raise ValueError(f"unknown kernel backend {backend!r}")


@contextlib.contextmanager
def use_backend(backend):
    """Temporarily route every default-backend call through ``backend``."""
    global _impl, BACKEND
    saved = _impl, BACKEND
    _impl, BACKEND = _select(backend), backend
    try:
        yield
    finally:
        _impl, BACKEND = saved
