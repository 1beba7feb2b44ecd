"""Records which branch every piecewise-smooth op took.

Finite differences are only a valid oracle when ``f(x+h)`` and ``f(x-h)``
evaluate on the same smooth piece as ``f(x)``. Ops with kinks (LeakyReLU,
``abs``, bilinear cell selection) report their branch pattern here while a
:func:`tracking` block is active; the gradient checker compares the
patterns and excludes probes that crossed a kink.
"""
from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

_stack: list[list[bytes]] = []


def record(pattern) -> None:
    if _stack:
        arr = np.ascontiguousarray(pattern)
        _stack[-1].append(hashlib.blake2b(arr.tobytes(), digest_size=16).digest())


@contextmanager
def tracking():
    log: list[bytes] = []
    _stack.append(log)
    try:
        yield log
    finally:
        _stack.pop()
