"""Central-difference gradient checker."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kinks

REL_FLOOR = 1e-8


@dataclass
class GradReport:
    op_name: str
    max_rel_error: float
    per_input_errors: list[tuple[str, float]]
    passed: bool
    tol: float = 1e-4
    diagnostics: list[str] = field(default_factory=list)
    checked: int = 0
    kinks_crossed: int = 0

    def format(self) -> str:
        lines = [f"{self.op_name}: {'PASS' if self.passed else 'FAIL'} "
                 f"max_rel_error={self.max_rel_error:.3e} (tol {self.tol:.0e}, "
                 f"{self.checked} elements, {self.kinks_crossed} kink crossings excluded)"]
        for name, err in self.per_input_errors:
            lines.append(f"  {name:<28s} {err:.3e}")
        lines.extend(f"  ! {d}" for d in self.diagnostics)
        return "\n".join(lines)


def _flatten(out):
    if isinstance(out, np.ndarray):
        return [out]
    if isinstance(out, (list, tuple)):
        return [a for item in out for a in _flatten(item)]
    return [np.asarray(out, dtype=np.float64)]


def _unflatten(template, flat):
    it = iter(flat)

    def build(t):
        if isinstance(t, (list, tuple)):
            return type(t)(build(x) for x in t)
        return next(it)

    return build(template)


def rel_error(analytic, numeric):
    return np.abs(analytic - numeric) / np.maximum(REL_FLOOR, np.abs(analytic) + np.abs(numeric))


def grad_check(fn: Callable, inputs: dict, h: float = 1e-5, tol: float = 1e-4,
               name: str = "op", seed: int = 0, max_samples: int | None = None,
               reduce: str = "weighted", max_kink_fraction: float = 0.2) -> GradReport:
    """Compare the analytic vector-Jacobian product of ``fn`` with central differences.

    ``fn(inputs)`` must return ``(out, vjp)`` where ``out`` is an array or a
    nested sequence of arrays and ``vjp(dout)`` returns a dict of cotangents
    keyed like ``inputs``. The scalar objective is ``sum(out * R)``: ``R`` is
    all ones for ``reduce="sum"`` and a fixed standard-normal draw for
    ``reduce="weighted"`` (plain sums have identically zero gradient for
    normalizing ops such as softmax).

    When ``max_samples`` is set, elements of each input are visited in random
    order until that many have been checked. Probes whose ``x +/- h``
    evaluations take a different branch of some piecewise op than ``x``
    does are excluded and counted; the check fails if more than
    ``max_kink_fraction`` of all visited elements had to be excluded.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    rng = np.random.default_rng(seed)
    inputs = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    with kinks.tracking() as base_pattern:
        out, vjp = fn(inputs)
    flat = _flatten(out)
    if reduce == "sum":
        weights = [np.ones_like(a) for a in flat]
    elif reduce == "weighted":
        weights = [rng.standard_normal(a.shape) for a in flat]
    else:
        raise ValueError(f"unknown reduction {reduce!r}")
    grads = vjp(_unflatten(out, [w.copy() for w in weights]))

    def objective(inp):
        with kinks.tracking() as pattern:
            o = _flatten(fn(inp)[0])
        return sum(float(np.sum(a * w)) for a, w in zip(o, weights)), pattern == base_pattern

    per_input = []
    diagnostics = []
    max_err = 0.0
    total_checked = 0
    total_kinks = 0
    for key, value in inputs.items():
        analytic = grads.get(key)
        analytic = np.zeros_like(value) if analytic is None else np.asarray(analytic, dtype=np.float64)
        if analytic.shape != value.shape:
            diagnostics.append(f"{key}: gradient shape {analytic.shape} != input shape {value.shape}")
            per_input.append((key, np.inf))
            max_err = np.inf
            continue
        n = value.size
        order = rng.permutation(n) if max_samples is not None and n > max_samples else np.arange(n)
        budget = n if max_samples is None else min(n, max_samples)
        picks, numeric = [], []
        crossed = 0
        flat_val = value.reshape(-1)
        for i in order:
            if len(picks) >= budget:
                break
            orig = flat_val[i]
            flat_val[i] = orig + h
            fp, same_p = objective(inputs)
            flat_val[i] = orig - h
            fm, same_m = objective(inputs)
            flat_val[i] = orig
            if not (same_p and same_m):
                crossed += 1
                continue
            picks.append(int(i))
            numeric.append((fp - fm) / (2.0 * h))
        total_kinks += crossed
        total_checked += len(picks)
        picks = np.array(picks, dtype=np.int64)
        numeric = np.array(numeric)
        a = analytic.reshape(-1)[picks]
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(numeric))):
            diagnostics.append(f"{key}: non-finite gradient values")
            per_input.append((key, np.inf))
            max_err = np.inf
            continue
        errs = rel_error(a, numeric)
        err = float(errs.max()) if len(picks) else 0.0
        if err > tol:
            worst = int(np.argmax(errs))
            diagnostics.append(
                f"{key}[{int(picks[worst])}]: analytic {a[worst]:.9e} vs numeric {numeric[worst]:.9e}")
        per_input.append((key, err))
        max_err = max(max_err, err)
    visited = total_checked + total_kinks
    if visited and total_kinks > max_kink_fraction * visited:
        diagnostics.append(f"{total_kinks}/{visited} probes crossed a kink")
        max_err = np.inf
    if total_checked == 0:
        diagnostics.append("no element could be checked")
        max_err = np.inf
    return GradReport(name, max_err, per_input, bool(max_err <= tol), tol, diagnostics,
                      total_checked, total_kinks)
