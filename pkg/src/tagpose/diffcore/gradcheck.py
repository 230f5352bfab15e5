"""Central finite-difference checks for tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Value, backward

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7


@dataclass
class GradCheckResult:
    ok: bool
    max_abs_err: float
    max_rel_err: float
    checked: int
    failures: list = field(default_factory=list)


def _close(a, n, rtol, atol):
    err = abs(a - n)
    return err <= max(atol, rtol * max(abs(a), abs(n)))


def _eval(fn, arrays):
    return float(fn(*[Value(a, requires_grad=False) for a in arrays]).data)


def gradcheck(fn, arrays, h=DEFAULT_STEP, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
              max_coords=None, directions=0, rng=None):
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps Values to a scalar Value.  Each coordinate of each array is
    perturbed by ``±h`` (or a random subset of ``max_coords`` coordinates per
    array).  ``directions`` additionally checks that many random directional
    derivatives over all inputs jointly.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    inputs = [Value(a.copy()) for a in arrays]
    backward(fn(*inputs))
    analytic = [v.grad.copy() for v in inputs]

    failures, abs_errs, rel_errs, checked = [], [0.0], [0.0], 0
    for k, a in enumerate(arrays):
        flat_idx = np.arange(a.size)
        if max_coords is not None and a.size > max_coords:
            flat_idx = rng.choice(a.size, size=max_coords, replace=False)
        for i in flat_idx:
            idx = np.unravel_index(i, a.shape)
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            num = (_eval(fn, plus) - _eval(fn, minus)) / (2 * h)
            ana = analytic[k][idx]
            checked += 1
            abs_errs.append(abs(ana - num))
            rel_errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-300))
            if not _close(ana, num, rtol, atol):
                failures.append((k, idx, ana, num))

    for _ in range(directions):
        dirs = [rng.standard_normal(a.shape) for a in arrays]
        norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        plus = [a + h * d for a, d in zip(arrays, dirs)]
        minus = [a - h * d for a, d in zip(arrays, dirs)]
        num = (_eval(fn, plus) - _eval(fn, minus)) / (2 * h)
        ana = float(sum((g * d).sum() for g, d in zip(analytic, dirs)))
        checked += 1
        abs_errs.append(abs(ana - num))
        rel_errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-300))
        if not _close(ana, num, rtol, atol):
            failures.append(("direction", None, ana, num))

    return GradCheckResult(not failures, max(abs_errs), max(rel_errs), checked, failures)


def param_gradcheck(loss_fn, params, h=DEFAULT_STEP, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
                    coords_per_param=4, directions=2, rng=None):
    """Finite-difference check of ``loss_fn()`` with respect to parameter Values.

    Parameters are perturbed in place and restored afterwards.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    params = list(params)
    backward(loss_fn(), params=params)
    analytic = [p.grad.copy() for p in params]

    def at(shift):
        saved = [p.data.copy() for p in params]
        try:
            for p, s in zip(params, shift):
                if s is not None:
                    p.data = p.data + s
            return float(loss_fn().data)
        finally:
            for p, s in zip(params, saved):
                p.data = s

    failures, abs_errs, rel_errs, checked = [], [0.0], [0.0], 0

    def record(ana, num, tag):
        nonlocal checked
        checked += 1
        abs_errs.append(abs(ana - num))
        rel_errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-300))
        if not _close(ana, num, rtol, atol):
            failures.append((tag, ana, num))

    for k, p in enumerate(params):
        picks = rng.choice(p.size, size=min(coords_per_param, p.size), replace=False)
        for i in picks:
            e = np.zeros(p.size)
            e[i] = h
            e = e.reshape(p.shape)
            shift_p = [None] * len(params)
            shift_m = [None] * len(params)
            shift_p[k], shift_m[k] = e, -e
            num = (at(shift_p) - at(shift_m)) / (2 * h)
            record(analytic[k].flat[i], num, (p.name or k, int(i)))

    for _ in range(directions):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum((d ** 2).sum() for d in dirs))
        dirs = [d / norm for d in dirs]
        num = (at([h * d for d in dirs]) - at([-h * d for d in dirs])) / (2 * h)
        ana = float(sum((g * d).sum() for g, d in zip(analytic, dirs)))
        record(ana, num, "direction")

    return GradCheckResult(not failures, max(abs_errs), max(rel_errs), checked, failures)
