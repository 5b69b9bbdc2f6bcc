"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, fresh_tape, no_grad

# Below this magnitude a gradient counts as zero, so pure round-off on
# vanishing coordinates does not show up as a large relative error.
REL_ERR_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    per_input: list = field(default_factory=list)
    n_coordinates: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_ERR_FLOOR):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[..., Tensor],
    point: Sequence[np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    wrt: Sequence[int] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(*tensors)`` with central differences.

    ``point`` holds float64 arrays, one per argument of ``f``. ``wrt`` picks
    which arguments to check (default: all).
    """
    point = [np.array(p, dtype=np.float64) for p in point]
    wrt = list(range(len(point))) if wrt is None else list(wrt)

    with fresh_tape():
        args = [Tensor(p, requires_grad=(i in wrt)) for i, p in enumerate(point)]
        out = f(*args)
        backward(out)
        analytic = [
            args[i].grad if args[i].grad is not None else np.zeros_like(point[i]) for i in wrt
        ]

    def value(arrs):
        with no_grad():
            return float(f(*[Tensor(a) for a in arrs]).data)

    report = GradCheckReport(0.0, 0.0, tol=tol)
    for i, ga in zip(wrt, analytic):
        numeric = np.zeros_like(point[i])
        flat = point[i].reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = value(point)
            flat[j] = orig - h
            fm = value(point)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        rel = relative_error(ga, numeric)
        absd = np.abs(ga - numeric)
        report.per_input.append(float(rel.max()) if rel.size else 0.0)
        report.max_rel_error = max(report.max_rel_error, report.per_input[-1])
        report.max_abs_error = max(report.max_abs_error, float(absd.max()) if absd.size else 0.0)
        report.n_coordinates += flat.size
    return report


def grad_check_params(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Finite-difference check of ``loss_fn()`` against the given parameters in place.

    Useful for whole models: parameters are perturbed one coordinate at a time.
    ``max_coords`` samples that many coordinates per parameter.
    """
    for p in params:
        p.grad = None
    with fresh_tape():
        backward(loss_fn())
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None

    def value():
        with no_grad():
            return float(loss_fn().data)

    report = GradCheckReport(0.0, 0.0, tol=tol)
    rng = rng or np.random.default_rng(0)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        a = ga.reshape(-1)[coords]
        n = np.zeros_like(a)
        for k, j in enumerate(coords):
            orig = flat[j]
            flat[j] = orig + h
            fp = value()
            flat[j] = orig - h
            fm = value()
            flat[j] = orig
            n[k] = (fp - fm) / (2.0 * h)
        rel = relative_error(a, n)
        report.per_input.append(float(rel.max()) if rel.size else 0.0)
        report.max_rel_error = max(report.max_rel_error, report.per_input[-1])
        report.max_abs_error = max(report.max_abs_error, float(np.abs(a - n).max()) if a.size else 0.0)
        report.n_coordinates += len(coords)
    return report
