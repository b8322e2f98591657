"""Finite-difference verification of analytic gradients.

Central differences with step epsilon are compared coordinate by coordinate
against the gradient produced by ``backward``. Relative error is floored at
unit scale so near-zero coordinates do not produce spurious blowups.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

__all__ = ["GradCheckReport", "grad_check"]


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    tolerance: float
    # (param name, flat index, analytic, numeric, rel error) for the worst offenders
    failures: list = field(default_factory=list)
    # coordinates where the function was non-finite at a perturbed point
    nonfinite: list = field(default_factory=list)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel error {self.max_rel_error:.3e} over "
            f"{self.n_checked} coordinates (tolerance {self.tolerance:.1e}, "
            f"{len(self.nonfinite)} non-finite)"
        )


def _as_param_dict(params) -> dict:
    if isinstance(params, Tensor):
        return {"param": params}
    if isinstance(params, dict):
        return dict(params)
    return {f"param{i}": p for i, p in enumerate(params)}


def grad_check(
    f,
    params,
    epsilon: float = 1e-5,
    tolerance: float = 1e-4,
    max_coords_per_param: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued ``f()`` with central differences.

    ``f`` must close over ``params`` (a Tensor, list, or name->Tensor dict) and
    return a scalar Tensor. When ``max_coords_per_param`` is set, a random
    coordinate subset per parameter is probed instead of the full sweep.
    Passing requires max relative error strictly below ``tolerance``.
    """
    named = _as_param_dict(params)
    for p in named.values():
        p.zero_grad()
    out = f()
    if out.data.shape != ():
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.data.shape}")
    out.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else np.array(p.grad))
        for name, p in named.items()
    }

    if rng is None:
        rng = np.random.default_rng(0)
    max_rel = 0.0
    n_checked = 0
    failures = []
    nonfinite = []
    for name, p in named.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_coords_per_param is not None and n > max_coords_per_param:
            coords = np.sort(rng.choice(n, size=max_coords_per_param, replace=False))
        else:
            coords = range(n)
        for i in coords:
            saved = flat[i]
            flat[i] = saved + epsilon
            with no_grad():
                f_plus = float(f().data)
            flat[i] = saved - epsilon
            with no_grad():
                f_minus = float(f().data)
            flat[i] = saved
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                nonfinite.append((name, int(i)))
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
            if rel >= tolerance:
                failures.append((name, int(i), a, numeric, rel))
    failures.sort(key=lambda t: -t[4])
    return GradCheckReport(
        passed=max_rel < tolerance and not nonfinite,
        max_rel_error=max_rel,
        n_checked=n_checked,
        tolerance=tolerance,
        failures=failures[:20],
        nonfinite=nonfinite,
    )
