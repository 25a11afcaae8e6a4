"""Finite-difference verification of tape gradients.

Central differences at double precision: truncation error O(step^2) and
roundoff O(eps/step) are both far below the pass tolerances used here.
Relative error uses max(|analytic|, |numeric|, 1.0) in the denominator so
near-zero gradients are compared absolutely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_checked: int
    passed: bool
    worst: tuple = ()  # (tensor label, flat index, analytic, numeric)
    per_tensor: dict = field(default_factory=dict)

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(tol {self.tol:.1e}, {self.n_checked} coords)"
        )


def _rel(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1.0)


def _eval_scalar(f, x) -> float:
    out = f(x)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(f, x: Tensor, step: float = 1e-5, tol: float = 1e-5, max_coords=None, rng=None) -> GradCheckReport:
    """Compare tape gradients of scalar f(x) against central differences.

    Checks every coordinate of x, or `max_coords` sampled ones when given.
    """
    x.requires_grad = True
    x.grad = None
    with Tape() as tape:
        loss = f(x)
        tape.backward(loss)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)
    x.grad = None

    flat = x.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng or np.random.default_rng(0)
        coords = rng.choice(flat.size, size=max_coords, replace=False)

    worst = ()
    max_err = 0.0
    af = analytic.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        fp = _eval_scalar(f, x)
        flat[i] = orig - step
        fm = _eval_scalar(f, x)
        flat[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        err = _rel(af[i], numeric)
        if err > max_err:
            max_err = err
            worst = ("x", int(i), float(af[i]), float(numeric))
    return GradCheckReport(max_err, tol, len(coords), max_err < tol, worst)


def grad_check_params(
    loss_fn,
    params: dict,
    step: float = 1e-5,
    tol: float = 1e-4,
    n_coords: int = 50,
    rng=None,
) -> GradCheckReport:
    """Finite-difference check of a loss over a named parameter set.

    `loss_fn()` must rebuild the forward pass from the current parameter
    values. Samples `n_coords` coordinates across all tensors.
    """
    rng = rng or np.random.default_rng(0)
    names = sorted(params)
    tensors = [params[k] for k in names]
    for p in tensors:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
        tape.backward(loss)
    analytic = {k: (params[k].grad.copy() if params[k].grad is not None else np.zeros_like(params[k].data)) for k in names}
    for p in tensors:
        p.grad = None

    sizes = np.array([params[k].size for k in names])
    total = int(sizes.sum())
    picks = rng.choice(total, size=min(n_coords, total), replace=False)
    bounds = np.cumsum(sizes)

    def locate(flat_idx):
        ti = int(np.searchsorted(bounds, flat_idx, side="right"))
        return names[ti], int(flat_idx - (bounds[ti - 1] if ti else 0))

    max_err, worst = 0.0, ()
    per_tensor: dict = {}
    for p in picks:
        name, i = locate(p)
        buf = params[name].data.reshape(-1)
        orig = buf[i]
        buf[i] = orig + step
        fp = float(loss_fn().data.reshape(()))
        buf[i] = orig - step
        fm = float(loss_fn().data.reshape(()))
        buf[i] = orig
        numeric = (fp - fm) / (2.0 * step)
        a = analytic[name].reshape(-1)[i]
        err = _rel(a, numeric)
        per_tensor[name] = max(per_tensor.get(name, 0.0), err)
        if err > max_err:
            max_err = err
            worst = (name, i, float(a), float(numeric))
    return GradCheckReport(max_err, tol, len(picks), max_err < tol, worst, per_tensor)
