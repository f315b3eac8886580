"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, no_grad


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, epsilon: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x`` (fix any
    stochastic draws before calling).  Error per coordinate is
    |analytic - fd| / max(1, |fd|), accumulated in float64.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ValueError(f"epsilon {epsilon} outside [1e-5, 1e-2]")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError("grad_check target must be scalar-valued")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite function value at the base point")
    out.backward()
    analytic = np.zeros_like(probe.data, dtype=np.float64) if probe.grad is None \
        else probe.grad.astype(np.float64)

    flat = probe.data.reshape(-1)
    worst = 0.0
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(f(Tensor(probe.data.copy())).data)
            flat[i] = orig - epsilon
            f_minus = float(f(Tensor(probe.data.copy())).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * epsilon)
            err = abs(analytic.reshape(-1)[i] - fd) / max(1.0, abs(fd))
            if err > worst:
                worst = err
    return worst


def grad_check_params(loss_fn: Callable[[], Tensor], params, epsilon: float = 1e-4,
                      max_coords_per_param: int | None = None, rng: np.random.Generator | None = None):
    """Check d(loss)/d(param) for every named parameter against central differences.

    ``loss_fn`` rebuilds the (deterministic) loss from current parameter
    values.  Returns {name: max_relative_error}.  Coordinates can be
    subsampled per parameter to bound runtime on larger models.
    """
    if not (1e-5 <= epsilon <= 1e-2):
        raise ValueError(f"epsilon {epsilon} outside [1e-5, 1e-2]")
    params = list(params)
    for _, p in params:
        p.grad = None
    out = loss_fn()
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite loss at the base point")
    out.backward()
    analytic = {name: (np.zeros_like(p.data, dtype=np.float64) if p.grad is None
                       else p.grad.astype(np.float64)) for name, p in params}

    errors = {}
    with no_grad():
        for name, p in params:
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords_per_param is not None and flat.size > max_coords_per_param:
                coords = (rng or np.random.default_rng(0)).choice(flat.size, size=max_coords_per_param, replace=False)
            worst = 0.0
            for i in coords:
                orig = flat[i]
                flat[i] = orig + epsilon
                f_plus = float(loss_fn().data)
                flat[i] = orig - epsilon
                f_minus = float(loss_fn().data)
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * epsilon)
                err = abs(analytic[name].reshape(-1)[i] - fd) / max(1.0, abs(fd))
                if err > worst:
                    worst = err
            errors[name] = worst
    return errors
