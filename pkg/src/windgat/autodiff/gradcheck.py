from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import NonFiniteError, Tape, Tensor


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    floor: float = 1e-6,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds its scalar output from the current ``params`` data every
    call.  Relative error per entry is ``|a - n| / max(|a|, |n|, floor)``,
    so entries whose true gradient is below ``floor`` are compared in
    absolute terms.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    params = [params] if isinstance(params, Tensor) else list(params)
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = f()
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    tape.backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        v = f().item()
        if not np.isfinite(v):
            raise NonFiniteError("function value is not finite")
        return v

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + eps
            up = value()
            flat[k] = orig - eps
            down = value()
            flat[k] = orig
            num = (up - down) / (2 * eps)
            err = abs(a_flat[k] - num) / max(abs(a_flat[k]), abs(num), floor)
            worst = max(worst, err)
    return worst
