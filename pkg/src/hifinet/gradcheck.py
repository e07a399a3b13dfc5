"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import NumericError, Tensor

# Relative error is measured against max(|analytic|, |numeric|, SCALE_FLOOR)
# so that entries with (near-)zero true gradient are judged on absolute error.
SCALE_FLOOR = 1e-6


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tol: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def _scalar(loss: Tensor) -> float:
    if loss.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {loss.shape}")
    v = loss.item()
    if not np.isfinite(v):
        raise NumericError("gradcheck: non-finite loss")
    return v


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
              tol: float = 1e-4, max_entries: int | None = None, seed: int = 0) -> GradcheckReport:
    """Compare backprop gradients of ``f()`` with central differences.

    ``f`` is re-evaluated twice per checked entry with the parameter data
    perturbed in place.  ``max_entries`` caps the number of entries checked
    per parameter (a random subset, drawn with ``seed``); None checks all.
    """
    names = sorted(params)
    for n in names:
        params[n].requires_grad = True
        params[n].grad = None
    loss = f()
    _scalar(loss)
    loss.backward()
    analytic = {n: (params[n].grad.copy() if params[n].grad is not None else np.zeros_like(params[n].data))
                for n in names}

    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_param: dict[str, float] = {}
    for n in names:
        data = params[n].data
        flat = data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[n].reshape(-1)
        pmax = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(f())
            flat[i] = orig - eps
            down = _scalar(f())
            flat[i] = orig
            num = (up - down) / (2 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(abs(a), abs(num), SCALE_FLOOR)
            pmax = max(pmax, err)
            checked += 1
            if err > worst:
                worst, worst_name = err, f"{n}[{int(i)}]"
        per_param[n] = pmax
        params[n].grad = None
    return GradcheckReport(worst, worst_name, checked, tol, per_param)
