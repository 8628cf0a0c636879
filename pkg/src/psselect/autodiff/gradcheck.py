"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from psselect.autodiff.tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict
    n_checked: int


def rel_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum.reduce([np.ones_like(a), np.abs(a), np.abs(b)])


def grad_check(fn, params, h: float = 1e-6, max_entries: int | None = None, seed=0) -> GradCheckReport:
    """Compare ``backward()`` gradients of the scalar ``fn()`` with central differences.

    ``fn`` must rebuild the graph from ``params`` on every call and be
    deterministic (fix dropout seeds). With ``max_entries`` only a seeded
    random subset of each tensor's entries is perturbed.
    """
    params = list(params)
    if isinstance(params[0], tuple):
        named = params
    else:
        named = [(p.name or f"p{i}", p) for i, p in enumerate(params)]
    for _, p in named:
        p.grad = None
    out = fn()
    if not isinstance(out, Tensor) or out.size != 1:
        raise ValueError("grad_check needs a graph with a scalar output")
    out.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for name, p in named}

    rng = np.random.default_rng(seed)
    per, total = {}, 0
    for name, p in named:
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + h
            xp, fp = flat[j], float(fn().data)
            flat[j] = orig - h
            xm, fm = flat[j], float(fn().data)
            flat[j] = orig
            # divide by the step actually stored, not the nominal 2h
            num = (fp - fm) / (xp - xm)
            worst = max(worst, float(rel_error(analytic[name].reshape(-1)[j], num)))
        per[name] = worst
        total += len(idx)
    return GradCheckReport(max(per.values()) if per else 0.0, per, total)
