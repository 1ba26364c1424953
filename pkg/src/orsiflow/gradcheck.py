"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradReport:
    name: str
    max_rel_err: float
    per_param: dict = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.max_rel_err)) and self.max_rel_err < self.tol

    def __str__(self):
        status = "ok  " if self.ok else "FAIL"
        return f"{status} {self.name:<28s} max rel err {self.max_rel_err:.2e}"


def _rel_err(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-4,
              name: str = "f", max_entries: int | None = None, rng=None) -> GradReport:
    """Compare backward() gradients of scalar ``f()`` against central differences.

    ``f`` rebuilds the graph from the current ``params`` on every call. The
    error for each parameter is the max absolute deviation normalized by the
    larger gradient magnitude, floored at ``1e-3`` times the largest gradient
    of the whole call so that structurally zero gradients (e.g. a bias that
    a softmax is invariant to) are judged against roundoff, not against zero.
    ``max_entries`` subsamples large parameters.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    floor = max(1e-8, 1e-3 * max((np.abs(a).max(initial=0.0) for a in analytic), default=0.0))
    rng = rng or np.random.default_rng(0)
    report = GradReport(name=name, max_rel_err=0.0, tol=tol)
    for i, p in enumerate(params):
        p.data = np.array(p.data, order="C")
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        num = np.empty(idx.size)
        for j, k in enumerate(idx):
            orig = flat[k]
            flat[k] = orig + h
            fp = f().item()
            flat[k] = orig - h
            fm = f().item()
            flat[k] = orig
            num[j] = (fp - fm) / (2 * h)
        err = _rel_err(analytic[i].reshape(-1)[idx], num, floor)
        label = p.name or f"param{i}"
        report.per_param[label] = err
        report.max_rel_err = max(report.max_rel_err, err)
    return report
