from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, precision


@dataclass(frozen=True)
class GradCheckReport:
    op_name: str
    max_rel_err: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.op_name}: max_rel_err={self.max_rel_err:.3e} (tol {self.tolerance:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    closure: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-3,
    step: float = 1e-6,
    op_name: str = "closure",
    dtype=np.float64,
    max_coords: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient of ``closure(*inputs)`` with central differences.

    Inputs are promoted to ``dtype`` for the duration of the check and restored
    afterwards. A non-finite loss or gradient yields a failed report.
    ``max_coords`` limits the check to that many randomly chosen entries per input.
    """
    rng = np.random.default_rng(seed)
    saved = [(t.data, t.requires_grad, t.grad) for t in inputs]
    try:
        with precision(dtype):
            for t in inputs:
                t.data = np.array(t.data, dtype=dtype, copy=True, order="C")
                t.requires_grad = True
                t.grad = None
            loss = closure(*inputs)
            if loss.data.size != 1:
                raise ValueError(f"grad_check closure must return a scalar, got shape {loss.shape}")
            if not np.isfinite(loss.data).all():
                return GradCheckReport(op_name, float("inf"), tolerance, False)
            loss.backward()
            analytic = [
                np.zeros_like(t.data) if t.grad is None else np.array(t.grad, copy=True) for t in inputs
            ]

            worst = 0.0
            for t, a in zip(inputs, analytic):
                if not np.isfinite(a).all():
                    return GradCheckReport(op_name, float("inf"), tolerance, False)
                flat = t.data.reshape(-1)
                coords = np.arange(flat.size)
                if max_coords is not None and flat.size > max_coords:
                    coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
                numeric = np.empty(coords.size, dtype=dtype)
                for j, i in enumerate(coords):
                    orig = flat[i]
                    flat[i] = orig + step
                    up = closure(*inputs).item()
                    flat[i] = orig - step
                    down = closure(*inputs).item()
                    flat[i] = orig
                    numeric[j] = (up - down) / (2.0 * step)
                if not np.isfinite(numeric).all():
                    return GradCheckReport(op_name, float("inf"), tolerance, False)
                if coords.size:
                    worst = max(worst, float(relative_error(a.reshape(-1)[coords], numeric).max()))
    finally:
        for t, (data, req, grad) in zip(inputs, saved):
            t.data, t.requires_grad, t.grad = data, req, grad
    return GradCheckReport(op_name, worst, tolerance, worst <= tolerance)
