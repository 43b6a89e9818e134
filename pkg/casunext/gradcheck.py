"""Central finite-difference checks for the autodiff layers."""

from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from casunext.tensor import Tensor

logger = logging.getLogger(__name__)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = max(float(np.linalg.norm(a)), float(np.linalg.norm(n)), 1e-12)
    return float(np.linalg.norm(a - n)) / scale


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.errors.values(), default=0.0)

    def passed(self, tolerance: float) -> bool:
        return self.worst < tolerance


def _evaluate(loss_fn: Callable[[], Tensor]) -> float:
    return loss_fn().item()


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Mapping[str, Tensor],
    h: float = 1e-5,
    max_coords: int = 64,
    directions: int = 3,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against central differences of `loss_fn` for each named tensor.

    Tensors with at most `max_coords` elements are perturbed one coordinate at a time; larger ones
    are checked along `directions` random unit directions. `loss_fn` must rebuild the forward pass
    from the current tensor data on every call.
    """
    for t in tensors.values():
        t.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in tensors.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport()
    for name, t in tensors.items():
        flat = t.data.reshape(-1)
        if t.size <= max_coords:
            numeric = np.zeros(t.size)
            for i in range(t.size):
                saved = flat[i]
                flat[i] = saved + h
                plus = _evaluate(loss_fn)
                flat[i] = saved - h
                minus = _evaluate(loss_fn)
                flat[i] = saved
                numeric[i] = (plus - minus) / (2 * h)
            report.errors[name] = relative_error(analytic[name], numeric)
        else:
            worst = 0.0
            saved = flat.copy()
            for _ in range(directions):
                d = rng.standard_normal(t.size)
                d /= np.linalg.norm(d)
                flat[:] = saved + h * d
                plus = _evaluate(loss_fn)
                flat[:] = saved - h * d
                minus = _evaluate(loss_fn)
                flat[:] = saved
                numeric = (plus - minus) / (2 * h)
                worst = max(worst, relative_error(np.array([analytic[name].ravel() @ d]), np.array([numeric])))
            report.errors[name] = worst
        logger.debug("gradcheck %s: relative error %.2e", name, report.errors[name])
    return report
