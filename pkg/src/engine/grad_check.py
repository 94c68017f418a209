"""
grad_check.py
Central finite-difference check of tape gradients
"""
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from engine.tensor import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
ERROR_FLOOR = 1e-8


@dataclass
class ParamGradError:
    """Worst disagreement between tape and finite-difference gradients for one tensor"""
    name: str
    shape: tuple
    checked_entries: int
    relative_error: float
    max_abs_error: float
    worst_index: Optional[tuple] = None


@dataclass
class GradCheckReport:
    step: float
    entries: List[ParamGradError] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((e.relative_error for e in self.entries), default=0.0)

    @property
    def worst(self) -> Optional[ParamGradError]:
        return max(self.entries, key=lambda e: e.relative_error, default=None)

    def failures(self, tolerance: float = DEFAULT_TOLERANCE) -> List[ParamGradError]:
        return [e for e in self.entries if e.relative_error > tolerance]

    def passed(self, tolerance: float = DEFAULT_TOLERANCE) -> bool:
        return not self.failures(tolerance)

    def as_dict(self) -> Dict[str, float]:
        return {e.name: e.relative_error for e in self.entries}


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = DEFAULT_STEP,
    max_entries_per_param: Optional[int] = None,
    seed: int = 0,
) -> GradCheckReport:
    """
    Compare tape gradients with central differences for every parameter.

    Args:
        loss_fn: deterministic closure that builds the scalar loss from params
        params: named parameter tensors (requires_grad=True)
        step: finite-difference step
        max_entries_per_param: check only a seeded sample of entries per tensor
        seed: seed of that sample

    Returns:
        GradCheckReport with one entry per parameter tensor, holding the worst
        |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8) over its checked entries.
    """
    report = GradCheckReport(step=step)
    if not params:
        return report

    for p in params.values():
        p.zero_grad()
    backward(loss_fn())
    analytic = {name: p.grad.copy() for name, p in params.items()}

    rng = np.random.default_rng(seed)
    with no_grad():
        for name, p in params.items():
            size = p.data.size
            indices = np.arange(size)
            if max_entries_per_param is not None and size > max_entries_per_param:
                indices = np.sort(rng.choice(size, size=max_entries_per_param, replace=False))
            g_ad = analytic[name].reshape(-1)[indices]
            g_fd = np.empty(len(indices))
            for j, idx in enumerate(indices):
                original = p.data.flat[idx]
                p.data.flat[idx] = original + step
                plus = loss_fn().item()
                p.data.flat[idx] = original - step
                minus = loss_fn().item()
                p.data.flat[idx] = original
                g_fd[j] = (plus - minus) / (2.0 * step)

            diff = np.abs(g_ad - g_fd)
            scale = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), ERROR_FLOOR)
            errors = diff / scale
            worst = int(np.argmax(errors)) if len(indices) else None
            report.entries.append(ParamGradError(
                name=name,
                shape=p.shape,
                checked_entries=len(indices),
                relative_error=float(errors.max(initial=0.0)),
                max_abs_error=float(diff.max(initial=0.0)),
                worst_index=None if worst is None else tuple(
                    int(i) for i in np.unravel_index(indices[worst], p.shape)
                ),
            ))
    return report
