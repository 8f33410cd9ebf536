"""Central finite-difference checks run in float64."""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3,
                   indices: Optional[Sequence[tuple]] = None) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to entries of ``param``.

    Returns a flat array aligned with ``indices`` (all entries when None).
    """
    if indices is None:
        indices = list(np.ndindex(*param.shape))
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        original = param.data[idx]
        param.data[idx] = original + step
        plus = float(fn().data)
        param.data[idx] = original - step
        minus = float(fn().data)
        param.data[idx] = original
        out[n] = (plus - minus) / (2.0 * step)
    return out


ABS_FLOOR = 1e-8


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that vanish analytically (e.g. a bias the
    output is invariant to) from dividing finite-difference round-off by ~0.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Dict[str, Tensor], step: float = 1e-3,
                    max_entries: int = 8, rng: Optional[np.random.Generator] = None
                    ) -> Dict[str, float]:
    """Compare backprop against finite differences for each named parameter.

    All tensors involved should already be float64.  At most ``max_entries``
    randomly chosen entries per parameter are perturbed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params.values():
        p.grad = np.zeros_like(p.data)
    out = fn()
    out.backward()
    errors = {}
    for name, p in params.items():
        flat = rng.permutation(p.size)[:max_entries]
        indices = [np.unravel_index(i, p.shape) for i in flat]
        analytic = np.array([p.grad[idx] for idx in indices])
        numeric = numerical_grad(fn, p, step, indices)
        errors[name] = relative_error(analytic, numeric)
    return errors
