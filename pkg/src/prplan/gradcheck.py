"""Central finite-difference checks for hand-written backward passes."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .numerics import Parametrized


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``|a - n| / max(|a| + |n|, floor)`` over the whole tensor.

    The floor keeps tensors whose true gradient is zero (where both sides are
    rounding noise) from reporting a meaningless ratio.
    """
    diff = float(np.linalg.norm(np.ravel(analytic - numeric)))
    scale = float(np.linalg.norm(np.ravel(analytic)) + np.linalg.norm(np.ravel(numeric)))
    return diff / max(scale, floor)


def numeric_gradients(params: Parametrized, loss: Callable[[], float], step: float = 1e-3,
                      max_entries: int | None = None, rng: np.random.Generator | None = None) -> dict:
    """Central differences of ``loss()`` w.r.t. every tensor of ``params`` (perturbed in place).

    With ``max_entries`` only that many randomly chosen entries per tensor are
    probed; the rest are NaN.
    """
    out = {}
    for name, t in params.named_tensors().items():
        g = np.full(t.shape, np.nan)
        flat_idx = np.arange(t.size)
        if max_entries is not None and t.size > max_entries:
            flat_idx = (rng or np.random.default_rng(0)).choice(t.size, max_entries, replace=False)
        view = t.reshape(-1)
        for i in flat_idx:
            keep = view[i]
            view[i] = keep + step
            up = loss()
            view[i] = keep - step
            down = loss()
            view[i] = keep
            g.reshape(-1)[i] = (up - down) / (2 * step)
        out[name] = g
    return out


def compare(analytic: dict, numeric: dict, floor: float = 1e-6) -> dict[str, float]:
    errors = {}
    for name, n in numeric.items():
        mask = ~np.isnan(n)
        errors[name] = relative_error(np.asarray(analytic[name])[mask], n[mask], floor)
    return errors
