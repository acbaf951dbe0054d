"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import engine as E


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """``||a - n|| / max(||a|| + ||n||, floor)``.

    The floor keeps finite-difference round-off (~1e-11 at h=1e-5) from
    dominating when the true gradient vanishes.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a) + np.linalg.norm(n), floor))


def numeric_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                 coords: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    With ``coords`` only those entries are estimated (others stay NaN).
    """
    grad = np.full(x.shape, np.nan) if coords is not None else np.zeros(x.shape)
    it = coords if coords is not None else list(np.ndindex(x.shape))
    for idx in it:
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def check_gradients(loss_fn: Callable[[], E.Tensor], params: Sequence[E.Parameter], h: float = 1e-5,
                    max_coords: int | None = None, rng: np.random.Generator | None = None) -> dict[str, float]:
    """Relative error between reverse-mode and finite-difference gradients per parameter.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. With ``max_coords`` a random subset of entries is compared.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = loss_fn()
    E.backward(loss)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}

    def scalar() -> float:
        with E.no_grad():
            return float(loss_fn().data)

    errors: dict[str, float] = {}
    for k, p in enumerate(params):
        coords = None
        if max_coords is not None and p.data.size > max_coords:
            flat = rng.choice(p.data.size, size=max_coords, replace=False)
            coords = [np.unravel_index(i, p.shape) for i in flat]
        num = numeric_grad(scalar, p.data, h, coords)
        ana = analytic[id(p)]
        if coords is not None:
            sel = tuple(np.array(c) for c in zip(*coords))
            num, ana = num[sel], ana[sel]
        errors[p.name or f"param{k}"] = relative_error(ana, num)
        p.grad = None
    return errors
