"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import GradTape, NonFiniteError, Parameter, Tensor


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float | None = None) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor) with a floor of 1e-6 of ``scale`` (the
    largest numeric entry by default), so coordinates whose true gradient is
    ~0 are judged on an absolute scale instead of blowing up."""
    if scale is None:
        scale = float(np.max(np.abs(numeric), initial=0.0))
    scale = max(scale, 1e-12)
    den = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6 * scale)
    return np.abs(analytic - numeric) / den


def grad_check(f: Callable[..., Tensor], point: Sequence[np.ndarray] | np.ndarray, step: float = 1e-3,
               dtype=np.float64, max_coords: int | None = None, seed: int = 0) -> float:
    """Worst relative error between tape and finite-difference gradients.

    ``f`` takes one Parameter per array in ``point`` and returns a scalar
    Tensor. All arrays are promoted to ``dtype`` (64-bit by default).
    ``max_coords`` caps how many coordinates per array are probed, chosen at
    random with ``seed``.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=dtype)] if single else [np.array(p, dtype=dtype) for p in point]
    params = [Parameter(a.copy()) for a in arrays]

    with GradTape() as tape:
        out = f(*params)
    val = out.data
    if out.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.all(np.isfinite(val)):
        raise NonFiniteError("function is not finite at the check point")
    analytic = tape.gradient(out, params)

    def evaluate() -> float:
        v = float(f(*params).data)
        if not np.isfinite(v):
            raise NonFiniteError("function is not finite near the check point")
        return v

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, base, ga in zip(params, arrays, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = evaluate()
            flat[i] = orig - step
            fm = evaluate()
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        ana = np.asarray(ga, dtype=np.float64).reshape(-1)[coords]
        if num.size:
            worst = max(worst, float(relative_errors(ana, num).max()))
        np.copyto(p.data, base)
    return worst


def check_module(module, loss_fn: Callable[[], Tensor], step: float = 1e-3, max_coords: int | None = 20,
                 seed: int = 0) -> dict[str, float]:
    """Grad-check every parameter of ``module`` (already cast to float64).

    ``loss_fn`` closes over the module and any inputs. Returns the worst
    relative error per parameter path. The near-zero floor is shared by all
    parameters because some (a bias feeding batch norm) have exactly zero
    gradient.
    """
    named = list(module.named_parameters())
    with GradTape() as tape:
        loss = loss_fn()
    grads = tape.gradient(loss, [p for _, p in named])
    rng = np.random.default_rng(seed)
    numeric = {}
    for (name, p), ga in zip(named, grads):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        num = np.empty(len(coords))
        for j, i in enumerate(coords):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
            flat[i] = orig
            num[j] = (fp - fm) / (2 * step)
        numeric[name] = (ga.reshape(-1)[coords], num)
    scale = max((float(np.abs(n).max(initial=0.0)) for _, n in numeric.values()), default=0.0)
    return {name: float(relative_errors(a, n, scale).max()) if n.size else 0.0
            for name, (a, n) in numeric.items()}


__all__ = ["grad_check", "check_module", "relative_errors", "Parameter"]
