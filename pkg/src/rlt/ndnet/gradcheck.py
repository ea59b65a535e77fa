"""Central finite-difference verification of tape gradients."""
from __future__ import annotations

import numpy as np

from .params import ParamSet
from .tensor import NumericError, precise


def grad_check(
    f,
    params: ParamSet,
    epsilon: float = 1e-4,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare tape gradients of the scalar f() against central differences.

    f must be a deterministic closure over `params`. Returns the max over
    sampled coordinates of |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).

    The whole check runs in float64 (params temporarily promoted): the same
    tape closures execute, but float32 loss quantization (~1e-7) would
    otherwise swamp the comparison for small or cancelling gradients.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    names = sorted(params.names())
    total = sum(params[n].size for n in names)
    picks = rng.integers(0, total, size=min(n_samples, total))
    offsets = np.cumsum([0] + [params[n].size for n in names])
    coords: list[tuple[str, int]] = []
    for flat in np.unique(picks):
        idx = int(np.searchsorted(offsets, flat, side="right")) - 1
        coords.append((names[idx], int(flat - offsets[idx])))

    kept = {name: params[name].data for name in names}
    max_err = 0.0
    try:
        for name in names:
            params[name].data = kept[name].astype(np.float64)
        with precise():
            params.zero_grad()
            loss = f()
            if not np.isfinite(loss.data).all():
                raise NumericError("non-finite loss in grad_check")
            loss.backward()
            grads = {
                name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            for name, flat_idx in coords:
                work = params[name].data
                orig = work.flat[flat_idx]
                work.flat[flat_idx] = orig + epsilon
                f_plus = float(f().item())
                work.flat[flat_idx] = orig - epsilon
                f_minus = float(f().item())
                work.flat[flat_idx] = orig
                g_fd = (f_plus - f_minus) / (2.0 * epsilon)
                g_ad = float(grads[name].flat[flat_idx])
                err = abs(g_ad - g_fd) / max(1e-8, abs(g_ad) + abs(g_fd))
                max_err = max(max_err, err)
    finally:
        for name in names:
            params[name].data = kept[name]
        params.zero_grad()
    return max_err
