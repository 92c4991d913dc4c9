"""Error measures and operator-norm estimation.

Vector quantities are reduced over the trailing ``axes`` (the grid), so the
functions accept single samples as well as batches; batched results are
per-sample arrays.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import DimensionError, NumericalError, UndefinedMetricError


def _norm(x, axes):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(np.sum(x * x, axis=axes))


def mse_loss(u_hat, u):
    """Mean squared error; differentiable when ``u_hat`` is a Tensor."""
    if tuple(np.shape(u_hat.data if isinstance(u_hat, T.Tensor) else u_hat)) != tuple(np.shape(u)):
        raise DimensionError(f"prediction {np.shape(u_hat)} and target {np.shape(u)} differ")
    if isinstance(u_hat, T.Tensor):
        return T.mse(u_hat, np.asarray(u, dtype=u_hat.dtype))
    d = np.asarray(u_hat, dtype=np.float64) - np.asarray(u, dtype=np.float64)
    return float(np.mean(d * d))


def eps_rel(u_hat, u, axes=-1):
    """``||u_hat - u|| / ||u||``."""
    den = _norm(u, axes)
    if np.any(den == 0):
        raise UndefinedMetricError("relative error undefined for a zero reference solution")
    return _norm(np.asarray(u_hat, dtype=np.float64) - np.asarray(u, dtype=np.float64), axes) / den


def eps_be(apply, norm_A, u_hat, c, axes=-1):
    """``||A u_hat - c|| / (||A|| ||u_hat|| + ||c||)``.

    ``apply`` maps ``u_hat`` to ``A u_hat`` (boundary data included);
    ``norm_A`` may be a scalar or per-sample array.
    """
    u_hat = np.asarray(u_hat, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    num = _norm(apply(u_hat) - c, axes)
    den = np.asarray(norm_A) * _norm(u_hat, axes) + _norm(c, axes)
    if np.any(den == 0):
        raise UndefinedMetricError("backward error undefined: zero denominator")
    return num / den


def eps_res(r_int, r_bnd=None, axes=-1):
    """``(||r_int||, |r_bnd|)``; the boundary part is None when absent."""
    inner = _norm(r_int, axes)
    return inner, (None if r_bnd is None else np.abs(np.asarray(r_bnd, dtype=np.float64)))


def matrix_2norm(apply, shape, tol=1e-6, max_iter=200_000, apply_t=None, batched=False, rng=0):
    """Spectral norm by power iteration on ``A^T A``.

    ``shape`` is the shape of one input; with ``batched`` its leading axis
    indexes independent operators and per-sample norms are returned.
    ``apply_t`` defaults to ``apply`` (symmetric operators).

    The Rayleigh quotient converges geometrically; with successive changes
    ``d_k`` and contraction estimate ``r = d_k / d_{k-1}`` the remaining error
    is about ``d_k r / (1 - r)``, and iteration stops once that is below
    ``tol`` relative.
    """
    apply_t = apply_t or apply
    shape = tuple(np.atleast_1d(shape))
    axes = tuple(range(1, len(shape))) if batched else tuple(range(len(shape)))
    keep = (lambda x: x.reshape(x.shape + (1,) * (len(shape) - 1))) if batched else (lambda x: x)
    v = np.random.default_rng(rng).standard_normal(shape)
    v = v / keep(_norm(v, axes))
    lam = prev_step = None
    result = None
    floor = 64 * np.finfo(np.float64).eps
    for _ in range(max_iter):
        w = apply_t(apply(v))
        new = np.sum(v * w, axis=axes)
        nw = _norm(w, axes)
        if result is None:
            result = np.full(np.shape(new), np.nan)
        v = w / keep(np.where(nw == 0, 1.0, nw))
        done = nw == 0
        if lam is not None:
            step = np.abs(new - lam)
            done |= step <= floor * np.abs(new)
            if prev_step is not None:
                with np.errstate(divide="ignore", invalid="ignore"):
                    r = np.where(prev_step > 0, step / prev_step, 0.0)
                    tail = np.where(r < 1, step * r / (1 - r), np.inf)
                done |= tail <= tol * np.abs(new)
            prev_step = step
        lam = new
        # freeze converged entries
        result = np.where(np.isnan(result) & done, np.sqrt(np.maximum(new, 0.0)), result)
        if not np.any(np.isnan(result)):
            return result if batched else float(result)
    raise NumericalError(f"power iteration did not converge in {max_iter} iterations")
