"""Quality-of-fit and run metrics: MSE, Kendall's tau, R^2, cost reduction."""

from __future__ import annotations

import numpy as np


class LengthMismatch(ValueError):
    pass


class ConstantActual(ValueError):
    """R^2 is undefined when the actual values have zero variance."""


def _paired(predicted, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(predicted, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.shape != a.shape or p.ndim != 1 or len(p) == 0:
        raise LengthMismatch(f"got shapes {p.shape} and {a.shape}")
    return p, a


def mse(predicted, actual) -> float:
    p, a = _paired(predicted, actual)
    return float(np.mean((p - a) ** 2))


def kendall_tau(predicted, actual) -> float:
    """Tau-a over all n(n-1)/2 pairs; tied pairs count as neither concordant
    nor discordant."""
    p, a = _paired(predicted, actual)
    n = len(p)
    if n < 2:
        raise LengthMismatch("need at least 2 values")
    sp = np.sign(p[:, None] - p[None, :])
    sa = np.sign(a[:, None] - a[None, :])
    prod = sp * sa
    concordant_minus_discordant = np.triu(prod, k=1).sum()
    return float(concordant_minus_discordant / (n * (n - 1) / 2))


def r_squared(predicted, actual) -> float:
    p, a = _paired(predicted, actual)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise ConstantActual("actual values are constant")
    ss_res = float(np.sum((a - p) ** 2))
    return 1.0 - ss_res / ss_tot


def _cost_of(run) -> float:
    return float(getattr(run, "total_cost_units", run))


def cost_summary(expensive_run, surrogate_run) -> float:
    """Percentage of epoch-units saved by the surrogate arm relative to the
    expensive arm.  Accepts run results or plain cost numbers."""
    expensive = _cost_of(expensive_run)
    surrogate = _cost_of(surrogate_run)
    return 100.0 * (1.0 - surrogate / expensive)
