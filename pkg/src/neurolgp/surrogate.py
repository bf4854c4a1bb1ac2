"""Kriging and Kriging-Partial-Least-Squares regression over phenotype vectors.

The plain Kriging kernel is K(x, x') = prod_i exp(-theta_i (x_i - x'_i)^2)
with one decay rate per input dimension.  The KPLS kernel acts through h
partial-least-squares directions instead, K = prod_k prod_i
exp(-theta_k (w_ki x_i - w_ki x'_i)^2), shrinking the number of fitted decay
rates from m to h << m.  Hyperparameters are fitted by maximising the
concentrated log-likelihood of ordinary Kriging (constant trend) with a
derivative-free simplex search restarted from a log-uniform grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.special import ndtr

_SQRT_2PI = math.sqrt(2.0 * math.pi)


class DimensionMismatch(ValueError):
    pass


class DegenerateResponse(ValueError):
    """The response is constant; no PLS direction is defined."""


class SingularCorrelation(RuntimeError):
    """Correlation matrix not positive definite even at the maximum nugget."""


@dataclass(frozen=True)
class SurrogateConfig:
    components: int = 3
    theta_min: float = 1e-6
    theta_max: float = 1e2
    nugget: float = 1e-10
    max_nugget: float = 1e-6
    restarts: int = 5


@dataclass(frozen=True)
class KernelParams:
    theta: np.ndarray
    process_variance: float
    nugget: float


@dataclass(frozen=True)
class PLSProjection:
    weights: np.ndarray  # (m, h) rotated directions

    @property
    def h(self) -> int:
        return self.weights.shape[1]


class Archive:
    """Pairs of (phenotype vector at the partial budget, realised full-training
    fitness).  Exact-duplicate vectors are deduplicated keeping the latest y."""

    def __init__(self):
        self._entries: dict[bytes, tuple[np.ndarray, float]] = {}
        self.total_added = 0

    def add(self, x: np.ndarray, y: float) -> None:
        x = np.asarray(x, dtype=np.float64)
        if self._entries and len(x) != len(next(iter(self._entries.values()))[0]):
            raise DimensionMismatch("phenotype dimension changed")
        self._entries[x.tobytes()] = (x, float(y))
        self.total_added += 1

    def __len__(self) -> int:
        return len(self._entries)

    def matrix(self) -> tuple[np.ndarray, np.ndarray]:
        xs = [x for x, _ in self._entries.values()]
        ys = [y for _, y in self._entries.values()]
        return np.asarray(xs), np.asarray(ys)


def kriging_kernel(x: np.ndarray, x2: np.ndarray, theta: np.ndarray) -> float:
    x, x2, theta = (np.asarray(a, dtype=np.float64) for a in (x, x2, theta))
    if not (x.shape == x2.shape == theta.shape):
        raise DimensionMismatch(f"shapes {x.shape}, {x2.shape}, {theta.shape}")
    return float(np.exp(-np.sum(theta * (x - x2) ** 2)))


def kpls_kernel(x: np.ndarray, x2: np.ndarray, theta: np.ndarray, weights: np.ndarray) -> float:
    x, x2, theta, weights = (np.asarray(a, dtype=np.float64) for a in (x, x2, theta, weights))
    if x.shape != x2.shape or weights.shape != (x.shape[0], theta.shape[0]):
        raise DimensionMismatch(
            f"x {x.shape}, x' {x2.shape}, weights {weights.shape}, theta {theta.shape}"
        )
    comp = ((x - x2) ** 2) @ (weights**2)
    return float(np.exp(-np.sum(theta * comp)))


def pls_directions(X: np.ndarray, y: np.ndarray, h: int) -> PLSProjection:
    """PLS1 directions by iterative deflation, returned as rotated directions
    that map raw (centred) inputs straight to scores."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or len(y) != X.shape[0]:
        raise DimensionMismatch("X must be (n, m) with matching y")
    if np.ptp(y) == 0.0:
        raise DegenerateResponse("constant response")
    n, m = X.shape
    h = min(h, m, n - 1)
    xk = X - X.mean(axis=0)
    yk = y - y.mean()
    W = np.zeros((m, h))
    P = np.zeros((m, h))
    used = 0
    for k in range(h):
        w = xk.T @ yk
        norm = np.linalg.norm(w)
        if norm < 1e-14:
            break
        w /= norm
        t = xk @ w
        tt = t @ t
        if tt < 1e-14:
            break
        p = xk.T @ t / tt
        W[:, k] = w
        P[:, k] = p
        xk = xk - np.outer(t, p)
        yk = yk - (yk @ t / tt) * t
        used += 1
    if used == 0:
        raise DegenerateResponse("response carries no covariance with the inputs")
    W, P = W[:, :used], P[:, :used]
    rotated = W @ np.linalg.inv(P.T @ W)
    return PLSProjection(rotated)


@dataclass
class SurrogateModel:
    X: np.ndarray
    y: np.ndarray
    projection: PLSProjection
    params: KernelParams
    beta: float
    log_likelihood: float
    _cho: tuple
    _alpha: np.ndarray  # R^-1 (y - 1 beta)
    _rinv_ones: np.ndarray
    _ones_rinv_ones: float

    @property
    def n(self) -> int:
        return len(self.y)

    def diagnostics(self) -> dict:
        return {
            "theta": self.params.theta.tolist(),
            "sigma2": self.params.process_variance,
            "beta": self.beta,
            "h": self.projection.h,
            "n": self.n,
            "log_likelihood": self.log_likelihood,
        }


def _component_sqdist(X: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """D[i, j, k] = sum_d weights[d, k]^2 (X_id - X_jd)^2, shape (n, n, h)."""
    n, h = X.shape[0], weights.shape[1]
    out = np.empty((n, n, h))
    for k in range(h):
        z = X * weights[:, k]
        sq = np.einsum("ij,ij->i", z, z)
        d = sq[:, None] + sq[None, :] - 2.0 * (z @ z.T)
        out[:, :, k] = np.maximum(d, 0.0)
    return out


def _likelihood_terms(d2: np.ndarray, y: np.ndarray, theta: np.ndarray, nugget: float):
    n = len(y)
    R = np.exp(-(d2 @ theta))
    R[np.diag_indices_from(R)] += nugget
    cho = cho_factor(R, lower=True)
    ones = np.ones(n)
    rinv_ones = cho_solve(cho, ones)
    rinv_y = cho_solve(cho, y)
    denom = ones @ rinv_ones
    beta = (ones @ rinv_y) / denom
    resid = y - beta
    sigma2 = max(resid @ cho_solve(cho, resid) / n, 1e-300)
    log_det = 2.0 * np.sum(np.log(np.diag(cho[0])))
    ll = -0.5 * (n * math.log(sigma2) + log_det)
    return ll, beta, sigma2, cho, rinv_ones, denom


def concentrated_log_likelihood(
    X: np.ndarray, y: np.ndarray, weights: np.ndarray, theta: np.ndarray, nugget: float = 1e-10
) -> float:
    """Profile log-likelihood of ordinary Kriging with the KPLS kernel (trend
    and process variance concentrated out)."""
    d2 = _component_sqdist(np.asarray(X, dtype=np.float64), np.asarray(weights))
    return _likelihood_terms(d2, np.asarray(y, dtype=np.float64), np.asarray(theta), nugget)[0]


def fit(archive, cfg: SurrogateConfig = SurrogateConfig()) -> SurrogateModel:
    """Fit a KPLS model to an archive (or an (X, y) pair).

    Maximises the concentrated log-likelihood over log10(theta) with
    Nelder-Mead restarts from a log-uniform grid; the correlation matrix is
    regularised with an escalating nugget.
    """
    if isinstance(archive, tuple):
        X, y = archive
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
    else:
        X, y = archive.matrix()
    n = len(y)
    if n < 2:
        raise ValueError(f"need at least 2 archive entries, have {n}")
    proj = pls_directions(X, y, cfg.components)
    d2 = _component_sqdist(X, proj.weights)
    h = proj.h
    lo, hi = math.log10(cfg.theta_min), math.log10(cfg.theta_max)

    def objective(log10_theta: np.ndarray) -> float:
        theta = 10.0 ** np.clip(log10_theta, lo, hi)
        try:
            return -_likelihood_terms(d2, y, theta, cfg.nugget)[0]
        except np.linalg.LinAlgError:
            return np.inf

    best = None
    for v in np.linspace(-4.0, 1.0, cfg.restarts):
        res = minimize(
            objective,
            np.full(h, v),
            method="Nelder-Mead",
            bounds=[(lo, hi)] * h,
            options={"xatol": 1e-3, "fatol": 1e-6, "maxiter": 200 * h},
        )
        if best is None or res.fun < best.fun:
            best = res
    theta = 10.0 ** np.clip(best.x, lo, hi)

    nugget = cfg.nugget
    while True:
        try:
            ll, beta, sigma2, cho, rinv_ones, denom = _likelihood_terms(d2, y, theta, nugget)
            break
        except np.linalg.LinAlgError:
            nugget *= 10.0
            if nugget > cfg.max_nugget:
                raise SingularCorrelation(
                    f"correlation matrix singular at nugget {cfg.max_nugget}"
                ) from None
    alpha = cho_solve(cho, y - beta)
    return SurrogateModel(
        X=X,
        y=y,
        projection=proj,
        params=KernelParams(theta=theta, process_variance=float(sigma2), nugget=nugget),
        beta=float(beta),
        log_likelihood=float(ll),
        _cho=cho,
        _alpha=alpha,
        _rinv_ones=rinv_ones,
        _ones_rinv_ones=float(denom),
    )


def _correlation_vectors(model: SurrogateModel, xq: np.ndarray) -> np.ndarray:
    """Correlations between query rows and the archive, shape (q, n).

    The component/dimension double product collapses to one anisotropic
    exponential with per-dimension rates g_d = sum_k theta_k w_dk^2."""
    g = (model.projection.weights**2) @ model.params.theta
    s = np.sqrt(g)
    zq = xq * s
    za = model.X * s
    sq_q = np.einsum("ij,ij->i", zq, zq)
    sq_a = np.einsum("ij,ij->i", za, za)
    d = np.maximum(sq_q[:, None] + sq_a[None, :] - 2.0 * (zq @ za.T), 0.0)
    return np.exp(-d)


def predict_batch(model: SurrogateModel, xq: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xq = np.atleast_2d(np.asarray(xq, dtype=np.float64))
    if xq.shape[1] != model.X.shape[1]:
        raise DimensionMismatch(f"query dim {xq.shape[1]} != archive dim {model.X.shape[1]}")
    r = _correlation_vectors(model, xq)
    mean = model.beta + r @ model._alpha
    rinv_r = cho_solve(model._cho, r.T)
    one_rinv_r = model._rinv_ones @ r.T
    var = model.params.process_variance * (
        1.0
        - np.einsum("qn,nq->q", r, rinv_r)
        + (1.0 - one_rinv_r) ** 2 / model._ones_rinv_ones
    )
    return mean, np.maximum(var, 0.0)


def predict(model: SurrogateModel, x: np.ndarray) -> tuple[float, float]:
    """Ordinary-Kriging predictive mean and variance (clamped at zero)."""
    mean, var = predict_batch(model, np.asarray(x)[None, :])
    return float(mean[0]), float(var[0])


def expected_improvement(mean: float, variance: float, f_best: float) -> float:
    """E[max(Y - f_best, 0)] for Y ~ N(mean, variance), maximisation form."""
    sigma = math.sqrt(max(variance, 0.0))
    if sigma == 0.0:
        return max(mean - f_best, 0.0)
    z = (mean - f_best) / sigma
    return float((mean - f_best) * ndtr(z) + sigma * math.exp(-0.5 * z * z) / _SQRT_2PI)
