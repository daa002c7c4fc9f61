"""Kernel estimators of propensity cells, CATEs and their local variances.

All sums pool units across clusters (working independence): the cluster
structure only enters through resampling in :mod:`clusterhte.bootstrap`.

The workhorse is :func:`grid_estimates`, which evaluates every estimator for
every exposure level on a set of points in one pass.  The point-wise functions
(:func:`propensity_hat`, :func:`cate_hat`, ...) are thin wrappers meant for
inspection and testing.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericalError, UndefinedPointError
from .kernel import conv_ratio, kernel_1d, kernel_l2

__all__ = [
    "CateEstimate",
    "GridEstimates",
    "kernel_matrix",
    "grid_estimates",
    "propensity_hat",
    "cate_hat",
    "mu1_hat",
    "mu2_hat",
    "rho2_hat",
    "corr_coefficient",
    "corr_hat",
    "weight1_hat",
    "weight2_hat",
    "pair_covariance",
]

logger = logging.getLogger(__name__)

RHO2_FLOOR_REL = 1e-12
MIN_KERNEL_MASS = 5.0
VARIANCE_CORRECTIONS = ("bessel", "none")
W2_COVARIANCES = ("none", "absolute", "linear", "symmetric")


def _as_points(points, d):
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts[:, None] if d == 1 else pts[None, :]
    if pts.shape[1] != d:
        raise ValueError(f"points have dimension {pts.shape[1]}, sample has d={d}")
    return pts


def kernel_matrix(points, x, h):
    """Raw kernel weights ``K((points_g - x_i) / h)``, shape ``(G, N)``.

    ``h`` may be a scalar or a per-coordinate vector.
    """
    h = np.broadcast_to(np.asarray(h, dtype=float), (x.shape[1],))
    out = np.ones((points.shape[0], x.shape[0]))
    for j in range(x.shape[1]):
        out *= kernel_1d((points[:, j, None] - x[None, :, j]) / h[j])
    return out


@dataclass(frozen=True)
class CateEstimate:
    value: float
    p1_hat: float
    p0_hat: float
    effective_n: float


@dataclass(frozen=True)
class GridEstimates:
    """Estimators for every exposure level evaluated on a set of points.

    Arrays are indexed ``[level, point]`` or ``[level, t, point]``.
    ``mass`` is the kernel mass of a cell in unit equivalents
    (``sum_i K_i / K(0)``); ``valid`` flags points where every cell of the
    level holds at least ``min_mass`` units.
    """

    points: np.ndarray
    levels: tuple
    h: object
    N: int
    d: int
    tau: np.ndarray
    rho2: np.ndarray
    p_hat: np.ndarray
    mass: np.ndarray
    valid: np.ndarray
    clamped: int

    @property
    def hd(self) -> float:
        return float(np.prod(np.broadcast_to(self.h, (self.d,))))


def grid_estimates(
    sample,
    points,
    h,
    variance_correction: str = "bessel",
    min_mass: float = MIN_KERNEL_MASS,
    rho2_floor_rel: float = RHO2_FLOOR_REL,
) -> GridEstimates:
    """Evaluate CATE and variance estimators for all exposure levels.

    Parameters
    ----------
    sample : ClusteredSample
        Data with exposures set.
    points : array_like, shape (G, d)
        Evaluation points.
    h : float or array_like
        Bandwidth (scalar, or one per coordinate).
    variance_correction : {"bessel", "none"}
        ``"none"`` gives the plain plug-in ``(mu1 - mu2) * int K^2``.  ``"bessel"``
        rescales each cell's kernel-weighted variance by ``1 / (1 - sum K^2 / (sum K)^2)``,
        the weighted analogue of the ``n / (n - 1)`` correction.
    min_mass : float
        Kernel mass (unit equivalents) a cell needs for a point to be valid.
    rho2_floor_rel : float
        Variance estimates below ``rho2_floor_rel * var(Y)`` are clamped.
    """
    if variance_correction not in VARIANCE_CORRECTIONS:
        raise ValueError(f"variance_correction must be one of {VARIANCE_CORRECTIONS}")
    sample.require_exposure()
    d, N = sample.d, sample.N
    pts = _as_points(points, d)
    hvec = np.broadcast_to(np.asarray(h, dtype=float), (d,))
    if np.any(~(hvec > 0)):
        raise ValueError("bandwidth must be positive")
    hd = float(np.prod(hvec))
    kraw = kernel_matrix(pts, sample.x, hvec)
    k0 = 1.5**d
    levels = sample.exposure_levels
    G, K = pts.shape[0], len(levels)
    tau = np.zeros((K, G))
    rho2 = np.zeros((K, G))
    p_hat = np.zeros((K, 2, G))
    mass = np.zeros((K, 2, G))
    yvar = float(np.var(sample.y))
    floor = rho2_floor_rel * (yvar if yvar > 0 else 1.0)
    l2 = kernel_l2(d)
    clamped = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        for k, pi in enumerate(levels):
            at_pi = sample.pi == pi
            var_sum = np.zeros(G)
            for t in (0, 1):
                cell = at_pi & (sample.t == t)
                kc = kraw[:, cell]
                yc = sample.y[cell]
                # shift by the cell mean; the local variance is shift invariant
                shift = yc.mean() if yc.size else 0.0
                yc = yc - shift
                s0 = kc.sum(axis=1)
                s1 = kc @ yc
                s2 = kc @ (yc * yc)
                p = s0 / (N * hd)
                m = s1 / s0
                local_var = np.maximum(s2 / s0 - m * m, 0.0)
                if variance_correction == "bessel":
                    ratio = (kc * kc).sum(axis=1) / (s0 * s0)
                    local_var = local_var / (1.0 - ratio)
                p_hat[k, t] = p
                mass[k, t] = s0 / k0
                tau[k] += (m + shift) if t == 1 else -(m + shift)
                var_sum += local_var / p
            rho2[k] = var_sum * l2
    valid = np.all(mass >= min_mass, axis=1) & np.all(p_hat > 0, axis=1)
    valid &= np.isfinite(tau) & np.isfinite(rho2)
    low = valid & (rho2 < floor)
    if np.any(low):
        clamped = int(low.sum())
        logger.info("clamped %d local variance estimate(s) to the floor %.3g", clamped, floor)
        rho2 = np.where(low, floor, rho2)
    return GridEstimates(
        points=pts,
        levels=levels,
        h=h,
        N=N,
        d=d,
        tau=tau,
        rho2=rho2,
        p_hat=p_hat,
        mass=mass,
        valid=valid,
        clamped=clamped,
    )


def _level_index(sample, pi):
    sample.require_exposure()
    for k, level in enumerate(sample.exposure_levels):
        if np.isclose(level, pi, rtol=1e-9, atol=0.0) or level == pi:
            return k
    raise DataError(f"exposure {pi!r} is not one of the sample's levels")


def propensity_hat(x, pi, t, sample, h) -> float:
    """``(1 / (N h^d)) sum_i 1(Pi_i = pi) 1(T_i = t) K((x - X_i) / h)``."""
    _level_index(sample, pi)
    pts = _as_points(x, sample.d)
    hd = float(np.prod(np.broadcast_to(np.asarray(h, dtype=float), (sample.d,))))
    kr = kernel_matrix(pts, sample.x, h)[0]
    cell = np.isclose(sample.pi, pi, rtol=1e-9, atol=0.0) & (sample.t == t)
    return float(kr[cell].sum() / (sample.N * hd))


def cate_hat(x, pi, sample, h) -> CateEstimate:
    """Hajek-type kernel CATE estimate at ``(x, pi)``.

    Equal to the kernel-weighted treated mean minus the kernel-weighted
    control mean among units with exposure ``pi``.
    """
    _level_index(sample, pi)
    pts = _as_points(x, sample.d)
    hd = float(np.prod(np.broadcast_to(np.asarray(h, dtype=float), (sample.d,))))
    kr = kernel_matrix(pts, sample.x, h)[0]
    at_pi = np.isclose(sample.pi, pi, rtol=1e-9, atol=0.0)
    p = []
    for t in (0, 1):
        p.append(kr[at_pi & (sample.t == t)].sum() / (sample.N * hd))
        if p[t] <= 0:
            raise UndefinedPointError(pts[0].tolist(), pi, t)
    phi = sample.t / p[1] - (1 - sample.t) / p[0]
    value = np.sum(sample.y * at_pi * phi * kr) / (sample.N * hd)
    return CateEstimate(
        value=float(value),
        p1_hat=float(p[1]),
        p0_hat=float(p[0]),
        effective_n=float(kr[at_pi].sum() / 1.5**sample.d),
    )


def _cells(x, pi, sample, h):
    _level_index(sample, pi)
    pts = _as_points(x, sample.d)
    hd = float(np.prod(np.broadcast_to(np.asarray(h, dtype=float), (sample.d,))))
    kr = kernel_matrix(pts, sample.x, h)[0]
    at_pi = np.isclose(sample.pi, pi, rtol=1e-9, atol=0.0)
    out = []
    for t in (0, 1):
        cell = at_pi & (sample.t == t)
        p = kr[cell].sum() / (sample.N * hd)
        if p <= 0:
            raise UndefinedPointError(pts[0].tolist(), pi, t)
        out.append((cell, p))
    return kr, hd, out


def mu1_hat(x, pi, sample, h) -> float:
    """Single-sum second-moment term ``sum_t sum_i Y_i^2 K_i / (N h^d P_t^2)``."""
    kr, hd, cells = _cells(x, pi, sample, h)
    total = 0.0
    for cell, p in cells:
        total += np.sum(sample.y[cell] ** 2 * kr[cell]) / (sample.N * hd * p * p)
    return float(total)


def mu2_hat(x, pi, sample, h) -> float:
    """Double-sum term ``sum_t sum_{i,j} Y_i Y_j K_i K_j / (N^2 h^{2d} P_t^3)``.

    The double sum over units factorizes into the square of a single sum.
    """
    kr, hd, cells = _cells(x, pi, sample, h)
    total = 0.0
    for cell, p in cells:
        s = np.sum(sample.y[cell] * kr[cell])
        total += s * s / ((sample.N * hd) ** 2 * p**3)
    return float(total)


def rho2_hat(x, pi, sample, h, variance_correction: str = "bessel") -> float:
    """Local variance of ``sqrt(N h^d) * cate_hat(x, pi)``.

    With ``variance_correction="none"`` this is ``(mu1_hat - mu2_hat) * int K^2``
    (floored at a tiny positive value).
    """
    k = _level_index(sample, pi)
    est = grid_estimates(sample, x, h, variance_correction=variance_correction, min_mass=0.0)
    if not np.all(est.p_hat[k, :, 0] > 0):
        t = int(np.argmin(est.p_hat[k, :, 0]))
        raise UndefinedPointError(np.ravel(x).tolist(), pi, t)
    return float(est.rho2[k, 0])


def corr_coefficient(rho2_by_level, i, j, k, l):
    """Exposure-index factor of the correlation between two CATE differences.

    Returns the factor multiplying the kernel autocorrelation in the
    correlation of ``tau(x; pi_i) - tau(x; pi_j)`` and
    ``tau(x + t h; pi_k) - tau(x + t h; pi_l)``, each scaled by its standard
    deviation.  ``rho2_by_level`` is indexed by level (extra trailing axes,
    such as grid points, broadcast).
    """
    r = rho2_by_level
    if i == k and j == l:
        return np.ones_like(np.asarray(r[i], dtype=float))
    if i == l and j == k:
        return -np.ones_like(np.asarray(r[i], dtype=float))
    denom = np.sqrt((r[i] + r[j]) * (r[k] + r[l]))
    if j == k and i != l:
        return -r[j] / denom
    if i == l and j != k:
        return -r[i] / denom
    if j == l and i != k:
        return r[j] / denom
    if i == k and j != l:
        return r[i] / denom
    return np.zeros_like(np.asarray(r[i], dtype=float))


def corr_hat(x, t, pi_i, pi_j, pi_k, pi_l, sample, h, variance_correction: str = "bessel"):
    """Estimated correlation of two standardized CATE differences.

    Returns ``(value, clamped)`` where ``clamped`` tells whether rounding put
    the raw value outside ``[-1, 1]``.
    """
    idx = [_level_index(sample, p) for p in (pi_i, pi_j, pi_k, pi_l)]
    est = grid_estimates(sample, x, h, variance_correction=variance_correction, min_mass=0.0)
    coef = corr_coefficient(est.rho2[:, 0], *idx)
    value = float(coef * conv_ratio(np.atleast_1d(np.asarray(t, dtype=float)), sample.d))
    clamped = abs(value) > 1.0
    return float(np.clip(value, -1.0, 1.0)), clamped


def weight1_hat(x, pi_k, pi_j, sample, h, variance_correction: str = "bessel") -> float:
    """Inverse standard error of ``sqrt(N h^d) (tau(x; pi_k) - tau(x; pi_j))``."""
    a = rho2_hat(x, pi_k, sample, h, variance_correction)
    b = rho2_hat(x, pi_j, sample, h, variance_correction)
    if not a + b > 0:
        raise NumericalError(f"nonpositive variance sum at x={x!r}")
    return float(1.0 / np.sqrt(a + b))


def pair_covariance(rho2_x, ratio, mode: str = "none", rho2_xp=None):
    """Scaled covariance of the CATE estimates at two points ``t h`` apart.

    ``ratio`` is the kernel autocorrelation at the lag (zero outside
    ``[-1, 1]^d``).  Modes:

    * ``"none"``: the term is dropped.
    * ``"linear"``: ``rho2(x) * r``, from ``Cov(sqrt(1 - r^2) Z1 + r Z2, Z2) = r``.
    * ``"absolute"``: ``rho2(x) * g(r)`` with ``g`` the Gaussian absolute covariance.
    * ``"symmetric"``: ``sqrt(rho2(x) rho2(x')) * r``, which keeps the variance
      of the difference nonnegative.
    """
    from .teststat import gaussian_abs_cov

    if mode == "none":
        return np.zeros_like(np.asarray(rho2_x * ratio, dtype=float))
    if mode == "linear":
        return rho2_x * ratio
    if mode == "absolute":
        return rho2_x * gaussian_abs_cov(ratio)
    if mode == "symmetric":
        if rho2_xp is None:
            raise ValueError("symmetric mode needs rho2 at both points")
        return np.sqrt(rho2_x * rho2_xp) * ratio
    raise ValueError(f"unknown covariance mode {mode!r}")


def weight2_hat(x, x_prime, pi_k, sample, h, covariance: str = "symmetric",
                variance_correction: str = "bessel") -> float:
    """Inverse standard error of ``sqrt(N h^d) (tau(x; pi) - tau(x'; pi))``."""
    d = sample.d
    x = _as_points(x, d)[0]
    xp = _as_points(x_prime, d)[0]
    a = rho2_hat(x, pi_k, sample, h, variance_correction)
    b = rho2_hat(xp, pi_k, sample, h, variance_correction)
    t = (x - xp) / np.broadcast_to(np.asarray(h, dtype=float), (d,))
    ratio = conv_ratio(t, d) if np.all(np.abs(t) <= 1) else 0.0
    radicand = a + b - 2.0 * pair_covariance(a, ratio, covariance, rho2_xp=b)
    if not radicand > 0:
        raise NumericalError(
            f"nonpositive variance {radicand:.3g} for the difference at x={x.tolist()}, "
            f"x'={xp.tolist()}"
        )
    return float(1.0 / np.sqrt(radicand))
