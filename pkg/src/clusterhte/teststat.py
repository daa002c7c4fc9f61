"""Test statistics T1 and T2, their centering terms and scale estimates.

T1 integrates standardized CATE differences across exposure levels over a
covariate grid; T2 integrates standardized CATE differences across covariate
values within each exposure level over the product grid.  Both are centered by
a diverging bias term and scaled by an estimated asymptotic standard
deviation.

Integration over ``x`` uses a composite trapezoid rule on a uniform grid when
``d = 1`` and plain Monte Carlo points when ``d >= 2``.  The lag integral over
``t in [-1, 1]^d`` uses a fixed trapezoid rule per coordinate.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError
from .estimator import (
    MIN_KERNEL_MASS,
    W2_COVARIANCES,
    GridEstimates,
    corr_coefficient,
    grid_estimates,
)
from .kernel import conv_ratio

__all__ = [
    "Grid",
    "StatisticDecomposition",
    "build_grid",
    "gaussian_abs_cov",
    "lag_rule",
    "bias_a1",
    "bias_a2",
    "t1_stat",
    "t2_stat",
    "sigma1_hat",
    "sigma2_hat",
    "s1_statistic",
    "s2_statistic",
    "SIGMA1_CONVENTIONS",
    "SIGMA2_FORMS",
    "W2_COVARIANCES",
]

E_ABS_Z = math.sqrt(2.0 / math.pi)
SIGMA1_CONVENTIONS = ("pairs", "all")
SIGMA2_FORMS = ("gaussian", "exact", "factorized")
DEFAULT_LAG_POINTS = 21


@dataclass(frozen=True)
class Grid:
    """Integration points over the covariate box.

    Attributes
    ----------
    points : ndarray, shape (G, d)
    weights : ndarray, shape (G,)
        Nonnegative quadrature weights summing to ``span``.
    bounds : ndarray, shape (d, 2)
        Per-coordinate ``(lo, hi)``.
    span : float
        Volume of the box.
    method : {"trapezoid", "monte_carlo"}
    """

    points: np.ndarray
    weights: np.ndarray
    bounds: np.ndarray
    span: float
    method: str = "trapezoid"

    @property
    def d(self) -> int:
        return int(self.points.shape[1])

    @property
    def size(self) -> int:
        return int(self.points.shape[0])


@dataclass
class StatisticDecomposition:
    """A raw statistic, its centering and scale, and per-component parts.

    ``contributions`` maps a label (an exposure pair for T1, an exposure level
    for T2) to that component's share of ``raw``.  ``scale`` is ``nan`` until a
    scale estimate has been attached.
    """

    name: str
    raw: float
    bias: float
    scale: float = float("nan")
    contributions: dict = field(default_factory=dict)
    dropped_points: int = 0
    clamped: int = 0

    @property
    def centered(self) -> float:
        return self.raw - self.bias

    @property
    def studentized(self) -> float:
        return (self.raw - self.bias) / self.scale

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "raw": self.raw,
            "bias": self.bias,
            "scale": self.scale,
            "studentized": self.studentized,
            "contributions": dict(self.contributions),
            "dropped_points": self.dropped_points,
            "clamped": self.clamped,
        }


def build_grid(sample, n_points: int = 50, quantiles=(0.1, 0.9), seed: int = 0) -> Grid:
    """Integration grid over the percentile box of the covariates.

    Parameters
    ----------
    sample : ClusteredSample or array_like
        Sample, or a raw covariate array of shape (N,) or (N, d).
    n_points : int
        Number of grid points (``>= 2``).
    quantiles : tuple of float
        Lower and upper quantile defining the box per coordinate.
    seed : int
        Seed for the Monte Carlo points used when ``d >= 2``.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    x = getattr(sample, "x", sample)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    lo, hi = np.quantile(x, quantiles, axis=0)
    if np.any(~(hi > lo)):
        raise DataError("degenerate percentile range for the integration grid")
    bounds = np.column_stack([lo, hi])
    span = float(np.prod(hi - lo))
    d = x.shape[1]
    if d == 1:
        pts = np.linspace(lo[0], hi[0], n_points)[:, None]
        w = np.full(n_points, (hi[0] - lo[0]) / (n_points - 1))
        w[[0, -1]] *= 0.5
        method = "trapezoid"
    else:
        rng = np.random.default_rng(seed)
        pts = lo + (hi - lo) * rng.random((n_points, d))
        w = np.full(n_points, span / n_points)
        method = "monte_carlo"
    return Grid(points=pts, weights=w, bounds=bounds, span=span, method=method)


def gaussian_abs_cov(rho):
    """``Cov(|sqrt(1 - rho^2) Z1 + rho Z2|, |Z2|)`` for independent standard normals.

    Closed form ``(2 / pi) (sqrt(1 - rho^2) + rho arcsin(rho) - 1)``.  Values of
    ``|rho|`` exceeding one by less than ``1e-12`` are treated as rounding.
    """
    r = np.asarray(rho, dtype=float)
    if np.any(np.abs(r) > 1.0 + 1e-12) or np.any(np.isnan(r)):
        raise ValueError("correlation must lie in [-1, 1]")
    r = np.clip(r, -1.0, 1.0)
    out = (2.0 / np.pi) * (np.sqrt(1.0 - r * r) + r * np.arcsin(r) - 1.0)
    out = np.maximum(out, 0.0)
    return float(out) if out.ndim == 0 else out


def lag_rule(d: int, n: int = DEFAULT_LAG_POINTS):
    """Trapezoid nodes on ``[-1, 1]^d`` and the kernel autocorrelation there.

    Returns
    -------
    nodes : ndarray, shape (n**d, d)
    weights : ndarray, shape (n**d,)
    ratio : ndarray, shape (n**d,)
        ``kernel_convolution(t) / kernel_l2(d)`` at each node.
    """
    if n < 2:
        raise ValueError("need at least two lag nodes")
    t = np.linspace(-1.0, 1.0, n)
    w = np.full(n, 2.0 / (n - 1))
    w[[0, -1]] *= 0.5
    nodes = np.array(list(itertools.product(t, repeat=d)))
    weights = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    ratio = conv_ratio(nodes, d)
    return nodes, weights, ratio


def _h_scale(h, d) -> float:
    return float(np.prod(np.broadcast_to(np.asarray(h, dtype=float), (d,)))) ** -0.5


def _span_d(grid):
    if isinstance(grid, Grid):
        return grid.span, grid.d
    return float(grid), 1


def bias_a1(grid, h, K: int) -> float:
    """Centering term of T1: ``h^(-d/2) E|Z| K (K - 1) / 2 * span``.

    ``grid`` may be a :class:`Grid` or a plain span (``d = 1``).
    """
    span, d = _span_d(grid)
    return _h_scale(h, d) * E_ABS_Z * K * (K - 1) / 2.0 * span


def bias_a2(grid, h, K: int) -> float:
    """Centering term of T2: ``h^(-d/2) E|Z| (K / 2) * span^2``."""
    span, d = _span_d(grid)
    return _h_scale(h, d) * E_ABS_Z * K / 2.0 * span**2


def _estimates(sample, grid, h, estimates, variance_correction, min_mass):
    if estimates is not None:
        return estimates
    return grid_estimates(
        sample, grid.points, h, variance_correction=variance_correction, min_mass=min_mass
    )


def _level_label(pi) -> str:
    return f"{pi:g}"


def _pairs(K):
    return [(i, j) for i in range(K) for j in range(i + 1, K)]


def t1_stat(sample, grid: Grid, h, *, estimates: GridEstimates | None = None,
            variance_correction: str = "bessel", min_mass: float = MIN_KERNEL_MASS
            ) -> StatisticDecomposition:
    """Exposure-heterogeneity statistic T1 with its centering term.

    ``raw`` sums, over exposure pairs ``k < j``, the grid integral of
    ``sqrt(N) |tau(x; pi_k) - tau(x; pi_j)| / sqrt(rho2(x; pi_k) + rho2(x; pi_j))``.
    Grid points where either level is not estimable are skipped and the bias is
    integrated over the retained points only.
    """
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    K = len(est.levels)
    if K < 2:
        raise DataError("T1 needs at least two exposure levels")
    w = grid.weights
    root_n = math.sqrt(est.N)
    raw = 0.0
    kept_measure = 0.0
    dropped = 0
    contrib = {}
    for i, j in _pairs(K):
        keep = est.valid[i] & est.valid[j]
        if not keep.any():
            raise NumericalError(
                f"no estimable grid point for exposure pair "
                f"({est.levels[i]:g}, {est.levels[j]:g})"
            )
        diff = np.abs(est.tau[i, keep] - est.tau[j, keep])
        val = float(np.sum(w[keep] * root_n * diff / np.sqrt(est.rho2[i, keep] + est.rho2[j, keep])))
        contrib[f"{_level_label(est.levels[i])}-{_level_label(est.levels[j])}"] = val
        raw += val
        kept_measure += float(w[keep].sum())
        dropped += int((~keep).sum())
    bias = _h_scale(h, est.d) * E_ABS_Z * kept_measure
    return StatisticDecomposition(
        name="T1", raw=raw, bias=bias, contributions=contrib,
        dropped_points=dropped, clamped=est.clamped,
    )


def _lag_matrix(points, h, d):
    """Kernel autocorrelation between every pair of grid points."""
    hvec = np.broadcast_to(np.asarray(h, dtype=float), (d,))
    G = points.shape[0]
    lag = (points[:, None, :] - points[None, :, :]) / hvec
    near = np.all(np.abs(lag) < 1.0, axis=-1)
    out = np.zeros((G, G))
    if near.any():
        out[near] = conv_ratio(lag[near], d)
    return out


def _w2_matrix(rho2_k, ratio, mode):
    """Inverse standard errors of ``tau(x) - tau(x')`` for one level.

    Returns the matrix and the number of non-positive variances met.
    """
    a = rho2_k[:, None]
    b = rho2_k[None, :]
    if mode == "none":
        rad = a + b
    elif mode == "linear":
        rad = a + b - 2.0 * a * ratio
    elif mode == "absolute":
        rad = a + b - 2.0 * a * gaussian_abs_cov(ratio)
    elif mode == "symmetric":
        rad = a + b - 2.0 * np.sqrt(a * b) * ratio
    else:
        raise ValueError(f"w2 covariance must be one of {W2_COVARIANCES}")
    np.fill_diagonal(rad, 1.0)
    bad = ~(rad > 0)
    np.fill_diagonal(bad, False)
    return rad, bad


def _w2_for_level(est, k, ratio, mode):
    keep = est.valid[k]
    idx = np.flatnonzero(keep)
    rad, bad = _w2_matrix(est.rho2[k, idx], ratio[np.ix_(idx, idx)], mode)
    if bad.any():
        g, gp = np.argwhere(bad)[0]
        raise NumericalError(
            f"nonpositive variance for a CATE difference at level {est.levels[k]:g}: "
            f"x={est.points[idx[g]].tolist()}, x'={est.points[idx[gp]].tolist()}"
        )
    w2 = 1.0 / np.sqrt(rad)
    np.fill_diagonal(w2, 0.0)
    return idx, w2


def t2_stat(sample, grid: Grid, h, *, estimates: GridEstimates | None = None,
            variance_correction: str = "bessel", min_mass: float = MIN_KERNEL_MASS,
            w2_covariance: str = "symmetric") -> StatisticDecomposition:
    """Covariate-heterogeneity statistic T2 with its centering term.

    ``raw`` sums, over levels, the product-grid integral of
    ``sqrt(N) |tau(x; pi) - tau(x'; pi)| * w2(x, x'; pi) / 2`` over distinct
    grid points.  The bias integrates over the same off-diagonal measure.
    """
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    ratio = _lag_matrix(est.points, est.h, est.d)
    w = grid.weights
    root_n = math.sqrt(est.N)
    raw = 0.0
    measure = 0.0
    dropped = 0
    contrib = {}
    for k, pi in enumerate(est.levels):
        idx, w2 = _w2_for_level(est, k, ratio, w2_covariance)
        if idx.size < 2:
            raise NumericalError(f"fewer than two estimable grid points at level {pi:g}")
        wk = w[idx]
        tk = est.tau[k, idx]
        diff = np.abs(tk[:, None] - tk[None, :])
        val = float(0.5 * root_n * (wk @ (diff * w2) @ wk))
        contrib[_level_label(pi)] = val
        raw += val
        measure += float(wk.sum() ** 2 - np.sum(wk * wk))
        dropped += int(est.valid.shape[1] - idx.size)
    bias = _h_scale(h, est.d) * E_ABS_Z * 0.5 * measure
    return StatisticDecomposition(
        name="T2", raw=raw, bias=bias, contributions=contrib,
        dropped_points=dropped, clamped=est.clamped,
    )


def sigma1_hat(sample, grid: Grid, h, *, estimates: GridEstimates | None = None,
               variance_correction: str = "bessel", min_mass: float = MIN_KERNEL_MASS,
               convention: str = "pairs", lag_points: int = DEFAULT_LAG_POINTS) -> float:
    """Scale estimate for T1.

    ``sigma1^2`` integrates over the grid and over lags ``t`` the Gaussian
    absolute covariance of every pair of standardized CATE differences,
    ``g(c_{ijkl}(x) * r(t))``, with ``r`` the kernel autocorrelation.  With
    ``convention="pairs"`` index tuples run over ``i < j`` and ``k < l``;
    ``"all"`` sums ordered pairs of distinct indices, which is four times
    larger.
    """
    if convention not in SIGMA1_CONVENTIONS:
        raise ValueError(f"convention must be one of {SIGMA1_CONVENTIONS}")
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    K = len(est.levels)
    if K < 2:
        raise DataError("T1 needs at least two exposure levels")
    _, tw, r = lag_rule(est.d, lag_points)
    w = grid.weights
    pairs = _pairs(K)
    total = 0.0
    for (i, j), (k, l) in itertools.product(pairs, pairs):
        # rho2 is nan at masked points; those are dropped by ``keep`` below
        with np.errstate(invalid="ignore", divide="ignore"):
            coef = corr_coefficient(est.rho2, i, j, k, l)
        if not np.any(coef):
            continue
        keep = est.valid[i] & est.valid[j] & est.valid[k] & est.valid[l]
        c = np.clip(coef[keep], -1.0, 1.0)
        inner = gaussian_abs_cov(c[:, None] * r[None, :]) @ tw
        total += float(np.sum(w[keep] * inner))
    if convention == "all":
        total *= 4.0
    if not total > 0:
        raise NumericalError(f"nonpositive scale estimate for T1 ({total:.3g})")
    return math.sqrt(total)


def _lag_integral_table(r, tw, n=4001):
    """Tabulate ``c -> sum_t tw_t g(c r_t)`` on ``[0, 1]``; the map is even in ``c``."""
    c = np.linspace(0.0, 1.0, n)
    return c, gaussian_abs_cov(c[:, None] * r[None, :]) @ tw


def _gabs(r):
    # gaussian_abs_cov without argument checks, for arrays already in [-1, 1]
    return (2.0 / np.pi) * (np.sqrt(1.0 - r * r) + r * np.arcsin(r) - 1.0)


def _gaussian_pair_variance(rho2_k, ratio, w2, wk, block=256):
    """``sum_{p, q} W_p W_q g(corr_pq)`` over unordered pairs of distinct points.

    ``corr_pq`` is the correlation of the standardized differences of pair
    ``p = (a, b)`` and pair ``q = (c, e)`` when the CATE estimates are jointly
    Gaussian with covariance ``sqrt(rho2_a rho2_c) r((x_a - x_c) / h)``.
    Returns the sum and the number of correlations clipped to ``[-1, 1]``.
    """
    G = rho2_k.size
    a, b = np.triu_indices(G, 1)
    sr = np.sqrt(rho2_k)
    cov = sr[:, None] * sr[None, :] * ratio
    # difference operator: row p maps a field to its value at a_p minus b_p
    diff = np.zeros((a.size, G))
    diff[np.arange(a.size), a] = 1.0
    diff[np.arange(a.size), b] = -1.0
    left = cov[a] - cov[b]
    wp = wk[a] * wk[b]
    inv = w2[a, b]
    total = 0.0
    clamped = 0
    # the correlation matrix is symmetric: visit blocks on and above the diagonal
    for lo in range(0, a.size, block):
        hi = min(lo + block, a.size)
        m = left[lo:hi] @ diff[lo:].T
        m *= inv[lo:hi, None] * inv[None, lo:]
        over = np.abs(m) > 1.0
        if over.any():
            n_diag = int(over[:, : hi - lo].sum())
            clamped += n_diag + 2 * (int(over.sum()) - n_diag)
            np.clip(m, -1.0, 1.0, out=m)
        gm = _gabs(m)
        total += float(wp[lo:hi] @ gm[:, : hi - lo] @ wp[lo:hi])
        total += 2.0 * float(wp[lo:hi] @ gm[:, hi - lo:] @ wp[hi:])
    return total, clamped


def sigma2_hat(sample, grid: Grid, h, *, estimates: GridEstimates | None = None,
               variance_correction: str = "bessel", min_mass: float = MIN_KERNEL_MASS,
               w2_covariance: str = "symmetric", form: str = "gaussian",
               lag_points: int = DEFAULT_LAG_POINTS) -> float:
    """Scale estimate for T2.

    Forms
    -----
    ``"gaussian"``
        Variance of the grid sum defining T2 when the CATE estimates form a
        Gaussian field with covariance ``sqrt(rho2(x) rho2(x')) r((x - x') / h)``,
        summing the Gaussian absolute covariance over every pair of grid
        pairs.  Cost grows with the fourth power of the grid size.
    ``"exact"``
        Keeps only the leading overlap: pairs ``(x, x')`` and
        ``(x + t h, x'')`` share the noise at ``x`` and have correlation
        ``c = rho2(x) w2(x, x') w2(x, x'') r(t)``; ``g(c)`` is integrated over
        ``x, x', x''`` and the lag ``t``.
    ``"factorized"``
        Integrates ``rho2(x) w2(x, x') w2(x, x'') g(r(t))``, which separates
        into a square of the inner ``x'`` integral.  Cheap, but it overstates
        the scale when the correlation factor is below one because ``g`` is
        close to quadratic near zero.
    """
    if form not in SIGMA2_FORMS:
        raise ValueError(f"form must be one of {SIGMA2_FORMS}")
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    ratio = _lag_matrix(est.points, est.h, est.d)
    w = grid.weights
    total = 0.0
    if form == "gaussian":
        for k in range(len(est.levels)):
            idx, w2 = _w2_for_level(est, k, ratio, w2_covariance)
            part, _ = _gaussian_pair_variance(
                est.rho2[k, idx], ratio[np.ix_(idx, idx)], w2, w[idx]
            )
            total += part
        total /= _h_scale(h, est.d) ** -2
    elif form == "factorized":
        _, tw, r = lag_rule(est.d, lag_points)
        g_int = float(gaussian_abs_cov(r) @ tw)
        for k in range(len(est.levels)):
            idx, w2 = _w2_for_level(est, k, ratio, w2_covariance)
            wk = w[idx]
            inner = w2 @ wk
            total += float(np.sum(wk * est.rho2[k, idx] * inner * inner)) * g_int
    else:
        _, tw, r = lag_rule(est.d, lag_points)
        ctab, phi = _lag_integral_table(r, tw)
        for k in range(len(est.levels)):
            idx, w2 = _w2_for_level(est, k, ratio, w2_covariance)
            wk = w[idx]
            rk = est.rho2[k, idx]
            for g in range(idx.size):
                a = rk[g] * w2[g]
                c = np.minimum(np.abs(a[:, None] * a[None, :] / rk[g]), 1.0)
                total += float(wk[g] * (wk @ np.interp(c, ctab, phi) @ wk))
    if not total > 0:
        raise NumericalError(f"nonpositive scale estimate for T2 ({total:.3g})")
    return math.sqrt(total)


def s1_statistic(sample, grid: Grid, h, *, variance_correction: str = "bessel",
                 min_mass: float = MIN_KERNEL_MASS, convention: str = "pairs",
                 lag_points: int = DEFAULT_LAG_POINTS, estimates=None
                 ) -> StatisticDecomposition:
    """T1 with bias and scale attached, ready for studentization."""
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    dec = t1_stat(sample, grid, h, estimates=est)
    dec.name = "S1"
    dec.scale = sigma1_hat(sample, grid, h, estimates=est, convention=convention,
                           lag_points=lag_points)
    return dec


def s2_statistic(sample, grid: Grid, h, *, variance_correction: str = "bessel",
                 min_mass: float = MIN_KERNEL_MASS, w2_covariance: str = "symmetric",
                 form: str = "gaussian", lag_points: int = DEFAULT_LAG_POINTS,
                 estimates=None) -> StatisticDecomposition:
    """T2 with bias and scale attached, ready for studentization."""
    est = _estimates(sample, grid, h, estimates, variance_correction, min_mass)
    dec = t2_stat(sample, grid, h, estimates=est, w2_covariance=w2_covariance)
    dec.name = "S2"
    dec.scale = sigma2_hat(sample, grid, h, estimates=est, w2_covariance=w2_covariance,
                           form=form, lag_points=lag_points)
    return dec
