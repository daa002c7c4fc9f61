"""Product quartic kernel, its L2 norm and self-convolution, and the bandwidth rule.

The one-dimensional kernel is ``K(u) = 1.5 (1 - (2u)^2)`` on ``|u| <= 1/2``; in
``d`` dimensions the product of ``d`` copies is used.  Every variance formula in
the test statistics needs ``int K^2`` and the autocorrelation ``int K(s) K(s + t) ds``,
so both are provided here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DataError

__all__ = [
    "KernelSpec",
    "BandwidthRule",
    "kernel_1d",
    "eval_kernel",
    "kernel_l2",
    "kernel_convolution",
    "conv_ratio",
    "bandwidth",
]

logger = logging.getLogger(__name__)

#: per-coordinate value of int K(u)^2 du for the quartic half-support kernel
L2_1D = 1.2

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice; only the quartic half-support product kernel ships."""

    kind: str = "quartic_half_support"
    d: int = 1

    def __post_init__(self):
        if self.kind != "quartic_half_support":
            raise ValueError(f"unsupported kernel kind {self.kind!r}")
        if self.d < 1:
            raise ValueError("kernel dimension must be >= 1")


def kernel_1d(u):
    """Evaluate the one-dimensional kernel elementwise."""
    u = np.asarray(u, dtype=float)
    return np.where(np.abs(u) <= 0.5, 1.5 * (1.0 - 4.0 * u * u), 0.0)


def eval_kernel(u):
    """Evaluate the product kernel.

    Parameters
    ----------
    u : array_like
        Scalar (``d = 1``) or array whose last axis holds the ``d`` coordinates.

    Returns
    -------
    float or ndarray
        ``prod_j K(u_j)``; shape is ``u.shape[:-1]`` for vector input.
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 0:
        return float(kernel_1d(u))
    return np.prod(kernel_1d(u), axis=-1)


def kernel_l2(d: int = 1) -> float:
    """Return ``int K(u)^2 du`` for the ``d``-dimensional product kernel."""
    if d < 1:
        raise ValueError("d must be >= 1")
    return L2_1D**d


def _conv_1d(t):
    t = np.asarray(t, dtype=float)
    lo = np.maximum(-0.5, -0.5 - t)
    hi = np.minimum(0.5, 0.5 - t)
    half = 0.5 * np.clip(hi - lo, 0.0, None)
    mid = 0.5 * (hi + lo)
    s = mid[..., None] + half[..., None] * _GL_NODES
    vals = kernel_1d(s) * kernel_1d(s + t[..., None])
    return half * (vals @ _GL_WEIGHTS)


def kernel_convolution(t):
    """Return ``int K(s) K(s + t) ds``.

    A scalar ``t`` is treated as one-dimensional.  For array input the last
    axis holds coordinates and the result is the product over coordinates.
    The integrand is a piecewise polynomial of degree 4 on the overlap of the
    two supports, so 64-point Gauss-Legendre is exact to rounding.
    """
    t = np.asarray(t, dtype=float)
    if t.ndim == 0:
        return float(_conv_1d(t))
    return np.prod(_conv_1d(t), axis=-1)


def conv_ratio(t, d: int = 1):
    """Kernel autocorrelation ``kernel_convolution(t) / kernel_l2(d)``, in [0, 1]."""
    return kernel_convolution(t) / kernel_l2(d)


@dataclass(frozen=True)
class BandwidthRule:
    """Rule-of-thumb bandwidth ``h = kappa_h * s_X * n^exponent``.

    ``base`` selects whether ``n`` is the number of clusters (``"clusters"``) or
    of units (``"units"``).  With ``per_coordinate`` set, a vector of
    per-coordinate bandwidths is returned for ``d > 1`` instead of one scalar
    built from the average standard deviation.
    """

    kappa_h: float = 1.0
    exponent: float = -2.0 / 7.0
    base: str = "clusters"
    per_coordinate: bool = False

    def __post_init__(self):
        if not self.kappa_h > 0:
            raise ValueError("kappa_h must be positive")
        if self.base not in ("clusters", "units"):
            raise ValueError("base must be 'clusters' or 'units'")


def bandwidth(sample, rule: BandwidthRule):
    """Compute the bandwidth for ``sample`` under ``rule``.

    Returns a float, or a length-``d`` array when ``rule.per_coordinate`` is
    set and ``d > 1``.
    """
    if sample.C < 2:
        raise DataError("bandwidth needs at least two clusters")
    sd = np.std(sample.x, axis=0, ddof=1)
    if np.any(~(sd > 0)):
        raise DataError("a covariate has zero sample variance")
    n = sample.C if rule.base == "clusters" else sample.N
    scale = rule.kappa_h * n**rule.exponent
    if sample.d >= 2:
        logger.warning(
            "second-order kernel with d=%d does not satisfy the smoothness "
            "order condition; results rely on finite-sample behaviour",
            sample.d,
        )
    if rule.per_coordinate and sample.d > 1:
        return scale * sd
    return float(scale * sd.mean())
