"""Studentized tests, normal p-values and the Holm step-down classification."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.special import ndtr

from .data import DEFAULT_MIN_SHARE, overlap_check
from .errors import DataError
from .estimator import MIN_KERNEL_MASS, grid_estimates
from .kernel import BandwidthRule, bandwidth
from .teststat import (
    DEFAULT_LAG_POINTS,
    build_grid,
    s1_statistic,
    s2_statistic,
)

__all__ = [
    "TestConfig",
    "TestResult",
    "MtpResult",
    "HYPOTHESES",
    "CLASSIFICATIONS",
    "normal_sf",
    "resolve_bandwidth",
    "s1_test",
    "s2_test",
    "holm",
    "run_tests",
    "report_json",
    "report_table",
]

HYPOTHESES = ("H0_Pi", "H0_X")
CLASSIFICATIONS = ("CTE_both", "HTE_exposure_only", "HTE_pretreatment_only", "HTE_both")


@dataclass(frozen=True)
class TestConfig:
    """Settings shared by both tests.

    The bandwidth is ``h`` when given, otherwise
    ``kappa_h * sd(X) * n^(-2/7)`` with ``n`` the number of units
    (``bandwidth_base="units"``) or clusters (``"clusters"``).
    """

    __test__ = False

    alpha: float = 0.05
    kappa_h: float = 5.0
    bandwidth_base: str = "units"
    h: float | None = None
    per_coordinate: bool = False
    grid_points: int = 50
    grid_quantiles: tuple = (0.1, 0.9)
    grid_seed: int = 0
    lag_points: int = DEFAULT_LAG_POINTS
    variance_correction: str = "bessel"
    min_mass: float = MIN_KERNEL_MASS
    sigma1_convention: str = "pairs"
    w2_covariance: str = "symmetric"
    sigma2_form: str = "gaussian"
    min_share: float = DEFAULT_MIN_SHARE

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.h is not None and not self.h > 0:
            raise ValueError("h must be positive")

    def with_(self, **changes) -> "TestConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TestResult:
    """Outcome of one test."""

    __test__ = False

    hypothesis: str
    statistic: object
    p_value: float
    level: float
    reject: bool
    method: str = "asymptotic"
    h: float = float("nan")
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        h = self.h
        if isinstance(h, np.ndarray):
            h = h.tolist()
        return {
            "hypothesis": self.hypothesis,
            "method": self.method,
            "h": h,
            "statistic": self.statistic.to_dict(),
            "p_value": self.p_value,
            "level": self.level,
            "reject": self.reject,
            "diagnostics": dict(self.diagnostics),
        }


@dataclass(frozen=True)
class MtpResult:
    """Joint Holm decision on both null hypotheses."""

    p_values: dict
    order: tuple
    rejections: dict
    classification: str
    alpha: float

    def to_dict(self) -> dict:
        return {
            "p_values": dict(self.p_values),
            "order": list(self.order),
            "rejections": dict(self.rejections),
            "classification": self.classification,
            "alpha": self.alpha,
        }


def normal_sf(z):
    """Upper tail ``1 - Phi(z)`` of the standard normal."""
    return ndtr(-np.asarray(z, dtype=float)) if np.ndim(z) else float(ndtr(-z))


def resolve_bandwidth(sample, config: TestConfig):
    if config.h is not None:
        return config.h
    rule = BandwidthRule(
        kappa_h=config.kappa_h,
        base=config.bandwidth_base,
        per_coordinate=config.per_coordinate,
    )
    return bandwidth(sample, rule)


def _prepare(sample, config, grid, h, check_overlap):
    sample.require_exposure()
    if sample.K < 2:
        raise DataError("at least two exposure levels are needed")
    diag = overlap_check(sample, config.min_share) if check_overlap else None
    if h is None:
        h = resolve_bandwidth(sample, config)
    if grid is None:
        grid = build_grid(sample, config.grid_points, config.grid_quantiles, config.grid_seed)
    return h, grid, diag


def _finish(hypothesis, dec, config, h, diag):
    z = dec.studentized
    if not math.isfinite(z):
        p = float("nan")
        reject = False
    else:
        p = normal_sf(z)
        reject = bool(p <= config.alpha)
    diagnostics = {"dropped_points": dec.dropped_points, "clamped": dec.clamped}
    if diag is not None and diag.warnings:
        diagnostics["overlap_warnings"] = list(diag.warnings)
    return TestResult(
        hypothesis=hypothesis,
        statistic=dec,
        p_value=p,
        level=config.alpha,
        reject=reject,
        method="asymptotic",
        h=h,
        diagnostics=diagnostics,
    )


def s1_test(sample, config: TestConfig = TestConfig(), *, grid=None, h=None,
            estimates=None, check_overlap: bool = True) -> TestResult:
    """Asymptotic test of no heterogeneity across exposure levels.

    Rejects when the studentized statistic exceeds the ``1 - alpha`` normal
    quantile, equivalently when ``p = 1 - Phi(S1) <= alpha``.
    """
    h, grid, diag = _prepare(sample, config, grid, h, check_overlap)
    dec = s1_statistic(
        sample, grid, h,
        variance_correction=config.variance_correction,
        min_mass=config.min_mass,
        convention=config.sigma1_convention,
        lag_points=config.lag_points,
        estimates=estimates,
    )
    return _finish("H0_Pi", dec, config, h, diag)


def s2_test(sample, config: TestConfig = TestConfig(), *, grid=None, h=None,
            estimates=None, check_overlap: bool = True) -> TestResult:
    """Asymptotic test of no heterogeneity across covariate values."""
    h, grid, diag = _prepare(sample, config, grid, h, check_overlap)
    dec = s2_statistic(
        sample, grid, h,
        variance_correction=config.variance_correction,
        min_mass=config.min_mass,
        w2_covariance=config.w2_covariance,
        form=config.sigma2_form,
        lag_points=config.lag_points,
        estimates=estimates,
    )
    return _finish("H0_X", dec, config, h, diag)


def run_tests(sample, config: TestConfig = TestConfig()):
    """Both asymptotic tests on one grid, plus the Holm classification.

    Returns
    -------
    (TestResult, TestResult, MtpResult)
    """
    h, grid, _ = _prepare(sample, config, None, None, True)
    est = grid_estimates(
        sample, grid.points, h,
        variance_correction=config.variance_correction,
        min_mass=config.min_mass,
    )
    r1 = s1_test(sample, config, grid=grid, h=h, estimates=est)
    r2 = s2_test(sample, config, grid=grid, h=h, estimates=est, check_overlap=False)
    return r1, r2, holm((r1.p_value, r2.p_value), config.alpha)


def _classify(reject_pi: bool, reject_x: bool) -> str:
    if reject_pi and reject_x:
        return "HTE_both"
    if reject_pi:
        return "HTE_exposure_only"
    if reject_x:
        return "HTE_pretreatment_only"
    return "CTE_both"


def holm(p_values, alpha: float = 0.05, labels=HYPOTHESES) -> MtpResult:
    """Holm step-down procedure for the two null hypotheses.

    The smaller p-value is tested at ``alpha / 2``; only if it is rejected is
    the larger one tested at ``alpha``.  Ties go to the first label.

    Parameters
    ----------
    p_values : sequence of two floats
        p-values for ``labels`` in order (exposure null first by default).
    alpha : float
        Familywise level.
    """
    p = [float(v) for v in p_values]
    if len(p) != 2 or len(labels) != 2:
        raise ValueError("holm expects exactly two hypotheses")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    for v in p:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"p-value {v!r} outside [0, 1]")
    first, second = (0, 1) if p[0] <= p[1] else (1, 0)
    rej = [False, False]
    if p[first] <= alpha / 2.0:
        rej[first] = True
        rej[second] = p[second] <= alpha
    return MtpResult(
        p_values={labels[0]: p[0], labels[1]: p[1]},
        order=(labels[first], labels[second]),
        rejections={labels[0]: rej[0], labels[1]: rej[1]},
        classification=_classify(rej[0], rej[1]),
        alpha=alpha,
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def report_json(results, mtp: MtpResult | None = None, extra: dict | None = None) -> str:
    """Serialize test results (and the Holm outcome) as JSON."""
    doc = {"tests": [r.to_dict() for r in results]}
    if mtp is not None:
        doc["holm"] = mtp.to_dict()
    if extra:
        doc.update(extra)
    return json.dumps(_jsonable(doc), indent=2, sort_keys=True)


def _fmt(v, spec=".4f"):
    if v is None:
        return "-"
    if isinstance(v, (np.ndarray, list, tuple)):
        return ",".join(format(float(u), spec) for u in np.ravel(v))
    v = float(v)
    return format(v, spec) if math.isfinite(v) else "nan"


def report_table(results, mtp: MtpResult | None = None) -> str:
    """Human-readable table: statistic, bias, scale, p-value and decision."""
    head = f"{'hypothesis':<10} {'method':<10} {'h':>8} {'raw':>10} {'bias':>10} " \
           f"{'scale':>8} {'stat':>8} {'p':>7} decision"
    lines = [head, "-" * len(head)]
    for r in results:
        s = r.statistic
        lines.append(
            f"{r.hypothesis:<10} {r.method:<10} {_fmt(r.h):>8} {_fmt(s.raw):>10} "
            f"{_fmt(s.bias):>10} {_fmt(s.scale):>8} {_fmt(s.studentized, '.3f'):>8} "
            f"{_fmt(r.p_value, '.3f'):>7} {'reject' if r.reject else 'keep'}"
        )
    if mtp is not None:
        lines.append("")
        lines.append(f"Holm at alpha={mtp.alpha:g}: {mtp.classification}")
    return "\n".join(lines)
