"""Null-imposing cluster bootstraps for the two tests.

* Pairs cluster bootstrap (exposure null): for each exposure level, whole
  clusters are drawn with replacement from the pooled sample and relabelled
  with that level, so every level shares one outcome distribution.
* Wild cluster bootstrap (covariate null): outcomes are rebuilt from a
  restricted conditional mean that does not vary with ``x``, plus the
  residuals of each cluster multiplied by one Rademacher sign per cluster.

Both resample the uncentered-but-unscaled statistic ``T - a`` and compare it
with its observed value.  Each replication draws from its own random stream
keyed by ``(seed, stream, rep)``, so results do not depend on the number of
workers.
"""

from __future__ import annotations

import csv
import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import ClusteredSample, overlap_check
from .errors import DataError, HteError, NumericalError
from .estimator import grid_estimates, kernel_matrix
from .inference import TestConfig, TestResult, _prepare
from .teststat import t1_stat, t2_stat

__all__ = [
    "BootstrapConfig",
    "BootstrapResult",
    "rep_rng",
    "rademacher",
    "restricted_mean_fit",
    "pairs_cluster_bootstrap_s1",
    "wild_cluster_bootstrap_s2",
    "s1_bootstrap_test",
    "s2_bootstrap_test",
    "default_workers",
]

logger = logging.getLogger(__name__)

WORKERS_ENV = "CLUSTERHTE_WORKERS"
STREAM_PAIRS = 1
STREAM_WILD = 2
MAX_FAILED_SHARE = 0.05


def default_workers() -> int:
    """Worker count from the ``CLUSTERHTE_WORKERS`` environment variable (default 1)."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class BootstrapConfig:
    """Resampling settings.

    Attributes
    ----------
    reps : int
        Number of bootstrap replications ``B``.
    seed : int
        Root seed of the per-replication streams.
    workers : int
        Threads used to run replications.
    plus_one : bool
        Use ``(1 + #exceed) / (B + 1)`` instead of ``#exceed / B``.
    restricted_mean : {"kernel", "cell_mean"}
        How the wild bootstrap imposes the covariate null.
    """

    reps: int = 399
    seed: int = 0
    workers: int = 1
    plus_one: bool = False
    restricted_mean: str = "kernel"

    def __post_init__(self):
        if self.reps < 1:
            raise ValueError("reps must be >= 1")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.restricted_mean not in ("kernel", "cell_mean"):
            raise ValueError("restricted_mean must be 'kernel' or 'cell_mean'")


@dataclass
class BootstrapResult:
    """Observed centered statistic, bootstrap draws and empirical p-value."""

    observed: float
    draws: np.ndarray
    p_value: float
    reps_requested: int
    reps_failed: int = 0
    retried: int = 0
    observed_detail: object = None
    extra: dict = field(default_factory=dict)

    @property
    def reps_completed(self) -> int:
        return int(np.sum(np.isfinite(self.draws)))

    def to_csv(self, path):
        """Write the draws (one row per replication, failed ones empty)."""
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["rep", "draw"])
            for b, v in enumerate(self.draws):
                wr.writerow([b, repr(float(v)) if np.isfinite(v) else ""])


def rep_rng(seed: int, stream: int, rep: int, attempt: int = 0) -> np.random.Generator:
    """Generator for one replication, independent of execution order."""
    ss = np.random.SeedSequence(seed, spawn_key=(stream, rep, attempt))
    return np.random.default_rng(ss)


def rademacher(rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` independent signs, each +1 or -1 with probability 1/2."""
    return rng.integers(0, 2, size=n) * 2.0 - 1.0


def _empirical_p(draws, observed, plus_one):
    ok = draws[np.isfinite(draws)]
    exceed = int(np.sum(ok > observed))
    if plus_one:
        return (1.0 + exceed) / (ok.size + 1.0)
    return exceed / ok.size


def _run_reps(task: Callable[[int, int], float], reps: int, workers: int, progress=None):
    """Run ``task(rep, attempt)`` for every rep with one retry on failure.

    Returns the draws (nan for failed reps), the failure count and the retry count.
    """
    draws = np.full(reps, np.nan)
    retried = [0]
    lock = threading.Lock()

    def one(b):
        for attempt in (0, 1):
            try:
                return task(b, attempt)
            except HteError as exc:
                logger.debug("bootstrap rep %d attempt %d failed: %s", b, attempt, exc)
                if attempt == 0:
                    with lock:
                        retried[0] += 1
        return np.nan

    if workers == 1:
        for b in range(reps):
            draws[b] = one(b)
            if progress is not None:
                progress(b + 1, reps)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for b, v in enumerate(pool.map(one, range(reps))):
                draws[b] = v
                if progress is not None:
                    progress(b + 1, reps)
    failed = int(np.sum(~np.isfinite(draws)))
    if failed > MAX_FAILED_SHARE * reps:
        raise NumericalError(
            f"{failed} of {reps} bootstrap replications failed (limit {MAX_FAILED_SHARE:.0%})"
        )
    return draws, failed, retried[0]


def _t1_centered(sample, grid, h, config):
    est = grid_estimates(sample, grid.points, h,
                         variance_correction=config.variance_correction,
                         min_mass=config.min_mass)
    return t1_stat(sample, grid, h, estimates=est)


def _t2_centered(sample, grid, h, config):
    est = grid_estimates(sample, grid.points, h,
                         variance_correction=config.variance_correction,
                         min_mass=config.min_mass)
    return t2_stat(sample, grid, h, estimates=est, w2_covariance=config.w2_covariance)


def _pairs_pseudo_sample(sample, rng, counts):
    """Draw ``counts[k]`` clusters for level ``k`` from the pooled clusters."""
    starts = sample.cluster_starts
    sizes = np.diff(starts)
    levels = sample.exposure_levels
    idx, codes, pis = [], [], []
    code = 0
    for k, ck in enumerate(counts):
        for c in rng.integers(0, sample.C, size=ck):
            idx.append(np.arange(starts[c], starts[c + 1]))
            codes.append(np.full(sizes[c], code))
            pis.append(np.full(sizes[c], levels[k]))
            code += 1
    idx = np.concatenate(idx)
    return ClusteredSample(
        cluster=np.concatenate(codes),
        y=sample.y[idx],
        t=sample.t[idx],
        x=sample.x[idx],
        pi=np.concatenate(pis),
    )


def _level_cluster_counts(sample):
    """Clusters per exposure level, counting a cluster under its first unit's level."""
    first = sample.pi[sample.cluster_starts[:-1]]
    return [int(np.sum(first == lv)) for lv in sample.exposure_levels]


def pairs_cluster_bootstrap_s1(sample, grid, h, config: BootstrapConfig = BootstrapConfig(),
                               test_config: TestConfig = TestConfig(), progress=None
                               ) -> BootstrapResult:
    """Pairs cluster bootstrap of ``T1 - a1`` with the exposure null imposed.

    Parameters
    ----------
    sample : ClusteredSample
    grid : Grid
    h : float
        Bandwidth, reused in every replication.
    config : BootstrapConfig
    test_config : TestConfig
        Estimator settings (variance correction, minimum kernel mass).
    progress : callable, optional
        Called as ``progress(done, total)``.
    """
    overlap_check(sample, test_config.min_share)
    observed = _t1_centered(sample, grid, h, test_config)
    counts = _level_cluster_counts(sample)

    def task(b, attempt):
        rng = rep_rng(config.seed, STREAM_PAIRS, b, attempt)
        pseudo = _pairs_pseudo_sample(sample, rng, counts)
        if pseudo.K != sample.K:
            raise DataError("a level received no clusters")
        overlap_check(pseudo, 0.0)
        return _t1_centered(pseudo, grid, h, test_config).centered

    draws, failed, retried = _run_reps(task, config.reps, config.workers, progress)
    return BootstrapResult(
        observed=observed.centered,
        draws=draws,
        p_value=_empirical_p(draws, observed.centered, config.plus_one),
        reps_requested=config.reps,
        reps_failed=failed,
        retried=retried,
        observed_detail=observed,
        extra={"cluster_counts": counts},
    )


def restricted_mean_fit(sample, h, method: str = "kernel") -> np.ndarray:
    """Fitted values of a conditional mean that ignores the covariates.

    Within each (exposure, treatment) cell the fit is the Nadaraya-Watson mean
    of ``Y`` at the covariate mean ``x_bar`` (``method="kernel"``) or the plain
    cell mean (``method="cell_mean"``).  Every unit receives its cell's value.
    """
    sample.require_exposure()
    xbar = sample.x.mean(axis=0, keepdims=True)
    wts = kernel_matrix(xbar, sample.x, h)[0] if method == "kernel" else np.ones(sample.N)
    fitted = np.empty(sample.N)
    for pi in sample.exposure_levels:
        for t in (0, 1):
            cell = (sample.pi == pi) & (sample.t == t)
            if not cell.any():
                raise DataError(f"empty (exposure, treatment) cell ({pi:g}, {t})")
            mass = wts[cell].sum()
            if not mass > 0:
                raise NumericalError(
                    f"no unit of cell ({pi:g}, {t}) lies within one bandwidth of the covariate mean"
                )
            fitted[cell] = np.dot(wts[cell], sample.y[cell]) / mass
    return fitted


def wild_cluster_bootstrap_s2(sample, grid, h, config: BootstrapConfig = BootstrapConfig(),
                              test_config: TestConfig = TestConfig(), progress=None,
                              signs: Optional[Callable] = None) -> BootstrapResult:
    """Wild cluster bootstrap of ``T2 - a2`` with the covariate null imposed.

    ``signs(rng, C)`` returns one multiplier per cluster; the default draws
    Rademacher signs.  Passing a constant function is useful for checks.
    """
    overlap_check(sample, test_config.min_share)
    observed = _t2_centered(sample, grid, h, test_config)
    fitted = restricted_mean_fit(sample, h, config.restricted_mean)
    resid = sample.y - fitted
    draw = rademacher if signs is None else signs

    def task(b, attempt):
        rng = rep_rng(config.seed, STREAM_WILD, b, attempt)
        v = np.asarray(draw(rng, sample.C), dtype=float)
        ystar = fitted + resid * v[sample.cluster]
        return _t2_centered(sample.with_outcomes(ystar), grid, h, test_config).centered

    draws, failed, retried = _run_reps(task, config.reps, config.workers, progress)
    return BootstrapResult(
        observed=observed.centered,
        draws=draws,
        p_value=_empirical_p(draws, observed.centered, config.plus_one),
        reps_requested=config.reps,
        reps_failed=failed,
        retried=retried,
        observed_detail=observed,
    )


def _as_test_result(hypothesis, res: BootstrapResult, config: TestConfig, h):
    return TestResult(
        hypothesis=hypothesis,
        statistic=res.observed_detail,
        p_value=float(res.p_value),
        level=config.alpha,
        reject=bool(res.p_value <= config.alpha),
        method="bootstrap",
        h=h,
        diagnostics={
            "reps_completed": res.reps_completed,
            "reps_failed": res.reps_failed,
            "dropped_points": res.observed_detail.dropped_points,
        },
    )


def s1_bootstrap_test(sample, config: TestConfig = TestConfig(),
                      boot: BootstrapConfig = BootstrapConfig(), *, grid=None, h=None,
                      progress=None) -> TestResult:
    """Bootstrap version of the exposure-heterogeneity test."""
    h, grid, _ = _prepare(sample, config, grid, h, True)
    res = pairs_cluster_bootstrap_s1(sample, grid, h, boot, config, progress)
    return _as_test_result("H0_Pi", res, config, h)


def s2_bootstrap_test(sample, config: TestConfig = TestConfig(),
                      boot: BootstrapConfig = BootstrapConfig(), *, grid=None, h=None,
                      progress=None) -> TestResult:
    """Bootstrap version of the covariate-heterogeneity test."""
    h, grid, _ = _prepare(sample, config, grid, h, True)
    res = wild_cluster_bootstrap_s2(sample, grid, h, boot, config, progress)
    return _as_test_result("H0_X", res, config, h)
