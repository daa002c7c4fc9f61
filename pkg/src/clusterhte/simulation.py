"""Monte Carlo designs, rejection-rate experiments and a parametric comparator.

The data-generating process draws, per cluster, one treatment vector whose
mean is a chosen exposure level, covariates with within-cluster dependence
through a Gaussian copula, and outcomes
``Y = (tau(X, Pi) + U1) T + U0 (1 - T)`` with normal errors.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from .bootstrap import BootstrapConfig, s1_bootstrap_test, s2_bootstrap_test
from .data import ClusteredSample
from .errors import DataError, HteError, NumericalError
from .estimator import grid_estimates
from .inference import TestConfig, _prepare, s1_test, s2_test

__all__ = [
    "DgpConfig",
    "PowerTable",
    "RejectionResult",
    "ParametricResult",
    "CATE_FORMS",
    "cate_function",
    "gen_dgp",
    "mc_seed",
    "rejection_probabilities",
    "power_table",
    "ols_cluster_comparison",
    "cluster_robust_cov",
]

CATE_FORMS = ("linear", "cosine_nonlinear", "linear_multiX")
NOMINAL_LEVELS = (0.01, 0.05, 0.10)
MAX_DROP_SHARE = 0.02
# the cosine design uses 3.142 rather than pi
COSINE_PI = 3.142
STREAM_MC = 3
STREAM_BOOT = 4


@dataclass(frozen=True)
class DgpConfig:
    """Monte Carlo design.

    Attributes
    ----------
    C, N_c : int
        Number of clusters and units per cluster.
    levels : tuple of float
        Exposure levels; each ``level * N_c`` must be an integer.
    beta0, beta1 : float
        Slopes on ``x`` and on the exposure in the linear CATE forms.
    cate_form : {"linear", "cosine_nonlinear", "linear_multiX"}
    error_sd : float
        Standard deviation of both potential-outcome errors.  The default 0.1
        matches the reference size and power levels checked by the acceptance
        suite; use ``sqrt(0.1)`` for errors with variance 0.1.
    rho_x : float
        Within-cluster correlation of the latent normal behind ``X``.
    d : int
        Covariate dimension.
    """

    C: int = 150
    N_c: int = 10
    levels: tuple = (0.3, 0.4, 0.5, 0.6)
    beta0: float = 0.0
    beta1: float = 0.0
    cate_form: str = "linear"
    error_sd: float = 0.1
    rho_x: float = 0.2
    d: int = 1

    def __post_init__(self):
        if self.C < 2 or self.N_c < 1:
            raise DataError("need C >= 2 clusters of at least one unit")
        if len(self.levels) < 2:
            raise DataError("need at least two exposure levels")
        if self.cate_form not in CATE_FORMS:
            raise DataError(f"cate_form must be one of {CATE_FORMS}")
        if not 0.0 <= self.rho_x < 1.0:
            raise DataError("rho_x must lie in [0, 1)")
        if self.d < 1:
            raise DataError("d must be >= 1")
        if not self.error_sd >= 0:
            raise DataError("error_sd must be nonnegative")
        for lv in self.levels:
            n1 = lv * self.N_c
            if not 0.0 <= lv <= 1.0 or abs(n1 - round(n1)) > 1e-9:
                raise DataError(f"exposure level {lv} is not a mean of {self.N_c} binary values")

    def with_(self, **changes) -> "DgpConfig":
        return replace(self, **changes)


def cate_function(x, pi, config: DgpConfig):
    """True CATE ``tau(x, pi)`` of the design.

    ``x`` has shape (n, d) or (n,) for ``d = 1``.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    pi = np.asarray(pi, dtype=float)
    if config.cate_form == "linear":
        return config.beta0 * x[:, 0] + config.beta1 * pi
    if config.cate_form == "linear_multiX":
        return config.beta0 * x.sum(axis=1) + config.beta1 * pi
    return 30.0 * np.cos(2.0 * COSINE_PI * x[:, 0]) * (pi * pi - pi)


def mc_seed(seed: int, rep: int, stream: int = STREAM_MC) -> np.random.SeedSequence:
    """Seed for Monte Carlo replication ``rep``."""
    return np.random.SeedSequence(seed, spawn_key=(stream, rep))


def gen_dgp(config: DgpConfig, seed=0) -> ClusteredSample:
    """Draw one sample from the design.

    Parameters
    ----------
    config : DgpConfig
    seed : int, SeedSequence or Generator
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    C, n, d = config.C, config.N_c, config.d
    levels = np.asarray(config.levels, dtype=float)
    k = rng.integers(len(levels), size=C)
    shared = rng.standard_normal((C, 1, d))
    own = rng.standard_normal((C, n, d))
    latent = math.sqrt(config.rho_x) * shared + math.sqrt(1.0 - config.rho_x) * own
    x = stats.norm.cdf(latent).reshape(C * n, d)
    t = np.zeros((C, n))
    for c in range(C):
        n1 = int(round(levels[k[c]] * n))
        t[c, rng.permutation(n)[:n1]] = 1.0
    t = t.ravel()
    pi = t.reshape(C, n).mean(axis=1).repeat(n)
    tau = cate_function(x, pi, config)
    u1 = rng.normal(0.0, config.error_sd, C * n)
    u0 = rng.normal(0.0, config.error_sd, C * n)
    y = (tau + u1) * t + u0 * (1.0 - t)
    return ClusteredSample(
        cluster=np.arange(C).repeat(n),
        y=y,
        t=t,
        x=x,
        pi=pi,
    )


@dataclass
class RejectionResult:
    """Rejection rates of one test over Monte Carlo replications."""

    test: str
    method: str
    levels: tuple
    rates: tuple
    reps: int
    dropped: int
    p_values: np.ndarray
    seed: int

    def as_row(self) -> dict:
        row = {f"{lv:g}": r for lv, r in zip(self.levels, self.rates)}
        row.update(reps=self.reps, dropped=self.dropped)
        return row


def _one_test(sample, test, method, test_config, boot_config, grid, h, est, boot_seed):
    if method == "asymptotic":
        fn = s1_test if test == "S1" else s2_test
        return fn(sample, test_config, grid=grid, h=h, estimates=est, check_overlap=False).p_value
    boot = replace(boot_config, seed=boot_seed, workers=1)
    fn = s1_bootstrap_test if test == "S1" else s2_bootstrap_test
    return fn(sample, test_config, boot, grid=grid, h=h).p_value


def rejection_probabilities(config: DgpConfig, tests=("S1",), method: str = "asymptotic",
                            reps: int = 1000, levels=NOMINAL_LEVELS, seed: int = 0,
                            test_config: TestConfig = TestConfig(),
                            boot_config: BootstrapConfig | None = None,
                            progress=None) -> dict:
    """Empirical rejection probabilities of the requested tests.

    Every replication draws a fresh sample from its own stream, runs each test
    in ``tests`` (``"S1"`` and/or ``"S2"``) and records the p-value.  A
    replication that fails (for instance an empty exposure-treatment cell) is
    dropped; more than 2% drops is an error.

    Returns
    -------
    dict
        Maps each test name to a :class:`RejectionResult`.
    """
    if reps < 1:
        raise DataError("reps must be >= 1")
    if isinstance(tests, str):
        tests = (tests,)
    for name in tests:
        if name not in ("S1", "S2"):
            raise ValueError(f"unknown test {name!r}")
    if method not in ("asymptotic", "bootstrap"):
        raise ValueError("method must be 'asymptotic' or 'bootstrap'")
    boot_config = boot_config or BootstrapConfig()
    pvals = {name: np.full(reps, np.nan) for name in tests}
    dropped = 0
    for rep in range(reps):
        try:
            sample = gen_dgp(config, mc_seed(seed, rep))
            h, grid, _ = _prepare(sample, test_config, None, None, True)
            est = None
            if method == "asymptotic":
                est = grid_estimates(sample, grid.points, h,
                                     variance_correction=test_config.variance_correction,
                                     min_mass=test_config.min_mass)
            boot_seed = int(mc_seed(seed, rep, STREAM_BOOT).generate_state(1)[0])
            for name in tests:
                pvals[name][rep] = _one_test(sample, name, method, test_config,
                                             boot_config, grid, h, est, boot_seed)
        except HteError:
            dropped += 1
            for name in tests:
                pvals[name][rep] = np.nan
        if progress is not None:
            progress(rep + 1, reps)
    if dropped > MAX_DROP_SHARE * reps:
        raise NumericalError(f"{dropped} of {reps} Monte Carlo replications failed")
    out = {}
    for name in tests:
        p = pvals[name]
        ok = p[np.isfinite(p)]
        rates = tuple(float(np.mean(ok <= lv)) if ok.size else float("nan") for lv in levels)
        out[name] = RejectionResult(
            test=name, method=method, levels=tuple(levels), rates=rates,
            reps=int(ok.size), dropped=reps - int(ok.size), p_values=p, seed=seed,
        )
    return out


@dataclass
class PowerTable:
    """Rejection rates over a grid of one design parameter."""

    parameter: str
    values: list
    levels: tuple
    rates: list
    test: str
    method: str
    reps: int
    seed: int
    dropped: list = field(default_factory=list)

    def to_csv(self) -> str:
        """One row per parameter value: the value, then one column per level."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([self.parameter] + [f"{lv:g}" for lv in self.levels])
        for v, row in zip(self.values, self.rates):
            wr.writerow([f"{v:.2f}"] + [f"{r:.3f}" for r in row])
        return buf.getvalue()

    def to_long_csv(self) -> str:
        """Long format for plotting: parameter, level, rate, test, method."""
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow([self.parameter, "level", "rate", "test", "method", "reps"])
        for v, row in zip(self.values, self.rates):
            for lv, r in zip(self.levels, row):
                wr.writerow([f"{v:.4g}", f"{lv:g}", f"{r:.4f}", self.test, self.method, self.reps])
        return buf.getvalue()


def power_table(config: DgpConfig, parameter: str, values, test: str = "S1",
                method: str = "asymptotic", reps: int = 1000, levels=NOMINAL_LEVELS,
                seed: int = 0, test_config: TestConfig = TestConfig(),
                boot_config: BootstrapConfig | None = None, progress=None) -> PowerTable:
    """Rejection rates of one test as ``parameter`` (e.g. ``"beta1"``) varies."""
    if parameter not in asdict(config):
        raise DataError(f"unknown design parameter {parameter!r}")
    rates, dropped = [], []
    for v in values:
        res = rejection_probabilities(
            config.with_(**{parameter: float(v)}), (test,), method, reps, levels, seed,
            test_config, boot_config, progress,
        )[test]
        rates.append(res.rates)
        dropped.append(res.dropped)
    return PowerTable(parameter=parameter, values=[float(v) for v in values],
                      levels=tuple(levels), rates=rates, test=test, method=method,
                      reps=reps, seed=seed, dropped=dropped)


@dataclass
class ParametricResult:
    """OLS fit with cluster-robust covariance."""

    names: tuple
    coef: np.ndarray
    cov: np.ndarray
    n_obs: int
    n_clusters: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def tstat(self) -> np.ndarray:
        return self.coef / self.se

    @property
    def df(self) -> int:
        return self.n_clusters - 1

    @property
    def pvalues(self) -> np.ndarray:
        return 2.0 * stats.t.sf(np.abs(self.tstat), self.df)

    def joint_test(self, names) -> tuple:
        """Wald F-test that the named coefficients are all zero.

        Returns ``(F, p)`` with ``F`` referred to ``F(q, C - 1)``.
        """
        idx = [self.names.index(n) for n in names]
        b = self.coef[idx]
        v = self.cov[np.ix_(idx, idx)]
        f = float(b @ np.linalg.solve(v, b)) / len(idx)
        return f, float(stats.f.sf(f, len(idx), self.df))

    def table(self) -> str:
        lines = [f"{'term':<8} {'coef':>10} {'se':>10} {'t':>8} {'p':>7}"]
        for n, b, s, t, p in zip(self.names, self.coef, self.se, self.tstat, self.pvalues):
            lines.append(f"{n:<8} {b:>10.4f} {s:>10.4f} {t:>8.3f} {p:>7.3f}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "coef": self.coef.tolist(),
            "se": self.se.tolist(),
            "t": self.tstat.tolist(),
            "p": self.pvalues.tolist(),
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
        }


def cluster_robust_cov(design, resid, cluster, small_sample: bool = True):
    """Liang-Zeger sandwich ``(X'X)^-1 (sum_c X_c' e_c e_c' X_c) (X'X)^-1``.

    With ``small_sample`` the meat is scaled by
    ``C / (C - 1) * (N - 1) / (N - p)``.
    """
    n, p = design.shape
    bread = np.linalg.inv(design.T @ design)
    scores = design * resid[:, None]
    ncl = int(cluster.max()) + 1
    summed = np.zeros((ncl, p))
    np.add.at(summed, cluster, scores)
    meat = summed.T @ summed
    if small_sample:
        meat *= ncl / (ncl - 1.0) * (n - 1.0) / (n - p)
    return bread @ meat @ bread


def ols_cluster_comparison(sample, small_sample: bool = True) -> ParametricResult:
    """OLS of ``Y`` on ``(1, T, X, Pi, T*X, T*Pi)`` with cluster-robust errors."""
    sample.require_exposure()
    if sample.d != 1:
        raise DataError("the parametric comparator needs a single covariate")
    x = sample.x[:, 0]
    names = ("const", "T", "X", "Pi", "T*X", "T*Pi")
    design = np.column_stack([
        np.ones(sample.N), sample.t, x, sample.pi, sample.t * x, sample.t * sample.pi,
    ])
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise NumericalError("design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(design, sample.y, rcond=None)
    resid = sample.y - design @ coef
    cov = cluster_robust_cov(design, resid, sample.cluster, small_sample)
    return ParametricResult(names=names, coef=coef, cov=cov, n_obs=sample.N,
                            n_clusters=sample.C)
