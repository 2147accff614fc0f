"""Statistics on trajectory ensembles, as scikit-learn style estimators.

Each estimator takes its configuration in ``__init__`` and is fitted on an
:class:`~rwdre.walk.Ensemble` with ``fit``; results live in attributes with
a trailing underscore.  Thin function wrappers are provided for one-off use.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats as sps
from sklearn.base import BaseEstimator

from .walk import Ensemble

Z = 3.0
FCLT_TIMES = (0.25, 0.5, 1.0)
PSD_TOL = 1e-10


class StatsError(ValueError):
    pass


def _positive_times(ens: Ensemble) -> np.ndarray:
    return ens.times[ens.times > 0]


def _direction(theta, d: int) -> np.ndarray:
    if theta is None:
        return np.eye(d)[0]
    theta = np.asarray(theta, dtype=float).reshape(d)
    n = np.linalg.norm(theta)
    if n == 0:
        raise StatsError("theta must be nonzero")
    return theta / n


class SpeedEstimator(BaseEstimator):
    """Mean of ``X_T / T`` across runs, with the L1 curve ``E|X_t/t - v_hat|``."""

    def __init__(self, horizon: int | None = None):
        self.horizon = horizon

    def fit(self, ensemble: Ensemble, y=None):
        if ensemble.n_runs < 2:
            raise StatsError("need at least 2 runs")
        T = ensemble.horizon if self.horizon is None else self.horizon
        if T <= 0:
            raise StatsError("horizon must be positive")
        v = ensemble.at(T) / T
        self.horizon_ = T
        self.v_ = v.mean(axis=0)
        self.stderr_ = v.std(axis=0, ddof=1) / math.sqrt(ensemble.n_runs)
        times = _positive_times(ensemble)
        dev = np.stack([np.linalg.norm(ensemble.at(t) / t - self.v_, axis=1) for t in times], axis=1)
        self.l1_times_ = times
        self.l1_curve_ = dev.mean(axis=0)
        self.l1_stderr_ = dev.std(axis=0, ddof=1) / math.sqrt(ensemble.n_runs)
        return self


def l1_deviations(ensemble: Ensemble, t: int, v) -> np.ndarray:
    """Per-run ``|X_t / t - v|``."""
    return np.linalg.norm(ensemble.at(t) / t - np.asarray(v, float), axis=1)


def paired_l1_drop(ensemble: Ensemble, t_early: int, t_late: int, v) -> tuple[float, float]:
    """``E|X_early/early - v| - E|X_late/late - v|`` and its SE over paired runs."""
    diff = l1_deviations(ensemble, t_early, v) - l1_deviations(ensemble, t_late, v)
    return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(len(diff)))


def estimate_speed(ensemble: Ensemble) -> tuple[np.ndarray, np.ndarray]:
    est = SpeedEstimator().fit(ensemble)
    return est.v_, est.stderr_


def fit_log_linear(times, probs, n_runs: int) -> dict:
    """Weighted least squares of ``log p = log C - c t``.

    Zero tails are censored at ``1 / (2 n_runs)``; points with tail one carry
    no information and are dropped.  Weights are the delta-method inverse
    variances ``n p / (1 - p)`` of ``log p``.
    """
    times = np.asarray(times, float)
    probs = np.asarray(probs, float)
    floor = 1.0 / (2 * n_runs)
    censored = probs <= 0
    if censored.all():
        raise StatsError("all tail probabilities are zero; nothing to fit")
    if (probs >= 1).all():
        raise StatsError("every tail probability is one; nothing to fit")
    if ((probs > 0) & (probs < 1)).sum() < 3:
        raise StatsError("need at least 3 time points with tail strictly between 0 and 1")
    keep = probs < 1
    p = np.where(censored, floor, probs)[keep]
    t = times[keep]
    w = n_runs * p / (1 - p)
    X = np.stack([np.ones_like(t), -t], axis=1)
    XtW = X.T * w
    cov = np.linalg.inv(XtW @ X)
    beta = cov @ XtW @ np.log(p)
    resid = np.log(p) - X @ beta
    chi2 = float((w * resid ** 2).sum())
    dof = len(t) - 2
    # inflate for overdispersion only; never shrink below the binomial SE
    scale = max(1.0, chi2 / dof) if dof > 0 else 1.0
    return {"log_C": float(beta[0]), "c": float(beta[1]), "c_se": float(math.sqrt(cov[1, 1] * scale)),
            "chi2": chi2, "dof": dof, "censored": censored.tolist(), "used": keep.tolist()}


class LDBRateEstimator(BaseEstimator):
    """Exponential rate of ``P(|X_t / t - v| > eps)`` over the recorded times."""

    def __init__(self, eps: float = 0.2, v=None, times=None):
        self.eps = eps
        self.v = v
        self.times = times

    def fit(self, ensemble: Ensemble, y=None):
        if self.eps <= 0:
            raise StatsError("eps must be positive")
        times = _positive_times(ensemble) if self.times is None else np.asarray(self.times)
        v = SpeedEstimator().fit(ensemble).v_ if self.v is None else np.asarray(self.v, float)
        probs = np.array([(l1_deviations(ensemble, t, v) > self.eps).mean() for t in times])
        fit = fit_log_linear(times, probs, ensemble.n_runs)
        self.times_, self.tails_ = times, probs
        self.C_ = math.exp(fit["log_C"])
        self.c_, self.c_stderr_ = fit["c"], fit["c_se"]
        self.fit_ = fit
        return self

    @property
    def significant_(self) -> bool:
        return self.c_ - Z * self.c_stderr_ > 0


def ldb_rate(ensemble: Ensemble, eps: float, v=None, times=None) -> LDBRateEstimator:
    return LDBRateEstimator(eps, v, times).fit(ensemble)


class VarianceGrowthEstimator(BaseEstimator):
    """``Var(theta . X_n)`` on the recorded grid and its least-squares slope in ``n``.

    The Chebyshev diagnostic compares the empirical second moment about
    ``theta . n v`` with ``eps^2`` times the empirical tail; on any empirical
    measure this holds exactly.
    """

    def __init__(self, theta=None, v=None, eps: float = 1.0):
        self.theta = theta
        self.v = v
        self.eps = eps

    def fit(self, ensemble: Ensemble, y=None):
        times = _positive_times(ensemble)
        if len(times) < 3:
            raise StatsError("need at least 3 values of n")
        theta = _direction(self.theta, ensemble.d)
        v = SpeedEstimator().fit(ensemble).v_ if self.v is None else np.asarray(self.v, float)
        var, cheb = [], []
        for n in times:
            y = ensemble.at(n) @ theta
            var.append(y.var(ddof=1))
            dev = y - n * (theta @ v)
            m2 = float(np.mean(dev ** 2))
            tail = float(np.mean(np.abs(dev) > self.eps))
            cheb.append((int(n), m2, self.eps ** 2 * tail, m2 >= self.eps ** 2 * tail))
        var = np.array(var)
        slope, intercept, _, _, slope_se = sps.linregress(times.astype(float), var) if len(set(var)) > 1 \
            else (0.0, float(var[0]), 0.0, 0.0, 0.0)
        self.times_, self.variance_ = times, var
        self.ratio_ = var / times
        self.slope_, self.intercept_, self.slope_stderr_ = float(slope), float(intercept), float(slope_se)
        self.chebyshev_ = cheb
        self.chebyshev_ok_ = all(row[3] for row in cheb)
        return self


def variance_growth(ensemble: Ensemble, theta=None, v=None, eps: float = 1.0) -> VarianceGrowthEstimator:
    return VarianceGrowthEstimator(theta, v, eps).fit(ensemble)


def covariance(ensemble: Ensemble, t: int | None = None) -> np.ndarray:
    """Sample covariance of ``X_t / sqrt(t)`` (``t`` defaults to the horizon)."""
    t = ensemble.horizon if t is None else t
    x = ensemble.at(t) / math.sqrt(t)
    S = np.atleast_2d(np.cov(x, rowvar=False))
    S = 0.5 * (S + S.T)
    if np.linalg.eigvalsh(S).min() < -PSD_TOL:
        raise StatsError("sample covariance is not positive semidefinite")
    return S


class FCLTTest(BaseEstimator):
    """KS tests of the rescaled walk at fractions of ``n`` against Brownian marginals.

    With a scalar ``sigma2`` the projection on ``theta`` is tested.  With a
    matrix ``Sigma`` every coordinate is tested after whitening by
    ``Sigma^{-1/2}``.  The covariance of ``(B_s, B_u)`` is checked against
    ``min(s, u)``.  Acceptance uses Bonferroni over the tested times.

    Lattice-valued positions are spread uniformly over their lattice cell
    (``jitter=True``) before the KS test.  Without this the atoms of the
    empirical law alone push the KS distance up by half an atom mass,
    which at moderate ``n`` is comparable to the critical value.
    """

    def __init__(self, v, sigma2=None, Sigma=None, theta=None, n: int | None = None,
                 times=FCLT_TIMES, alpha: float = 0.01, jitter: bool = True, seed: int = 0):
        self.v = v
        self.sigma2 = sigma2
        self.Sigma = Sigma
        self.theta = theta
        self.n = n
        self.times = times
        self.alpha = alpha
        self.jitter = jitter
        self.seed = seed

    def _positions(self, ensemble: Ensemble, m: int) -> np.ndarray:
        x = ensemble.at(m).astype(float)
        if not self.jitter or not np.issubdtype(ensemble.positions.dtype, np.integer):
            return x
        gen = np.random.default_rng([self.seed, m])
        raw = ensemble.at(m)
        for j in range(x.shape[1]):
            span = int(np.gcd.reduce(np.abs(raw[:, j] - raw[0, j])))
            if span > 0:
                x[:, j] += span * (gen.random(len(x)) - 0.5)
        return x

    def _scaled(self, ensemble: Ensemble, n: int, s: float) -> np.ndarray:
        m = int(math.floor(n * s))
        dev = self._positions(ensemble, m) - m * np.asarray(self.v, float).reshape(ensemble.d)
        if self.Sigma is not None:
            S = np.atleast_2d(np.asarray(self.Sigma, float))
            w, U = np.linalg.eigh(S)
            if w.min() <= 0:
                raise StatsError("Sigma must be positive definite")
            return dev @ (U / np.sqrt(w)) @ U.T / math.sqrt(n)
        return (dev @ _direction(self.theta, ensemble.d) / math.sqrt(n * self.sigma2))[:, None]

    def fit(self, ensemble: Ensemble, y=None):
        if self.Sigma is None and (self.sigma2 is None or not self.sigma2 > 0):
            raise StatsError("sigma2 must be positive")
        n = ensemble.horizon if self.n is None else self.n
        B = {s: self._scaled(ensemble, n, s) for s in self.times}
        rows = []
        for s, b in B.items():
            for j in range(b.shape[1]):
                res = sps.kstest(b[:, j], "norm", args=(0.0, math.sqrt(s)))
                rows.append({"s": s, "coordinate": j, "ks": float(res.statistic), "p_value": float(res.pvalue)})
        m = len(rows)
        for r in rows:
            r["p_adjusted"] = min(1.0, m * r["p_value"])
        cov_rows = []
        ss = sorted(B)
        for i, s in enumerate(ss):
            for u in ss[i + 1:]:
                for j in range(B[s].shape[1]):
                    prod = B[s][:, j] * B[u][:, j]
                    est = float(prod.mean())
                    se = float(prod.std(ddof=1) / math.sqrt(len(prod)))
                    cov_rows.append({"s": s, "u": u, "coordinate": j, "cov": est, "stderr": se,
                                     "ok": abs(est - min(s, u)) <= Z * se})
        self.n_ = n
        self.ks_ = rows
        self.covariance_checks_ = cov_rows
        self.min_p_adjusted_ = min(r["p_adjusted"] for r in rows)
        self.passed_ = self.min_p_adjusted_ > self.alpha
        self.covariance_ok_ = all(r["ok"] for r in cov_rows)
        return self


def fclt_test(ensemble: Ensemble, v, sigma2=None, Sigma=None, theta=None, n=None, jitter=True) -> FCLTTest:
    return FCLTTest(v, sigma2, Sigma, theta, n, jitter=jitter).fit(ensemble)


@dataclass
class EnsembleSummary:
    n_runs: int
    horizon: int
    v_hat: list
    v_stderr: list
    l1_curve: list = field(default_factory=list)
    ldb_points: dict = field(default_factory=dict)
    var_curve: dict = field(default_factory=dict)
    fclt: dict | None = None
    covariance: list | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(ensemble: Ensemble, eps=(0.2,), thetas=None, sigma2: float | None = None) -> EnsembleSummary:
    """Every diagnostic that can be computed from the ensemble alone."""
    sp = SpeedEstimator().fit(ensemble)
    times = _positive_times(ensemble)
    ldb = {}
    for e in eps:
        ldb[str(e)] = [[int(t), float((l1_deviations(ensemble, t, sp.v_) > e).mean())] for t in times]
    thetas = [np.eye(ensemble.d)[j] for j in range(ensemble.d)] if thetas is None else thetas
    var_curve = {}
    for th in thetas:
        th = _direction(th, ensemble.d)
        var_curve[",".join(f"{c:g}" for c in th)] = [[int(t), float((ensemble.at(t) @ th).var(ddof=1))] for t in times]
    fclt = None
    if sigma2 is not None:
        needed = {int(math.floor(ensemble.horizon * s)) for s in FCLT_TIMES}
        if needed <= set(int(t) for t in ensemble.times):
            f = FCLTTest(sp.v_, sigma2).fit(ensemble)
            fclt = {"ks": f.ks_, "passed": f.passed_, "covariance": f.covariance_checks_}
    return EnsembleSummary(
        n_runs=ensemble.n_runs,
        horizon=ensemble.horizon,
        v_hat=sp.v_.tolist(),
        v_stderr=sp.stderr_.tolist(),
        l1_curve=[[int(t), float(m), float(s)] for t, m, s in zip(sp.l1_times_, sp.l1_curve_, sp.l1_stderr_)],
        ldb_points=ldb,
        var_curve=var_curve,
        fclt=fclt,
        covariance=covariance(ensemble).tolist() if ensemble.n_runs > 1 else None,
    )
