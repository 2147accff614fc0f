"""Mixing coefficients of the environment and of the local environment process.

The suprema defining both coefficients run over infinite families.  Every
estimate here is taken over an explicit finite family and tagged with what
it is: ``exact`` (over the stated family), ``mc_lower_bound`` or
``analytic_upper_bound``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import rng
from .core import ModelSpec, ObservationEvent, SpaceTimeCell, cone_slice, observation_events
from .coupling import CoinParams, _cone_window, md_bound, md_bound_geometric
from .env import (
    IIDField,
    InconsistentHistory,
    SiteChain,
    TorusMarkov,
    check_compatible,
    filter_event,
    site_chain_time0_laws,
)
from .oracle.chain import build_joint_chain, lep_window_law, tv
from .walk import run_quenched, sample_history, simulate

MODES = ("exact", "mc_lower_bound", "analytic_upper_bound")
COEFFICIENTS = ("phi_tilde", "phi_hat", "phi_nu")
BLOCK_SIZE = 2000
Z_LOWER = 3.0
CONE_SEARCH = 64
MIN_GROUP = 20


def _prop_var(p: float, n: int) -> float:
    """Agresti-Coull variance of a proportion; stays positive at ``p`` in ``{0, 1}``."""
    pt = (p * n + 2.0) / (n + 4.0)
    return pt * (1.0 - pt) / (n + 4.0)


@dataclass
class MixingEstimate:
    coefficient: str
    t: int
    value: float
    mode: str
    families: dict = field(default_factory=dict)
    stderr: float | None = None
    # set when a sampled search stopped at its budget; the value is then the best so far
    budget_exhausted: bool = False

    def __post_init__(self):
        if self.coefficient not in COEFFICIENTS:
            raise ValueError(f"unknown coefficient {self.coefficient!r}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        v = float(self.value)
        if v < -1e-12 or v > 1 + 1e-12:
            raise ValueError(f"mixing value {v} outside [0, 1]")
        self.value = min(1.0, max(0.0, v))

    def to_dict(self) -> dict:
        return {"coefficient": self.coefficient, "t": self.t, "value": self.value, "mode": self.mode,
                "stderr": self.stderr, "families": self.families, "budget_exhausted": self.budget_exhausted}


def _events(law, spec: ModelSpec, k_max: int) -> list[ObservationEvent]:
    """Positive-probability observation events of depth ``<= k_max``."""
    out = []
    for ev in observation_events(spec, k_max):
        try:
            if isinstance(law, TorusMarkov):
                filter_event(law, spec, ev)
            elif isinstance(law, SiteChain):
                site_chain_time0_laws(law, spec, ev)
        except InconsistentHistory:
            continue
        out.append(ev)
    return out


def _distinct_posteriors(law, spec, events) -> list[np.ndarray]:
    seen = {}
    for ev in events:
        mu = filter_event(law, spec, ev).posterior
        seen.setdefault(np.round(mu, 14).tobytes(), mu)
    return list(seen.values())


# -- phi tilde -----------------------------------------------------------------

def phi_tilde_upper_bound(law, spec: ModelSpec, t: int) -> MixingEstimate:
    """Coupling bound on the path-cone coefficient.

    Under an i.i.d. field it vanishes.  For independent site dynamics every
    observation pins the symbols on a window, at most ``|Delta|`` sites have
    their last observation at each past time, and a site last seen ``r``
    steps ago couples with its stationary copy except with probability
    ``delta^(t + r)``.  Summing, ``phi_tilde(t) <= |Delta| delta^t / (1 - delta)``
    with ``delta`` the Dobrushin coefficient of the site kernel.  A general
    torus chain contracts its whole state: ``phi_tilde(t) <= delta_P^t``.
    """
    if isinstance(law, IIDField):
        value, rule = 0.0, "independent field"
    elif isinstance(law, SiteChain) or (isinstance(law, TorusMarkov) and law.product):
        delta = law.contraction
        value = 1.0 if delta >= 1 else min(1.0, len(spec.delta) * delta ** t / (1.0 - delta))
        rule = "|Delta| delta^t / (1 - delta)"
    elif isinstance(law, TorusMarkov):
        value, rule = min(1.0, law.contraction ** t), "delta_P^t"
    else:
        raise TypeError(f"no analytic bound for {law!r}")
    return MixingEstimate("phi_tilde", t, value, "analytic_upper_bound", {"rule": rule})


def estimate_phi_tilde(law, spec: ModelSpec, t: int, k_max: int = 3, h: int | None = None,
                       budget: int = 4, seed: int = 0, method: str = "auto",
                       block_size: int = BLOCK_SIZE) -> MixingEstimate:
    """``max |P(B | A) - P(B)|`` over events of depth ``<= k_max`` and cone cylinders.

    ``B`` ranges over cylinder events on the cone cells at times
    ``t..t+h-1``; ``h=None`` means the whole cone (exact methods only).  The
    ``mc`` method samples histories by running the walk (``budget`` blocks of
    ``block_size`` samples each) and reports a lower bound.
    """
    if t < 1:
        raise ValueError("t must be at least 1")
    check_compatible(law, spec)
    if method == "auto":
        method = "exact"
    if isinstance(law, IIDField) and method == "exact":
        return MixingEstimate("phi_tilde", t, 0.0, "exact",
                              {"reason": "cone cells are disjoint from observed cells", "k_max": k_max, "h": h})
    if method == "mc":
        return _phi_tilde_mc(law, spec, t, k_max, h if h is not None else 3, budget, seed, block_size)
    if isinstance(law, TorusMarkov):
        return _phi_tilde_torus(law, spec, t, k_max, h)
    if isinstance(law, SiteChain):
        return _phi_tilde_sites(law, spec, t, k_max, h)
    raise TypeError(f"unsupported law {law!r}")


def _phi_tilde_torus(law, spec, t, k_max, h) -> MixingEstimate:
    from .oracle.chain import cone_window_law

    events = _events(law, spec, k_max)
    if h is None:
        cw = _cone_window(law, spec, t)
        windows = lambda mu: cw.law_of(mu)
        complete = cw.optimal
    else:
        windows = lambda mu: cone_window_law(law, spec, mu, t, h)
        complete = False
    base = windows(law.stationary)
    value = max(tv(windows(mu), base) for mu in _distinct_posteriors(law, spec, events))
    fam = {"k_max": k_max, "h": h, "events": len(events), "whole_cone": complete}
    return MixingEstimate("phi_tilde", t, value, "exact", fam)


def phi_tilde_by_event(law: TorusMarkov, spec: ModelSpec, t: int, k_max: int = 3) -> list:
    """``(event, TV)`` for every event of depth ``<= k_max``, whole cone, largest first."""
    cw = _cone_window(law, spec, t)
    base = cw.law_of(law.stationary)
    rows = [(ev, tv(cw.law_of(filter_event(law, spec, ev).posterior), base)) for ev in _events(law, spec, k_max)]
    return sorted(rows, key=lambda r: -r[1])


def exact_phi_tilde(law: TorusMarkov, spec: ModelSpec, t: int, k_max: int = 3) -> float:
    """Whole-cone value over events of depth ``<= k_max`` on a torus."""
    return estimate_phi_tilde(law, spec, t, k_max=k_max, h=None).value


def _site_window(law: SiteChain, spec: ModelSpec, start: dict, t: int, h: int | None) -> np.ndarray:
    """Joint law of the cone cells of the listed sites at times ``t..t+h-1``.

    ``start`` maps site to its time-0 law.  Sites are independent, so the
    joint law is a product of per-site path laws.  With ``h=None`` each site
    is read at its first cone time only, which by the Markov property carries
    all the dependence of its cone cells on the past.
    """
    if h is None:
        slices = [cone_slice(spec, s) for s in range(t, t + CONE_SEARCH)]
        firsts = {x: next((t + j for j, sl in enumerate(slices) if x in sl), None) for x in start}
        slices = None
    else:
        slices = [cone_slice(spec, s) for s in range(t, t + h)]
    E = law.alphabet_size
    joint = np.ones(1)
    for x in sorted(start):
        if slices is None:
            times = [firsts[x]] if firsts[x] is not None else []
        else:
            times = [t + j for j, sl in enumerate(slices) if x in sl]
        if not times:
            continue
        path = start[x] @ np.linalg.matrix_power(law.Q, times[0])
        for a, b in zip(times, times[1:]):
            step = np.linalg.matrix_power(law.Q, b - a)
            path = (path[:, None] * step[np.arange(path.size) % E]).reshape(-1)
        joint = np.multiply.outer(joint, path).reshape(-1)
    return joint


def _phi_tilde_sites(law: SiteChain, spec, t, k_max, h) -> MixingEstimate:
    best = 0.0
    events = _events(law, spec, k_max)
    for ev in events:
        cond = site_chain_time0_laws(law, spec, ev)
        base = {x: law.stationary for x in cond}
        best = max(best, tv(_site_window(law, spec, cond, t, h), _site_window(law, spec, base, t, h)))
    return MixingEstimate("phi_tilde", t, best, "exact",
                          {"k_max": k_max, "h": h, "events": len(events), "reason": "product over sites"})


def _cone_cells(spec, t, h):
    return [SpaceTimeCell(x, s) for s in range(t, t + h) for x in sorted(cone_slice(spec, s))]


def _window_codes(real, cells_by_h):
    """Codes of the cone window truncated at each depth ``h' = 1..h``."""
    codes, code = [], 0
    for cells in cells_by_h:
        for c in cells:
            code = code * real.law.alphabet_size + real.read(c)
        codes.append(code)
    return codes


def _holdout_lower_bound(groups: dict, pooled: np.ndarray, half: np.ndarray):
    """Best ``(D - 3 SE)`` over groups, with ``B`` chosen on the other half.

    ``groups`` maps a candidate to the indices of its samples; ``pooled``
    holds the window code of every sample in the block.
    """
    best, best_se = 0.0, None
    sel_all, est_all = pooled[~half], pooled[half]
    for idx in groups.values():
        sel = idx[~half[idx]]
        est = idx[half[idx]]
        if len(sel) < MIN_GROUP or len(est) < MIN_GROUP:
            continue
        vals_a, cnt_a = np.unique(pooled[sel], return_counts=True)
        vals_p, cnt_p = np.unique(sel_all, return_counts=True)
        fa = dict(zip(vals_a, cnt_a / len(sel)))
        fp = dict(zip(vals_p, cnt_p / len(sel_all)))
        B = np.array([v for v in set(fa) | set(fp) if fa.get(v, 0.0) > fp.get(v, 0.0)])
        if len(B) == 0:
            continue
        pa = np.isin(pooled[est], B).mean()
        pp = np.isin(est_all, B).mean()
        se = math.sqrt(_prop_var(pa, len(est)) + _prop_var(pp, len(est_all)))
        lb = (pa - pp) - Z_LOWER * se
        if lb > best:
            best, best_se = lb, se
    return best, best_se


def _phi_tilde_mc(law, spec, t, k_max, h, budget, seed, block_size) -> MixingEstimate:
    cells_by_h = [_cone_cells(spec, t + j, 1) for j in range(h)]
    best, best_se = 0.0, None
    for block in range(budget):
        for k in range(1, k_max + 1):
            events, codes = [], []
            for i in range(block_size):
                s = rng.derive(seed, block, k, i)
                ev, real = sample_history(law, spec, k, s)
                events.append((ev.path.sites, ev.patterns))
                codes.append(_window_codes(real, cells_by_h))
            codes = np.array(codes, dtype=object)
            half = (np.arange(block_size) % 2).astype(bool)
            groups = {}
            for i, key in enumerate(events):
                groups.setdefault(key, []).append(i)
            groups = {k_: np.array(v) for k_, v in groups.items()}
            for hp in range(h):
                lb, se = _holdout_lower_bound(groups, np.unique(codes[:, hp], return_inverse=True)[1], half)
                if lb > best:
                    best, best_se = lb, se
    fam = {"k_max": k_max, "h": h, "blocks": budget, "block_size": block_size,
           "selection": "holdout, value minus 3 SE"}
    return MixingEstimate("phi_tilde", t, best, "mc_lower_bound", fam, best_se, budget_exhausted=True)


# -- phi hat ---------------------------------------------------------------

def _window_code(patterns0: np.ndarray, jidx: np.ndarray, K: int, nR: int) -> np.ndarray:
    code = np.zeros(patterns0.shape[0], dtype=np.int64)
    for u in range(patterns0.shape[1]):
        code = code * (K * nR) + patterns0[:, u] * nR + jidx[:, u]
    return code


def _jump_indices(spec: ModelSpec, jumps: np.ndarray) -> np.ndarray:
    zs = spec.range_array
    return np.argmax((jumps[..., None, :] == zs).all(axis=-1), axis=-1)


def estimate_phi_hat(law, spec: ModelSpec, t: int, histories=None, h: int = 3, budget: int = 4,
                     seed: int = 0, k_max: int = 2, method: str = "auto",
                     block_size: int = BLOCK_SIZE) -> MixingEstimate:
    """``max TV`` of the LEP window ``(xi_t..xi_{t+h-1})`` over pairs of histories.

    ``histories`` is an explicit list of events (default: every
    positive-probability event of depth ``<= k_max``).  The exact method
    needs a torus or i.i.d. law; the ``mc`` method pairs ensembles of walks
    continued from sampled histories and returns a lower bound.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    check_compatible(law, spec)
    if h == 0:
        return MixingEstimate("phi_hat", t, 0.0, "exact", {"h": 0, "reason": "empty window"})
    if method == "auto":
        method = "exact" if isinstance(law, (IIDField, TorusMarkov)) else "mc"
    if method == "exact":
        if isinstance(law, IIDField):
            return MixingEstimate("phi_hat", t, 0.0, "exact",
                                  {"h": h, "reason": "posteriors are all equal under an independent field"})
        if not isinstance(law, TorusMarkov):
            raise TypeError("exact phi_hat needs a torus or i.i.d. law")
        events = list(histories) if histories is not None else _events(law, spec, k_max)
        chain = build_joint_chain(law, spec)
        Jt = np.linalg.matrix_power(chain.transition, t)
        mus = _distinct_posteriors(law, spec, events)
        W = np.array([lep_window_law(chain, mu @ Jt, 0, h) for mu in mus])
        best = max((0.5 * float(np.abs(W - W[i]).sum(axis=1).max()) for i in range(len(W))), default=0.0)
        fam = {"k_max": k_max if histories is None else None, "events": len(events),
               "distinct_posteriors": len(mus), "h": h}
        return MixingEstimate("phi_hat", t, best, "exact", fam)
    if method != "mc":
        raise ValueError(f"unknown method {method!r}")
    return _phi_hat_mc(law, spec, t, h, budget, seed, k_max, block_size)


def _phi_hat_mc(law, spec, t, h, budget, seed, k_max, block_size) -> MixingEstimate:
    K, nR = spec.K, len(spec.range)
    best, best_se = 0.0, None
    for block in range(budget):
        for k in range(1, k_max + 1):
            keys, rows = [], []
            for i in range(block_size):
                s = rng.derive(seed, block, k, i)
                ev, real = sample_history(law, spec, k, s)
                tr = run_quenched(real, spec, t + h, rng.derive(s, 1))
                keys.append((ev.path.sites, ev.patterns))
                rows.append((tr.patterns[t:] - 1, tr.jumps[t:]))
            P = np.array([r[0] for r in rows])
            J = _jump_indices(spec, np.array([r[1] for r in rows]))
            half = (np.arange(block_size) % 2).astype(bool)
            groups = {}
            for i, key in enumerate(keys):
                groups.setdefault(key, []).append(i)
            groups = [np.array(v) for v in groups.values() if len(v) >= 2 * MIN_GROUP]
            for hp in range(1, h + 1):
                codes = _window_code(P[:, :hp], J[:, :hp], K, nR)
                for g0, g1 in itertools.combinations(groups, 2):
                    for a, b in ((g0, g1), (g1, g0)):
                        lb, se = _pair_lower_bound(codes, a, b, half)
                        if lb > best:
                            best, best_se = lb, se
    fam = {"k_max": k_max, "h": h, "blocks": budget, "block_size": block_size,
           "selection": "holdout, value minus 3 SE"}
    return MixingEstimate("phi_hat", t, best, "mc_lower_bound", fam, best_se, budget_exhausted=True)


def _pair_lower_bound(codes, a, b, half):
    sa, ea = a[~half[a]], a[half[a]]
    sb, eb = b[~half[b]], b[half[b]]
    if min(len(sa), len(ea), len(sb), len(eb)) < MIN_GROUP:
        return 0.0, None
    va, ca = np.unique(codes[sa], return_counts=True)
    vb, cb = np.unique(codes[sb], return_counts=True)
    fa, fb = dict(zip(va, ca / len(sa))), dict(zip(vb, cb / len(sb)))
    B = np.array([v for v in set(fa) | set(fb) if fa.get(v, 0.0) > fb.get(v, 0.0)])
    if len(B) == 0:
        return 0.0, None
    pa, pb = np.isin(codes[ea], B).mean(), np.isin(codes[eb], B).mean()
    se = math.sqrt(_prop_var(pa, len(ea)) + _prop_var(pb, len(eb)))
    return (pa - pb) - Z_LOWER * se, se


# -- moderate-deviation check ---------------------------------------------------

@dataclass
class MDRow:
    t: int
    phi_hat: float
    stderr: float
    n: int
    phi_tilde_n: float
    bound: float
    geometric_bound: float
    margin: float

    @property
    def ok(self) -> bool:
        return self.margin >= 0


@dataclass
class MDReport:
    rows: list[MDRow]
    phi_tilde_mode: str
    phi_hat_mode: str

    @property
    def ok(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def violations(self) -> list[int]:
        return [r.t for r in self.rows if not r.ok]


def verify_md_bound(law, spec: ModelSpec, coin: CoinParams, t_grid: Iterable[int],
                    phi_tilde: str = "analytic", h: int = 3, k_max: int = 2, seed: int = 0,
                    budget: int = 4) -> MDReport:
    """Check ``phi_hat(t) <= md_bound(t) + 3 stderr`` on a grid.

    ``phi_tilde`` selects the plug-in: ``analytic`` (a proven upper bound)
    or ``exact`` (torus only, whole cone over events of depth ``<= 3``).
    """
    if phi_tilde == "analytic":
        pt = lambda n: phi_tilde_upper_bound(law, spec, n).value
    elif phi_tilde == "exact":
        pt = lambda n: exact_phi_tilde(law, spec, n)
    else:
        raise ValueError(f"unknown phi_tilde plug-in {phi_tilde!r}")
    rows, mode = [], None
    for t in t_grid:
        est = estimate_phi_hat(law, spec, int(t), h=h, k_max=k_max, seed=seed, budget=budget)
        mode = est.mode
        se = est.stderr or 0.0
        n = math.ceil(coin.c1 * math.log(t))
        bound = md_bound(t, coin.c0, coin.c1, pt)
        geo = md_bound_geometric(t, coin.c1, coin.eps, pt)
        rows.append(MDRow(int(t), est.value, se, n, pt(n), bound, geo, bound + Z_LOWER * se - est.value))
    return MDReport(rows, "analytic_upper_bound" if phi_tilde == "analytic" else "exact", mode)


# -- Cesaro limit ----------------------------------------------------------

@dataclass
class NuEstimate:
    """Law of an LEP window of depth ``h`` (codes as in the exact chain)."""

    h: int
    probabilities: np.ndarray
    stderr: np.ndarray | None
    mean_jump: np.ndarray
    mean_jump_se: np.ndarray | None
    mode: str
    k: int | None = None
    n_runs: int | None = None


def _first_jump_mean(spec, probs, h):
    nR = len(spec.range)
    codes = np.arange(len(probs))
    first = (codes // (spec.K * nR) ** (h - 1)) % nR
    return probs @ spec.range_array[first].astype(float)


def cesaro_nu(law, spec: ModelSpec, h: int = 1, k: int = 100, n_runs: int = 10_000, seed: int = 0,
              method: str = "mc") -> NuEstimate:
    """Cesaro average ``k^-1 sum_{i=1..k} P_{-i}`` of LEP window laws.

    ``mc``: one ensemble of length ``k + h``; each run contributes its window
    starting at every ``i = 1..k``; errors come from the spread of per-run
    averages.  ``exact`` (torus) returns the window law under the stationary
    law of the walker-frame chain, the ``k -> infinity`` limit.
    """
    if h < 1:
        raise ValueError("window depth must be positive")
    K, nR = spec.K, len(spec.range)
    size = (K * nR) ** h
    if method == "exact":
        if not isinstance(law, TorusMarkov):
            raise TypeError("exact Cesaro limit needs a torus law")
        chain = build_joint_chain(law, spec)
        probs = lep_window_law(chain, chain.stationary, 0, h)
        return NuEstimate(h, probs, None, _first_jump_mean(spec, probs, h), None, "exact")
    ens = simulate(spec, law, n_runs, k + h, seed, record_times=[0], keep_lep=True)
    pats = ens.patterns - 1
    jidx = _jump_indices(spec, ens.jumps)
    per_run = np.zeros((n_runs, size))
    for i in range(1, k + 1):
        codes = _window_code(pats[:, i:i + h], jidx[:, i:i + h], K, nR)
        per_run[np.arange(n_runs), codes] += 1.0
    per_run /= k
    probs = per_run.mean(axis=0)
    se = per_run.std(axis=0, ddof=1) / math.sqrt(n_runs)
    jump_per_run = per_run @ spec.range_array[(np.arange(size) // (K * nR) ** (h - 1)) % nR].astype(float)
    return NuEstimate(h, probs, se, jump_per_run.mean(axis=0),
                      jump_per_run.std(axis=0, ddof=1) / math.sqrt(n_runs), "mc", k, n_runs)
