"""Epsilon-coin couplings of walks started from two conditioned environments.

Condition b: with probability ``eps`` the walker jumps to ``z_star`` whatever
it sees, otherwise it follows the residual kernel.  Conditioned on the coin
succeeding ``n`` times in a row from the start, two walks sharing the coin
and jump noise stay together for ``n`` steps and learn nothing about the
environment meanwhile.

Condition a: with probability ``eps`` the observed pattern is hidden behind a
placeholder ``?`` and the jump is drawn from the pattern-averaged kernel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from . import rng
from .core import JumpKernel, ModelSpec, ObservationEvent, Point, SpaceTimeCell, add, as_point, origin
from .env import (
    EnvRealization,
    IIDField,
    InconsistentHistory,
    SiteChain,
    TorusMarkov,
    capability,
    check_compatible,
    conditional_observation_law,
    filter_event,
    site_chain_time0_laws,
    torus_tables,
)
from .walk import EllipticityReport, Trajectory, ellipticity_report, read_pattern, sample_history

REJECTION_BUDGET = 1_000_000
_REJECT_CHUNK = 4096

V_JUMP = rng.tag("coin-v")
V_PATTERN = rng.tag("coin-v-pattern")
ENV_PAIR = rng.tag("env-pair")
ENV_PATH = rng.tag("env-path")
ENV_STEP = rng.tag("env-step")
HISTORIES = rng.tag("histories")


class CouplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoinParams:
    eps: float
    z_star: Point | None = None
    c1: float | None = None

    def __post_init__(self):
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")
        if self.z_star is not None:
            object.__setattr__(self, "z_star", as_point(self.z_star))
        c1 = (2 * self.c0 if self.c0 > 0 else 1.0) if self.c1 is None else float(self.c1)
        if not c1 > self.c0:
            raise ValueError("c1 must exceed c0 = ln(1/eps)")
        object.__setattr__(self, "c1", c1)

    @property
    def c0(self) -> float:
        return -math.log(self.eps)

    @classmethod
    def for_condition_b(cls, spec: ModelSpec, eps: float | None = None, c1: float | None = None,
                        report: EllipticityReport | None = None) -> "CoinParams":
        """Coin on the reported ``z`` with, by default, the largest valid bias."""
        report = ellipticity_report(spec) if report is None else report
        coin = cls(report.eps_b if eps is None else eps, report.argmax_z, c1)
        coin.check_condition_b(spec)
        return coin

    def check_condition_b(self, spec: ModelSpec) -> None:
        if self.z_star is None or self.z_star not in spec.range:
            raise ValueError("z_star must be an element of the range")
        floor = spec.kernel.rows[:, spec.range.index(self.z_star)].min()
        if self.eps > floor + 1e-15:
            raise ValueError(f"eps={self.eps} exceeds min_i alpha(i, z_star)={floor}")

    def check_condition_a(self, spec: ModelSpec, eps_a: float) -> None:
        if spec.K > 1 and not self.eps < 1.0 / spec.K:
            raise ValueError(f"eps must be below 1/K = {1.0 / spec.K}")
        if not self.eps < eps_a:
            raise ValueError(f"eps={self.eps} is not below the conditional pattern floor {eps_a}")


@dataclass
class CoinRecord:
    U: np.ndarray
    V: np.ndarray
    tau_n: int | None


@dataclass
class CoupledRun:
    histories: tuple[ObservationEvent, ObservationEvent]
    trajectories: tuple[Trajectory, Trajectory]
    n: int
    tau_n: int | None
    first_disagreement_after: int | None
    env_coupled_ok: bool
    coupling_optimal: bool = True
    coins: CoinRecord | None = field(default=None, repr=False)
    run_id: int = 0

    @property
    def disagreed(self) -> bool:
        return self.first_disagreement_after is not None


# -- the coin ---------------------------------------------------------------

def epsilon_decomposition(kernel: JumpKernel | ModelSpec, z_star, eps: float) -> JumpKernel:
    """Residual kernel ``(alpha(i, y) - eps 1{y = z_star}) / (1 - eps)``.

    ``z_star`` is a range element when ``kernel`` is a :class:`ModelSpec`,
    otherwise a column index.  With ``eps = 1`` the residual is never used
    and the original kernel is returned.
    """
    if isinstance(kernel, ModelSpec):
        j = kernel.range.index(as_point(z_star))
        kernel = kernel.kernel
    else:
        j = int(z_star)
    rows = kernel.rows
    if eps < 0 or eps > rows[:, j].min() + 1e-15:
        raise ValueError(f"eps={eps} violates eps <= min_i alpha(i, z_star)={rows[:, j].min()}")
    if eps == 1:
        return kernel
    res = rows.copy()
    res[:, j] -= eps
    res = np.clip(res, 0.0, None) / (1.0 - eps)
    res /= res.sum(axis=1, keepdims=True)
    return JumpKernel(res)


def tau_n(U, eps: float, n: int, cap: int | None = None) -> int | None:
    """First ``t >= n`` with ``U_s <= eps`` for the ``n`` indices ending at ``t``.

    ``U`` lists ``U_1, U_2, ...`` or is a callable ``t -> U_t`` extended on
    demand.  Returns ``None`` when ``cap`` (or a finite ``U``) runs out.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    source = (U(t) for t in _count(1)) if callable(U) else iter(U)
    run = 0
    for t, u in enumerate(source, start=1):
        if cap is not None and t > cap:
            return None
        run = run + 1 if u <= eps else 0
        if run >= n:
            return t
    return None


def _count(start):
    t = start
    while True:
        yield t
        t += 1


def coin_keys(seed: int, run_ids) -> np.ndarray:
    return rng.stream_keys(rng.run_keys(seed, run_ids), rng.COIN)


def tau_n_batch(seed: int, eps: float, n: int, cap: int, n_runs: int, first_run: int = 0) -> np.ndarray:
    """``tau_n`` for many independent coin streams; ``-1`` marks ``> cap``."""
    keys = coin_keys(seed, np.arange(first_run, first_run + n_runs))
    out = np.full(n_runs, -1, dtype=np.int64)
    run = np.zeros(n_runs, dtype=np.int64)
    for t in range(1, cap + 1):
        u = rng.uniforms(keys, t)
        run = np.where(u <= eps, run + 1, 0)
        hit = (run >= n) & (out < 0)
        out[hit] = t
        if (out >= 0).all():
            break
    return out


def tau_tail_bound(eps: float, n: int, t) -> np.ndarray:
    """Geometric comparison ``(1 - eps^n)^floor(t / n)``."""
    return (1.0 - eps ** n) ** np.floor(np.asarray(t) / n)


def md_bound(t: float, c0: float, c1: float, phi_tilde: Callable[[int], float]) -> float:
    """``phi_tilde(ceil(c1 ln t)) + 2 exp(-t^(1 - c0/c1) / (c1 ln t))``."""
    if not c1 > c0 > 0:
        raise ValueError("need c1 > c0 > 0")
    if t < 2:
        raise ValueError("need t >= 2")
    lt = math.log(t)
    n = math.ceil(c1 * lt)
    return float(phi_tilde(n)) + 2.0 * math.exp(-t ** (1.0 - c0 / c1) / (c1 * lt))


def md_bound_geometric(t: int, c1: float, eps: float, phi_tilde: Callable[[int], float]) -> float:
    """Same split with the unsimplified tail ``(1 - eps^n)^floor(t/n)``, ``n = ceil(c1 ln t)``."""
    n = max(1, math.ceil(c1 * math.log(t)))
    return float(phi_tilde(n)) + 2.0 * float(tau_tail_bound(eps, n, t))


def maximal_coupling(p: np.ndarray, q: np.ndarray, u: Sequence[float]) -> tuple[int, int]:
    """Draw ``(i, j)`` from a maximal coupling of ``p`` and ``q`` with three uniforms."""
    p, q = np.asarray(p, float), np.asarray(q, float)
    m = np.minimum(p, q)
    overlap = m.sum()
    if u[0] < overlap or overlap >= 1 - 1e-15:
        i = int(rng.inverse_cdf(_cum(m / overlap), np.array([u[1]]))[0])
        return i, i
    rp, rq = p - m, q - m
    i = int(rng.inverse_cdf(_cum(rp / rp.sum()), np.array([u[1]]))[0])
    j = int(rng.inverse_cdf(_cum(rq / rq.sum()), np.array([u[2]]))[0])
    return i, j


def maximal_coupling_batch(p: np.ndarray, q: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`maximal_coupling`; ``u`` is ``(R, 3)``."""
    m = np.minimum(p, q)
    overlap = m.sum(axis=1)
    same = (u[:, 0] < overlap) | (overlap >= 1 - 1e-15)
    with np.errstate(invalid="ignore", divide="ignore"):
        common = _cum(m / overlap[:, None])
        rp = p - m
        rq = q - m
        rp = _cum(rp / rp.sum(axis=1, keepdims=True))
        rq = _cum(rq / rq.sum(axis=1, keepdims=True))
    c = rng.inverse_cdf(np.nan_to_num(common, nan=1.0), u[:, 1])
    i = np.where(same, c, rng.inverse_cdf(np.nan_to_num(rp, nan=1.0), u[:, 1]))
    j = np.where(same, c, rng.inverse_cdf(np.nan_to_num(rq, nan=1.0), u[:, 2]))
    return i, j


def _cum(p):
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


def condition_on_tau(coin_key: int, eps: float, n: int, budget: int = REJECTION_BUDGET) -> int:
    """Index of the first coin attempt whose ``U_1..U_n`` are all ``<= eps``."""
    key = np.uint64(coin_key)
    steps = np.arange(1, n + 1)[None, :]
    for start in range(0, budget, _REJECT_CHUNK):
        r = np.arange(start, min(budget, start + _REJECT_CHUNK))
        ok = (rng.uniforms(key, r[:, None], steps) <= eps).all(axis=1)
        if ok.any():
            return int(r[np.argmax(ok)])
    raise CouplingError(f"no coin attempt satisfied tau_n = n within {budget} rejections")


# -- Condition b ------------------------------------------------------------

class _ConeWindow:
    """Law of the environment on the cone from time ``n``, for a torus.

    Window ``W`` = cone projections at times ``n..m-1`` plus the full
    configuration at ``m``, the first time the cone section covers the torus.
    By the Markov property ``W`` determines the law of everything the two
    walks can read from time ``n`` on, so an optimal coupling of ``W`` is an
    optimal coupling on the cone.  Without a covering time the full state at
    ``n`` is coupled instead (valid, not optimal).
    """

    def __init__(self, law: TorusMarkov, spec: ModelSpec, n: int):
        from .oracle.chain import cone_cover_time, cone_sites

        self.law, self.n = law, n
        cover = cone_cover_time(law, spec, n)
        self.optimal = cover is not None
        self.m = n if cover is None else cover
        E = law.alphabet_size
        self.codes, self.sizes = [], []
        for s in range(n, self.m):
            sites = cone_sites(law, spec, s)
            radix = E ** np.arange(len(sites) - 1, -1, -1, dtype=np.int64)
            self.codes.append(law.configs[:, sites] @ radix)
            self.sizes.append(E ** len(sites))
        self.P = law.transition_matrix

    def law_of(self, mu: np.ndarray) -> np.ndarray:
        rho = np.asarray(mu, float)
        for _ in range(self.n):
            rho = rho @ self.P
        W = rho[None, :]
        for codes, size in zip(self.codes, self.sizes):
            W = np.stack([np.where(codes == c, W, 0.0) for c in range(size)], axis=1).reshape(-1, len(rho))
            W = W @ self.P
        return W.reshape(-1)

    def sample_path(self, mu: np.ndarray, w: int, u: np.ndarray) -> np.ndarray:
        """States at times ``0..m`` given ``W = w`` (backward sampling)."""
        N = self.law.n_states
        last = w % N
        prefix = w // N
        digits = []
        for size in reversed(self.sizes):
            prefix, c = divmod(prefix, size)
            digits.append(c)
        digits.reverse()
        fwd = [np.asarray(mu, float)]
        for t in range(1, self.m + 1):
            f = fwd[-1]
            if t - 1 >= self.n:
                f = np.where(self.codes[t - 1 - self.n] == digits[t - 1 - self.n], f, 0.0)
                fwd[-1] = f
            fwd.append(f @ self.P)
        states = np.empty(self.m + 1, dtype=np.int64)
        states[self.m] = last
        for t in range(self.m - 1, -1, -1):
            wts = fwd[t] * self.P[:, states[t + 1]]
            states[t] = int(rng.inverse_cdf(_cum(wts / wts.sum()), np.array([u[t]]))[0])
        return states


@lru_cache(maxsize=64)
def _cone_window(law: TorusMarkov, spec: ModelSpec, n: int) -> _ConeWindow:
    return _ConeWindow(law, spec, n)


class _TorusSide:
    def __init__(self, law: TorusMarkov, spec: ModelSpec, states: np.ndarray, step_key: int):
        self.law, self.spec = law, spec
        self.states = [int(s) for s in states]
        self.key = np.uint64(step_key)
        self._delta_sites = spec.delta_array

    def pattern(self, x: Point, t: int) -> int:
        while len(self.states) <= t:
            s = len(self.states) - 1
            self.states.append(int(self.law.advance(np.array([self.states[-1]]), self.key, s)[0]))
        idx = self.law.site_index(np.asarray(x) + self._delta_sites)
        code = 0
        for sym in self.law.configs[self.states[t], idx]:
            code = code * self.law.alphabet_size + int(sym)
        return code + 1


class _RealizationSide:
    def __init__(self, real, spec: ModelSpec):
        self.real, self.spec = real, spec

    def pattern(self, x: Point, t: int) -> int:
        return read_pattern(self.real, self.spec, x, t)


def _histories(histories, run_key: int):
    if callable(histories):
        return histories(rng.derive(run_key, HISTORIES))
    a0, a1 = histories
    return a0, a1


def history_pair_sampler(law, spec: ModelSpec, k: int) -> Callable[[int], tuple]:
    """Two independent histories of depth ``k``, sampled by running the walk."""
    def sample(seed: int):
        return sample_history(law, spec, k, rng.derive(seed, 0))[0], sample_history(law, spec, k, rng.derive(seed, 1))[0]
    return sample


def coupled_pair_b(law, spec: ModelSpec, histories, n: int, T: int, seed: int,
                   coin: CoinParams | None = None, run_id: int = 0,
                   budget: int = REJECTION_BUDGET) -> CoupledRun:
    """One Condition-b coupled pair, conditioned on ``tau_n = n``.

    Both walks share the coin ``U`` and jump noise ``V``; the two conditioned
    environments are coupled on the cone from time ``n``.  Records the first
    time ``t >= n`` (``t < T``) at which the two local environment processes
    differ.
    """
    check_compatible(law, spec)
    coin = CoinParams.for_condition_b(spec) if coin is None else coin
    coin.check_condition_b(spec)
    if T < n:
        raise ValueError("horizon T must be at least n")
    run_key = rng.derive(seed, run_id)
    a0, a1 = _histories(histories, run_key)
    ckey = rng.derive(run_key, rng.COIN)
    attempt = condition_on_tau(ckey, coin.eps, n, budget)
    steps = np.arange(1, T + 1)
    U = rng.uniforms(np.uint64(ckey), attempt, steps)
    V = rng.uniforms(np.uint64(ckey), attempt, V_JUMP, steps)
    sides, env_ok, optimal = _coupled_environments(law, spec, (a0, a1), n, run_key)

    residual = epsilon_decomposition(spec, coin.z_star, coin.eps)
    zi = spec.range.index(coin.z_star)
    trajs, leps = [], []
    for side in sides:
        x = origin(spec.d)
        pos, pats, jumps = [x], [], []
        for t in range(T):
            i = side.pattern(x, t)
            if U[t] <= coin.eps:
                j = zi
            else:
                j = int(rng.inverse_cdf(residual.cumulative[i - 1], np.array([V[t]]))[0])
            pats.append(i)
            jumps.append(spec.range[j])
            x = add(x, spec.range[j])
            pos.append(x)
        trajs.append(Trajectory(np.array(pos).reshape(T + 1, spec.d), np.array(pats, dtype=np.int64),
                                np.array(jumps, dtype=np.int64).reshape(T, spec.d), run_id))
    diff = (trajs[0].patterns != trajs[1].patterns) | (trajs[0].jumps != trajs[1].jumps).any(axis=1)
    diff[:n] = False
    first = int(np.argmax(diff)) if diff.any() else None
    return CoupledRun((a0, a1), (trajs[0], trajs[1]), n, tau_n(U, coin.eps, n), first, env_ok,
                      optimal, CoinRecord(U, V, tau_n(U, coin.eps, n)), run_id)


def coin_step_rule(spec: ModelSpec, coin: CoinParams):
    """Jump rule of the coin walk for :func:`rwdre.walk.simulate`.

    Step ``t`` reads ``U_{t+1}`` and ``V_{t+1}`` from the run's coin stream
    (the stream :func:`tau_n_batch` reads):
    ``z_star`` when ``U <= eps``, else a residual-kernel draw from ``V``.
    """
    coin.check_condition_b(spec)
    residual = epsilon_decomposition(spec, coin.z_star, coin.eps)
    zi = spec.range.index(coin.z_star)

    def rule(pat, t, run_keys):
        ckeys = rng.stream_keys(run_keys, rng.COIN)
        U = rng.uniforms(ckeys, t + 1)
        V = rng.uniforms(ckeys, V_JUMP, t + 1)
        j = rng.inverse_cdf(residual.cumulative[pat], V)
        return np.where(U <= coin.eps, zi, j)

    return rule


def coin_walk(spec: ModelSpec, law, n_runs: int, T: int, seed: int, coin: CoinParams | None = None,
              record_times=None, first_run: int = 0):
    """Unconditioned coin walk; its annealed law is the plain walk law."""
    from .walk import simulate

    coin = CoinParams.for_condition_b(spec) if coin is None else coin
    return simulate(spec, law, n_runs, T, seed, record_times=record_times, first_run=first_run,
                    step_rule=coin_step_rule(spec, coin))


def _coupled_environments(law, spec, events, n, run_key):
    """Two environment readers coupled on the cone from time ``n``."""
    env_key = rng.derive(run_key, rng.ENV)
    if isinstance(law, IIDField):
        real = EnvRealization(law, env_key)
        return (_RealizationSide(real, spec), _RealizationSide(real, spec)), True, True
    if isinstance(law, TorusMarkov):
        cw = _cone_window(law, spec, n)
        mus = [filter_event(law, spec, ev).posterior for ev in events]
        laws = [cw.law_of(mu) for mu in mus]
        u = rng.uniforms(np.uint64(env_key), ENV_PAIR, np.arange(3))
        w0, w1 = maximal_coupling(laws[0], laws[1], u)
        step_key = rng.derive(env_key, ENV_STEP)
        sides = []
        for side, (mu, w) in enumerate(zip(mus, (w0, w1))):
            up = rng.uniforms(np.uint64(env_key), ENV_PATH, side, np.arange(cw.m + 1))
            sides.append(_TorusSide(law, spec, cw.sample_path(mu, w, up), step_key))
        return tuple(sides), w0 == w1, cw.optimal
    if isinstance(law, SiteChain):
        l0, l1 = (site_chain_time0_laws(law, spec, ev) for ev in events)
        inits = ({}, {})
        for idx, x in enumerate(sorted(set(l0) | set(l1))):
            p = l0.get(x, law.stationary)
            q = l1.get(x, law.stationary)
            u = rng.uniforms(np.uint64(env_key), ENV_PAIR, idx, np.arange(3))
            a, b = maximal_coupling(p, q, u)
            inits[0][x] = np.eye(law.alphabet_size)[a]
            inits[1][x] = np.eye(law.alphabet_size)[b]
        reals = [EnvRealization(law, env_key, time_floor=0, site_initial=init) for init in inits]
        ok = all(reals[0].read(SpaceTimeCell(x, n)) == reals[1].read(SpaceTimeCell(x, n)) for x in inits[0])
        return tuple(_RealizationSide(r, spec) for r in reals), ok, False
    raise TypeError(f"unsupported law {law!r}")


def coupled_pairs_b(law, spec: ModelSpec, histories, n: int, T: int, seed: int, n_runs: int,
                    coin: CoinParams | None = None, first_run: int = 0) -> list[CoupledRun]:
    return [coupled_pair_b(law, spec, histories, n, T, seed, coin, run_id=r)
            for r in range(first_run, first_run + n_runs)]


# -- Condition a ------------------------------------------------------------

@dataclass
class ConditionABatch:
    """Vectorised Condition-a runs; arrays have one row per run.

    ``hidden`` marks steps whose pattern was replaced by ``?``.  Jump arrays
    hold range indices; ``-1`` in ``first_disagreement_after`` means none.
    """

    jumps: tuple[np.ndarray, np.ndarray]
    patterns: tuple[np.ndarray, np.ndarray]
    hidden: np.ndarray
    tau_n: np.ndarray
    first_disagreement_after: np.ndarray
    env_coupled_ok: np.ndarray


class _FilterBackend:
    """Walker-frame Bayes filter, batched over runs."""

    def __init__(self, law, spec: ModelSpec):
        self.spec = spec
        self.alpha = spec.kernel.rows
        self.alpha_q = self.alpha.mean(axis=0)
        if isinstance(law, IIDField):
            self.trivial = True
            self.pattern_law = conditional_observation_law(capability(law, spec), spec)
            self.n_states = 1
        elif isinstance(law, TorusMarkov):
            from .oracle.chain import build_joint_chain

            self.trivial = False
            chain = build_joint_chain(law, spec)
            self.patterns = chain.patterns
            self.onehot = np.eye(spec.K)[chain.patterns]
            self.steps = chain.steps
            self.steps_cum = _cum(chain.steps)
            self.n_states = chain.n_states
        else:
            raise TypeError(f"{law.kind} has no exact conditional capability")

    def observation_law(self, mu: np.ndarray) -> np.ndarray:
        if self.trivial:
            return np.broadcast_to(self.pattern_law, (mu.shape[0], self.spec.K))
        return mu @ self.onehot

    def update(self, mu, hidden, pattern, jump):
        """Posterior after one step; ``pattern`` is ignored where ``hidden``."""
        if self.trivial:
            return mu
        obs = mu @ self.onehot
        pat_s = self.patterns[None, :]
        lik_hidden = self.alpha[pat_s, jump[:, None]] / (
            obs[:, self.patterns] * self.alpha[:, jump].sum(axis=0)[:, None])
        lik_shown = (pat_s == pattern[:, None]) / obs[np.arange(len(mu)), pattern][:, None]
        w = mu * np.where(hidden[:, None], lik_hidden, lik_shown)
        w /= w.sum(axis=1, keepdims=True)
        out = np.empty_like(w)
        for j in range(len(self.spec.range)):
            m = jump == j
            if m.any():
                out[m] = w[m] @ self.steps[j]
        return out / out.sum(axis=1, keepdims=True)


def coupled_pair_a(law, spec: ModelSpec, histories, n: int, T: int, seed: int,
                   coin: CoinParams, n_runs: int = 1, first_run: int = 0,
                   check: bool = True) -> ConditionABatch:
    """Condition-a construction for ``n_runs`` coupled pairs (vectorised).

    Before ``tau_n`` each step either hides its pattern (coin ``U <= eps``,
    jump from the averaged kernel) or draws the pattern from the tilted
    conditional ``(p_i - eps/K) / (1 - eps)`` and jumps by ``alpha(i, .)``.
    The filter is updated with the exact posterior of each step, including
    the information a hidden step's jump carries.  At ``tau_n`` the
    walker-frame states of the pair are drawn from a maximal coupling of the
    two posteriors and both walks continue as plain quenched walks sharing
    jump noise.  Averaged over the coin the jump process has exactly the
    conditioned law of the original walk.
    """
    backend = _FilterBackend(law, spec)
    K, nR = spec.K, len(spec.range)
    if check:
        cap0 = capability(law, spec)
        depth = 0 if backend.trivial else 4
        coin.check_condition_a(spec, ellipticity_report(spec, cap0, depth=depth).eps_a)
    ids = np.arange(first_run, first_run + n_runs)
    run_keys = rng.run_keys(seed, ids)
    ckeys = rng.stream_keys(run_keys, rng.COIN)
    ekeys = rng.stream_keys(run_keys, rng.ENV)
    if callable(histories):
        pairs = [histories(rng.derive(int(k), HISTORIES)) for k in run_keys]
    else:
        pairs = [tuple(histories)] * n_runs
    mu = []
    for side in (0, 1):
        if backend.trivial:
            mu.append(np.ones((n_runs, 1)))
        else:
            cache = {}
            rows = []
            for pr in pairs:
                ev = pr[side]
                if id(ev) not in cache:
                    cache[id(ev)] = filter_event(law, spec, ev).posterior
                rows.append(cache[id(ev)])
            mu.append(np.array(rows))
    jumps = [np.zeros((n_runs, T), dtype=np.int64) for _ in range(2)]
    pats = [np.zeros((n_runs, T), dtype=np.int64) for _ in range(2)]
    hidden = np.zeros((n_runs, T), dtype=bool)
    tau = np.full(n_runs, -1, dtype=np.int64)
    run = np.zeros(n_runs, dtype=np.int64)
    state = [np.zeros(n_runs, dtype=np.int64) for _ in range(2)]
    coupled = np.zeros(n_runs, dtype=bool)
    env_ok = np.zeros(n_runs, dtype=bool)
    cum_q = _cum(backend.alpha_q)
    for t in range(T):
        u = rng.uniforms(ckeys, t + 1)
        v1 = rng.uniforms(ckeys, V_PATTERN, t + 1)
        v2 = rng.uniforms(ckeys, V_JUMP, t + 1)
        active = ~coupled
        hide = (u <= coin.eps) & active
        hidden[:, t] = hide
        for side in (0, 1):
            obs = backend.observation_law(mu[side])
            tilt = np.clip(obs - coin.eps / K, 0.0, None) / (1.0 - coin.eps)
            pat = rng.inverse_cdf(_cum(tilt / tilt.sum(axis=1, keepdims=True)), v1)
            jmp = np.where(hide, rng.inverse_cdf(cum_q, v2), rng.inverse_cdf(spec.kernel.cumulative[pat], v2))
            if backend.trivial:
                # reconstruct a hidden pattern from alpha(i, y) / sum_l alpha(l, y)
                post = backend.alpha[:, jmp].T / backend.alpha[:, jmp].sum(axis=0)[:, None]
                pat = np.where(hide, rng.inverse_cdf(_cum(post), v1), pat)
            if not backend.trivial and coupled.any():
                s = state[side]
                pq = backend.patterns[s]
                jq = rng.inverse_cdf(spec.kernel.cumulative[pq], v2)
                pat = np.where(coupled, pq, pat)
                jmp = np.where(coupled, jq, jmp)
                ue = rng.uniforms(ekeys, ENV_STEP, t)
                nxt = rng.inverse_cdf(backend.steps_cum[jq, s], ue)
                state[side] = np.where(coupled, nxt, s)
            elif backend.trivial and coupled.any():
                fresh = rng.inverse_cdf(_cum(backend.pattern_law), rng.uniforms(ekeys, ENV_STEP, t))
                jq = rng.inverse_cdf(spec.kernel.cumulative[fresh], v2)
                pat = np.where(coupled, fresh, pat)
                jmp = np.where(coupled, jq, jmp)
            if active.any() and not backend.trivial:
                new_mu = backend.update(mu[side][active], hide[active], pat[active], jmp[active])
                mu[side][active] = new_mu
            pats[side][:, t] = pat
            jumps[side][:, t] = jmp
        run = np.where(u <= coin.eps, run + 1, 0)
        start = active & (run >= n) & (tau < 0)
        if start.any():
            tau[start] = t + 1
            if backend.trivial:
                env_ok[start] = True
            else:
                ue = np.stack([rng.uniforms(ekeys[start], ENV_PAIR, c) for c in range(3)], axis=1)
                s0, s1 = maximal_coupling_batch(mu[0][start], mu[1][start], ue)
                state[0][start], state[1][start] = s0, s1
                env_ok[start] = s0 == s1
            coupled |= start
    diff = (pats[0] != pats[1]) | (jumps[0] != jumps[1])
    first = np.full(n_runs, -1, dtype=np.int64)
    for r in np.flatnonzero(tau >= 0):
        d = np.flatnonzero(diff[r, tau[r]:])
        if len(d):
            first[r] = tau[r] + d[0]
    return ConditionABatch((jumps[0], jumps[1]), (pats[0] + 1, pats[1] + 1), hidden, tau, first, env_ok)
