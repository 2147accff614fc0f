"""Exact computations for walks on a torus environment.

The environment seen from the walker is a finite Markov chain.  One step:
observe the pattern on Delta, jump ``z`` with probability ``alpha(i, z)``,
advance the environment kernel, re-centre at the new position.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.sparse.csgraph import connected_components

from ..core import ModelSpec, cone_slice
from ..env import TorusMarkov, check_compatible, filter_event, torus_tables

STATE_CAP = 4096
POWER_TOL = 1e-12
POWER_MAX_ITER = 1_000_000


class OracleError(ValueError):
    pass


@dataclass(eq=False)
class JointChain:
    law: TorusMarkov
    spec: ModelSpec
    patterns: np.ndarray
    steps: np.ndarray
    jump_probs: np.ndarray
    transition: np.ndarray
    stationary: np.ndarray = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.patterns)

    @cached_property
    def period(self) -> int:
        return chain_period(self.transition)

    @cached_property
    def irreducible(self) -> bool:
        n, _ = connected_components(self.transition > 0, directed=True, connection="strong")
        return n == 1

    def mean_jump(self) -> np.ndarray:
        """``(N, d)`` expected jump from each walker-frame state."""
        return self.jump_probs @ self.spec.range_array


def chain_period(P: np.ndarray) -> int:
    """Period of the communicating class of state 0 (BFS level gcd)."""
    adj = P > 0
    n = P.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    queue = [0]
    g = 0
    while queue:
        nxt = []
        for u in queue:
            for v in np.flatnonzero(adj[u]):
                if level[v] < 0:
                    level[v] = level[u] + 1
                    nxt.append(v)
                else:
                    g = math.gcd(g, int(level[u] + 1 - level[v]))
        queue = nxt
    return g if g else 1


def power_stationary(P: np.ndarray, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER,
                     period: int = 1) -> np.ndarray:
    """Power iteration from the uniform vector.

    For a periodic chain the iteration runs on the lazy kernel ``(I + P)/2``,
    which has the same invariant vectors.
    """
    n = P.shape[0]
    M = P if period == 1 else 0.5 * (np.eye(n) + P)
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ M
        nxt /= nxt.sum()
        if np.abs(nxt - pi).sum() < tol:
            return nxt
        pi = nxt
    raise OracleError("power iteration did not converge")


def build_joint_chain(law: TorusMarkov, spec: ModelSpec, state_cap: int = STATE_CAP) -> JointChain:
    if not isinstance(law, TorusMarkov):
        raise TypeError("the joint chain needs a torus_markov law")
    check_compatible(law, spec)
    if law.n_states > state_cap:
        raise OracleError(f"{law.n_states} states exceed the cap of {state_cap}")
    tab = torus_tables(law, spec)
    N = law.n_states
    P = tab.transition
    alpha = spec.kernel.rows[tab.patterns]
    steps = np.empty((len(spec.range), N, N))
    for j, z in enumerate(spec.range):
        perm = tab.shifts[z]
        steps[j] = P[:, np.argsort(perm)]
    J = np.einsum("sj,jst->st", alpha, steps)
    chain = JointChain(law, spec, tab.patterns, steps, alpha, J, np.empty(0))
    chain.stationary = power_stationary(J, period=chain.period)
    return chain


def stationary_residual(chain: JointChain) -> float:
    return float(np.abs(chain.stationary @ chain.transition - chain.stationary).max())


def exact_speed(chain: JointChain) -> np.ndarray:
    return chain.stationary @ chain.mean_jump()


def _require_ergodic(chain: JointChain) -> None:
    if not chain.irreducible:
        raise OracleError("joint chain is reducible")
    if chain.period != 1:
        raise OracleError(f"joint chain is periodic (period {chain.period})")


def exact_covariance(chain: JointChain) -> np.ndarray:
    """Asymptotic covariance ``lim Cov(X_n)/n`` of the walk (``d x d``).

    With ``f_j = z_j - v`` and ``m(s) = E[f | s]``, the Poisson solution
    ``h = (I - J + 1 pi)^{-1} m`` gives
    ``Sigma = E_pi[f f^T] + sum_s pi(s) sum_j alpha_j(s) (f_j (S_j h)(s)^T + transpose)``
    where ``S_j`` is the environment step following jump ``j``.  The
    cross term keeps the correlation between a jump and later means.
    """
    _require_ergodic(chain)
    pi = chain.stationary
    zs = chain.spec.range_array.astype(float)
    v = exact_speed(chain)
    f = zs - v
    alpha = chain.jump_probs
    m = alpha @ f
    N = chain.n_states
    A = np.eye(N) - chain.transition + np.outer(np.ones(N), pi)
    h = np.linalg.solve(A, m)
    within = np.einsum("s,sj,ja,jb->ab", pi, alpha, f, f)
    Sh = np.einsum("jst,tb->jsb", chain.steps, h)
    cross = np.einsum("s,sj,ja,jsb->ab", pi, alpha, f, Sh)
    sigma = within + cross + cross.T
    return 0.5 * (sigma + sigma.T)


def exact_asymptotic_variance(chain: JointChain, theta) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return float(theta @ exact_covariance(chain) @ theta)


def position_law(chain: JointChain, t: int, initial: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Exact annealed law of ``X_t`` for d = 1: ``(positions, probabilities)``.

    The default start is the environment's stationary law, i.e. the walk
    starts at time 0 in a stationary environment.
    """
    if chain.spec.d != 1:
        raise OracleError("position_law supports d = 1 only")
    zs = chain.spec.range_array[:, 0]
    r = int(np.abs(zs).max())
    width = 2 * r * t + 1
    W = np.zeros((width, chain.n_states))
    W[r * t] = chain.law.initial if initial is None else initial
    for _ in range(t):
        nxt = np.zeros_like(W)
        for j, z in enumerate(zs):
            moved = (W * chain.jump_probs[:, j]) @ chain.steps[j]
            nxt += np.roll(moved, int(z), axis=0)
        W = nxt
    return np.arange(-r * t, r * t + 1), W.sum(axis=1)


def lep_window_law(chain: JointChain, mu: np.ndarray, t: int, h: int) -> np.ndarray:
    """Law of ``(xi_t, ..., xi_{t+h-1})`` from walker-frame law ``mu`` at time 0.

    Window values are coded in mixed radix with digits ``pattern * |R| + jump``,
    earliest step most significant.
    """
    rho = np.asarray(mu, dtype=float)
    for _ in range(t):
        rho = rho @ chain.transition
    if h == 0:
        return np.ones(1)
    K, nR = chain.spec.K, len(chain.spec.range)
    W = rho[None, :]
    for _ in range(h):
        blocks = []
        for i in range(K):
            Wi = np.where(chain.patterns == i, W, 0.0)
            for j in range(nR):
                blocks.append((Wi * chain.jump_probs[:, j]) @ chain.steps[j])
        W = np.stack(blocks, axis=1).reshape(-1, chain.n_states)
    return W.sum(axis=1)


def tv(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def exact_phi_hat_torus(law: TorusMarkov, spec: ModelSpec, histories, t: int, h: int,
                        chain: JointChain | None = None) -> float:
    """TV distance between the window laws of the LEP under two conditionings."""
    if h == 0:
        return 0.0
    chain = build_joint_chain(law, spec) if chain is None else chain
    a0, a1 = histories
    mu0 = filter_event(law, spec, a0).posterior
    mu1 = filter_event(law, spec, a1).posterior
    return tv(lep_window_law(chain, mu0, t, h), lep_window_law(chain, mu1, t, h))


def cone_sites(law: TorusMarkov, spec: ModelSpec, s: int) -> np.ndarray:
    pts = np.array(sorted(cone_slice(spec, s)), dtype=np.int64).reshape(-1, spec.d)
    return np.unique(law.site_index(pts))


def cone_cover_time(law: TorusMarkov, spec: ModelSpec, t: int, limit: int = 64) -> int | None:
    """First time ``>= t`` at which the cone section covers the whole torus."""
    for s in range(t, t + limit):
        if len(cone_sites(law, spec, s)) == law.n_sites:
            return s
    return None


def cone_window_law(law: TorusMarkov, spec: ModelSpec, mu: np.ndarray, t: int, h: int) -> np.ndarray:
    """Law of the environment on the cone cells at times ``t..t+h-1``.

    ``mu`` is the law of the configuration at time 0 (frame centred at the
    origin).  Values are coded with earlier times most significant.
    """
    P = law.transition_matrix
    rho = np.asarray(mu, dtype=float)
    for _ in range(t):
        rho = rho @ P
    if h == 0:
        return np.ones(1)
    E = law.alphabet_size
    W = rho[None, :]
    for s in range(t, t + h):
        sites = cone_sites(law, spec, s)
        radix = E ** np.arange(len(sites) - 1, -1, -1, dtype=np.int64)
        codes = law.configs[:, sites] @ radix
        n_codes = E ** len(sites)
        blocks = [np.where(codes == c, W, 0.0) for c in range(n_codes)]
        W = np.stack(blocks, axis=1).reshape(-1, law.n_states)
        if s < t + h - 1:
            W = W @ P
    return W.sum(axis=1)
