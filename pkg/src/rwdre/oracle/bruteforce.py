"""Brute-force path enumeration on small tori.

Everything here enumerates whole environment paths (and walker jump
sequences) explicitly, in the absolute frame, without the Bayes filter or
the walker-frame chain.  It is slow on purpose and serves as an independent
check of the exact machinery in :mod:`rwdre.oracle.chain`.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np

from ..core import ModelSpec, ObservationEvent, backward_paths, cone_slice
from ..env import TorusMarkov

ROW_CAP = 1 << 23


def _paths(law: TorusMarkov, n_times: int) -> tuple[np.ndarray, np.ndarray]:
    """All state paths of length ``n_times`` from stationarity, with probabilities."""
    N = law.n_states
    if N ** n_times > ROW_CAP:
        raise ValueError("enumeration too large")
    P = law.transition_matrix
    states = np.arange(N)[:, None]
    prob = law.stationary.copy()
    for _ in range(n_times - 1):
        last = states[:, -1]
        states = np.concatenate([np.repeat(states, N, axis=0),
                                 np.tile(np.arange(N), len(states))[:, None]], axis=1)
        prob = (np.repeat(prob, N) * P[np.repeat(last, N), np.tile(np.arange(N), len(last))])
    return states, prob


def _pattern_at(law: TorusMarkov, spec: ModelSpec, states: np.ndarray, x: np.ndarray) -> np.ndarray:
    """0-based pattern read at lattice point(s) ``x`` with ``states`` (broadcast rows)."""
    x = np.asarray(x, dtype=np.int64).reshape(-1, spec.d)
    E = law.alphabet_size
    code = np.zeros(np.broadcast_shapes(states.shape, (x.shape[0],)), dtype=np.int64)
    for y in spec.delta_array:
        sym = law.configs[states, law.site_index(x + y)]
        code = code * E + sym
    return code


def _event_codes(law, spec, states, k, path_sites):
    """Mixed-radix code of the observed patterns along a depth-``k`` path."""
    code = np.zeros(len(states), dtype=np.int64)
    for j in range(k):
        pat = _pattern_at(law, spec, states[:, j], np.array(path_sites[j]))
        code = code * spec.K + pat
    return code


def _cone_codes(law, spec, states, col0, t, h):
    E = law.alphabet_size
    code = np.zeros(len(states), dtype=np.int64)
    for s in range(t, t + h):
        pts = np.array(sorted(cone_slice(spec, s)), dtype=np.int64).reshape(-1, spec.d)
        sites = np.unique(law.site_index(pts))
        for site in sites:
            code = code * E + law.configs[states[:, col0 + s], site]
    return code


def _conditionals(codes_a: np.ndarray, codes_b: np.ndarray, prob: np.ndarray) -> dict[int, np.ndarray]:
    """Map each observed ``a`` value to the conditional law of ``b``."""
    ub, inv_b = np.unique(codes_b, return_inverse=True)
    out = {}
    for a in np.unique(codes_a):
        m = codes_a == a
        mass = prob[m].sum()
        if mass > 0:
            out[int(a)] = np.bincount(inv_b[m], weights=prob[m], minlength=len(ub)) / mass
    return out


def posterior(law: TorusMarkov, spec: ModelSpec, event: ObservationEvent) -> np.ndarray:
    """``P(state at time 0 | A)`` by enumerating environment paths on ``[-k, 0]``."""
    k = event.depth
    states, prob = _paths(law, k + 1)
    keep = np.ones(len(states), dtype=bool)
    for j, pat in enumerate(event.patterns):
        keep &= _pattern_at(law, spec, states[:, j], np.array(event.path.sites[j])) == pat - 1
    w = prob * keep
    if w.sum() <= 0:
        raise ValueError("event has probability zero")
    return np.bincount(states[:, k], weights=w, minlength=law.n_states) / w.sum()


def phi_tilde(law: TorusMarkov, spec: ModelSpec, t: int, k_max: int, h: int) -> float:
    """``max_A TV(cone window | A, cone window)`` over events of depth ``<= k_max``."""
    best = 0.0
    for k in range(k_max + 1):
        states, prob = _paths(law, k + t + h)
        cone = _cone_codes(law, spec, states, k, t, h)
        base = _conditionals(np.zeros(len(states), dtype=np.int64), cone, prob)[0]
        for path in backward_paths(spec, k):
            ev = _event_codes(law, spec, states, k, path.sites)
            for cond in _conditionals(ev, cone, prob).values():
                best = max(best, 0.5 * float(np.abs(cond - base).sum()))
    return best


def _walk_paths(law, spec, k, T):
    """Environment paths on ``[-k, T-1]`` crossed with walker jump sequences."""
    states, prob = _paths(law, k + T)
    nR = len(spec.range)
    J = np.array(np.meshgrid(*[np.arange(nR)] * T, indexing="ij")).reshape(T, -1).T if T else np.zeros((1, 0), int)
    rows = len(states) * len(J)
    if rows > ROW_CAP:
        raise ValueError("enumeration too large")
    si = np.repeat(np.arange(len(states)), len(J))
    ji = np.tile(np.arange(len(J)), len(states))
    states, prob, jumps = states[si], prob[si], J[ji]
    zs = spec.range_array
    pos = np.zeros((rows, spec.d), dtype=np.int64)
    pats = np.empty((rows, T), dtype=np.int64)
    alpha = spec.kernel.rows
    for u in range(T):
        pats[:, u] = _pattern_at(law, spec, states[:, k + u], pos) if rows else 0
        prob = prob * alpha[pats[:, u], jumps[:, u]]
        pos = pos + zs[jumps[:, u]]
    return states, prob, pats, jumps


def lep_window_laws(law: TorusMarkov, spec: ModelSpec, t: int, h: int, k_max: int) -> dict:
    """Laws of ``(xi_t..xi_{t+h-1})`` given each positive-probability event.

    Keys are ``(path sites, patterns)`` with 1-based patterns.  Window codes
    use digits ``pattern * |R| + jump`` with the earliest step most significant,
    the same coding as the exact chain.
    """
    T = t + h
    nR = len(spec.range)
    laws = {}
    for k in range(k_max + 1):
        states, prob, pats, jumps = _walk_paths(law, spec, k, T)
        win = np.zeros(len(states), dtype=np.int64)
        for u in range(t, T):
            win = win * (spec.K * nR) + pats[:, u] * nR + jumps[:, u]
        size = (spec.K * nR) ** h
        for path in backward_paths(spec, k):
            ev = _event_codes(law, spec, states, k, path.sites)
            for a in np.unique(ev):
                m = ev == a
                mass = prob[m].sum()
                if mass <= 0:
                    continue
                digits = []
                rest = int(a)
                for _ in range(k):
                    rest, dgt = divmod(rest, spec.K)
                    digits.append(dgt + 1)
                key = (path.sites, tuple(reversed(digits)))
                laws[key] = np.bincount(win[m], weights=prob[m], minlength=size) / mass
    return laws


def phi_hat(law: TorusMarkov, spec: ModelSpec, t: int, h: int, k_max: int) -> float:
    """``max_{A0,A1} TV`` of the LEP window laws over events of depth ``<= k_max``."""
    laws = np.array(list(lep_window_laws(law, spec, t, h, k_max).values()))
    best = 0.0
    for i in range(len(laws)):
        best = max(best, 0.5 * float(np.abs(laws[i + 1:] - laws[i]).sum(axis=1).max(initial=0.0)))
    return best


def jump_sequence_law(law: TorusMarkov, spec: ModelSpec, event: ObservationEvent, T: int) -> dict:
    """``P(jump indices (j_0..j_{T-1}) | A)`` as a dict keyed by index tuples."""
    k = event.depth
    states, prob, pats, jumps = _walk_paths(law, spec, k, T)
    keep = np.ones(len(states), dtype=bool)
    for j, pat in enumerate(event.patterns):
        keep &= _pattern_at(law, spec, states[:, j], np.array(event.path.sites[j])) == pat - 1
    w = prob * keep
    out: dict = defaultdict(float)
    for row, wt in zip(map(tuple, jumps[w > 0]), w[w > 0]):
        out[row] += wt
    total = sum(out.values())
    return {key: val / total for key, val in out.items()}


def position_law(law: TorusMarkov, spec: ModelSpec, T: int) -> dict:
    """Annealed law of ``X_T`` from stationarity by full enumeration."""
    states, prob, pats, jumps = _walk_paths(law, spec, 0, T)
    pos = spec.range_array[jumps].sum(axis=1) if T else np.zeros((len(prob), spec.d), int)
    out: dict = defaultdict(float)
    for p, w in zip(map(tuple, pos), prob):
        out[p] += w
    return dict(out)
