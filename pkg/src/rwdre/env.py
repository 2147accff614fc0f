"""Environment laws, lazily materialised realisations and exact Bayes filters.

Three kinds of law are supported:

* ``iid_field``: every space-time cell independent with law ``p``.
* ``independent_site_chain``: each site of Z^d runs its own stationary
  Markov chain with kernel ``Q``.
* ``torus_markov``: a finite Markov chain on configurations of the discrete
  torus, used as an exact oracle.

Realisations read a cell through counter-based hashes of ``(seed, cell)``,
so the value of a cell never depends on which other cells were read first.
"""
from __future__ import annotations

import itertools
import weakref
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping

import numpy as np

from . import rng
from .core import ModelSpec, Point, SpaceTimeCell, add, as_point, pattern_from_index, pattern_indices

PROB_TOL = 1e-12
POSTERIOR_TOL = 1e-10


class InconsistentHistory(ValueError):
    """An observation has zero probability under the current posterior."""


def _prob_vector(p, name="p") -> np.ndarray:
    p = np.array(p, dtype=float)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > PROB_TOL:
        raise ValueError(f"{name} must be a probability vector")
    return p


def _stochastic(Q, name="Q") -> np.ndarray:
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise ValueError(f"{name} must be square")
    if np.any(Q < 0) or np.any(np.abs(Q.sum(axis=1) - 1.0) > PROB_TOL):
        raise ValueError(f"{name} must be row-stochastic")
    return Q


def _cumulative(p: np.ndarray) -> np.ndarray:
    c = np.cumsum(p, axis=-1)
    c[..., -1] = 1.0
    return c


def stationary_vector(P: np.ndarray) -> np.ndarray:
    """Left Perron vector of a stochastic matrix, normalised to sum 1."""
    w, v = np.linalg.eig(P.T)
    k = int(np.argmin(np.abs(w - 1.0)))
    pi = np.real(v[:, k])
    pi = pi / pi.sum()
    pi[np.abs(pi) < 1e-15] = 0.0
    return pi / pi.sum()


def dobrushin(Q: np.ndarray) -> float:
    """Dobrushin contraction coefficient ``max_ij TV(Q_i, Q_j)``."""
    Q = np.asarray(Q)
    diff = np.abs(Q[:, None, :] - Q[None, :, :]).sum(axis=-1)
    return float(0.5 * diff.max())


@dataclass(frozen=True, eq=False)
class IIDField:
    p: np.ndarray
    kind = "iid_field"

    def __post_init__(self):
        object.__setattr__(self, "p", _prob_vector(self.p))

    @property
    def alphabet_size(self) -> int:
        return len(self.p)

    @cached_property
    def cumulative(self) -> np.ndarray:
        return _cumulative(self.p)

    def symbols(self, keys, x: np.ndarray, t) -> np.ndarray:
        """Symbols of cells ``(x[r], t)`` under environment keys ``keys[r]``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.int64))
        u = rng.uniforms(keys, *[x[:, j] for j in range(x.shape[1])], t)
        return rng.inverse_cdf(self.cumulative, u)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "p": self.p.tolist()}


@dataclass(frozen=True, eq=False)
class SiteChain:
    Q: np.ndarray
    stationary: np.ndarray | None = None
    kind = "independent_site_chain"

    def __post_init__(self):
        Q = _stochastic(self.Q)
        object.__setattr__(self, "Q", Q)
        pi = stationary_vector(Q) if self.stationary is None else _prob_vector(self.stationary, "stationary")
        if np.max(np.abs(pi @ Q - pi)) > 1e-10:
            raise ValueError("stationary vector is not invariant under Q")
        object.__setattr__(self, "stationary", pi)

    @classmethod
    def flip(cls, q: float) -> "SiteChain":
        return cls(np.array([[1 - q, q], [q, 1 - q]]))

    @property
    def alphabet_size(self) -> int:
        return self.Q.shape[0]

    @cached_property
    def q_cumulative(self) -> np.ndarray:
        return _cumulative(self.Q)

    @cached_property
    def contraction(self) -> float:
        return dobrushin(self.Q)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "Q": self.Q.tolist(), "stationary": self.stationary.tolist()}


@dataclass(frozen=True, eq=False)
class TorusMarkov:
    """Markov chain on ``E^{(Z/L)^d}``.

    Either ``site_kernel`` (each site updated independently by the same
    kernel) or an explicit translation-invariant ``transition`` matrix on
    configurations must be given.  Configurations are indexed in mixed radix
    with sites in lexicographic order, the first site most significant.
    """

    L: int
    d: int
    alphabet_size: int
    site_kernel: np.ndarray | None = None
    transition: np.ndarray | None = None
    stationary_start: bool = True
    kind = "torus_markov"

    def __post_init__(self):
        if self.L < 1 or self.d < 1 or self.alphabet_size < 1:
            raise ValueError("L, d and alphabet_size must be positive")
        if (self.site_kernel is None) == (self.transition is None):
            raise ValueError("give exactly one of site_kernel or transition")
        if self.site_kernel is not None:
            Q = _stochastic(self.site_kernel, "site_kernel")
            if Q.shape[0] != self.alphabet_size:
                raise ValueError("site_kernel size must equal alphabet_size")
            object.__setattr__(self, "site_kernel", Q)
        else:
            P = _stochastic(self.transition, "transition")
            if P.shape[0] != self.n_states:
                raise ValueError(f"transition must be {self.n_states}x{self.n_states}")
            object.__setattr__(self, "transition", P)
            for z in self.sites:
                perm = self.shift_permutation(z)
                if np.max(np.abs(P[np.ix_(perm, perm)] - P)) > 1e-12:
                    raise ValueError("transition is not translation invariant on the torus")

    @classmethod
    def flip(cls, L: int, q: float, d: int = 1) -> "TorusMarkov":
        return cls(L=L, d=d, alphabet_size=2, site_kernel=np.array([[1 - q, q], [q, 1 - q]]))

    @property
    def product(self) -> bool:
        return self.site_kernel is not None

    @cached_property
    def sites(self) -> tuple[Point, ...]:
        return tuple(itertools.product(range(self.L), repeat=self.d))

    @property
    def n_sites(self) -> int:
        return self.L ** self.d

    @property
    def n_states(self) -> int:
        return self.alphabet_size ** self.n_sites

    @cached_property
    def configs(self) -> np.ndarray:
        """``(n_states, n_sites)`` table of configurations."""
        cfg = np.array(list(itertools.product(range(self.alphabet_size), repeat=self.n_sites)), dtype=np.int64)
        return cfg.reshape(self.n_states, self.n_sites)

    @cached_property
    def _radix(self) -> np.ndarray:
        E, S = self.alphabet_size, self.n_sites
        return E ** np.arange(S - 1, -1, -1, dtype=np.int64)

    def encode(self, configs: np.ndarray) -> np.ndarray:
        return np.asarray(configs, dtype=np.int64) @ self._radix

    def site_index(self, x) -> np.ndarray:
        """Index of lattice point(s) ``x`` (last axis) reduced mod ``L``."""
        x = np.mod(np.asarray(x, dtype=np.int64), self.L)
        radix = self.L ** np.arange(self.d - 1, -1, -1, dtype=np.int64)
        return x @ radix

    def shift_permutation(self, z) -> np.ndarray:
        """``perm[s]`` is the state seen after re-centring ``s`` at ``z``.

        The re-centred configuration is ``c'(x) = c(x + z)``.
        """
        z = np.asarray(as_point(z), dtype=np.int64)
        idx = self.site_index(np.array(self.sites, dtype=np.int64) + z)
        return self.encode(self.configs[:, idx])

    @cached_property
    def transition_matrix(self) -> np.ndarray:
        if not self.product:
            return self.transition
        P = np.ones((1, 1))
        for _ in range(self.n_sites):
            P = np.kron(P, self.site_kernel)
        return P

    @cached_property
    def site_stationary(self) -> np.ndarray:
        return stationary_vector(self.site_kernel)

    @cached_property
    def stationary(self) -> np.ndarray:
        if self.product:
            pi = np.ones(1)
            for _ in range(self.n_sites):
                pi = np.kron(pi, self.site_stationary)
            return pi
        return stationary_vector(self.transition_matrix)

    @cached_property
    def initial(self) -> np.ndarray:
        if self.stationary_start:
            return self.stationary
        return np.full(self.n_states, 1.0 / self.n_states)

    @cached_property
    def contraction(self) -> float:
        return dobrushin(self.site_kernel if self.product else self.transition_matrix)

    @cached_property
    def _p_cumulative(self) -> np.ndarray:
        return _cumulative(self.transition_matrix)

    @cached_property
    def _q_cumulative(self) -> np.ndarray:
        return _cumulative(self.site_kernel)

    def pattern_of_states(self, spec: ModelSpec) -> np.ndarray:
        """0-based Delta-pattern index seen by a walker at the torus origin."""
        idx = self.site_index(spec.delta_array)
        return pattern_indices(self.configs[:, idx], self.alphabet_size)

    def sample_initial(self, keys, distribution: np.ndarray | None = None) -> np.ndarray:
        keys = np.atleast_1d(keys)
        if distribution is None and self.product and self.stationary_start:
            site_cum = _cumulative(self.site_stationary)
            u = rng.uniforms(keys[:, None], rng.INIT, np.arange(self.n_sites)[None, :])
            return self.encode(rng.inverse_cdf(site_cum, u))
        dist = self.initial if distribution is None else distribution
        u = rng.uniforms(keys, rng.INIT)
        return rng.inverse_cdf(_cumulative(dist), u)

    def advance(self, states: np.ndarray, keys, t: int) -> np.ndarray:
        """One environment step from time ``t`` to ``t + 1`` (absolute frame)."""
        keys = np.atleast_1d(keys)
        states = np.atleast_1d(states)
        if self.product:
            cur = self.configs[states]
            u = rng.uniforms(keys[:, None], np.arange(self.n_sites)[None, :], t)
            return self.encode(rng.inverse_cdf(self._q_cumulative[cur], u))
        u = rng.uniforms(keys, t)
        return rng.inverse_cdf(self._p_cumulative[states], u)

    def to_dict(self) -> dict:
        doc = {"kind": self.kind, "L": self.L, "d": self.d, "alphabet_size": self.alphabet_size,
               "stationary_start": self.stationary_start}
        if self.product:
            doc["site_kernel"] = self.site_kernel.tolist()
        else:
            doc["transition"] = self.transition.tolist()
        return doc


EnvironmentLaw = IIDField | SiteChain | TorusMarkov


def law_from_dict(doc: Mapping) -> EnvironmentLaw:
    kind = doc.get("kind")
    if kind == "iid_field":
        return IIDField(np.array(doc["p"], dtype=float))
    if kind == "independent_site_chain":
        if "q" in doc:
            return SiteChain.flip(float(doc["q"]))
        st = doc.get("stationary")
        return SiteChain(np.array(doc["Q"], dtype=float), None if st is None else np.array(st, dtype=float))
    if kind == "torus_markov":
        common = dict(L=int(doc["L"]), d=int(doc.get("d", 1)),
                      stationary_start=bool(doc.get("stationary_start", True)))
        if "q" in doc:
            q = float(doc["q"])
            return TorusMarkov(alphabet_size=2, site_kernel=np.array([[1 - q, q], [q, 1 - q]]), **common)
        E = int(doc["alphabet_size"])
        if "site_kernel" in doc:
            return TorusMarkov(alphabet_size=E, site_kernel=np.array(doc["site_kernel"], dtype=float), **common)
        return TorusMarkov(alphabet_size=E, transition=np.array(doc["transition"], dtype=float), **common)
    raise ValueError(f"unknown environment kind {kind!r}")


def check_compatible(law: EnvironmentLaw, spec: ModelSpec) -> None:
    if law.alphabet_size != spec.alphabet_size:
        raise ValueError("environment alphabet does not match the model")
    if isinstance(law, TorusMarkov):
        if law.d != spec.d:
            raise ValueError("torus dimension does not match the model")
        extent = max(int(np.abs(a).max(initial=0)) for a in (spec.delta_array, spec.range_array))
        if law.L < 2 * extent + 1:
            raise ValueError(f"torus side {law.L} too small for displacements of size {extent}")


class EnvRealization:
    """A lazily materialised draw of the space-time field.

    ``site_initial`` overrides the time-``time_floor`` law of individual sites
    of a site chain; ``torus_initial`` overrides the initial torus law.  Both
    are used to realise conditioned environments.  Set ``record_reads`` to
    collect every cell that was read, in order.
    """

    def __init__(self, law: EnvironmentLaw, seed: int, time_floor: int = 0,
                 site_initial: Mapping[Point, np.ndarray] | None = None,
                 torus_initial: np.ndarray | None = None, record_reads: bool = False):
        self.law = law
        self.seed = int(seed)
        self.key = rng.derive(self.seed, rng.ENV)
        self.time_floor = int(time_floor)
        self.site_initial = {as_point(k): _prob_vector(v) for k, v in (site_initial or {}).items()}
        self.torus_initial = None if torus_initial is None else _prob_vector(torus_initial, "torus_initial")
        self.cache: dict[SpaceTimeCell, int] = {}
        self.reads: list[SpaceTimeCell] | None = [] if record_reads else None
        self._site_paths: dict[Point, list[int]] = {}
        self._torus_states: list[int] = []

    def read(self, cell: SpaceTimeCell) -> int:
        cell = SpaceTimeCell(as_point(cell[0]), int(cell[1]))
        if self.reads is not None:
            self.reads.append(cell)
        hit = self.cache.get(cell)
        if hit is not None:
            return hit
        law = self.law
        if isinstance(law, IIDField):
            sym = int(law.symbols(np.uint64(self.key), np.array([cell.x]), cell.t)[0])
        else:
            if cell.t < self.time_floor:
                raise ValueError(f"cell at time {cell.t} precedes time floor {self.time_floor}")
            if isinstance(law, SiteChain):
                sym = self._site_path(cell.x, cell.t)[cell.t - self.time_floor]
            else:
                state = self._torus_state(cell.t)
                sym = int(law.configs[state, law.site_index(np.array(cell.x))])
        self.cache[cell] = sym
        return sym

    def _site_path(self, x: Point, t: int) -> list[int]:
        law: SiteChain = self.law
        path = self._site_paths.get(x)
        if path is None:
            init = self.site_initial.get(x, law.stationary)
            u = rng.uniforms(np.uint64(self.key), rng.INIT, *x)
            path = [int(rng.inverse_cdf(_cumulative(init), u)[0])]
            self._site_paths[x] = path
        while self.time_floor + len(path) - 1 < t:
            s = self.time_floor + len(path) - 1
            u = rng.uniforms(np.uint64(self.key), *x, s)
            path.append(int(rng.inverse_cdf(law.q_cumulative[path[-1]], u)[0]))
        return path

    def _torus_state(self, t: int) -> int:
        law: TorusMarkov = self.law
        key = np.uint64(self.key)
        if not self._torus_states:
            self._torus_states.append(int(law.sample_initial(key, self.torus_initial)[0]))
        while self.time_floor + len(self._torus_states) - 1 < t:
            s = self.time_floor + len(self._torus_states) - 1
            self._torus_states.append(int(law.advance(np.array([self._torus_states[-1]]), key, s)[0]))
        return self._torus_states[t - self.time_floor]

    def torus_state(self, t: int) -> int:
        """Absolute-frame torus state index at time ``t``."""
        if not isinstance(self.law, TorusMarkov):
            raise TypeError("only torus realisations have a global state")
        return self._torus_state(t)


def read_cell(real: EnvRealization, cell: SpaceTimeCell) -> int:
    return real.read(cell)


def sample_window(law: EnvironmentLaw, region: Iterable[SpaceTimeCell], seed: int,
                  time_floor: int | None = None) -> dict[SpaceTimeCell, int]:
    """Joint sample on a finite region, consistent with :func:`read_cell`."""
    cells = [SpaceTimeCell(as_point(c[0]), int(c[1])) for c in region]
    if not cells:
        return {}
    if isinstance(law, IIDField):
        key = np.uint64(rng.derive(seed, rng.ENV))
        d = len(cells[0].x)
        xs = np.array([c.x for c in cells], dtype=np.int64).reshape(len(cells), d)
        ts = np.array([c.t for c in cells], dtype=np.int64)
        syms = law.symbols(key, xs, ts)
        return {c: int(s) for c, s in zip(cells, syms)}
    floor = min(c.t for c in cells) if time_floor is None else time_floor
    real = EnvRealization(law, seed, time_floor=floor)
    return {c: real.read(c) for c in cells}


# -- exact conditionals ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class ExactConditionalCapability:
    """Filtered law of the environment seen from the walker.

    For a torus law ``posterior`` is a vector over configurations in the
    walker's frame; for an i.i.d. field the state space is trivial.
    """

    law: EnvironmentLaw
    spec: ModelSpec
    posterior: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        post = np.asarray(self.posterior, dtype=float)
        if abs(post.sum() - 1.0) > POSTERIOR_TOL:
            raise ValueError("posterior must sum to 1")
        object.__setattr__(self, "posterior", post)


@dataclass(frozen=True, eq=False)
class _TorusFilterTables:
    patterns: np.ndarray
    transition: np.ndarray
    shifts: dict


_TABLES: "weakref.WeakKeyDictionary[TorusMarkov, weakref.WeakKeyDictionary]" = weakref.WeakKeyDictionary()


def torus_tables(law: TorusMarkov, spec: ModelSpec) -> _TorusFilterTables:
    per_law = _TABLES.setdefault(law, weakref.WeakKeyDictionary())
    tab = per_law.get(spec)
    if tab is None:
        shifts = {z: law.shift_permutation(z) for z in spec.range}
        shifts[(0,) * spec.d] = np.arange(law.n_states)
        tab = _TorusFilterTables(law.pattern_of_states(spec), law.transition_matrix, shifts)
        per_law[spec] = tab
    return tab


def capability(law: EnvironmentLaw, spec: ModelSpec, posterior: np.ndarray | None = None) -> ExactConditionalCapability:
    """Unconditioned capability (stationary start) for laws that support it."""
    check_compatible(law, spec)
    if isinstance(law, IIDField):
        return ExactConditionalCapability(law, spec)
    if isinstance(law, TorusMarkov):
        if not law.stationary_start:
            raise ValueError("exact conditionals need a stationary torus law")
        post = law.stationary if posterior is None else posterior
        return ExactConditionalCapability(law, spec, np.array(post, dtype=float))
    raise TypeError(f"{law.kind} has no exact conditional capability")


def recenter(law: TorusMarkov, spec: ModelSpec, mu: np.ndarray, z) -> np.ndarray:
    perm = torus_tables(law, spec).shifts.get(as_point(z))
    if perm is None:
        perm = law.shift_permutation(z)
    out = np.empty_like(mu)
    out[..., perm] = mu
    return out


def posterior_update(cap: ExactConditionalCapability, observed_pattern_index: int,
                     walker_displacement) -> ExactConditionalCapability:
    """Condition on the observed pattern, advance one step, re-centre."""
    law, spec = cap.law, cap.spec
    if isinstance(law, IIDField):
        return cap
    if not isinstance(law, TorusMarkov):
        raise TypeError(f"{law.kind} has no exact conditional capability")
    tab = torus_tables(law, spec)
    mask = tab.patterns == int(observed_pattern_index) - 1
    w = np.where(mask, cap.posterior, 0.0)
    total = w.sum()
    if total <= 0:
        raise InconsistentHistory(f"pattern {observed_pattern_index} has zero posterior probability")
    mu = (w / total) @ tab.transition
    mu = recenter(law, spec, mu, walker_displacement)
    return ExactConditionalCapability(law, spec, mu / mu.sum())


def conditional_observation_law(cap: ExactConditionalCapability, spec: ModelSpec | None = None) -> np.ndarray:
    """Law of the Delta-pattern the walker observes next (index ``i-1``)."""
    spec = cap.spec if spec is None else spec
    law = cap.law
    if isinstance(law, IIDField):
        pats = np.array(list(itertools.product(range(law.alphabet_size), repeat=len(spec.delta))), dtype=np.int64)
        pats = pats.reshape(spec.K, len(spec.delta))
        return np.prod(law.p[pats], axis=1) if len(spec.delta) else np.ones(1)
    tab = torus_tables(law, spec)
    return np.bincount(tab.patterns, weights=cap.posterior, minlength=spec.K)


def filter_event(law: EnvironmentLaw, spec: ModelSpec, event) -> ExactConditionalCapability:
    """Posterior at time 0 (origin frame) given an observation event."""
    cap = capability(law, spec)
    incs = event.path.increments
    for pat, z in zip(event.patterns, incs):
        cap = posterior_update(cap, pat, z)
    return cap


def site_observations(spec: ModelSpec, event) -> dict[Point, list[tuple[int, int]]]:
    """Symbols pinned by an event, per site: ``site -> [(time, symbol), ...]``.

    A pattern index fixes every symbol on the window, so each observation
    pins ``|Delta|`` cells exactly.
    """
    out: dict[Point, list[tuple[int, int]]] = {}
    for site, t, pat in event.observations():
        syms = pattern_from_index(pat, spec.alphabet_size, len(spec.delta))
        for y, s in zip(spec.delta, syms):
            out.setdefault(add(site, y), []).append((t, int(s)))
    return out


def site_chain_time0_laws(law: SiteChain, spec: ModelSpec, event) -> dict[Point, np.ndarray]:
    """Exact time-0 law of every site touched by ``event`` under a site chain.

    Sites are independent a priori and every observation pins a symbol, so by
    the Markov property a site's law at time 0 is row ``v`` of ``Q^r`` where
    ``v`` is its last observed symbol, ``r`` steps before time 0.
    """
    laws = {}
    for x, obs in site_observations(spec, event).items():
        obs = sorted(obs)
        if obs[0][1] >= law.alphabet_size or law.stationary[obs[0][1]] <= 0:
            raise InconsistentHistory(f"symbol at site {x} has zero stationary mass")
        for (t0, a), (t1, b) in zip(obs, obs[1:]):
            if np.linalg.matrix_power(law.Q, t1 - t0)[a, b] <= 0:
                raise InconsistentHistory(f"observations at site {x} are incompatible")
        t_last, v = obs[-1]
        laws[x] = np.linalg.matrix_power(law.Q, -t_last)[v]
    return laws


class ShiftedRealization:
    """View of a realisation re-centred at ``offset`` (spatial shift only)."""

    def __init__(self, real: EnvRealization, offset: Point):
        self.base = real
        self.offset = as_point(offset)
        self.law = real.law

    def read(self, cell) -> int:
        x = tuple(a + b for a, b in zip(as_point(cell[0]), self.offset))
        return self.base.read(SpaceTimeCell(x, int(cell[1])))
