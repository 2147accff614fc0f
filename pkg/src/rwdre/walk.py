"""Quenched walk dynamics, trajectory ensembles and the local environment process."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO

import numpy as np

from . import rng
from .core import (
    BackwardPath,
    JumpKernel,
    ModelSpec,
    ObservationEvent,
    Point,
    SpaceTimeCell,
    add,
    origin,
    pattern_index,
    pattern_indices,
    sub,
)
from .env import (
    EnvRealization,
    EnvironmentLaw,
    ExactConditionalCapability,
    IIDField,
    InconsistentHistory,
    ShiftedRealization,
    SiteChain,
    TorusMarkov,
    check_compatible,
    conditional_observation_law,
    posterior_update,
)


def step_index(kernel: JumpKernel, i, u) -> np.ndarray:
    """Range index drawn by inverse CDF for (1-based) pattern(s) ``i``."""
    i = np.asarray(i, dtype=np.int64)
    return rng.inverse_cdf(kernel.cumulative[i - 1], np.asarray(u, dtype=float))


def step(kernel: JumpKernel, i: int, u: float, spec: ModelSpec | None = None):
    """Jump for pattern ``i`` and uniform ``u``; strict-exceedance tie rule.

    Returns the range element when ``spec`` is given, else its index.
    """
    if not 1 <= int(i) <= kernel.n_patterns:
        raise ValueError(f"pattern index {i} outside 1..{kernel.n_patterns}")
    j = int(step_index(kernel, np.array([i]), np.array([u]))[0])
    return spec.range[j] if spec is not None else j


@dataclass
class Trajectory:
    positions: np.ndarray
    patterns: np.ndarray
    jumps: np.ndarray
    seed: int

    @property
    def horizon(self) -> int:
        return len(self.patterns)

    @property
    def lep(self) -> list[tuple[int, Point]]:
        return [(int(p), tuple(int(c) for c in z)) for p, z in zip(self.patterns, self.jumps)]


def read_pattern(real: EnvRealization, spec: ModelSpec, x: Point, t: int) -> int:
    syms = [real.read(SpaceTimeCell(add(x, y), t)) for y in spec.delta]
    return pattern_index(syms, spec.alphabet_size)


def run_quenched(real: EnvRealization, spec: ModelSpec, T: int, seed: int) -> Trajectory:
    """Walk for ``T`` steps in a fixed realisation; walk noise keyed by ``seed``."""
    walk_key = np.uint64(rng.derive(seed, rng.WALK))
    u_all = rng.uniforms(walk_key, np.arange(T, dtype=np.int64)) if T else np.empty(0)
    x = origin(spec.d)
    positions = [x]
    patterns, jumps = [], []
    for t in range(T):
        i = read_pattern(real, spec, x, t)
        z = spec.range[int(step_index(spec.kernel, i, u_all[t]))]
        patterns.append(i)
        jumps.append(z)
        x = add(x, z)
        positions.append(x)
    return Trajectory(
        positions=np.array(positions, dtype=np.int64).reshape(T + 1, spec.d),
        patterns=np.array(patterns, dtype=np.int64),
        jumps=np.array(jumps, dtype=np.int64).reshape(T, spec.d),
        seed=int(seed),
    )


HISTORY = rng.tag("history")


def sample_history(law: EnvironmentLaw, spec: ModelSpec, k: int, seed: int):
    """Run the walk on times ``-k..-1`` and record what it observed.

    Returns the observation event, re-centred so the walker sits at the
    origin at time 0, together with the realisation viewed from there.  The
    realisation is a sample of the environment conditioned on the event, so
    histories come with their natural weight and no rejection is needed.
    """
    real = EnvRealization(law, seed, time_floor=-k)
    key = np.uint64(rng.derive(seed, rng.WALK))
    u = rng.uniforms(key, HISTORY, np.arange(k, dtype=np.int64)) if k else np.empty(0)
    x = origin(spec.d)
    sites, pats = [x], []
    for j, t in enumerate(range(-k, 0)):
        i = read_pattern(real, spec, x, t)
        pats.append(i)
        x = add(x, spec.range[int(step_index(spec.kernel, i, u[j]))])
        sites.append(x)
    event = ObservationEvent(BackwardPath(tuple(sub(s, x) for s in sites), spec.range), tuple(pats))
    return event, ShiftedRealization(real, x)


@dataclass
class Ensemble:
    """Positions of independent runs recorded on a common time grid.

    ``positions`` is ``(n_runs, len(times), d)``.  ``patterns``/``jumps`` hold
    the full local environment process when it was kept.
    """

    times: np.ndarray
    positions: np.ndarray
    run_ids: np.ndarray
    patterns: np.ndarray | None = None
    jumps: np.ndarray | None = None
    seed: int | None = None

    @property
    def n_runs(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[2]

    @property
    def horizon(self) -> int:
        return int(self.times[-1])

    def at(self, t: int) -> np.ndarray:
        """``(n_runs, d)`` positions at time ``t`` (must be on the grid)."""
        k = np.searchsorted(self.times, t)
        if k >= len(self.times) or self.times[k] != t:
            raise KeyError(f"time {t} was not recorded")
        return self.positions[:, k, :]

    def trajectories(self) -> Iterable[Trajectory]:
        if self.patterns is None:
            raise ValueError("ensemble was recorded without the local environment process")
        for r in range(self.n_runs):
            yield Trajectory(self.positions[r], self.patterns[r], self.jumps[r], int(self.run_ids[r]))

    @classmethod
    def concat(cls, parts: Sequence["Ensemble"]) -> "Ensemble":
        keep = all(p.patterns is not None for p in parts)
        return cls(
            times=parts[0].times,
            positions=np.concatenate([p.positions for p in parts]),
            run_ids=np.concatenate([p.run_ids for p in parts]),
            patterns=np.concatenate([p.patterns for p in parts]) if keep else None,
            jumps=np.concatenate([p.jumps for p in parts]) if keep else None,
            seed=parts[0].seed,
        )


def run_seeds(master_seed: int, run_ids) -> np.ndarray:
    return rng.run_keys(master_seed, run_ids)


def simulate(spec: ModelSpec, law: EnvironmentLaw, n_runs: int, horizon: int, seed: int,
             record_times: Sequence[int] | None = None, first_run: int = 0,
             keep_lep: bool = False, torus_initial: np.ndarray | None = None,
             chunk: int = 50_000, step_rule=None) -> Ensemble:
    """Annealed ensemble: run ``r`` uses environment and walk keyed by ``derive(seed, r)``.

    Every run is bit-identical to :func:`run_quenched` on
    ``EnvRealization(law, derive(seed, r))``, regardless of batching.
    ``step_rule(patterns, t, run_keys)`` replaces the jump draw (0-based
    patterns in, range indices out); it needs an i.i.d. or torus law.
    """
    check_compatible(law, spec)
    times = np.arange(horizon + 1) if record_times is None else np.unique(np.asarray(record_times, dtype=np.int64))
    if times[0] < 0 or times[-1] > horizon:
        raise ValueError("record_times must lie in [0, horizon]")
    run_ids = np.arange(first_run, first_run + n_runs, dtype=np.int64)
    parts = []
    for lo in range(0, n_runs, chunk):
        ids = run_ids[lo:lo + chunk]
        keys = run_seeds(seed, ids)
        if isinstance(law, SiteChain):
            if step_rule is not None:
                raise TypeError("step_rule needs an i.i.d. or torus law")
            part = _simulate_loop(spec, law, keys, ids, horizon, times, keep_lep)
        else:
            part = _simulate_vectorised(spec, law, keys, ids, horizon, times, keep_lep, torus_initial,
                                        step_rule)
        part.seed = seed
        parts.append(part)
    return Ensemble.concat(parts) if len(parts) > 1 else parts[0]


def _simulate_loop(spec, law, keys, ids, horizon, times, keep_lep) -> Ensemble:
    pos = np.zeros((len(ids), len(times), spec.d), dtype=np.int64)
    pats = np.zeros((len(ids), horizon), dtype=np.int64) if keep_lep else None
    jumps = np.zeros((len(ids), horizon, spec.d), dtype=np.int64) if keep_lep else None
    for r, key in enumerate(keys):
        key = int(key)
        traj = run_quenched(EnvRealization(law, key), spec, horizon, key)
        pos[r] = traj.positions[times]
        if keep_lep:
            pats[r] = traj.patterns
            jumps[r] = traj.jumps
    return Ensemble(times, pos, ids, pats, jumps)


def _simulate_vectorised(spec, law, keys, ids, horizon, times, keep_lep, torus_initial,
                         step_rule=None) -> Ensemble:
    R, d = len(ids), spec.d
    env_keys = rng.stream_keys(keys, rng.ENV)
    walk_keys = rng.stream_keys(keys, rng.WALK)
    delta = spec.delta_array
    zs = spec.range_array
    cum = spec.kernel.cumulative
    X = np.zeros((R, d), dtype=np.int64)
    pos = np.zeros((R, len(times), d), dtype=np.int64)
    pats = np.zeros((R, horizon), dtype=np.int64) if keep_lep else None
    jumps = np.zeros((R, horizon, d), dtype=np.int64) if keep_lep else None
    torus = isinstance(law, TorusMarkov)
    if torus:
        states = law.sample_initial(env_keys, torus_initial)
    rec = 0
    for t in range(horizon + 1):
        if rec < len(times) and times[rec] == t:
            pos[:, rec, :] = X
            rec += 1
        if t == horizon:
            break
        if torus:
            syms = np.stack([law.configs[states, law.site_index(X + delta[j])]
                             for j in range(len(delta))], axis=-1)
        else:
            syms = np.stack([law.symbols(env_keys, X + delta[j], t) for j in range(len(delta))], axis=-1)
        pat = pattern_indices(syms, spec.alphabet_size) if len(delta) else np.zeros(R, dtype=np.int64)
        if step_rule is None:
            j = rng.inverse_cdf(cum[pat], rng.uniforms(walk_keys, t))
        else:
            j = step_rule(pat, t, keys)
        z = zs[j]
        if keep_lep:
            pats[:, t] = pat + 1
            jumps[:, t, :] = z
        X = X + z
        if torus:
            states = law.advance(states, env_keys, t)
    return Ensemble(times, pos, ids, pats, jumps)


# -- ellipticity --------------------------------------------------------------

@dataclass(frozen=True)
class EllipticityReport:
    eps_b: float
    argmax_z: Point
    eps_bprime: float
    eps_a: float | None = None
    eps_a_depth: int | None = None


def ellipticity_report(spec: ModelSpec, cap: ExactConditionalCapability | None = None,
                       depth: int = 4) -> EllipticityReport:
    """Exact kernel maximin/minimin, plus the history infimum when ``cap`` is given.

    ``eps_a`` is the minimum conditional pattern probability over every
    positive-probability observation history of depth ``<= depth``.
    """
    col_min = spec.kernel.rows.min(axis=0)
    best = col_min.max()
    ties = [spec.range[j] for j in range(len(spec.range)) if col_min[j] == best]
    eps_a = None
    if cap is not None:
        eps_a = _history_infimum(cap, spec, depth)
    return EllipticityReport(float(best), min(ties), float(col_min.min()), eps_a,
                             depth if cap is not None else None)


def _history_infimum(cap, spec, depth) -> float:
    lowest = np.inf
    frontier = [cap]
    for level in range(depth + 1):
        nxt = []
        for c in frontier:
            p = conditional_observation_law(c, spec)
            lowest = min(lowest, float(p.min()))
            if level == depth or isinstance(c.law, IIDField):
                continue
            for i in np.flatnonzero(p > 0):
                for z in spec.range:
                    try:
                        nxt.append(posterior_update(c, int(i) + 1, z))
                    except InconsistentHistory:
                        pass
        frontier = nxt
    return lowest


# -- CSV ----------------------------------------------------------------------

def trajectory_header(d: int) -> list[str]:
    return (["run_id", "t"] + [f"x_{k + 1}" for k in range(d)] + ["pattern_index"]
            + [f"jump_{k + 1}" for k in range(d)])


def write_trajectories_csv(ens: Ensemble, out: TextIO) -> None:
    """One row per (run, t); the final row of a run has empty LEP fields."""
    if ens.patterns is None or len(ens.times) != ens.horizon + 1:
        raise ValueError("CSV export needs full trajectories with the LEP")
    d = ens.d
    w = csv.writer(out, lineterminator="\n")
    w.writerow(trajectory_header(d))
    T = ens.horizon
    for r in range(ens.n_runs):
        rid = int(ens.run_ids[r])
        P = ens.positions[r]
        for t in range(T + 1):
            row = [rid, t] + [int(c) for c in P[t]]
            if t < T:
                row += [int(ens.patterns[r, t])] + [int(c) for c in ens.jumps[r, t]]
            else:
                row += [""] * (d + 1)
            w.writerow(row)


def trajectories_csv(ens: Ensemble) -> str:
    buf = io.StringIO()
    write_trajectories_csv(ens, buf)
    return buf.getvalue()


def read_trajectories_csv(src: TextIO) -> Ensemble:
    rows = list(csv.reader(src))
    header, body = rows[0], rows[1:]
    d = sum(1 for h in header if h.startswith("x_"))
    if header != trajectory_header(d):
        raise ValueError(f"unexpected trajectory header {header}")
    by_run: dict[int, list[list[str]]] = {}
    for row in body:
        by_run.setdefault(int(row[0]), []).append(row)
    run_ids = np.array(sorted(by_run), dtype=np.int64)
    T = len(by_run[int(run_ids[0])]) - 1
    pos = np.zeros((len(run_ids), T + 1, d), dtype=np.int64)
    pats = np.zeros((len(run_ids), T), dtype=np.int64)
    jumps = np.zeros((len(run_ids), T, d), dtype=np.int64)
    for r, rid in enumerate(run_ids):
        rs = sorted(by_run[int(rid)], key=lambda row: int(row[1]))
        if len(rs) != T + 1:
            raise ValueError("runs have different horizons")
        for row in rs:
            t = int(row[1])
            pos[r, t] = [int(c) for c in row[2:2 + d]]
            if t < T:
                pats[r, t] = int(row[2 + d])
                jumps[r, t] = [int(c) for c in row[3 + d:3 + 2 * d]]
    return Ensemble(np.arange(T + 1), pos, run_ids, pats, jumps)
