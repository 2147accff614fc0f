"""Lattice geometry, pattern enumeration, cones and backward paths.

Lattice points are plain tuples of ints so they hash, compare and sort
without ceremony.  Everything here is a pure function on immutable values.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

Point = tuple[int, ...]

ROW_SUM_TOL = 1e-12


class SpaceTimeCell(NamedTuple):
    x: Point
    t: int


def as_point(coords: Iterable[int]) -> Point:
    return tuple(int(c) for c in coords)


def origin(d: int) -> Point:
    return (0,) * d


def add(a: Point, b: Point) -> Point:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return tuple(i + j for i, j in zip(a, b))


def sub(a: Point, b: Point) -> Point:
    if len(a) != len(b):
        raise ValueError(f"dimension mismatch: {len(a)} vs {len(b)}")
    return tuple(i - j for i, j in zip(a, b))


def shift(cell: SpaceTimeCell, by: SpaceTimeCell) -> SpaceTimeCell:
    """Componentwise space-time translation of ``cell`` by ``by``."""
    return SpaceTimeCell(add(tuple(cell.x), tuple(by.x)), int(cell.t) + int(by.t))


@dataclass(frozen=True, eq=False)
class JumpKernel:
    """Row ``i`` is the jump law of pattern ``i + 1`` over the ordered range."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] == 0 or rows.shape[1] == 0:
            raise ValueError("kernel must be a non-empty 2-d matrix")
        if np.any(rows < 0):
            raise ValueError("kernel entries must be nonnegative")
        if np.any(np.abs(rows.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise ValueError("kernel rows must sum to 1")
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)
        cum = np.cumsum(rows, axis=1)
        cum[:, -1] = 1.0
        cum.setflags(write=False)
        object.__setattr__(self, "cumulative", cum)

    @property
    def n_patterns(self) -> int:
        return self.rows.shape[0]

    @property
    def n_jumps(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Dimension, alphabet, observation window, ordered range and jump kernel."""

    d: int
    alphabet_size: int
    delta: tuple[Point, ...]
    range: tuple[Point, ...]
    kernel: JumpKernel

    def __post_init__(self):
        if self.d < 1 or self.alphabet_size < 1:
            raise ValueError("d and alphabet_size must be positive")
        delta = tuple(as_point(p) for p in self.delta)
        rng = tuple(as_point(p) for p in self.range)
        kernel = self.kernel if isinstance(self.kernel, JumpKernel) else JumpKernel(self.kernel)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "range", rng)
        object.__setattr__(self, "kernel", kernel)
        for p in delta + rng:
            if len(p) != self.d:
                raise ValueError(f"point {p} does not have dimension {self.d}")
        if len(set(delta)) != len(delta):
            raise ValueError("delta has duplicates")
        if len(set(rng)) != len(rng):
            raise ValueError("range has duplicates")
        if kernel.n_patterns != self.K:
            raise ValueError(f"kernel has {kernel.n_patterns} rows, expected K={self.K}")
        if kernel.n_jumps != len(rng):
            raise ValueError("kernel columns must match the range")
        if np.any(kernel.rows.max(axis=0) <= 0):
            raise ValueError("every range element needs positive mass for some pattern")

    @property
    def K(self) -> int:
        return self.alphabet_size ** len(self.delta)

    @property
    def range_array(self) -> np.ndarray:
        return np.array(self.range, dtype=np.int64).reshape(len(self.range), self.d)

    @property
    def delta_array(self) -> np.ndarray:
        return np.array(self.delta, dtype=np.int64).reshape(len(self.delta), self.d)

    @property
    def mean_jumps(self) -> np.ndarray:
        """``(K, d)`` matrix of per-pattern mean jumps."""
        return self.kernel.rows @ self.range_array

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "alphabet_size": self.alphabet_size,
            "delta": [list(p) for p in self.delta],
            "range": [list(p) for p in self.range],
            "kernel": self.kernel.rows.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelSpec":
        return cls(
            d=int(doc["d"]),
            alphabet_size=int(doc["alphabet_size"]),
            delta=tuple(as_point(p) for p in doc["delta"]),
            range=tuple(as_point(p) for p in doc["range"]),
            kernel=JumpKernel(np.array(doc["kernel"], dtype=float)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        return cls.from_dict(json.loads(text))


def pattern_index(pattern: Sequence[int], alphabet_size: int) -> int:
    """Mixed-radix index (1-based) of a pattern listed in Delta's stored order.

    The first window site is the most significant digit.
    """
    idx = 0
    for s in pattern:
        s = int(s)
        if not 0 <= s < alphabet_size:
            raise ValueError(f"symbol {s} outside alphabet of size {alphabet_size}")
        idx = idx * alphabet_size + s
    return idx + 1


def pattern_from_index(index: int, alphabet_size: int, width: int) -> tuple[int, ...]:
    """Inverse of :func:`pattern_index`."""
    n = alphabet_size ** width
    if not 1 <= index <= n:
        raise ValueError(f"pattern index {index} outside 1..{n}")
    rest = index - 1
    digits = []
    for _ in range(width):
        rest, s = divmod(rest, alphabet_size)
        digits.append(s)
    return tuple(reversed(digits))


def pattern_indices(symbols: np.ndarray, alphabet_size: int) -> np.ndarray:
    """Vectorised :func:`pattern_index` over the last axis, returned 0-based."""
    symbols = np.asarray(symbols, dtype=np.int64)
    idx = np.zeros(symbols.shape[:-1], dtype=np.int64)
    for j in range(symbols.shape[-1]):
        idx = idx * alphabet_size + symbols[..., j]
    return idx


def reachable_set(spec: ModelSpec, t: int) -> frozenset[Point]:
    """Exact ``t``-fold sumset of the range."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    current = {origin(spec.d)}
    for _ in range(t):
        current = {add(x, z) for x in current for z in spec.range}
    return frozenset(current)


def cone_slice(spec: ModelSpec, t: int) -> frozenset[Point]:
    """Spatial section ``R_t + Delta`` of the cone at time ``t >= 0``."""
    if t < 0:
        return frozenset()
    return frozenset(add(x, y) for x in reachable_set(spec, t) for y in spec.delta)


def in_cone(spec: ModelSpec, cell: SpaceTimeCell, l: int) -> bool:
    t = int(cell.t)
    if t < l or t < 0:
        return False
    return as_point(cell.x) in cone_slice(spec, t)


@dataclass(frozen=True)
class BackwardPath:
    """Sites ``(gamma_{-k}, ..., gamma_0)`` ending at the origin."""

    sites: tuple[Point, ...]
    range: tuple[Point, ...] = field(repr=False, default=())

    def __post_init__(self):
        sites = tuple(as_point(s) for s in self.sites)
        object.__setattr__(self, "sites", sites)
        if not sites:
            raise ValueError("a backward path has at least the origin")
        if any(c != 0 for c in sites[-1]):
            raise ValueError("backward path must end at the origin")
        allowed = set(self.range)
        for a, b in zip(sites, sites[1:]):
            if sub(b, a) not in allowed:
                raise ValueError(f"increment {sub(b, a)} is not in the range")

    @property
    def depth(self) -> int:
        return len(self.sites) - 1

    @property
    def increments(self) -> tuple[Point, ...]:
        return tuple(sub(b, a) for a, b in zip(self.sites, self.sites[1:]))

    @classmethod
    def from_increments(cls, increments: Sequence[Point], spec: ModelSpec) -> "BackwardPath":
        d = spec.d
        pos = origin(d)
        sites = [pos]
        for z in reversed(list(increments)):
            pos = sub(pos, as_point(z))
            sites.append(pos)
        return cls(tuple(reversed(sites)), spec.range)


@dataclass(frozen=True)
class ObservationEvent:
    """Observed patterns along a backward path.

    ``patterns[j]`` (1-based pattern index) is seen at time ``j - depth`` on the
    window around ``path.sites[j]``, so the last entry is the observation at
    time ``-1``.  The origin itself (time 0) is not observed.
    """

    path: BackwardPath
    patterns: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(int(p) for p in self.patterns))
        if len(self.patterns) != self.path.depth:
            raise ValueError("need exactly one pattern per path step")

    @property
    def depth(self) -> int:
        return self.path.depth

    def observations(self) -> Iterator[tuple[Point, int, int]]:
        """Yield ``(site, time, pattern)`` in chronological order."""
        k = self.depth
        for j, pat in enumerate(self.patterns):
            yield self.path.sites[j], j - k, pat

    def cells(self, spec: ModelSpec) -> list[SpaceTimeCell]:
        return [
            SpaceTimeCell(add(site, y), t)
            for site, t, _ in self.observations()
            for y in spec.delta
        ]


def trivial_event(spec: ModelSpec) -> ObservationEvent:
    return ObservationEvent(BackwardPath((origin(spec.d),), spec.range), ())


def backward_paths(spec: ModelSpec, k: int) -> Iterator[BackwardPath]:
    """All backward paths of depth exactly ``k``."""
    for incs in itertools.product(spec.range, repeat=k):
        yield BackwardPath.from_increments(incs, spec)


def observation_events(spec: ModelSpec, k_max: int) -> Iterator[ObservationEvent]:
    """Every observation event of depth ``0..k_max`` (positivity not checked)."""
    for k in range(k_max + 1):
        for path in backward_paths(spec, k):
            for pats in itertools.product(range(1, spec.K + 1), repeat=k):
                yield ObservationEvent(path, pats)
