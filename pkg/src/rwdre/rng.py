"""Counter-based randomness.

Every random number in the simulator is a pure function of a 64-bit key and
integer counters (cell coordinates, time, stream tag), computed with the
splitmix64 finalizer.  That makes lazy materialisation order-independent and
lets vectorised and scalar code paths agree bit for bit.

Seeding hierarchy: ``master seed -> run key = derive(master, run_id) ->
stream key = derive(run key, tag)`` with tags ``ENV``, ``WALK``, ``COIN``.
"""
from __future__ import annotations

import zlib

import numpy as np

MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = (np.uint64(s) for s in (30, 27, 31, 11))
_INV53 = 1.0 / float(1 << 53)


def tag(name: str) -> int:
    """Stable integer for a stream name."""
    return zlib.crc32(name.encode("utf-8"))


ENV = tag("env")
WALK = tag("walk")
COIN = tag("coin")
INIT = tag("init")
AUX = tag("aux")


def _as_u64(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr
    if arr.dtype.kind == "O" or (arr.dtype.kind == "u" and arr.dtype.itemsize == 8):
        return np.asarray([int(v) & MASK64 for v in np.ravel(arr)], dtype=np.uint64).reshape(arr.shape)
    return np.ascontiguousarray(arr, dtype=np.int64).view(np.uint64)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


def hash_u64(key, *counters) -> np.ndarray:
    """Hash ``key`` together with ``counters`` (all broadcast) to uint64."""
    h = np.atleast_1d(_as_u64(key))
    for c in counters:
        h = _mix(h ^ _mix(np.atleast_1d(_as_u64(c))))
    return _mix(h)


def uniforms(key, *counters) -> np.ndarray:
    """Uniform variates in ``[0, 1)`` with 53 bits of resolution."""
    return (hash_u64(key, *counters) >> _S11).astype(np.float64) * _INV53


def derive(seed: int, *counters: int) -> int:
    """Scalar child key of ``seed``; used for run and stream keys."""
    return int(hash_u64(np.uint64(int(seed) & MASK64), *counters)[0])


def derive_many(seed: int, counters) -> np.ndarray:
    """Vectorised :func:`derive` over a 1-d array of counters."""
    return hash_u64(np.uint64(int(seed) & MASK64), np.asarray(counters, dtype=np.int64))


def run_keys(master_seed: int, run_ids) -> np.ndarray:
    return derive_many(master_seed, run_ids)


def stream_keys(run_keys_: np.ndarray, stream: int) -> np.ndarray:
    return hash_u64(run_keys_, stream)


def generator(seed: int, *counters: int) -> np.random.Generator:
    """Numpy generator for bulk draws that need no per-cell addressing."""
    return np.random.Generator(np.random.PCG64(derive(seed, AUX, *counters)))


def inverse_cdf(cumulative: np.ndarray, u: np.ndarray) -> np.ndarray:
    """First column index where ``cumulative`` strictly exceeds ``u``.

    ``cumulative`` is ``(n, m)`` (one row per sample) or ``(m,)`` shared.
    """
    cumulative = np.asarray(cumulative)
    u = np.asarray(u, dtype=float)
    if cumulative.ndim == 1:
        idx = np.searchsorted(cumulative, u, side="right")
        return np.minimum(idx, cumulative.shape[0] - 1)
    idx = (cumulative <= u[..., None]).sum(axis=-1)
    return np.minimum(idx, cumulative.shape[-1] - 1)
