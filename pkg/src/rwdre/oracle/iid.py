"""Closed forms for walks in i.i.d. fields in one dimension.

Time moves forward at every step, so under an i.i.d. field the walker reads
a fresh cell each time and its annealed steps are i.i.d. with a law that
does not depend on the path.  Tails of ``X_t`` are then exact convolutions.
"""
from __future__ import annotations

import numpy as np

from ..core import ModelSpec
from ..env import IIDField


def annealed_step_law(law: IIDField, spec: ModelSpec) -> np.ndarray:
    """Probabilities of the ordered range under the annealed law."""
    pat = np.ones(1)
    for _ in spec.delta:
        pat = np.multiply.outer(pat, law.p).reshape(-1)
    return pat @ spec.kernel.rows


def iid_speed(law: IIDField, spec: ModelSpec) -> np.ndarray:
    return annealed_step_law(law, spec) @ spec.range_array


def iid_variance(law: IIDField, spec: ModelSpec) -> np.ndarray:
    """Covariance matrix of one annealed step."""
    p = annealed_step_law(law, spec)
    z = spec.range_array.astype(float)
    m = p @ z
    return (z - m).T @ ((z - m) * p[:, None])


def position_pmf(law: IIDField, spec: ModelSpec, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Support and probabilities of ``X_t`` (``d = 1``)."""
    if spec.d != 1:
        raise ValueError("position_pmf needs d = 1")
    z = spec.range_array[:, 0]
    lo, hi = int(z.min()), int(z.max())
    step = np.zeros(hi - lo + 1)
    np.add.at(step, z - lo, annealed_step_law(law, spec))
    pmf = np.ones(1)
    for _ in range(t):
        pmf = np.convolve(pmf, step)
    return np.arange(t * lo, t * hi + 1), pmf


def deviation_tail(law: IIDField, spec: ModelSpec, t: int, eps: float, v: float | None = None) -> float:
    """Exact ``P(|X_t / t - v| > eps)``; ``v`` defaults to the true speed."""
    if v is None:
        v = float(iid_speed(law, spec)[0])
    x, p = position_pmf(law, spec, t)
    return float(p[np.abs(x / t - v) > eps].sum())
