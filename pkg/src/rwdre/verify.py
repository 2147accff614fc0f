"""Acceptance suite: twelve checks tying simulation, couplings and oracles together.

Every check is a function of a master seed and a scale (``full`` runs the
pinned sizes, ``quick`` shrinks sample sizes for smoke runs).  Each returns a
:class:`CriterionResult` whose ``details`` carry the numbers behind the
verdict.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats as sps

from . import rng
from .core import JumpKernel, ModelSpec, trivial_event
from .coupling import (
    CoinParams,
    coin_walk,
    coupled_pairs_b,
    epsilon_decomposition,
    md_bound,
    tau_n_batch,
    tau_tail_bound,
)
from .env import IIDField, TorusMarkov
from .mixing import (
    cesaro_nu,
    estimate_phi_hat,
    estimate_phi_tilde,
    exact_phi_tilde,
    phi_tilde_by_event,
    phi_tilde_upper_bound,
    verify_md_bound,
)
from .oracle import bruteforce, iid
from .oracle.chain import (
    build_joint_chain,
    exact_asymptotic_variance,
    exact_speed,
    position_law,
    stationary_residual,
)
from .stats import (
    fclt_test,
    fit_log_linear,
    ldb_rate,
    paired_l1_drop,
    SpeedEstimator,
)
from .walk import sample_history, simulate

Z = 3.0
M1_KERNEL = ((0.75, 0.25), (0.25, 0.75))


def m1_spec() -> ModelSpec:
    return ModelSpec(1, 2, ((0,),), ((-1,), (1,)), JumpKernel(np.array(M1_KERNEL)))


def m1_law(p_one: float = 0.7) -> IIDField:
    return IIDField(np.array([1 - p_one, p_one]))


def m2_law() -> TorusMarkov:
    return TorusMarkov.flip(3, 0.3)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        return f"criterion {self.number:2d} [{'PASS' if self.passed else 'FAIL'}] {self.name} ({self.seconds:.1f}s)"


SIZES = {
    "full": dict(speed_runs=10_000, ldb_runs=100_000, fclt_runs=10_000, fclt_n=10_000, coin_samples=100_000,
                 tau_runs=100_000, couple_runs=4_000, sampled_runs=2_000, mc_steps=1_000, mc_runs=1_000,
                 nu_runs=10_000, nu_k=100, det_runs=40),
    "quick": dict(speed_runs=2_000, ldb_runs=20_000, fclt_runs=2_000, fclt_n=2_000, coin_samples=20_000,
                  tau_runs=20_000, couple_runs=300, sampled_runs=200, mc_steps=500, mc_runs=400,
                  nu_runs=2_000, nu_k=50, det_runs=10),
}


class _Cache:
    """Ensembles shared between checks within one suite run."""

    def __init__(self, seed: int, sizes: dict):
        self.seed, self.sizes, self.store = seed, sizes, {}

    def get(self, key, make: Callable):
        if key not in self.store:
            self.store[key] = make()
        return self.store[key]

    def m2_long(self):
        n = self.sizes["fclt_n"]
        grid = sorted({0, 100, 1000, n // 4, n // 2, n})
        return self.get("m2_long", lambda: simulate(m1_spec(), m2_law(), self.sizes["fclt_runs"], n,
                                                     rng.derive(self.seed, 2), record_times=grid))

    def m1_speed(self):
        return self.get("m1_speed", lambda: simulate(m1_spec(), m1_law(), self.sizes["speed_runs"], 1000,
                                                     rng.derive(self.seed, 1), record_times=[0, 100, 1000]))


def _timed(number: int, name: str, body: Callable[[], tuple[bool, dict]]) -> CriterionResult:
    t0 = time.perf_counter()
    ok, details = body()
    return CriterionResult(number, name, bool(ok), details, time.perf_counter() - t0)


def criterion_1(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        sp1 = SpeedEstimator().fit(cache.m1_speed())
        v1 = float(iid.iid_speed(m1_law(), spec)[0])
        m2 = cache.m2_long()
        sp2 = SpeedEstimator(horizon=1000).fit(m2)
        v2 = float(exact_speed(build_joint_chain(m2_law(), spec))[0])
        ok1 = abs(sp1.v_[0] - v1) <= Z * sp1.stderr_[0]
        ok2 = abs(sp2.v_[0] - v2) <= Z * sp2.stderr_[0]
        return ok1 and ok2, {"m1": {"v_hat": sp1.v_[0], "se": sp1.stderr_[0], "v": v1, "ok": ok1},
                             "m2": {"v_hat": sp2.v_[0], "se": sp2.stderr_[0], "v_exact": v2, "ok": ok2}}
    return _timed(1, "SLLN: speed estimate matches the true speed", body)


def criterion_2(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        out, ok = {}, True
        for name, ens, v in (("m1", cache.m1_speed(), iid.iid_speed(m1_law(), spec)),
                             ("m2", cache.m2_long(), exact_speed(build_joint_chain(m2_law(), spec)))):
            drop, se = paired_l1_drop(ens, 100, 1000, v)
            good = drop > Z * se
            ok &= good
            out[name] = {"drop": drop, "se": se, "ok": good}
        return ok, out
    return _timed(2, "L1 convergence: E|X_t/t - v| falls from t=100 to t=1000", body)


def criterion_3(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        times = list(range(50, 401, 50))
        n = cache.sizes["ldb_runs"]
        fair = m1_law(0.5)
        e1 = simulate(spec, fair, n, 400, rng.derive(cache.seed, 3), record_times=[0] + times)
        fit1 = ldb_rate(e1, 0.2, v=[0.0])
        exact_tails = [iid.deviation_tail(fair, spec, t, 0.2, 0.0) for t in times]
        c_ref = fit_log_linear(times, exact_tails, n)["c"]
        e2 = simulate(spec, m2_law(), n, 400, rng.derive(cache.seed, 4), record_times=[0] + times)
        fit2 = ldb_rate(e2, 0.2, v=[0.0])
        ok1 = fit1.significant_ and 0.5 * c_ref <= fit1.c_ <= 3 * c_ref
        ok2 = fit2.significant_
        return ok1 and ok2, {"m1_fair": {"c": fit1.c_, "se": fit1.c_stderr_, "c_exact_tails": c_ref, "ok": ok1},
                             "m2": {"c": fit2.c_, "se": fit2.c_stderr_, "ok": ok2}}
    return _timed(3, "LDB: positive exponential rate, calibrated on exact binomial tails", body)


def criterion_4(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        n = cache.sizes["fclt_n"]
        grid = sorted({0, n // 4, n // 2, n})
        e1 = cache.get("m1_fair_long", lambda: simulate(spec, m1_law(0.5), cache.sizes["fclt_runs"], n,
                                                        rng.derive(cache.seed, 5), record_times=grid))
        f1 = fclt_test(e1, [0.0], 1.0)
        chain = build_joint_chain(m2_law(), spec)
        s2 = exact_asymptotic_variance(chain, [1.0])
        f2 = fclt_test(cache.m2_long(), exact_speed(chain), s2)
        return f1.passed_ and f2.passed_, {
            "m1_fair": {"ks": f1.ks_, "min_p_adjusted": f1.min_p_adjusted_},
            "m2": {"sigma2": s2, "ks": f2.ks_, "min_p_adjusted": f2.min_p_adjusted_}}
    return _timed(4, "aFCLT: KS tests of rescaled marginals (Bonferroni)", body)


def criterion_5(cache: _Cache) -> CriterionResult:
    def body():
        chain = build_joint_chain(m2_law(), m1_spec())
        s2 = exact_asymptotic_variance(chain, [1.0])
        ens = cache.m2_long()
        rows, ok = [], True
        for n in (1000, cache.sizes["fclt_n"]):
            r = float(ens.at(n)[:, 0].var(ddof=1) / n)
            good = abs(r / s2 - 1) <= 0.05
            ok &= good
            rows.append({"n": n, "var_over_n": r, "rel_err": r / s2 - 1, "ok": good})
        return ok, {"sigma2": s2, "rows": rows}
    return _timed(5, "Variance linearity: Var(X_n)/n matches the exact asymptotic variance", body)


def criterion_6(cache: _Cache) -> CriterionResult:
    def body():
        gen = rng.generator(cache.seed, 6)
        worst = 0.0
        for _ in range(100):
            K, m = int(gen.integers(1, 6)), int(gen.integers(2, 6))
            rows = gen.dirichlet(np.ones(m), size=K)
            j = int(np.argmax(rows.min(axis=0)))
            eps = float(rows[:, j].min()) * float(gen.uniform(0.1, 1.0))
            res = epsilon_decomposition(JumpKernel(rows), j, eps).rows
            mix = (1 - eps) * res
            mix[:, j] += eps
            worst = max(worst, float(np.abs(mix - rows).max()))
        spec, law = m1_spec(), m2_law()
        coin = CoinParams.for_condition_b(spec)
        T, N = 6, cache.sizes["coin_samples"]
        x, p = position_law(build_joint_chain(law, spec), T)
        tests = {}
        for name, ens in (("coin", coin_walk(spec, law, N, T, rng.derive(cache.seed, 61), coin, record_times=[T])),
                          ("plain", simulate(spec, law, N, T, rng.derive(cache.seed, 62), record_times=[T]))):
            counts = np.array([(ens.at(T)[:, 0] == xi).sum() for xi in x])
            keep = p * N >= 5
            obs = np.append(counts[keep], counts[~keep].sum())
            exp = np.append(p[keep], p[~keep].sum()) * N
            obs, exp = obs[exp > 0], exp[exp > 0]
            stat, pv = sps.chisquare(obs, exp)
            tests[name] = {"chi2": float(stat), "p_value": float(pv)}
        ok = worst <= 1e-12 and all(t["p_value"] > 0.01 for t in tests.values())
        return ok, {"mixture_max_error": worst, "position_law_T": T, "chi_square": tests}
    return _timed(6, "Coin trick: mixture identity and coin-walk law", body)


def criterion_7(cache: _Cache) -> CriterionResult:
    def body():
        eps, cap, N = 0.25, 1000, cache.sizes["tau_runs"]
        grid = np.unique(np.round(np.geomspace(1, cap, 25)).astype(int))
        out, ok = {}, True
        for n in (1, 2, 3):
            tau = tau_n_batch(rng.derive(cache.seed, 7), eps, n, cap, N)
            worst = -np.inf
            for t in grid:
                p = float(((tau < 0) | (tau > t)).mean())
                se = math.sqrt(p * (1 - p) / N)
                worst = max(worst, p - float(tau_tail_bound(eps, n, t)) - Z * se)
            out[n] = {"worst_excess": worst}
            ok &= worst <= 0
        return ok, out
    return _timed(7, "tau_n tail: empirical tail below the geometric bound", body)


def criterion_8(cache: _Cache) -> CriterionResult:
    def body():
        spec, law = m1_spec(), m2_law()
        coin = CoinParams.for_condition_b(spec)
        out, ok = {}, True
        for n in (1, 2, 3):
            ranked = phi_tilde_by_event(law, spec, n, 3)
            phi = ranked[0][1]
            a_star = ranked[0][0]
            triv = trivial_event(spec)
            runs = coupled_pairs_b(law, spec, (a_star, triv), n, n + 30, rng.derive(cache.seed, 8, n),
                                   cache.sizes["couple_runs"], coin)
            d = np.array([r.disagreed for r in runs], float)
            sampler = lambda s: (sample_history(law, spec, 3, s)[0], triv)
            runs_s = coupled_pairs_b(law, spec, sampler, n, n + 30, rng.derive(cache.seed, 81, n),
                                     cache.sizes["sampled_runs"], coin)
            ds = np.array([r.disagreed for r in runs_s], float)
            rows = {}
            for name, arr in (("maximizer", d), ("sampled", ds)):
                f, se = float(arr.mean()), float(arr.std(ddof=1) / math.sqrt(len(arr)))
                good = f <= phi + Z * se
                ok &= good
                rows[name] = {"freq": f, "se": se, "ok": good}
            out[n] = {"phi_tilde": phi, **rows}
        return ok, out
    return _timed(8, "Conditioned coupling: disagreement at most phi_tilde(n)", body)


def criterion_9(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        coin = CoinParams(0.25, (1,), 2 * math.log(4))
        grid = (4, 16, 64, 256)
        iid_rep = verify_md_bound(m1_law(), spec, coin, grid)
        m2_rep = verify_md_bound(m2_law(), spec, coin, grid, phi_tilde="analytic", h=3, k_max=3)
        exact_plug = [md_bound(t, coin.c0, coin.c1, lambda n: exact_phi_tilde(m2_law(), spec, n)) for t in grid]
        rows = [{"t": r.t, "phi_hat": r.phi_hat, "bound": r.bound, "bound_exact_plugin": b, "margin": r.margin}
                for r, b in zip(m2_rep.rows, exact_plug)]
        ok = iid_rep.ok and m2_rep.ok and all(r.phi_hat <= b for r, b in zip(m2_rep.rows, exact_plug))
        return ok, {"iid": [r.margin for r in iid_rep.rows], "m2": rows, "phi_hat_mode": m2_rep.phi_hat_mode}
    return _timed(9, "Mixing transfer: exact phi_hat below the bound on the grid", body)


def criterion_10(cache: _Cache) -> CriterionResult:
    def body():
        spec, law = m1_spec(), m2_law()
        chain = build_joint_chain(law, spec)
        res = stationary_residual(chain)
        diffs = []
        for t in (1, 2):
            diffs.append(abs(estimate_phi_hat(law, spec, t, h=2, k_max=2).value - bruteforce.phi_hat(law, spec, t, 2, 2)))
        for t, h in ((1, 2), (2, 2)):
            diffs.append(abs(estimate_phi_tilde(law, spec, t, k_max=2, h=h).value - bruteforce.phi_tilde(law, spec, t, 2, h)))
        v = float(exact_speed(chain)[0])
        T, R = cache.sizes["mc_steps"], cache.sizes["mc_runs"]
        ens = simulate(spec, law, R, T, rng.derive(cache.seed, 10), record_times=[0, T], torus_initial=chain.stationary)
        sp = SpeedEstimator().fit(ens)
        ok_mc = abs(sp.v_[0] - v) <= Z * sp.stderr_[0]
        ok = res < 1e-10 and max(diffs) <= 1e-10 and ok_mc
        return ok, {"residual": res, "max_bruteforce_gap": max(diffs), "v_exact": v, "v_mc": sp.v_[0],
                    "se": sp.stderr_[0], "steps": T * R}
    return _timed(10, "Oracle self-consistency", body)


def criterion_11(cache: _Cache) -> CriterionResult:
    def body():
        spec = m1_spec()
        out, ok = {}, True
        for name, law, ens in (("m1", m1_law(), cache.m1_speed()), ("m2", m2_law(), cache.m2_long())):
            nu = cesaro_nu(law, spec, h=1, k=cache.sizes["nu_k"], n_runs=cache.sizes["nu_runs"],
                           seed=rng.derive(cache.seed, 11, name == "m2"))
            sp = SpeedEstimator(horizon=1000).fit(ens)
            gap = float(nu.mean_jump[0] - sp.v_[0])
            se = math.hypot(float(nu.mean_jump_se[0]), float(sp.stderr_[0]))
            good = abs(gap) <= Z * se
            ok &= good
            out[name] = {"nu_mean_jump": float(nu.mean_jump[0]), "v_hat": float(sp.v_[0]), "joint_se": se, "ok": good}
        return ok, out
    return _timed(11, "Cesaro limit: mean jump under nu equals the speed", body)


def criterion_12(cache: _Cache) -> CriterionResult:
    def body():
        from . import cli

        digests = {}
        with tempfile.TemporaryDirectory() as tmp:
            cfg = Path(tmp) / "m1.json"
            cfg.write_text(
                '{"model": {"d": 1, "alphabet_size": 2, "delta": [[0]], "range": [[-1], [1]], '
                '"kernel": [[0.75, 0.25], [0.25, 0.75]]}, "environment": {"kind": "iid_field", "p": [0.3, 0.7]}, '
                f'"experiment": {{"seed": 1, "trajectories": {cache.sizes["det_runs"]}, "horizon": 50}}}}')
            for threads in (1, 2, 8):
                for rep in range(2):
                    out = Path(tmp) / f"out_{threads}_{rep}"
                    code = cli.main(["simulate", "--config", str(cfg), "--seed", "42", "--out", str(out),
                                     "--threads", str(threads)])
                    if code != 0:
                        return False, {"exit": code}
                    digests[(threads, rep)] = (out / "trajectories.csv").read_bytes()
        ok = len(set(digests.values())) == 1
        return ok, {"runs": len(digests), "identical": ok, "bytes": len(next(iter(digests.values())))}
    return _timed(12, "Determinism: simulate output is byte-identical across worker counts", body)


CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 13)}


def run_suite(seed: int = 20240601, scale: str = "full", criteria=None, log=None) -> list[CriterionResult]:
    if scale not in SIZES:
        raise ValueError(f"unknown scale {scale!r}")
    cache = _Cache(seed, SIZES[scale])
    out = []
    for i in sorted(criteria or CRITERIA):
        r = CRITERIA[i](cache)
        if log is not None:
            log(r.line())
        out.append(r)
    return out
