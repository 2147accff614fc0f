"""Command line entry point: ``rwdre <subcommand> --config FILE [--seed S] [--out DIR] [--threads N]``.

Exit status: 0 success, 1 runtime failure, 2 invalid configuration,
3 acceptance failure in ``verify``.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load
from .coupling import CoinParams, coupled_pair_a, coupled_pairs_b, history_pair_sampler
from .env import IIDField, SiteChain, TorusMarkov
from .walk import Ensemble, ellipticity_report, read_trajectories_csv, simulate, write_trajectories_csv

log = logging.getLogger("rwdre")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_ACCEPTANCE = 0, 1, 2, 3
DEFAULT_RUNS, DEFAULT_HORIZON = 100, 100


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_json(path: Path, doc) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    path.write_text(text + "\n", encoding="utf-8", newline="\n")


def _chunks(n_runs: int, threads: int) -> list[tuple[int, int]]:
    """Contiguous ``(first_run, count)`` blocks, one or more per worker."""
    k = max(1, min(threads, n_runs))
    edges = np.linspace(0, n_runs, k + 1).astype(int)
    return [(int(a), int(b - a)) for a, b in zip(edges, edges[1:]) if b > a]


def _map(fn, tasks, threads: int):
    """Ordered map; results come back in task order whatever the pool does."""
    if threads <= 1 or len(tasks) <= 1:
        return [fn(*t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, *zip(*tasks)))


def _simulate_block(spec, law, horizon, seed, first, count):
    return simulate(spec, law, count, horizon, seed, first_run=first, keep_lep=True)


def cmd_simulate(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    n_runs = int(cfg.get("trajectories", DEFAULT_RUNS))
    T = int(cfg.get("horizon", DEFAULT_HORIZON))
    tasks = [(cfg.model, cfg.environment, T, seed, a, c) for a, c in _chunks(n_runs, threads)]
    ens = Ensemble.concat(_map(_simulate_block, tasks, threads))
    with open(out / "trajectories.csv", "w", encoding="utf-8", newline="") as fh:
        write_trajectories_csv(ens, fh)
    return EXIT_OK


def _couple_block(cfg_doc, seed, first, count):
    from .config import from_document

    cfg = from_document(cfg_doc)
    spec, law = cfg.model, cfg.environment
    n = int(cfg.get("n", 1))
    T = int(cfg.get("horizon", n + 30))
    depth = int(cfg.get("history_depth", 2))
    sampler = history_pair_sampler(law, spec, depth)
    if cfg.get("condition", "b") == "a":
        eps = cfg.get("eps")
        if eps is None:
            raise ConfigError("condition a needs experiment.eps")
        coin = CoinParams(float(eps), None, cfg.get("c1"))
        b = coupled_pair_a(law, spec, sampler, n, T, seed, coin, n_runs=count, first_run=first)
        return [[first + r, n, int(b.tau_n[r]), int(b.first_disagreement_after[r]), int(b.env_coupled_ok[r]), 1]
                for r in range(count)]
    coin = CoinParams.for_condition_b(spec, cfg.get("eps"), cfg.get("c1"))
    runs = coupled_pairs_b(law, spec, sampler, n, T, seed, count, coin, first_run=first)
    return [[r.run_id, n, r.tau_n, -1 if r.first_disagreement_after is None else r.first_disagreement_after,
             int(r.env_coupled_ok), int(r.coupling_optimal)] for r in runs]


def cmd_couple(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    n_runs = int(cfg.get("trajectories", DEFAULT_RUNS))
    tasks = [(cfg.document, seed, a, c) for a, c in _chunks(n_runs, threads)]
    rows = [row for block in _map(_couple_block, tasks, threads) for row in block]
    with open(out / "couple.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run_id", "n", "tau_n", "first_disagreement_after", "env_coupled_ok", "coupling_optimal"])
        w.writerows(rows)
    return EXIT_OK


def cmd_mixing(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    from .mixing import estimate_phi_hat, estimate_phi_tilde

    coef = cfg.get("coefficient", "phi_hat")
    t = int(cfg.get("t", 1))
    common = dict(seed=seed, budget=int(cfg.get("budget", 4)), method=cfg.get("method", "auto"))
    if coef == "phi_tilde":
        est = estimate_phi_tilde(cfg.environment, cfg.model, t, k_max=int(cfg.get("k_max", 3)),
                                 h=cfg.get("h"), **common)
    else:
        est = estimate_phi_hat(cfg.environment, cfg.model, t, h=int(cfg.get("h") or 3),
                               k_max=int(cfg.get("k_max", 2)), **common)
    _write_json(out / "mixing.json", est.to_dict())
    return EXIT_OK


def cmd_oracle(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    from .mixing import estimate_phi_hat, phi_tilde_upper_bound
    from .oracle import iid
    from .oracle.chain import build_joint_chain, exact_covariance, exact_speed, stationary_residual

    spec, law = cfg.model, cfg.environment
    doc = {"environment": law.to_dict(), "ellipticity": dataclasses.asdict(ellipticity_report(spec))}
    if isinstance(law, TorusMarkov):
        chain = build_joint_chain(law, spec)
        doc.update(n_states=chain.n_states, period=chain.period, irreducible=chain.irreducible,
                   stationary=chain.stationary, stationary_residual=stationary_residual(chain),
                   speed=exact_speed(chain), covariance=exact_covariance(chain))
        grid = cfg.get("t_grid", [1, 2, 4])
        doc["phi_hat"] = [estimate_phi_hat(law, spec, int(t), h=int(cfg.get("h") or 3),
                                           k_max=int(cfg.get("k_max", 2))).to_dict() for t in grid]
        doc["phi_tilde_upper_bound"] = [phi_tilde_upper_bound(law, spec, int(t)).to_dict() for t in grid]
    elif isinstance(law, IIDField) and spec.d == 1:
        doc.update(speed=iid.iid_speed(law, spec), covariance=iid.iid_variance(law, spec))
    elif isinstance(law, SiteChain):
        grid = cfg.get("t_grid", [1, 2, 4])
        doc["phi_tilde_upper_bound"] = [phi_tilde_upper_bound(law, spec, int(t)).to_dict() for t in grid]
    else:
        raise ValueError("no exact oracle for this environment")
    _write_json(out / "oracle.json", doc)
    return EXIT_OK


def cmd_stats(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    from .stats import summarize

    src = cfg.get("input")
    if src is None:
        raise ConfigError("stats needs experiment.input (a trajectory CSV)")
    with open(src, encoding="utf-8", newline="") as fh:
        ens = read_trajectories_csv(fh)
    eps = cfg.get("eps_ldb", 0.2)
    summary = summarize(ens, eps=(eps,), thetas=[cfg.get("theta")] if cfg.get("theta") else None,
                        sigma2=cfg.get("sigma2"))
    _write_json(out / "summary.json", summary.to_dict())
    return EXIT_OK


def cmd_verify(cfg: ExperimentConfig, seed: int, out: Path, threads: int) -> int:
    from .verify import run_suite

    results = run_suite(seed, cfg.get("scale", "full"), cfg.get("criteria"), log=print)
    _write_json(out / "verify.json", [{"number": r.number, "name": r.name, "passed": r.passed,
                                       "seconds": r.seconds, "details": r.details} for r in results])
    return EXIT_OK if all(r.passed for r in results) else EXIT_ACCEPTANCE


COMMANDS = {
    "simulate": cmd_simulate,
    "couple": cmd_couple,
    "mixing": cmd_mixing,
    "oracle": cmd_oracle,
    "stats": cmd_stats,
    "verify": cmd_verify,
}


def _parse_override(text: str) -> tuple[str, object]:
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    try:
        return key, json.loads(raw)
    except json.JSONDecodeError:
        return key, raw


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwdre", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="config file, or preset:NAME")
        s.add_argument("--seed", type=int, help="overrides experiment.seed")
        s.add_argument("--out", default=".", help="output directory")
        s.add_argument("--threads", type=int, default=1, help="worker processes; never changes results")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override an experiment field (VALUE parsed as JSON)")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load(args.config)
        if args.set:
            from .config import from_document

            doc = json.loads(json.dumps(cfg.document))
            doc["experiment"].update(dict(_parse_override(s) for s in args.set))
            cfg = from_document(doc, args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            cfg.experiment["seed"] = args.seed
            cfg.document["experiment"]["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, cfg.seed, out, args.threads)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime fault
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
