"""comtrack command line: generate, track, evaluate.

Every command reads a JSON config and writes a manifest.json next to its
outputs. A manifest can be passed back as --config; the rerun reproduces the
output files byte for byte.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .decentralized import ConfigError, ladder_topology, load_topology, run_decentralized
from .evaluation import compare_tracks, evaluate_track, export_report, write_relerr_csv
from .model import FactorState, Hyperparams, Schedule
from .prox import NumericError
from .snapshots import (
    EdgeSeriesParseError,
    NmfConvergenceError,
    ValidationError,
    load_edge_series,
    synthetic_scenario,
    write_edge_series,
)
from .trackers import InitPolicy, TrackResult, batch_reference, track_exact, track_inexact, track_sgd

log = logging.getLogger("comtrack")

ALGORITHMS = ("exact", "inexact", "sgd", "decentralized")
REQUIRED_HP = ("beta", "c", "lambda0", "mu0")


class UsageError(Exception):
    """Bad config or arguments; exit code 2."""


# --------------------------------------------------------------------------- config helpers

def _read_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    # a manifest carries the resolved config under "config"
    if "manifest_version" in raw:
        raw = raw["config"]
    return raw


def _resolve_path(value, base: Path) -> str:
    p = Path(value)
    return str(p if p.is_absolute() else (base / p).resolve())


def _require(cfg: dict, key: str, where: str):
    if key not in cfg:
        raise UsageError(f"missing required key {where}.{key}")
    return cfg[key]


def hyperparams_from_config(hc: dict) -> Hyperparams:
    for key in REQUIRED_HP:
        _require(hc, key, "hyperparams")
    known = set(REQUIRED_HP) | {"lambda_kind", "mu_kind", "alpha_u", "alpha_v", "rho", "anomaly_eps",
                                "max_outer", "max_inner", "tol", "inner_tol"}
    unknown = set(hc) - known
    if unknown:
        raise UsageError(f"unknown hyperparams keys: {sorted(unknown)}")
    try:
        return Hyperparams(
            beta=float(hc["beta"]), c=int(hc["c"]),
            lambda_schedule=Schedule(float(hc["lambda0"]), hc.get("lambda_kind", "constant")),
            mu_schedule=Schedule(float(hc["mu0"]), hc.get("mu_kind", "sqrt")),
            alpha_u=hc.get("alpha_u", "auto"), alpha_v=hc.get("alpha_v", "auto"),
            rho=float(hc.get("rho", 1.0)), anomaly_eps=float(hc.get("anomaly_eps", 1e-3)),
            max_outer=int(hc.get("max_outer", 500)), max_inner=int(hc.get("max_inner", 200)),
            tol=float(hc.get("tol", 1e-6)), inner_tol=float(hc.get("inner_tol", 1e-8)),
        )
    except (ValidationError, TypeError, ValueError) as exc:
        raise UsageError(f"invalid hyperparams: {exc}") from exc


def hyperparams_to_config(hp: Hyperparams) -> dict:
    return {
        "beta": hp.beta, "c": hp.c,
        "lambda0": hp.lambda_schedule.base, "lambda_kind": hp.lambda_schedule.kind,
        "mu0": hp.mu_schedule.base, "mu_kind": hp.mu_schedule.kind,
        "alpha_u": hp.alpha_u, "alpha_v": hp.alpha_v, "rho": hp.rho, "anomaly_eps": hp.anomaly_eps,
        "max_outer": hp.max_outer, "max_inner": hp.max_inner, "tol": hp.tol, "inner_tol": hp.inner_tol,
    }


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict:
    import networkx
    import numba
    return {"comtrack": __version__, "numpy": np.__version__, "networkx": networkx.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def write_manifest(out: Path, command: str, config: dict, files: list[Path]) -> Path:
    manifest = {
        "manifest_version": 1,
        "command": command,
        "config": config,
        "versions": _versions(),
        "outputs": {str(p.relative_to(out)): _sha256(p) for p in sorted(files)},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _write_matrix(m: np.ndarray, path: Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for row in m:
            f.write(",".join(repr(float(x)) for x in row) + "\n")


def _read_matrix(path: Path) -> np.ndarray:
    try:
        rows = [line.split(",") for line in Path(path).read_text(encoding="utf-8").splitlines() if line]
        return np.array([[float(x) for x in r] for r in rows], dtype=float)
    except FileNotFoundError as exc:
        raise UsageError(f"matrix file not found: {path}") from exc
    except ValueError as exc:
        raise UsageError(f"malformed matrix file {path}: {exc}") from exc


def threads() -> int:
    try:
        return max(1, int(os.environ.get("COMTRACK_THREADS", "1")))
    except ValueError:
        return 1


# --------------------------------------------------------------------------- generate

def cmd_generate(cfg: dict, out: Path, seed: int | None) -> list[Path]:
    sc_cfg = dict(_require(cfg, "scenario", "config"))
    if seed is not None:
        sc_cfg["seed"] = seed
    allowed = {"community_sizes", "within", "between", "anomaly_rows", "magnitude", "t_len", "seed"}
    unknown = set(sc_cfg) - allowed
    if unknown:
        raise UsageError(f"unknown scenario keys: {sorted(unknown)}")
    sizes = sc_cfg.get("community_sizes", [20] * 5)
    if not sizes or sum(sizes) <= 0 or any(int(s) <= 0 for s in sizes):
        raise UsageError("community_sizes must be positive and give n > 0")
    sc_cfg.setdefault("seed", 0)
    try:
        sc = synthetic_scenario(
            community_sizes=tuple(int(s) for s in sizes),
            within=float(sc_cfg.get("within", 0.8)), between=float(sc_cfg.get("between", 0.1)),
            anomaly_rows=tuple(int(r) for r in sc_cfg.get("anomaly_rows", [0, 25, 30, 80])),
            magnitude=None if sc_cfg.get("magnitude") is None else float(sc_cfg["magnitude"]),
            t_len=int(sc_cfg.get("t_len", 100)), seed=int(sc_cfg["seed"]),
        )
    except ValidationError as exc:
        raise UsageError(f"invalid scenario: {exc}") from exc
    out.mkdir(parents=True, exist_ok=True)
    series_path = out / "series.csv"
    write_edge_series(sc.series, series_path)
    truth_path = out / "o_truth.csv"
    _write_matrix(sc.o_truth, truth_path)
    files = [series_path, truth_path]
    # derived seeds are recorded for inspection; regeneration needs only the master seed
    resolved = {"scenario": {k: v for k, v in sc.params.items() if k in allowed},
                "derived_seeds": {k: sc.params[k] for k in ("sbm_seed", "anomaly_seed", "evolution_seed")}}
    write_manifest(out, "generate", resolved, files)
    return files


# --------------------------------------------------------------------------- track

def _init_from_config(ic: dict, seed: int | None, base: Path) -> InitPolicy:
    kind = ic.get("kind", "nmf")
    s = int(ic.get("seed", 0) if seed is None else seed)
    if kind == "nmf":
        return InitPolicy("nmf", None, s, int(ic.get("nmf_max_iter", 2000)))
    if kind == "random":
        return InitPolicy.random(s)
    if kind == "given":
        d = Path(_resolve_path(_require(ic, "dir", "init"), base))
        u, v, o = (_read_matrix(d / f"{x}.csv") for x in "UVO")
        return InitPolicy.given(FactorState(u, v, o))
    raise UsageError(f"unknown init kind {kind!r}")


def _write_track(res: TrackResult, d: Path) -> list[Path]:
    sd = d / "states"
    sd.mkdir(parents=True, exist_ok=True)
    files = []
    for t, st in enumerate(res.states):
        for name, m in (("U", st.u), ("V", st.v), ("O", st.o)):
            p = sd / f"t{t}_{name}.csv"
            _write_matrix(m, p)
            files.append(p)
    extra_keys = sorted({k for dg in res.diagnostics for k, v in dg.extra.items()
                         if isinstance(v, (int, float))})
    p = d / "diagnostics.csv"
    with open(p, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(["t", "outer_iterations", "inner_iterations", "objective", "update_norm",
                          *extra_keys]) + "\n")
        for dg in res.diagnostics:
            vals = [dg.interval, dg.outer_iterations, dg.inner_iterations, repr(float(dg.objective)),
                    repr(float(dg.update_norm)), *(repr(float(dg.extra[k])) for k in extra_keys)]
            f.write(",".join(str(v) for v in vals) + "\n")
    files.append(p)
    return files


def load_track(d: Path) -> list[FactorState]:
    sd = Path(d) / "states"
    if not sd.is_dir():
        raise UsageError(f"no states directory under {d}")
    t = 0
    states = []
    while (sd / f"t{t}_U.csv").exists():
        states.append(FactorState(*(_read_matrix(sd / f"t{t}_{x}.csv") for x in "UVO")))
        t += 1
    if not states:
        raise UsageError(f"no interval states found under {sd}")
    return states


def cmd_track(cfg: dict, out: Path, seed: int | None, algorithm: str | None,
              base: Path) -> list[Path]:
    algorithm = algorithm or cfg.get("algorithm")
    if algorithm is None:
        raise UsageError("no algorithm given (config 'algorithm' or --algorithm)")
    if algorithm not in (*ALGORITHMS, "all"):
        raise UsageError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS + ('all',)}")
    input_path = _resolve_path(_require(cfg, "input", "config"), base)
    if not Path(input_path).exists():
        raise UsageError(f"input series not found: {input_path}")
    hp = hyperparams_from_config(_require(cfg, "hyperparams", "config"))
    try:
        series = load_edge_series(input_path)
    except (EdgeSeriesParseError, ValidationError) as exc:
        raise UsageError(f"cannot load {input_path}: {exc}") from exc
    init_cfg = dict(cfg.get("init", {"kind": "nmf", "seed": 0}))
    policy = _init_from_config(init_cfg, seed, base)
    if seed is not None:
        init_cfg["seed"] = seed
    # all trackers share one concrete starting point
    init = InitPolicy.given(policy.resolve(series, hp.c))

    topo_path = cfg.get("topology")
    agents = int(cfg.get("agents", 10))
    nonneg = cfg.get("nonneg", "exact")
    selected = ALGORITHMS if algorithm == "all" else (algorithm,)
    if "decentralized" in selected:
        try:
            if topo_path:
                topo = load_topology(_resolve_path(topo_path, base), series.n,
                                     None if not cfg.get("partition")
                                     else _resolve_path(cfg["partition"], base))
            else:
                topo = ladder_topology(series.n, agents)
        except ValidationError as exc:
            raise UsageError(f"bad topology: {exc}") from exc

    runners = {
        "exact": lambda: track_exact(series, hp, init, record_trace=False),
        "inexact": lambda: track_inexact(series, hp.with_(max_outer=int(cfg.get("inexact_sweeps", 1))), init),
        "sgd": lambda: track_sgd(series, hp.with_(max_outer=int(cfg.get("inexact_sweeps", 1))), init),
        "decentralized": lambda: run_decentralized(series, hp, topo, init, nonneg=nonneg, workers=1),
    }
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=min(threads(), len(selected))) as pool:
        futures = {name: pool.submit(runners[name]) for name in selected}
        if algorithm == "all":
            futures["batch"] = pool.submit(batch_reference, series, hp, init)
        results = {name: f.result() for name, f in futures.items()}
    log.info("tracking finished in %.1fs", time.perf_counter() - t0)

    out.mkdir(parents=True, exist_ok=True)
    files = []
    truth = None
    if cfg.get("truth"):
        truth_m = _read_matrix(Path(_resolve_path(cfg["truth"], base)))
        truth = set(np.nonzero(truth_m.max(axis=1) > 0)[0].tolist())
    for name, res in results.items():
        files += _write_track(res, out / name)
    if algorithm == "all":
        ref = results["batch"]
        table = compare_tracks({n: results[n] for n in (*ALGORITHMS, "batch")}, ref)
        p = out / "relerr.csv"
        write_relerr_csv(table, p)
        files.append(p)
        for name in ALGORITHMS:
            rep = evaluate_track(results[name], ref, truth, hp.anomaly_eps)
            files += export_report(rep, out / name / "eval", _export_intervals(cfg, len(series)))
    resolved = {
        "input": input_path, "algorithm": algorithm, "hyperparams": hyperparams_to_config(hp),
        "init": init_cfg, "topology": None if not topo_path else _resolve_path(topo_path, base),
        "partition": None if not cfg.get("partition") else _resolve_path(cfg["partition"], base),
        "agents": agents, "nonneg": nonneg, "inexact_sweeps": int(cfg.get("inexact_sweeps", 1)),
        "truth": None if not cfg.get("truth") else _resolve_path(cfg["truth"], base),
        "export_intervals": cfg.get("export_intervals"),
    }
    write_manifest(out, "track", resolved, files)
    return files


def _export_intervals(cfg: dict, t_len: int):
    ks = cfg.get("export_intervals")
    if ks is None:
        return None
    ks = [int(k) for k in ks]
    if any(not 0 <= k < t_len for k in ks):
        raise UsageError(f"export_intervals must lie in [0, {t_len})")
    return ks


# --------------------------------------------------------------------------- evaluate

def cmd_evaluate(cfg: dict, out: Path, base: Path) -> list[Path]:
    run_dir = Path(_resolve_path(_require(cfg, "run", "config"), base))
    states = load_track(run_dir)
    eps = float(cfg.get("eps", 1e-3))
    truth = None
    if cfg.get("truth"):
        truth_m = _read_matrix(Path(_resolve_path(cfg["truth"], base)))
        if truth_m.shape != states[0].o.shape:
            raise ValidationError(f"truth shape {truth_m.shape} != track shape {states[0].o.shape}")
        truth = set(np.nonzero(truth_m.max(axis=1) > 0)[0].tolist())
    track = TrackResult("loaded", states, [])
    ref = None
    if cfg.get("reference"):
        ref = TrackResult("reference", load_track(Path(_resolve_path(cfg["reference"], base))), [])
        if len(ref) != len(track):
            raise ValidationError("reference and track lengths differ")
    rep = evaluate_track(track, ref, truth, eps)
    files = export_report(rep, out, _export_intervals(cfg, len(states)))
    if ref is not None:
        p = out / "relerr.csv"
        write_relerr_csv({"t": list(range(len(states))), "track": rep.relative_errors}, p)
        files.append(p)
    resolved = {"run": str(run_dir), "eps": eps,
                "truth": None if not cfg.get("truth") else _resolve_path(cfg["truth"], base),
                "reference": None if not cfg.get("reference") else _resolve_path(cfg["reference"], base),
                "export_intervals": cfg.get("export_intervals")}
    write_manifest(out, "evaluate", resolved, files)
    if rep.precision is not None:
        log.info("final interval precision=%.3f recall=%.3f", rep.precision[-1], rep.recall[-1])
    return files


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="comtrack", description="Track communities and anomalous nodes in dynamic networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("generate", "write a synthetic SBM-with-anomalies series"),
                           ("track", "run one or all trackers over a series"),
                           ("evaluate", "score a tracked run")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=True, help="JSON config or a manifest.json from an earlier run")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        if name == "track":
            sp.add_argument("--algorithm", choices=(*ALGORITHMS, "all"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        cfg = _read_config(args.config)
        base = Path(args.config).resolve().parent
        if args.command == "generate":
            files = cmd_generate(cfg, out, args.seed)
        elif args.command == "track":
            files = cmd_track(cfg, out, args.seed, args.algorithm, base)
        else:
            files = cmd_evaluate(cfg, out, base)
    except (UsageError, ConfigError) as exc:
        print(f"comtrack: error: {exc}", file=sys.stderr)
        return 2
    except (NumericError, NmfConvergenceError, ValidationError, OSError) as exc:
        print(f"comtrack: failed: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(files)} files and manifest.json to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
