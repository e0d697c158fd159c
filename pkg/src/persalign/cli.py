"""Command-line entry point: ``persalign <subcommand>``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 configuration
error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, load_config, parse_config
from .diversity import drd
from .errors import InsufficientPositivePoints, InvalidConfig, InvalidMode, PersalignError
from .instance import ProblemInstance, gap_stats, load_instance
from .io import sha256_file, write_csv, write_json
from .offline import (
    SWEEP_COLUMNS,
    SweepResult,
    fit_decay_rate,
    pooled_decay_rate,
    run_sweep,
    zero_regret_burn_in,
)
from .online import FIT_COLUMNS, run_online
from .verify import run_all

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VERIFY = 0, 1, 2, 3

log = logging.getLogger("persalign")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class _Run:
    """Collects outputs of one command and writes the manifest last."""

    def __init__(self, out: Path, command: str, cfg: ExperimentConfig | None):
        self.out = out
        self.command = command
        self.cfg = cfg
        self.started = _now()
        self.files: list[str] = []
        self.extra: dict = {}
        out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        self.files.append(name)
        return self.out / name

    def finish(self, inst: ProblemInstance | None, seeds) -> None:
        manifest = {
            "schema_version": 1,
            "command": self.command,
            "version": __version__,
            "config": self.cfg.snapshot() if self.cfg else None,
            "config_ini": self.cfg.to_ini() if self.cfg else None,
            "instance_hash": inst.fingerprint() if inst is not None else None,
            "seeds": list(seeds),
            "started": self.started,
            "finished": _now(),
            "outputs": {name: sha256_file(self.out / name) for name in sorted(set(self.files))},
            **self.extra,
        }
        write_json(self.out / "manifest.json", manifest)


def _config(args) -> ExperimentConfig:
    return load_config(args.config) if args.config else parse_config("")


def _instance(args, cfg: ExperimentConfig) -> ProblemInstance:
    if getattr(args, "instance", None):
        return load_instance(args.instance)
    return cfg.build_instance()


def _write_instance_files(run: _Run, inst: ProblemInstance) -> None:
    write_json(run.path("instance.json"), inst.to_dict())
    write_json(run.path("diversity.json"), drd(inst).as_dict())
    write_json(run.path("gap_stats.json"), {"schema_version": 1, **gap_stats(inst).as_dict()})


def cmd_gen_instance(args) -> int:
    cfg = _config(args)
    inst = cfg.build_instance()
    run = _Run(Path(args.out), "gen-instance", cfg)
    _write_instance_files(run, inst)
    run.finish(inst, [cfg.seed])
    print(drd(inst).summary())
    return EXIT_OK


def _online_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    changes = {k: v for k, v in {
        "horizon": args.horizon, "eta": args.eta, "run_seed": args.run_seed,
        "learner": args.learner, "slate_mode": args.slate_mode, "refit_divisor": args.refit_divisor,
    }.items() if v is not None}
    cfg.online = dataclasses.replace(cfg.online, **changes)
    cfg.validate()
    return cfg


def _execute_online(run: _Run, inst: ProblemInstance, cfg: ExperimentConfig) -> int:
    write_json(run.path("instance.json"), inst.to_dict())
    try:
        trace, summary, fits = run_online(inst, cfg.fit, cfg.online)
    except PersalignError as exc:
        partial = getattr(exc, "trace", None)
        if partial is not None:
            partial.to_csv(run.path("trace.csv"))
            run.extra["aborted"] = f"{type(exc).__name__}: {exc}"
            run.finish(inst, [cfg.online.run_seed])
        raise
    trace.to_csv(run.path("trace.csv"))
    write_json(run.path("summary.json"), summary.as_dict())
    write_csv(run.path("fit_diagnostics.csv"), FIT_COLUMNS, (f.as_row() for f in fits))
    run.finish(inst, [cfg.online.run_seed])
    print(f"G_T = {trace.cumulative[-1]:.6g} over {len(trace)} rounds, {summary.refit_count} refits, "
          f"last positive round {summary.last_positive_round}")
    return EXIT_OK


def cmd_online(args) -> int:
    cfg = _online_overrides(args, _config(args))
    inst = _instance(args, cfg)
    return _execute_online(_Run(Path(args.out), "online", cfg), inst, cfg)


def _sweep_one(payload):
    inst_doc, cfg_ini, seed = payload
    cfg = parse_config(cfg_ini, env={})
    return run_sweep(ProblemInstance.from_dict(inst_doc), cfg.fit, cfg.offline, seed)


def _offline_overrides(args, cfg: ExperimentConfig) -> ExperimentConfig:
    changes = {}
    if args.n_total is not None:
        changes["n_total"] = args.n_total
    if args.checkpoints is not None:
        changes["n_checkpoints"] = args.checkpoints
    if args.seeds is not None:
        changes["seeds"] = tuple(int(s) for s in args.seeds.replace(",", " ").split())
    if args.cold_start:
        changes["warm_start"] = False
    if args.weighting is not None:
        changes["weighting"] = args.weighting
    cfg.offline = dataclasses.replace(cfg.offline, **changes)
    cfg.validate()
    return cfg


def decay_summary(results: list[SweepResult]) -> dict:
    per_seed = []
    for res in results:
        entry = {"seed": res.seed, "burn_in": zero_regret_burn_in(res), "failed_checkpoints": res.failed}
        base = float(res.mean_regret[0])
        entry["final_over_initial"] = float(res.mean_regret[-1]) / base if base > 0 else None
        try:
            entry["slope"], entry["r_squared"] = fit_decay_rate(res)
        except InsufficientPositivePoints:
            entry["slope"] = entry["r_squared"] = None
        per_seed.append(entry)
    try:
        slope, r2 = pooled_decay_rate(results)
    except InsufficientPositivePoints:
        slope = r2 = None
    return {"schema_version": 1, "pooled_slope": slope, "pooled_r_squared": r2, "per_seed": per_seed}


def _execute_offline(run: _Run, inst: ProblemInstance, cfg: ExperimentConfig, jobs: int) -> int:
    write_json(run.path("instance.json"), inst.to_dict())
    payloads = [(inst.to_dict(), cfg.to_ini(), s) for s in cfg.offline.seeds]
    if jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, payloads))
    else:
        results = [run_sweep(inst, cfg.fit, cfg.offline, s) for s in cfg.offline.seeds]
    rows = [row for res in results for row in res.rows()]
    write_csv(run.path("sweep.csv"), SWEEP_COLUMNS, rows)
    decay = decay_summary(results)
    write_json(run.path("decay.json"), decay)
    run.finish(inst, cfg.offline.seeds)
    print(f"pooled slope {decay['pooled_slope']}, R^2 {decay['pooled_r_squared']}")
    for entry in decay["per_seed"]:
        print(f"  seed {entry['seed']}: burn-in {entry['burn_in']}, final/initial {entry['final_over_initial']}")
    return EXIT_OK


def cmd_offline_sweep(args) -> int:
    cfg = _offline_overrides(args, _config(args))
    inst = _instance(args, cfg)
    return _execute_offline(_Run(Path(args.out), "offline-sweep", cfg), inst, cfg, args.jobs)


def cmd_diagnose(args) -> int:
    if args.instance:
        inst = load_instance(args.instance)
        cfg = None
    else:
        cfg = _config(args)
        inst = cfg.build_instance()
    report = drd(inst, hard_fraction=args.hard_fraction, rank_tol=args.rank_tol)
    stats = gap_stats(inst)
    print(report.summary())
    print("top-two gaps: " + ", ".join(f"{k}={v:.6g}" for k, v in stats.as_dict().items()))
    if args.out:
        run = _Run(Path(args.out), "diagnose", cfg)
        write_json(run.path("diversity.json"), report.as_dict())
        write_json(run.path("gap_stats.json"), {"schema_version": 1, **stats.as_dict()})
        run.finish(inst, [cfg.seed] if cfg else [inst.seed])
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all(seed=args.seed, echo=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results)} suites, {len(failed)} failed")
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_replay(args) -> int:
    src = Path(args.manifest)
    manifest = json.loads(src.read_text())
    cfg = parse_config(manifest["config_ini"], env={})
    inst = load_instance(src.parent / "instance.json")
    if inst.fingerprint() != manifest["instance_hash"]:
        raise InvalidConfig("instance_hash", "instance.json does not match the manifest")
    run = _Run(Path(args.out), manifest["command"], cfg)
    run.extra["replayed_from"] = str(src)
    if manifest["command"] == "online":
        return _execute_online(run, inst, cfg)
    if manifest["command"] == "offline-sweep":
        return _execute_offline(run, inst, cfg, args.jobs)
    raise InvalidConfig("command", f"cannot replay {manifest['command']!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="persalign", description="Personalized alignment simulation lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="config file or preset name (e.g. desk_online)")

    p = sub.add_parser("gen-instance", help="build an instance and write it with its diagnostics")
    with_config(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_instance)

    p = sub.add_parser("online", help="run the greedy online loop")
    with_config(p)
    p.add_argument("--instance", help="instance.json to use instead of building one")
    p.add_argument("--horizon", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--run-seed", "--seed", dest="run_seed", type=int)
    p.add_argument("--refit-divisor", type=int)
    p.add_argument("--slate-mode")
    p.add_argument("--learner", choices=["erm", "oracle", "zero"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_online)

    p = sub.add_parser("offline-sweep", help="prefix-ERM sweep on reference-logged data")
    with_config(p)
    p.add_argument("--instance")
    p.add_argument("--n-total", type=int)
    p.add_argument("--checkpoints", type=int)
    p.add_argument("--seeds", help="comma-separated run seeds")
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--weighting", choices=["rho", "uniform"])
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_offline_sweep)

    p = sub.add_parser("diagnose", help="print diversity and gap diagnostics")
    with_config(p)
    p.add_argument("--instance")
    p.add_argument("--hard-fraction", type=float, default=0.10)
    p.add_argument("--rank-tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("verify", help="run the randomized property suites")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("replay", help="re-run an online or offline command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def _origin(exc: BaseException) -> str:
    tb = exc.__traceback__
    name = "persalign"
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith("persalign."):
            name = mod
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidConfig, InvalidMode) as exc:
        print(f"{_origin(exc)}: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PersalignError as exc:
        print(f"{_origin(exc)}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        if args.verbose:
            traceback.print_exc()
        print(f"persalign: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
