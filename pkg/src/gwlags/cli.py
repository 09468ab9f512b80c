"""``gwlags`` command line: generate, train, solve, bench, score-manifest, hgnn-info.

Exit codes: 0 success, 2 usage, 3 data, 4 numerical divergence.  Every
command writes a RunManifest next to its outputs; artifacts carry the
manifest's content hash as ``run_id``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .config import CONFIG_ENV, RunConfig, load_run_config
from .generate import PRESETS, instance_from_fragment, sample_instances
from .hgnn import hgnn_info, hgnn_solve, init_params
from .problem import ProblemInstance
from .solvers import SOLVERS
from .trainer import (
    PoolSource,
    SyntheticSource,
    load_state,
    save_state,
    start_state,
    train,
    write_history,
)
from .utility import GS_LAMBDA, GroupManifest, score_manifest

log = logging.getLogger("gwlags")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
BENCH_CSV_SCHEMA = 1
BENCH_COLUMNS = ["instance_id", "solver", "objective", "feasible", "wall_time_s",
                 "ratio_to_oracle", "run_id"]
LATENCY_COLUMNS = ["solver", "warmup", "repeats", "median_s", "p10_s", "p90_s", "run_id"]
SOLVER_NAMES = sorted(SOLVERS) + ["hgnn"]


class UsageError(Exception):
    pass


# --- run manifests ----------------------------------------------------------

def _file_digest(path: Path) -> str:
    """Git blob hash of a file's bytes."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(command: str, config: dict, seed: int, args: dict, inputs: list[Path]) -> str:
    """Hash of everything that determines a command's outputs."""
    doc = {
        "command": command,
        "config": config,
        "seed": seed,
        "args": args,
        "inputs": {str(p): _file_digest(p) for p in sorted(inputs)},
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    args: dict
    inputs: list[str]
    content_hash: str
    outputs: list[str] = field(default_factory=list)
    started_at: str = ""
    finished_at: str = ""

    @classmethod
    def start(cls, command: str, config: dict, seed: int, args: dict, inputs=()) -> "RunManifest":
        inputs = [Path(p) for p in inputs]
        return cls(command, config, seed, args, [str(p) for p in inputs],
                   content_hash(command, config, seed, args, inputs),
                   started_at=_now())

    @property
    def run_id(self) -> str:
        return self.content_hash[:16]

    def finish(self, path: Path) -> None:
        self.finished_at = _now()
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _manifest_path(out: Path) -> Path:
    return out / "run_manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


# --- helpers ------------------------------------------------------------------

def _load_dataset(path: Path) -> tuple[list[ProblemInstance], list[Path]]:
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    files = sorted(path.glob("instance_*.json"))
    return [ProblemInstance.load(f) for f in files], files


def _instance_id(inst: ProblemInstance, fallback: int) -> int:
    return int(inst.meta.get("instance_id", fallback))


def _load_policy(checkpoint: Path | None):
    if checkpoint is None:
        raise UsageError("solver 'hgnn' needs --checkpoint")
    if not checkpoint.exists():
        raise UsageError(f"checkpoint not found: {checkpoint}")
    state, hcfg, _, _ = load_state(checkpoint)
    return state.params, hcfg


def _solve(name: str, inst: ProblemInstance, policy, threshold: float, reoptimize: bool):
    if name == "hgnn":
        params, hcfg = policy
        return hgnn_solve(inst, params, hcfg, threshold, reoptimize)
    return SOLVERS[name](inst)


def _parse_solvers(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    bad = [n for n in names if n not in SOLVER_NAMES]
    if bad or not names:
        raise UsageError(f"unknown solver(s) {bad}; choose from {SOLVER_NAMES}")
    return names


# --- generate -------------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    inputs = [Path(args.fragment)] if args.fragment else []
    man = RunManifest.start("generate", cfg.to_dict(), args.seed,
                            {"count": args.count, "fragment": args.fragment}, inputs)
    out.mkdir(parents=True, exist_ok=True)
    if args.fragment:
        fragment = json.loads(Path(args.fragment).read_text())
        insts = []
        for n in range(args.count):
            inst = instance_from_fragment(fragment, cfg.instance, np.random.default_rng([args.seed, n]))
            inst.meta.update(instance_id=n, seed=args.seed)
            insts.append(inst)
    else:
        insts = sample_instances(cfg.instance, args.count, args.seed)
    for n, inst in enumerate(insts):
        inst.meta["run_id"] = man.run_id
        path = out / f"instance_{n:05d}.json"
        inst.save(path)
        man.outputs.append(str(path))
    man.finish(_manifest_path(out))
    log.info("wrote %d instances to %s", len(insts), out)
    return EXIT_OK


# --- train ------------------------------------------------------------------------

def cmd_train(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    val, files = _load_dataset(Path(args.dataset))
    if not val:
        raise ValueError(f"dataset {args.dataset} holds no instances")
    tcfg, hcfg = cfg.train, cfg.hgnn
    overrides = {k: getattr(args, k) for k in ("epochs", "steps_per_epoch") if getattr(args, k)}
    tcfg = replace(tcfg, seed=args.seed, **overrides)
    inputs = list(files) + ([Path(args.resume)] if args.resume else [])
    man = RunManifest.start("train", {**cfg.to_dict(), "train": asdict(tcfg)}, args.seed,
                            {"dataset": args.dataset, "resume": args.resume,
                             "train_on_dataset": args.train_on_dataset}, inputs)
    state = None
    if args.resume:
        # the checkpoint's settings win so the continuation replays the original run
        state, hcfg, saved, _ = load_state(args.resume)
        tcfg = replace(saved, epochs=args.epochs or saved.epochs)
    if args.train_on_dataset:
        source = PoolSource(val, tcfg.seed)
    else:
        source = SyntheticSource(cfg.instance, tcfg.seed)
    if any(inst.num_drones != source.num_drones for inst in val):
        raise ValueError("dataset drone count does not match the configured deployment")
    val = val[:tcfg.val_size]
    if state is None:
        state = start_state(tcfg, hcfg, source)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, hist = out / "checkpoint.json", out / "history.csv"

    def on_epoch(st):
        save_state(ckpt, st, hcfg, tcfg, {"run_id": man.run_id})
        write_history(hist, [{**row, "run_id": man.run_id} for row in st.history])

    t0 = time.perf_counter()
    try:
        train(tcfg, hcfg, source, state, val, on_epoch)
    finally:
        man.outputs += [str(ckpt), str(hist)]
        man.finish(_manifest_path(out))
    log.info("trained %d epochs in %.1f s", state.epoch, time.perf_counter() - t0)
    return EXIT_OK


# --- solve ----------------------------------------------------------------------

def cmd_solve(args, cfg: RunConfig) -> int:
    policy = _load_policy(Path(args.checkpoint) if args.checkpoint else None) \
        if args.solver == "hgnn" else None
    inputs = [Path(args.instance)] + ([Path(args.checkpoint)] if args.checkpoint else [])
    man = RunManifest.start("solve", cfg.to_dict(), args.seed,
                            {"solver": args.solver, "threshold": args.threshold,
                             "reoptimize_power": args.reoptimize_power}, inputs)
    inst = ProblemInstance.load(args.instance)
    res = _solve(args.solver, inst, policy, args.threshold, args.reoptimize_power)
    doc = {**res.to_dict(), "run_id": man.run_id}
    text = json.dumps(doc, indent=2, sort_keys=True, default=float)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        man.outputs.append(str(out))
        man.finish(_manifest_path(out))
    else:
        print(text)
    return EXIT_OK


# --- bench ----------------------------------------------------------------------

_WORKER_POLICY = None


def _init_worker(checkpoint):
    global _WORKER_POLICY
    _WORKER_POLICY = _load_policy(Path(checkpoint)) if checkpoint else None


def _bench_one(task):
    idx, inst, solvers, threshold, reoptimize = task
    rows = []
    for name in solvers:
        res = _solve(name, inst, _WORKER_POLICY, threshold, reoptimize)
        rows.append((idx, name, res.objective, res.feasible, res.wall_time))
    return rows


def measure_latency(fn, warmup: int = 10, repeats: int = 100) -> np.ndarray:
    """Wall times of ``repeats`` calls after ``warmup`` untimed ones."""
    for _ in range(warmup):
        fn()
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn()
        times[i] = time.perf_counter() - t0
    return times


def cmd_bench(args, cfg: RunConfig) -> int:
    solvers = _parse_solvers(args.solvers)
    latency_solvers = _parse_solvers(args.latency_solvers) if args.latency_solvers else []
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    if "hgnn" in solvers + latency_solvers:
        _load_policy(checkpoint)  # usage error up front
    insts, files = _load_dataset(Path(args.dataset))
    order = sorted(range(len(insts)), key=lambda n: _instance_id(insts[n], n))
    inputs = list(files) + ([checkpoint] if checkpoint else [])
    man = RunManifest.start("bench", cfg.to_dict(), args.seed,
                            {"solvers": solvers, "latency_solvers": latency_solvers,
                             "warmup": args.warmup, "repeats": args.repeats,
                             "threshold": args.threshold,
                             "reoptimize_power": args.reoptimize_power}, inputs)
    tasks = [(_instance_id(insts[n], n), insts[n], solvers, args.threshold, args.reoptimize_power)
             for n in order]
    ckpt_arg = str(checkpoint) if checkpoint else None
    _init_worker(ckpt_arg)  # the latency pass runs in this process
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs, initializer=_init_worker, initargs=(ckpt_arg,)) as pool:
            results = list(pool.map(_bench_one, tasks))
    else:
        results = [_bench_one(t) for t in tasks]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for per_instance in results:
        oracle = {name: obj for _, name, obj, _, _ in per_instance}.get("oracle")
        for idx, name, obj, feasible, wall in per_instance:
            ratio = "" if oracle is None or oracle <= 0 else obj / oracle
            rows.append(dict(zip(BENCH_COLUMNS, (idx, name, obj, int(feasible), wall, ratio, man.run_id))))
    _write_csv(out / "bench.csv", BENCH_COLUMNS, rows)

    summary = {"csv_schema": BENCH_CSV_SCHEMA, "run_id": man.run_id, "num_instances": len(tasks),
               "solvers": {}}
    for name in solvers:
        objs = np.array([r["objective"] for r in rows if r["solver"] == name])
        walls = np.array([r["wall_time_s"] for r in rows if r["solver"] == name])
        summary["solvers"][name] = {
            "objective_mean": float(objs.mean()) if objs.size else None,
            "objective_std": float(objs.std()) if objs.size else None,
            "wall_time_mean_s": float(walls.mean()) if walls.size else None,
            "infeasible_count": sum(1 for r in rows if r["solver"] == name and not r["feasible"]),
        }

    lat_rows = []
    if latency_solvers and tasks:
        inst = tasks[0][1]
        for name in latency_solvers:
            t = measure_latency(lambda: _solve(name, inst, _WORKER_POLICY, args.threshold,
                                               args.reoptimize_power), args.warmup, args.repeats)
            lat_rows.append(dict(zip(LATENCY_COLUMNS, (name, args.warmup, args.repeats, float(np.median(t)),
                                                       float(np.percentile(t, 10)),
                                                       float(np.percentile(t, 90)), man.run_id))))
        _write_csv(out / "latency.csv", LATENCY_COLUMNS, lat_rows)
        summary["latency_median_s"] = {r["solver"]: r["median_s"] for r in lat_rows}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    man.outputs += [str(out / "bench.csv"), str(out / "summary.json")]
    if lat_rows:
        man.outputs.append(str(out / "latency.csv"))
    man.finish(_manifest_path(out))
    for name, s in summary["solvers"].items():
        log.info("%-6s mean objective %.4f (std %.4f)", name, s["objective_mean"] or 0.0,
                 s["objective_std"] or 0.0)
    return EXIT_OK


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)


# --- score-manifest / hgnn-info ---------------------------------------------------

def cmd_score_manifest(args, cfg: RunConfig) -> int:
    manifest_path = Path(args.manifest)
    man = RunManifest.start("score-manifest", cfg.to_dict(), args.seed,
                            {"lam": args.lam, "normalize_by_count": args.normalize_by_count},
                            [manifest_path])
    fragment = score_manifest(GroupManifest.load(manifest_path), args.lam,
                              args.normalize_by_count, args.jobs)
    fragment["run_id"] = man.run_id
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fragment, indent=2))
    man.outputs.append(str(out))
    man.finish(_manifest_path(out))
    return EXIT_OK


def cmd_hgnn_info(args, cfg: RunConfig) -> int:
    if args.checkpoint:
        params, hcfg = _load_policy(Path(args.checkpoint))
    else:
        hcfg = cfg.hgnn
        params = init_params(hcfg, args.seed)
    info = hgnn_info(params, hcfg)
    text = json.dumps(info, indent=2)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


# --- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help=f"TOML run config (default: ${CONFIG_ENV})")
    common.add_argument("--preset", choices=sorted(PRESETS), help="override the config's preset")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="parallel workers across instances")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="gwlags", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="sample problem instances")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--fragment", help="scored utility fragment to join with channel draws")
    g.set_defaults(func=cmd_generate, needs_out=True)

    t = sub.add_parser("train", parents=[common], help="dual training of the scheduler")
    t.add_argument("--dataset", required=True, help="directory of instance files (validation set)")
    t.add_argument("--train-on-dataset", action="store_true",
                   help="draw training batches from the dataset instead of fresh samples")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--steps-per-epoch", type=int)
    t.set_defaults(func=cmd_train, needs_out=True)

    s = sub.add_parser("solve", parents=[common], help="solve one instance")
    s.add_argument("instance")
    s.add_argument("--solver", choices=SOLVER_NAMES, default="oracle")
    s.add_argument("--checkpoint")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--reoptimize-power", action="store_true")
    s.set_defaults(func=cmd_solve, needs_out=False)

    b = sub.add_parser("bench", parents=[common], help="compare solvers over a dataset")
    b.add_argument("--dataset", required=True)
    b.add_argument("--solvers", default="oracle,gw1,gw2,stt,blind")
    b.add_argument("--latency-solvers", default="", help="solvers to time with warmup + repeats")
    b.add_argument("--checkpoint")
    b.add_argument("--warmup", type=int, default=10)
    b.add_argument("--repeats", type=int, default=100)
    b.add_argument("--threshold", type=float, default=0.5)
    b.add_argument("--reoptimize-power", action="store_true")
    b.set_defaults(func=cmd_bench, needs_out=True)

    m = sub.add_parser("score-manifest", parents=[common], help="group utilities from rendered images")
    m.add_argument("manifest")
    m.add_argument("--lam", type=float, default=GS_LAMBDA)
    m.add_argument("--normalize-by-count", action="store_true")
    m.set_defaults(func=cmd_score_manifest, needs_out=True)

    h = sub.add_parser("hgnn-info", parents=[common], help="network shape and parameter count")
    h.add_argument("--checkpoint")
    h.set_defaults(func=cmd_hgnn_info, needs_out=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.needs_out and not args.out:
            raise UsageError(f"{args.command} needs --out")
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = load_run_config(args.config, args.preset)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"gwlags: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as exc:
        print(f"gwlags: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, KeyError) as exc:
        print(f"gwlags: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
