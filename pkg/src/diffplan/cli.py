"""Command-line interface: solve, simulate, train, gen-suite, plot-data.

Exit codes: 0 success, 1 input or config error, 2 degraded result
(non-convergence, failed episodes), 3 internal fault.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from diffplan import __version__
from diffplan.evaluation import (DEFAULT_EPISODE_STEPS, EpisodeLog, aggregate_metrics, aggregate_open_loop,
                                 closed_loop_run, episode_summary, open_loop_eval)
from diffplan.initializer import make_initializer
from diffplan.planner import Planner
from diffplan.residuals import CostWeights
from diffplan.solver import SolverConfig
from diffplan.suite import load_suite, write_suite
from diffplan.training import LOSS_COLUMNS, LossWeights, TrainingConfig, TrainState, train
from diffplan.world import ScenarioError, load_scenario

log = logging.getLogger("diffplan")

EXIT_OK, EXIT_INPUT, EXIT_DEGRADED, EXIT_INTERNAL = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"
PLOT_COLUMNS = ("step", "t", "a", "delta", "v", "maneuver")

# built-in defaults; a --config file overrides these and flags override both
DEFAULTS = {
    "weights": None,
    "solver_mode": "inference",
    "beta": None,
    "iters": None,
    "step_tol": 1e-3,
    "mu": 1e-4,
    "initializer": "heuristic",
    "seed": 0,
    "jobs": 1,
    "horizon": None,
    "episode_steps": DEFAULT_EPISODE_STEPS,
    "per_template": 4,
    "training": {},
    "loss_weights": {},
}


class InputError(Exception):
    """Bad arguments, config or input files (exit 1)."""


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: list
    outputs: list
    seed: int
    version: str = __version__
    argv: list = field(default_factory=list)

    def write(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- configuration -------------------------------------------------------------

def resolve_config(args) -> dict:
    """Merge built-in defaults, the optional config file and explicit flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(doc, dict):
            raise InputError("config file must hold a JSON object")
        unknown = set(doc) - set(DEFAULTS)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(doc)
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def load_weights(spec) -> CostWeights:
    if spec is None:
        return CostWeights()
    try:
        if isinstance(spec, dict):
            return CostWeights.from_dict(spec)
        return CostWeights.load(spec)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise InputError(f"cannot load weights {spec}: {exc}") from exc


def solver_config(cfg: dict) -> SolverConfig:
    overrides = {"step_tol": cfg["step_tol"], "mu": cfg["mu"]}
    if cfg["beta"] is not None:
        overrides["beta"] = cfg["beta"]
    if cfg["iters"] is not None:
        overrides["max_iters"] = cfg["iters"]
    try:
        return SolverConfig.for_mode(cfg["solver_mode"], **overrides)
    except (KeyError, ValueError) as exc:
        raise InputError(f"invalid solver settings: {exc}") from exc


def _planner_spec(cfg: dict) -> dict:
    """Picklable planner description for worker processes."""
    try:
        make_initializer(cfg["initializer"])
    except (ValueError, OSError, KeyError) as exc:
        raise InputError(str(exc)) from exc
    return {"weights": load_weights(cfg["weights"]).to_dict(), "config": asdict(solver_config(cfg)),
            "initializer": cfg["initializer"], "horizon": cfg["horizon"]}


def _build_planner(spec: dict) -> Planner:
    return Planner(CostWeights.from_dict(spec["weights"]), SolverConfig(**spec["config"]), spec["initializer"],
                   spec["horizon"])


# -- commands ---------------------------------------------------------------------

def cmd_solve(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or "solve.json")
    RunManifest("solve", cfg, [str(args.scenario)], [str(out)], cfg["seed"], argv=args.argv).write(
        out.with_name(out.stem + ".manifest.json"))
    try:
        scenario = load_scenario(args.scenario)
    except (OSError, ScenarioError) as exc:
        raise InputError(f"cannot load scenario {args.scenario}: {exc}") from exc
    planner = _build_planner(_planner_spec(cfg))
    result = planner.plan(scenario).result
    out.parent.mkdir(parents=True, exist_ok=True)
    result.save(out)
    if not result.converged:
        print(f"warning: solver did not converge within {result.iterations_used} iterations", file=sys.stderr)
        return EXIT_DEGRADED
    return EXIT_OK


def _episode_job(args):
    scenario, spec, steps = args
    return closed_loop_run(scenario, _build_planner(spec), steps)


def _open_loop_job(args):
    scenario, spec, _ = args
    return open_loop_eval(scenario, _build_planner(spec))


def _run_jobs(fn, jobs, n_workers):
    if n_workers <= 1:
        return [_guarded(fn, j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(_guarded, [fn] * len(jobs), jobs))


def _guarded(fn, job):
    try:
        return fn(job)
    except Exception as exc:  # per-scenario failures are recorded, the run continues
        return {"scenario": job[0].name, "error": f"{type(exc).__name__}: {exc}"}


def cmd_simulate(args) -> int:
    cfg = resolve_config(args)
    if args.planner:
        cfg["initializer"] = args.planner
    out = Path(args.out or "sim_out")
    suite_dir = Path(args.suite)
    if not suite_dir.is_dir():
        raise InputError(f"suite directory {suite_dir} does not exist")
    try:
        scenarios = load_suite(suite_dir)
    except (OSError, ScenarioError) as exc:
        raise InputError(f"cannot load suite: {exc}") from exc
    if not scenarios:
        raise InputError(f"no scenario files in {suite_dir}")
    spec = _planner_spec(cfg)
    outputs = [str(out / "metrics.json"), str(out / "metrics.csv")]
    if args.mode == "closed":
        outputs += [str(out / "episodes" / f"{sc.name}.jsonl") for sc in scenarios]
    else:
        outputs.append(str(out / "open_loop.jsonl"))
    RunManifest("simulate", {**cfg, "mode": args.mode}, [str(suite_dir)], outputs, cfg["seed"],
                argv=args.argv).write(out / MANIFEST_NAME)
    jobs = [(sc, spec, cfg["episode_steps"]) for sc in scenarios]
    if args.mode == "open":
        return _simulate_open(jobs, cfg, out)
    results = _run_jobs(_episode_job, jobs, cfg["jobs"])
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    logs, failures, per_scenario = [], [], []
    for sc, res in zip(scenarios, results):
        if isinstance(res, dict):
            failures.append(res)
            per_scenario.append(res)
            continue
        res.save(out / "episodes" / f"{sc.name}.jsonl")
        logs.append(res)
        per_scenario.append(episode_summary(res, sc))
    degraded = bool(failures) or any(r.get("termination") == "solver_failure" for r in per_scenario)
    if logs:
        metrics = aggregate_metrics(logs, scenarios)
        doc = {**metrics.to_dict(), "mode": "closed", "failures": failures, "per_scenario": per_scenario}
        (out / "metrics.csv").write_text(metrics.to_csv(suite_dir.name), encoding="utf-8")
    else:
        doc = {"schema": "metrics-v1", "mode": "closed", "n_episodes": 0, "failures": failures}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    for f in failures:
        print(f"error: {f['scenario']}: {f['error']}", file=sys.stderr)
    return EXIT_DEGRADED if degraded else EXIT_OK


def _simulate_open(jobs, cfg, out: Path) -> int:
    records = _run_jobs(_open_loop_job, jobs, cfg["jobs"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "open_loop.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    ok = [r for r in records if "error" not in r]
    summary = aggregate_open_loop(ok) if ok else {"n_scenarios": 0}
    doc = {"schema": "metrics-v1", "mode": "open", **summary, "failures": [r for r in records if "error" in r]}
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    keys = sorted(k for k in summary)
    with open(out / "metrics.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["suite"] + keys)
        w.writerow(["open"] + ["" if summary[k] is None else summary[k] for k in keys])
    degraded = len(ok) < len(records) or any(r.get("solver_failure") for r in ok)
    return EXIT_DEGRADED if degraded else EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out or "train_out")
    tcfg = dict(cfg["training"])
    for key in ("epochs", "pretrain_epochs", "batch_size", "lr"):
        value = getattr(args, key, None)
        if value is not None:
            tcfg[key] = value
    try:
        config = TrainingConfig(**tcfg)
        lam = LossWeights(**cfg["loss_weights"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training settings: {exc}") from exc
    suite_dir = Path(args.suite)
    if not suite_dir.is_dir():
        raise InputError(f"suite directory {suite_dir} does not exist")
    try:
        scenarios = load_suite(suite_dir)
    except (OSError, ScenarioError) as exc:
        raise InputError(f"cannot load suite: {exc}") from exc
    if not scenarios:
        raise InputError(f"no scenario files in {suite_dir}")
    ckpt, loss_csv = out / "checkpoint.json", out / "loss.csv"
    RunManifest("train", {**cfg, "training": asdict(config), "loss_weights": asdict(lam)},
                [str(suite_dir)] + ([str(args.resume)] if args.resume else []),
                [str(ckpt), str(loss_csv), str(out / "weights.json"), str(out / "toy.json")], cfg["seed"],
                argv=args.argv).write(out / MANIFEST_NAME)
    if args.resume:
        try:
            state = TrainState.load(args.resume)
        except (OSError, ValueError, KeyError) as exc:
            raise InputError(f"cannot resume from {args.resume}: {exc}") from exc
    else:
        state = TrainState.initial(load_weights(cfg["weights"]))
    solver = SolverConfig.for_mode("training")
    try:
        state = train(scenarios, state, config, solver, lam, loss_csv=loss_csv, checkpoint=ckpt, rng_seed=cfg["seed"])
    except FloatingPointError as exc:
        print(f"error: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
        return EXIT_DEGRADED
    state.save(ckpt)
    state.weights.save(out / "weights.json")
    state.toy.save(out / "toy.json")
    return EXIT_OK


def cmd_gen_suite(args) -> int:
    cfg = resolve_config(args)
    out = Path(args.out)
    from diffplan.suite import generate_suite
    names = [f"{sc.name}.json" for sc in generate_suite(cfg["seed"], cfg["per_template"])]
    RunManifest("gen-suite", cfg, [], [str(out / n) for n in names], cfg["seed"], argv=args.argv).write(
        out / MANIFEST_NAME)
    write_suite(out, cfg["seed"], cfg["per_template"])
    return EXIT_OK


def cmd_plot_data(args) -> int:
    out = Path(args.out) if args.out else None
    try:
        episode = EpisodeLog.load(args.episode)
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot parse episode log {args.episode}: {exc}") from exc
    if out is not None:
        RunManifest("plot-data", {}, [str(args.episode)], [str(out)], 0, argv=args.argv).write(
            out.with_name(out.stem + ".manifest.json"))
    fh = open(out, "w", newline="", encoding="utf-8") if out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLOT_COLUMNS)
        for s in episode.steps:
            writer.writerow([s["step"], repr(s["step"] * episode.dt), repr(s["control"][0]), repr(s["control"][1]),
                             repr(s["ego"][3]), s["maneuver"]])
    finally:
        if out:
            fh.close()
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def _common(p, solver=True):
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output path")
    if solver:
        p.add_argument("--weights", help="weights-v1 JSON file")
        p.add_argument("--solver-mode", dest="solver_mode", choices=("training", "inference"))
        p.add_argument("--beta", type=float)
        p.add_argument("--iters", type=int)
        p.add_argument("--initializer", help="heuristic, constant-velocity or toy:<file>")
        p.add_argument("--jobs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffplan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"diffplan {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="solve one scenario and write a solve-v1 document")
    p.add_argument("scenario")
    _common(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run a suite open-loop or closed-loop")
    p.add_argument("suite")
    p.add_argument("--mode", choices=("closed", "open"), default="closed")
    p.add_argument("--planner", help="initializer for this run, e.g. constant-velocity-only")
    p.add_argument("--steps", dest="episode_steps", type=int)
    _common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train learnable weights and the toy initializer")
    p.add_argument("suite")
    p.add_argument("--epochs", type=int)
    p.add_argument("--pretrain-epochs", dest="pretrain_epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="train-v1 checkpoint to continue from")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gen-suite", help="write the synthetic scenario suite")
    p.add_argument("out")
    p.add_argument("--per-template", dest="per_template", type=int)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_suite)

    p = sub.add_parser("plot-data", help="CSV of time against controls, speed and maneuver")
    p.add_argument("episode")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot_data)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DIFFPLAN_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    args.argv = list(sys.argv[1:] if argv is None else argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("internal fault")
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
