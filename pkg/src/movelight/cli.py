"""Command-line entry point: train, eval, compare, ablate, validate.

Exit codes: 0 success, 1 usage error, 2 data error (bad scenario, missing
checkpoint, infeasible timing plan), 3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import functools
import json
import logging
import re
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

from .agent import AgentConfig, MoveLightController, NumericalAbort, load_checkpoint, run_training, save_checkpoint
from .controllers import (
    MaxPressureController,
    OversaturatedError,
    RandomController,
    fixed_controller,
    webster_controller,
)
from .experiment import RunReport, evaluate_seeds, parallel_map, read_scenario, run_episode
from .frap import FrapConfig
from .metrics import CSV_HEADER
from .network import ScenarioError, validate_flows, validate_network
from .sim import RouteError, SimConfig

CONTROLLERS = ("fixed", "webster", "maxpressure", "movelight", "random")
DEFAULT_EVAL_SEEDS = tuple(range(10_000, 10_005))
SWEEPS = {"heads": (1, 3, 5, 7, 9), "neighbors": (2, 3, 4, 5, 6)}

log = logging.getLogger("movelight")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """'3', '0,2,5' or '10000-10004' (inclusive range)."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if re.fullmatch(r"\d+-\d+", part):
            lo, hi = map(int, part.split("-"))
            seeds.extend(range(lo, hi + 1))
        elif re.fullmatch(r"\d+", part):
            seeds.append(int(part))
        else:
            raise argparse.ArgumentTypeError(f"invalid seed list {text!r}")
    return seeds


def parse_controllers(text: str) -> list[str]:
    names = [c.strip() for c in text.split(",") if c.strip()]
    bad = [c for c in names if c not in CONTROLLERS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown controller(s) {bad}; choose from {', '.join(CONTROLLERS)}")
    return names


# --------------------------------------------------------------------------
# shared plumbing


def _load(args):
    try:
        net, flows = read_scenario(args.scenario, args.demand_scale)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ScenarioError as exc:
        raise DataError(str(exc)) from None
    problems = validate_network(net) + validate_flows(net, flows)
    if problems:
        raise DataError("invalid scenario:\n  " + "\n  ".join(problems))
    return net, flows


def _frap_config(args, base: FrapConfig | None = None) -> FrapConfig:
    cfg = base or FrapConfig()
    over = {}
    if getattr(args, "heads", None) is not None:
        over["heads"] = args.heads
    if getattr(args, "neighbors", None) is not None:
        over["max_neighbors"] = args.neighbors
    if getattr(args, "embed_dim", None) is not None:
        over["embed_dim"] = args.embed_dim
    try:
        return replace(cfg, **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _agent_config(args) -> AgentConfig:
    over = {}
    if args.episodes is not None:
        over["episodes"] = args.episodes
    if args.gamma is not None:
        over["gamma"] = args.gamma
    try:
        return replace(AgentConfig(), **over)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _sim_config(args) -> SimConfig:
    try:
        return SimConfig(horizon_steps=args.horizon)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def build_controller(kind: str, net, flows, sim_cfg: SimConfig, params, frap_cfg, seed: int):
    """Controller instance for one evaluation seed (module level so worker processes can pickle it)."""
    if kind == "maxpressure":
        return MaxPressureController(sim_cfg.decision_interval_s)
    if kind == "webster":
        return webster_controller(net, flows, sim_cfg)
    if kind == "fixed":
        return fixed_controller(net, sim_cfg)
    if kind == "random":
        return RandomController(seed, sim_cfg.decision_interval_s)
    if kind == "movelight":
        return MoveLightController(params, frap_cfg, sim_cfg.decision_interval_s, eps=0.0, seed=seed)
    raise ValueError(kind)


def _checkpoint(args):
    if not args.checkpoint:
        raise UsageError("the movelight controller needs --checkpoint")
    try:
        params, cfg, _ = load_checkpoint(args.checkpoint)
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {args.checkpoint}") from None
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"unreadable checkpoint {args.checkpoint}: {exc}") from None
    return params, cfg


def _evaluate(args, net, flows, kinds: Sequence[str], seeds: Sequence[int]) -> list[RunReport]:
    sim_cfg = _sim_config(args)
    params = frap_cfg = None
    if "movelight" in kinds:
        params, frap_cfg = _checkpoint(args)
    # build once up front so infeasible plans fail before any simulation
    for kind in kinds:
        try:
            build_controller(kind, net, flows, sim_cfg, params, frap_cfg, 0)
        except OversaturatedError as exc:
            raise DataError(f"{kind}: {exc}") from None
    reports = []
    for kind in kinds:
        factory = functools.partial(build_controller, kind, net, flows, sim_cfg, params, frap_cfg)
        t0 = time.perf_counter()
        per_seed = evaluate_seeds(net, flows, factory, sim_cfg, seeds)
        reports.append(RunReport(net.id, kind, list(seeds), per_seed,
                                 {"sim": asdict(sim_cfg), "demand_scale": args.demand_scale},
                                 time.perf_counter() - t0))
    return reports


def _fmt(pair) -> str:
    mean, sd = pair
    if mean is None:
        return "n/a"
    return f"{mean:.3f} ± {sd:.3f}"


def comparison_markdown(reports: Sequence[RunReport]) -> str:
    lines = [
        f"Scenario `{reports[0].scenario}`, seeds {reports[0].seeds}, mean ± sample sd over seeds.",
        "",
        "| controller | travel time (s) | queue (veh) | delay (s) | throughput (veh) |",
        "|---|---|---|---|---|",
    ]
    for r in reports:
        agg = r.aggregate()
        lines.append(f"| {r.controller} | {_fmt(agg['avg_travel_time_s'])} | {_fmt(agg['avg_queue'])} | "
                     f"{_fmt(agg['avg_delay_s'])} | {_fmt(agg['throughput'])} |")
    return "\n".join(lines) + "\n"


def _write_rows(path: Path, reports: Sequence[RunReport]) -> None:
    with open(path, "w") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in reports:
            for row in r.csv_rows():
                fh.write(row + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_validate(args) -> int:
    try:
        net, flows = read_scenario(args.scenario)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from None
    except ScenarioError as exc:
        print(f"error: {exc}")
        return 2
    problems = validate_network(net) + validate_flows(net, flows)
    for p in problems:
        print(p)
    if problems:
        return 2
    n_phases = sorted({len(it.phases) for it in net.intersections})
    print(f"ok: {net.id}: {len(net.intersections)} intersection(s), {len(net.lanes)} lanes, "
          f"phases per intersection {n_phases}, {len(flows.entries)} flow entries")
    return 0


def cmd_train(args) -> int:
    net, flows = _load(args)
    out = _out_dir(args)
    agent_cfg = _agent_config(args)
    frap_cfg = _frap_config(args)
    sim_cfg = _sim_config(args)
    seed = args.seed if args.seed is not None else 0
    episodes_path = out / "episodes.csv"
    fields = ["episode", "seed", "travel_time", "throughput", "avg_queue", "avg_delay", "unfinished",
              "mean_reward", "mean_loss", "epsilon", "train_steps"]
    t0 = time.perf_counter()
    with open(episodes_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)

        def on_episode(e):
            m = e.metrics
            writer.writerow([e.episode, e.seed, m.avg_travel_time_s, m.throughput, m.avg_queue, m.avg_delay_s,
                             m.unfinished, e.mean_reward, e.mean_loss, e.epsilon, e.train_steps])
            fh.flush()

        result = run_training(net, flows, agent_cfg, sim_cfg, frap_cfg, seed, on_episode=on_episode)
    wall = time.perf_counter() - t0
    save_checkpoint(out / "checkpoint.npz", result.params, frap_cfg, result.train_steps,
                    {"scenario": net.id, "seed": seed, "episodes": agent_cfg.episodes})
    tail = result.episodes[-10:]
    tail_queue = sum(e.metrics.avg_queue for e in tail) / len(tail)
    config = {"agent": asdict(agent_cfg), "frap": asdict(frap_cfg), "sim": asdict(sim_cfg), "seed": seed,
              "scenario": str(args.scenario), "demand_scale": args.demand_scale}
    (out / "config.json").write_text(json.dumps(config, indent=2) + "\n")
    report = [
        f"# Training report: {net.id}",
        "",
        f"- episodes: {agent_cfg.episodes}, seed {seed}, train steps {result.train_steps}",
        f"- mean avg_queue over the last {len(tail)} training episodes: {tail_queue:.3f}",
        f"- wall clock: {wall:.1f} s",
        f"- checkpoint: `checkpoint.npz`; per-episode rows: `episodes.csv`; configuration: `config.json`",
        "",
    ]
    (out / "report.md").write_text("\n".join(report))
    print(f"trained {agent_cfg.episodes} episodes in {wall:.1f} s; last-{len(tail)} mean queue {tail_queue:.3f}; "
          f"wrote {out}")
    return 0


def cmd_eval(args) -> int:
    net, flows = _load(args)
    kinds = args.controller or ["maxpressure"]
    reports = _evaluate(args, net, flows, kinds, args.seeds or list(DEFAULT_EVAL_SEEDS))
    print(CSV_HEADER)
    for r in reports:
        for row in r.csv_rows():
            print(row)
    if args.event_log:
        # one extra traced run of the first controller on the first seed
        sim_cfg = _sim_config(args)
        params = frap_cfg = None
        if kinds[0] == "movelight":
            params, frap_cfg = _checkpoint(args)
        seed = reports[0].seeds[0]
        ctl = build_controller(kinds[0], net, flows, sim_cfg, params, frap_cfg, seed)
        with open(args.event_log, "w") as fh:
            run_episode(net, flows, ctl, sim_cfg, seed, events=fh)
    if args.out_dir:
        _write_rows(_out_dir(args) / "eval.csv", reports)
    return 0


def cmd_compare(args) -> int:
    net, flows = _load(args)
    kinds = args.controller or ["fixed", "webster", "maxpressure"]
    reports = _evaluate(args, net, flows, kinds, args.seeds or list(DEFAULT_EVAL_SEEDS))
    table = comparison_markdown(reports)
    print(table, end="")
    if args.out_dir:
        out = _out_dir(args)
        _write_rows(out / "compare.csv", reports)
        (out / "compare.md").write_text(table)
    return 0


def _ablate_cell(job):
    net, flows, agent_cfg, frap_cfg, sim_cfg, train_seed, eval_seeds = job
    result = run_training(net, flows, agent_cfg, sim_cfg, frap_cfg, train_seed)
    factory = functools.partial(build_controller, "movelight", net, flows, sim_cfg, result.params, frap_cfg)
    return [run_episode(net, flows, factory(s), sim_cfg, s) for s in eval_seeds]


def cmd_ablate(args) -> int:
    net, flows = _load(args)
    values = SWEEPS[args.sweep]
    if args.sweep == "neighbors" and max(len(it.neighbors) for it in net.intersections) == 0:
        raise UsageError(f"a neighbor sweep needs a multi-intersection scenario; {net.id} has no neighbors")
    agent_cfg = _agent_config(args)
    base = _frap_config(args)
    train_seeds = args.seeds or [args.seed if args.seed is not None else 0]
    eval_seeds = list(DEFAULT_EVAL_SEEDS[: args.eval_seeds])
    key = "heads" if args.sweep == "heads" else "max_neighbors"
    sim_cfg = _sim_config(args)
    jobs = [(net, flows, agent_cfg, replace(base, **{key: v}), sim_cfg, s, eval_seeds)
            for v in values for s in train_seeds]
    t0 = time.perf_counter()
    results = parallel_map(_ablate_cell, jobs)
    rows = []
    for (v, s), metrics in zip([(v, s) for v in values for s in train_seeds], results):
        for es, m in zip(eval_seeds, metrics):
            rows.append((v, s, es, m))
    lines = [f"{args.sweep},train_seed,eval_seed,travel_time,throughput,avg_queue,avg_delay,unfinished"]
    for v, s, es, m in rows:
        lines.append(",".join([str(v), str(s), str(es)] + m.csv_row("", "", 0).split(",")[3:]))
    md = [
        f"Sweep over {args.sweep} on `{net.id}`: {agent_cfg.episodes} training episodes per cell, "
        f"train seeds {train_seeds}, greedy evaluation on seeds {eval_seeds}.",
        "",
        f"| {args.sweep} | travel time (s) | queue (veh) |",
        "|---|---|---|",
    ]
    for v in values:
        ms = [m for vv, _, _, m in rows if vv == v]
        tts = [m.avg_travel_time_s for m in ms if m.avg_travel_time_s is not None]
        tt = sum(tts) / len(tts) if tts else None
        q = sum(m.avg_queue for m in ms) / len(ms)
        md.append(f"| {v} | {'n/a' if tt is None else f'{tt:.3f}'} | {q:.3f} |")
    table = "\n".join(md) + "\n"
    print(table, end="")
    print(f"({time.perf_counter() - t0:.1f} s)")
    if args.out_dir:
        out = _out_dir(args)
        (out / f"ablate_{args.sweep}.csv").write_text("\n".join(lines) + "\n")
        (out / f"ablate_{args.sweep}.md").write_text(table)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="movelight", description="Traffic-signal control lab: simulate, train and compare.")
    parser.add_argument("--quiet", action="store_true", help="suppress per-episode progress logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, controllers=False, training=False):
        p.add_argument("--scenario", required=True, help="scenario JSON path or bundled name (single.json, grid4x4.json)")
        p.add_argument("--demand-scale", type=float, default=1.0, help="multiply every flow rate by this factor")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--seeds", type=parse_seeds, default=None, help="e.g. 0,1,2 or 10000-10004")
        p.add_argument("--out-dir", default=None)
        p.add_argument("--checkpoint", default=None)
        p.add_argument("--horizon", type=int, default=3600, help="simulated seconds per episode")
        if controllers:
            p.add_argument("--controller", type=parse_controllers, default=None,
                           help=f"comma-separated subset of {','.join(CONTROLLERS)}")
        if training:
            p.add_argument("--episodes", type=int, default=None)
            p.add_argument("--gamma", type=float, default=None)
            p.add_argument("--heads", type=int, default=None)
            p.add_argument("--neighbors", type=int, default=None)
            p.add_argument("--embed-dim", type=int, default=None)

    p = sub.add_parser("train", help="train the shared MoveLight network")
    common(p, training=True)
    p.set_defaults(func=cmd_train, out_dir="runs/train")

    p = sub.add_parser("eval", help="per-seed metric rows for one or more controllers")
    common(p, controllers=True)
    p.add_argument("--event-log", default=None, help="write a line-delimited step log of the first controller/seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="comparison table across controllers on a shared seed set")
    common(p, controllers=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("ablate", help="sweep attention heads or neighbor count")
    common(p, training=True)
    p.add_argument("--sweep", choices=sorted(SWEEPS), required=True)
    p.add_argument("--eval-seeds", type=int, default=len(DEFAULT_EVAL_SEEDS),
                   help="number of greedy evaluation seeds per cell")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("validate", help="check a scenario file and report every violation")
    p.add_argument("--scenario", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"movelight: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, RouteError) as exc:
        print(f"movelight: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(f"movelight: numerical abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
