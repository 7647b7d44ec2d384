"""Episode runner and multi-seed evaluation shared by the CLI and scripts."""

from __future__ import annotations

import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Callable, Sequence

from .metrics import EpisodeMetrics, MetricsAccumulator, finalize, record_step
from .network import FlowSpec, RoadNetwork, load_scenario
from .sim import SimConfig, init_sim, step, write_event

BUNDLED = ("single.json", "grid4x4.json")


def scenario_path(name: str | os.PathLike) -> Path:
    """Resolve a scenario path, falling back to the bundled scenarios by file name."""
    p = Path(name)
    if p.exists():
        return p
    if p.name in BUNDLED and len(p.parts) == 1:
        return Path(str(resources.files("movelight") / "scenarios" / p.name))
    raise FileNotFoundError(f"scenario not found: {name}")


def read_scenario(name: str | os.PathLike, demand_scale: float = 1.0) -> tuple[RoadNetwork, FlowSpec]:
    net, flows = load_scenario(scenario_path(name).read_text())
    if demand_scale != 1.0:
        flows = flows.scaled(demand_scale)
    return net, flows


def run_episode(
    net: RoadNetwork,
    flows: FlowSpec,
    controller,
    cfg: SimConfig,
    seed: int,
    events: IO[str] | None = None,
    check: bool = False,
    on_step: Callable | None = None,
) -> EpisodeMetrics:
    """Simulate one horizon under ``controller`` and return its metrics."""
    state = init_sim(net, flows, cfg, seed)
    controller.reset(state)
    acc = MetricsAccumulator()
    signal = list(state.active_phase)
    for t in range(cfg.horizon_steps):
        if t % controller.interval_s == 0:
            signal = controller.act(state)
        ev = step(state, signal)
        record_step(acc, state)
        write_event(events, ev)
        if check:
            state.check_conservation()
        if on_step is not None:
            on_step(state, ev)
    return finalize(acc, cfg.horizon_steps)


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("MOVELIGHT_THREADS", "1")))
    except ValueError:
        return 1


def parallel_map(fn, items: Sequence) -> list:
    """``map`` over worker processes (at most MOVELIGHT_THREADS), results in input order."""
    items = list(items)
    workers = min(max_workers(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def _episode_job(args):
    net, flows, factory, cfg, seed = args
    return run_episode(net, flows, factory(seed), cfg, seed)


def evaluate_seeds(net, flows, factory, cfg: SimConfig, seeds: Sequence[int]) -> list[EpisodeMetrics]:
    """Run one episode per seed; results come back in seed order whatever the parallelism."""
    return parallel_map(_episode_job, [(net, flows, factory, cfg, s) for s in seeds])


@dataclass
class RunReport:
    scenario: str
    controller: str
    seeds: list[int]
    per_seed: list[EpisodeMetrics]
    config: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    FIELDS = ("avg_travel_time_s", "throughput", "avg_queue", "avg_delay_s")

    def aggregate(self) -> dict[str, tuple[float | None, float | None]]:
        """Mean and sample standard deviation of every metric across seeds."""
        out = {}
        for f in self.FIELDS:
            vals = [getattr(m, f) for m in self.per_seed if getattr(m, f) is not None]
            mean = statistics.fmean(vals) if vals else None
            sd = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
            out[f] = (mean, sd)
        return out

    def csv_rows(self) -> list[str]:
        return [m.csv_row(self.scenario, self.controller, s) for s, m in zip(self.seeds, self.per_seed)]


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, time.perf_counter() - t0
