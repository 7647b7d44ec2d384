"""Episode metrics: travel time, throughput, queue length and delay."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

from .sim import SimState

CSV_HEADER = "scenario,controller,seed,travel_time,throughput,avg_queue,avg_delay,unfinished"


@dataclass
class MetricsAccumulator:
    steps: int = 0
    queue_integral: float = 0.0
    queue_integral_by_intersection: list[float] = field(default_factory=list)
    travel_times: list[float] = field(default_factory=list)
    delays: list[float] = field(default_factory=list)
    n_completed: int = 0
    in_system: int = 0

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        """Field-wise sum of two accumulators (parallel rollouts)."""
        by_int = [a + b for a, b in zip(self.queue_integral_by_intersection, other.queue_integral_by_intersection)]
        return MetricsAccumulator(
            steps=self.steps + other.steps,
            queue_integral=self.queue_integral + other.queue_integral,
            queue_integral_by_intersection=by_int or list(self.queue_integral_by_intersection or other.queue_integral_by_intersection),
            travel_times=self.travel_times + other.travel_times,
            delays=self.delays + other.delays,
            n_completed=self.n_completed + other.n_completed,
            in_system=self.in_system + other.in_system,
        )


@dataclass(frozen=True)
class EpisodeMetrics:
    avg_travel_time_s: float | None
    throughput: int
    avg_queue: float
    avg_delay_s: float | None
    unfinished: int
    avg_queue_by_intersection: tuple[float, ...] = ()

    def csv_row(self, scenario: str, controller: str, seed: int) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join([scenario, controller, str(seed), fmt(self.avg_travel_time_s), str(self.throughput),
                         repr(float(self.avg_queue)), fmt(self.avg_delay_s), str(self.unfinished)])

    def as_dict(self) -> dict:
        return asdict(self)


def queued_at_signals(state: SimState) -> list[int]:
    """Vehicles waiting on the incoming lanes of each intersection."""
    return [sum(len(state.queues[l]) for l in ci.incoming) for ci in state.compiled.intersections]


def record_step(acc: MetricsAccumulator, state: SimState) -> MetricsAccumulator:
    """Fold one simulated second into the accumulator."""
    per = queued_at_signals(state)
    if not acc.queue_integral_by_intersection:
        acc.queue_integral_by_intersection = [0.0] * len(per)
    for k, q in enumerate(per):
        acc.queue_integral_by_intersection[k] += q
    acc.queue_integral += sum(per)
    step_s = state.cfg.step_s
    for vid in state.completed[acc.n_completed:]:
        v = state.vehicles[vid]
        travel = (v.finish_step - v.depart_step) * step_s
        acc.travel_times.append(travel)
        acc.delays.append(travel - v.free_flow_time_s)
    acc.n_completed = len(state.completed)
    acc.in_system = state.injected_total - acc.n_completed
    acc.steps += 1
    return acc


def _mean(xs: list[float]) -> float | None:
    return math.fsum(xs) / len(xs) if xs else None


def finalize(acc: MetricsAccumulator, horizon_steps: int) -> EpisodeMetrics:
    return EpisodeMetrics(
        avg_travel_time_s=_mean(acc.travel_times),
        throughput=len(acc.travel_times),
        avg_queue=acc.queue_integral / horizon_steps,
        avg_delay_s=_mean(acc.delays),
        unfinished=acc.in_system,
        avg_queue_by_intersection=tuple(q / horizon_steps for q in acc.queue_integral_by_intersection),
    )
