"""Classical signal controllers: pressure, Max-Pressure, Webster and fixed time."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .network import FlowSpec, Intersection, RoadNetwork
from .sim import SimState, lane_count_vector


class OversaturatedError(ValueError):
    """Webster timing is undefined once the critical flow ratio reaches 1."""


def movement_pressure(x_l: float, cap_l: float, x_m: float, cap_m: float) -> float:
    """Capacity-normalized pressure of a movement from lane l to lane m."""
    if cap_l <= 0 or cap_m <= 0:
        raise ValueError("lane capacities must be positive")
    return x_l / cap_l - x_m / cap_m


def _intersection_arrays(state: SimState, k: int) -> tuple[np.ndarray, np.ndarray]:
    ci = state.compiled.intersections[k]
    src = np.array([m.from_lane for m in ci.movements])
    dst = np.array([m.to_lane for m in ci.movements])
    return src, dst


def movement_pressures(state: SimState, intersection: int, normalized: bool = False) -> np.ndarray:
    """Pressure of every movement of one intersection, in movement order."""
    src, dst = _intersection_arrays(state, intersection)
    x = lane_count_vector(state).astype(float)
    if normalized:
        cap = np.asarray(state.compiled.capacity, dtype=float)
        return x[src] / cap[src] - x[dst] / cap[dst]
    return x[src] - x[dst]


def phase_pressure(state: SimState, intersection: int, phase: int, normalized: bool = False) -> float:
    """Sum of movement pressures over the phase's permitted movements."""
    ci = state.compiled.intersections[intersection]
    if not 0 <= phase < len(ci.phases):
        raise ValueError(f"phase {phase} does not belong to intersection {intersection}")
    mp = movement_pressures(state, intersection, normalized)
    return float(sum(mp[i] for i in ci.phases[phase]))


def max_pressure_select(state: SimState, intersection: int) -> int:
    """Phase with the largest raw pressure; ties go to the lowest phase id."""
    ci = state.compiled.intersections[intersection]
    mp = movement_pressures(state, intersection)
    best, best_p = 0, None
    for p, movs in enumerate(ci.phases):
        val = sum(mp[i] for i in movs)
        if best_p is None or val > best_p:
            best, best_p = p, val
    return best


@dataclass(frozen=True)
class WebsterPlan:
    cycle_s: float
    green_s: tuple[float, ...]
    phases: tuple[int, ...]  # phase id served by each stage, in order
    lost_time_s: float = 0.0
    offset_s: float = 0.0

    def __post_init__(self):
        if len(self.green_s) != len(self.phases) or not self.phases:
            raise ValueError("one green time per stage is required")
        if abs(sum(self.green_s) + self.lost_time_s - self.cycle_s) > 1e-6:
            raise ValueError("greens plus lost time must equal the cycle length")


def webster_plan(
    ratios: Sequence[float],
    lost_time_s: float,
    phases: Sequence[int] | None = None,
    min_green_s: float = 5.0,
    cycle_bounds: tuple[float, float] = (30.0, 180.0),
) -> WebsterPlan:
    """Webster cycle and green split from per-stage critical flow ratios.

    ``ratios[i]`` is demand / saturation flow of the critical movement in
    stage i. Cycle C = (1.5 L + 5) / (1 - Y) clamped to ``cycle_bounds``;
    greens are proportional to the ratios and floored at ``min_green_s``.
    """
    y = np.asarray(ratios, dtype=float)
    if y.size == 0 or (y < 0).any():
        raise ValueError("need at least one non-negative flow ratio")
    total = float(y.sum())
    if total >= 1.0:
        raise OversaturatedError(
            f"critical flow ratio sum Y={total:.3f} >= 1; fixed-time timing is undefined, "
            "use the maxpressure controller instead")
    cycle = (1.5 * lost_time_s + 5.0) / (1.0 - total)
    cycle = float(np.clip(cycle, *cycle_bounds))
    effective = cycle - lost_time_s
    if total > 0:
        greens = y / total * effective
    else:
        greens = np.full(y.size, effective / y.size)
    greens = np.maximum(greens, min_green_s)
    cycle = float(greens.sum() + lost_time_s)
    ids = tuple(range(y.size)) if phases is None else tuple(int(p) for p in phases)
    return WebsterPlan(cycle, tuple(float(g) for g in greens), ids, float(lost_time_s))


def fixed_time_select(plan: WebsterPlan, t_s: float) -> int:
    """Phase id whose window contains the current time within the cycle."""
    tau = (t_s + plan.offset_s) % plan.cycle_s
    lost = plan.lost_time_s / len(plan.green_s)
    edge = 0.0
    for g, phase in zip(plan.green_s, plan.phases):
        edge += g + lost
        if tau < edge - 1e-9:
            return phase
    return plan.phases[-1]


def movement_demand(net: RoadNetwork, flows: FlowSpec, horizon_s: float) -> list[np.ndarray]:
    """Mean arrival rate (veh/s) of every movement over the horizon, per intersection."""
    demand = [np.zeros(len(it.movements)) for it in net.intersections]
    for e in flows.entries:
        rate = e.expected_vehicles(horizon_s) / horizon_s
        for a, b in zip(e.route, e.route[1:]):
            hit = net.find_movement(a, b)
            if hit is not None:
                demand[hit[0]][hit[1]] += rate
    return demand


def stage_cover(it: Intersection, demand: np.ndarray, saturation: float) -> tuple[list[int], list[float]]:
    """Smallest set of phases covering every signalized movement, minimizing sum of critical ratios."""
    needed = {i for ph in it.phases for i in ph.movements}
    ratio = demand / saturation
    for size in range(1, len(it.phases) + 1):
        best = None
        for combo in itertools.combinations(range(len(it.phases)), size):
            covered = set().union(*(it.phases[p].movements for p in combo))
            if covered != needed:
                continue
            crit = [max(ratio[i] for i in it.phases[p].movements) for p in combo]
            if best is None or sum(crit) < sum(best[1]) - 1e-12:
                best = (list(combo), crit)
        if best is not None:
            return best
    raise ValueError(f"intersection {it.id} has no phases")


class Controller(Protocol):
    name: str
    interval_s: int

    def reset(self, state: SimState) -> None: ...

    def act(self, state: SimState) -> list[int]: ...


class MaxPressureController:
    name = "maxpressure"

    def __init__(self, interval_s: int = 10):
        self.interval_s = interval_s

    def reset(self, state: SimState) -> None:
        pass

    def act(self, state: SimState) -> list[int]:
        return [max_pressure_select(state, k) for k in range(len(state.net.intersections))]


class PlanController:
    """Cycles through precomputed stage plans, one per intersection."""

    interval_s = 1

    def __init__(self, plans: Sequence[WebsterPlan], name: str):
        self.plans = list(plans)
        self.name = name

    def reset(self, state: SimState) -> None:
        pass

    def act(self, state: SimState) -> list[int]:
        return [fixed_time_select(p, state.clock_s) for p in self.plans]


def webster_controller(net: RoadNetwork, flows: FlowSpec, sim_cfg, min_green_s: float = 5.0) -> PlanController:
    plans = []
    for it, dem in zip(net.intersections, movement_demand(net, flows, sim_cfg.horizon_steps)):
        stages, ratios = stage_cover(it, dem, sim_cfg.saturation_flow_vps)
        lost = sim_cfg.switch_lost_time_s * len(stages)
        plans.append(webster_plan(ratios, lost, stages, min_green_s=min_green_s))
    return PlanController(plans, "webster")


def fixed_controller(net: RoadNetwork, sim_cfg, green_s: float = 20.0) -> PlanController:
    """Equal greens over the minimal stage cover, ignoring demand."""
    plans = []
    for it in net.intersections:
        stages, _ = stage_cover(it, np.ones(len(it.movements)), 1.0)
        lost = sim_cfg.switch_lost_time_s * len(stages)
        greens = (green_s,) * len(stages)
        plans.append(WebsterPlan(green_s * len(stages) + lost, greens, tuple(stages), lost))
    return PlanController(plans, "fixed")


class RandomController:
    name = "random"

    def __init__(self, seed: int = 0, interval_s: int = 10):
        self.seed = seed
        self.interval_s = interval_s
        self.rng = np.random.default_rng(seed)

    def reset(self, state: SimState) -> None:
        self.rng = np.random.default_rng(self.seed)

    def act(self, state: SimState) -> list[int]:
        return [int(self.rng.integers(len(ci.phases))) for ci in state.compiled.intersections]
