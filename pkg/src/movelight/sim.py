"""Discrete-time point-queue simulator.

Vehicles traverse a lane at free-flow speed, then stack in a vertical queue
at its downstream end. Signalized movements drain incoming-lane queues at a
saturation rate tracked by a fractional service credit; links between
intersections drain outgoing-lane queues whenever the downstream lane has
room. Lane occupancy (traversing plus queued) never exceeds capacity, so a
full lane blocks its feeders and congestion spills back upstream.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from .network import FlowSpec, RoadNetwork, route_errors

_EPS = 1e-9


class RouteError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    step_s: int = 1
    decision_interval_s: int = 10
    saturation_flow_vps: float = 0.5
    switch_lost_time_s: int = 0
    horizon_steps: int = 3600
    count_in_transit: bool = False

    def __post_init__(self):
        if self.step_s != 1:
            raise ValueError("only 1 s steps are supported")
        if self.decision_interval_s < 1 or self.decision_interval_s % self.step_s:
            raise ValueError("decision_interval_s must be a positive multiple of step_s")
        if not self.saturation_flow_vps > 0:
            raise ValueError("saturation_flow_vps must be positive")
        if self.switch_lost_time_s < 0 or self.horizon_steps < 1:
            raise ValueError("invalid lost time or horizon")


@dataclass(slots=True)
class VehicleRecord:
    id: int
    route: tuple[int, ...]  # lane indices
    leg: int  # index into route of the lane currently occupied
    depart_step: int
    free_flow_time_s: float
    finish_step: int | None = None


@dataclass
class StepEvents:
    step: int
    injected: int
    discharged: int
    completed: int

    def as_json(self) -> str:
        return json.dumps({"step": self.step, "injected": self.injected,
                           "discharged": self.discharged, "completed": self.completed})


@dataclass
class _CompiledMovement:
    from_lane: int
    to_lane: int


@dataclass
class _CompiledIntersection:
    movements: list[_CompiledMovement]
    phases: list[tuple[int, ...]]
    always_green: tuple[int, ...]
    incoming: list[int]
    outgoing: list[int]


class CompiledNetwork:
    """Integer-indexed view of a RoadNetwork used by the stepping loop."""

    def __init__(self, net: RoadNetwork):
        self.net = net
        self.lane_ids = list(net.lanes)
        self.lane_index = {lid: k for k, lid in enumerate(self.lane_ids)}
        lanes = [net.lanes[lid] for lid in self.lane_ids]
        self.capacity = [l.capacity for l in lanes]
        self.traversal = [l.traversal_steps for l in lanes]
        self.free_flow = [l.length / l.free_flow_speed for l in lanes]
        self.linked = [bool(net.downstream(lid)) for lid in self.lane_ids]
        self.outgoing_lanes = [k for k, l in enumerate(lanes) if l.kind == "outgoing"]
        self.incoming_lanes = [k for k, l in enumerate(lanes) if l.kind == "incoming"]
        self.intersections = []
        for it in net.intersections:
            self.intersections.append(
                _CompiledIntersection(
                    movements=[_CompiledMovement(self.lane_index[m.from_lane], self.lane_index[m.to_lane])
                               for m in it.movements],
                    phases=[ph.movements for ph in it.phases],
                    always_green=it.always_green,
                    incoming=[self.lane_index[l.id] for l in it.incoming],
                    outgoing=[self.lane_index[l.id] for l in it.outgoing],
                )
            )


@dataclass
class SimState:
    net: RoadNetwork
    flows: FlowSpec
    cfg: SimConfig
    compiled: CompiledNetwork
    rng: np.random.Generator
    clock_s: int = 0
    queues: list[deque] = field(default_factory=list)
    transit: list[deque] = field(default_factory=list)  # per lane: (arrival_step, vehicle id)
    spill: list[deque] = field(default_factory=list)  # per flow entry: pending vehicles
    active_phase: list[int] = field(default_factory=list)
    service_credit: list[list[float]] = field(default_factory=list)
    suppressed_until: list[int] = field(default_factory=list)
    vehicles: list[VehicleRecord] = field(default_factory=list)
    completed: list[int] = field(default_factory=list)  # vehicle ids, completion order
    generated_total: int = 0
    injected_total: int = 0
    _next_headway_k: list[int] = field(default_factory=list)
    _routes: list[tuple[int, ...]] = field(default_factory=list)
    _free_flow: list[float] = field(default_factory=list)

    @property
    def n_in_transit(self) -> int:
        return sum(len(t) for t in self.transit)

    @property
    def n_queued(self) -> int:
        return sum(len(q) for q in self.queues)

    @property
    def n_spilled(self) -> int:
        return sum(len(s) for s in self.spill)

    def occupancy(self, lane: int) -> int:
        return len(self.queues[lane]) + len(self.transit[lane])

    def check_conservation(self) -> None:
        inside = self.n_in_transit + self.n_queued
        if self.injected_total != inside + len(self.completed):
            raise AssertionError(
                f"conservation broken at t={self.clock_s}: injected {self.injected_total} "
                f"!= {inside} inside + {len(self.completed)} completed")
        if self.generated_total != self.injected_total + self.n_spilled:
            raise AssertionError(f"spill accounting broken at t={self.clock_s}")


def init_sim(net: RoadNetwork, flows: FlowSpec, cfg: SimConfig | None = None, seed: int = 0) -> SimState:
    cfg = cfg or SimConfig()
    for k, e in enumerate(flows.entries):
        errs = route_errors(net, e.route)
        if errs:
            raise RouteError(f"flows[{k}]: " + "; ".join(errs))
    compiled = CompiledNetwork(net)
    n_lanes = len(compiled.lane_ids)
    routes = [tuple(compiled.lane_index[l] for l in e.route) for e in flows.entries]
    return SimState(
        net=net,
        flows=flows,
        cfg=cfg,
        compiled=compiled,
        rng=np.random.default_rng(seed),
        queues=[deque() for _ in range(n_lanes)],
        transit=[deque() for _ in range(n_lanes)],
        spill=[deque() for _ in flows.entries],
        active_phase=[0] * len(net.intersections),
        service_credit=[[0.0] * len(it.movements) for it in net.intersections],
        suppressed_until=[0] * len(net.intersections),
        _next_headway_k=[0] * len(flows.entries),
        _routes=routes,
        _free_flow=[sum(compiled.free_flow[l] for l in r) for r in routes],
    )


def inject_arrivals(state: SimState) -> int:
    """Generate this step's vehicles and move what fits onto source lanes."""
    t = state.clock_s
    comp = state.compiled
    for k, e in enumerate(state.flows.entries):
        n_new = 0
        if e.poisson_rate_vps is not None:
            if e.start_s <= t <= e.end_s and e.poisson_rate_vps > 0:
                n_new = int(state.rng.poisson(e.poisson_rate_vps * state.cfg.step_s))
        else:
            limit = min(t, e.end_s)
            while e.start_s + state._next_headway_k[k] * e.headway_s <= limit + _EPS:
                state._next_headway_k[k] += 1
                n_new += 1
        state.spill[k].extend([k] * n_new)
        state.generated_total += n_new

    injected = 0
    for k, pending in enumerate(state.spill):
        if not pending:
            continue
        route = state._routes[k]
        src = route[0]
        while pending and state.occupancy(src) < comp.capacity[src]:
            pending.popleft()
            vid = len(state.vehicles)
            state.vehicles.append(VehicleRecord(vid, route, 0, t, state._free_flow[k]))
            state.transit[src].append((t + comp.traversal[src], vid))
            injected += 1
    state.injected_total += injected
    return injected


def _advance(state: SimState) -> int:
    t = state.clock_s
    comp = state.compiled
    completed = 0
    for lane, transit in enumerate(state.transit):
        queue = state.queues[lane]
        while transit and transit[0][0] <= t:
            vid = transit[0][1]
            veh = state.vehicles[vid]
            if veh.leg == len(veh.route) - 1:
                transit.popleft()
                veh.finish_step = t
                state.completed.append(vid)
                completed += 1
            elif len(queue) < comp.capacity[lane]:
                transit.popleft()
                queue.append(vid)
            else:
                break  # waits at the end of the link
    for lane in comp.outgoing_lanes:
        if not comp.linked[lane]:
            continue
        queue = state.queues[lane]
        while queue:
            veh = state.vehicles[queue[0]]
            nxt = veh.route[veh.leg + 1]
            if state.occupancy(nxt) >= comp.capacity[nxt]:
                break
            queue.popleft()
            veh.leg += 1
            state.transit[nxt].append((t + comp.traversal[nxt], veh.id))
    return completed


def _set_signal(state: SimState, signal: Sequence[int]) -> None:
    if len(signal) != len(state.compiled.intersections):
        raise ValueError(f"expected {len(state.compiled.intersections)} phase ids, got {len(signal)}")
    for k, (ci, phase) in enumerate(zip(state.compiled.intersections, signal)):
        phase = int(phase)
        if not 0 <= phase < len(ci.phases):
            raise ValueError(f"invalid phase {phase} for intersection {k}")
        if phase != state.active_phase[k]:
            state.active_phase[k] = phase
            credit = state.service_credit[k]
            for i in range(len(credit)):
                if i not in ci.always_green:
                    credit[i] = 0.0
            if state.cfg.switch_lost_time_s > 0:
                state.suppressed_until[k] = state.clock_s + state.cfg.switch_lost_time_s


def _discharge(state: SimState) -> int:
    t = state.clock_s
    comp = state.compiled
    rate = state.cfg.saturation_flow_vps * state.cfg.step_s
    moved = 0
    for k, ci in enumerate(comp.intersections):
        if t < state.suppressed_until[k]:
            continue
        credit = state.service_credit[k]
        green = sorted(set(ci.phases[state.active_phase[k]]) | set(ci.always_green))
        for i in green:
            mv = ci.movements[i]
            credit[i] += rate
            queue = state.queues[mv.from_lane]
            cap = comp.capacity[mv.to_lane]
            while credit[i] >= 1.0 - _EPS and queue:
                veh = state.vehicles[queue[0]]
                if veh.route[veh.leg + 1] != mv.to_lane:
                    break  # head vehicle wants another movement
                if state.occupancy(mv.to_lane) >= cap:
                    break
                queue.popleft()
                veh.leg += 1
                state.transit[mv.to_lane].append((t + comp.traversal[mv.to_lane], veh.id))
                credit[i] -= 1.0
                moved += 1
            if credit[i] > 1.0:
                credit[i] = 1.0
    return moved


def step(state: SimState, signal: Sequence[int]) -> StepEvents:
    """Advance one step under ``signal`` (one phase id per intersection)."""
    _set_signal(state, signal)
    injected = inject_arrivals(state)
    completed = _advance(state)
    discharged = _discharge(state)
    events = StepEvents(state.clock_s, injected, discharged, completed)
    state.clock_s += state.cfg.step_s
    return events


def lane_counts(state: SimState, intersection: str | int) -> dict[str, int]:
    """Vehicle count per lane of one intersection (queued, optionally plus traversing)."""
    if isinstance(intersection, str):
        try:
            k = state.net.intersection_index(intersection)
        except KeyError:
            raise KeyError(f"unknown intersection {intersection!r}") from None
    else:
        k = intersection
    it = state.net.intersections[k]
    out = {}
    for lane in it.lanes:
        idx = state.compiled.lane_index[lane.id]
        n = len(state.queues[idx])
        if state.cfg.count_in_transit:
            n += len(state.transit[idx])
        out[lane.id] = n
    return out


def lane_count_vector(state: SimState) -> np.ndarray:
    """Counts for every lane in compiled order; fast path for controllers."""
    counts = np.fromiter((len(q) for q in state.queues), dtype=np.int64, count=len(state.queues))
    if state.cfg.count_in_transit:
        counts = counts + np.fromiter((len(q) for q in state.transit), dtype=np.int64, count=len(state.transit))
    return counts


def write_event(stream: IO[str] | None, events: StepEvents) -> None:
    if stream is not None:
        stream.write(events.as_json() + "\n")
