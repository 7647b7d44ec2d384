"""Road network topology: lanes, movements, conflict matrices and signal phases.

Scenario files are JSON documents. Each intersection lists its lanes, its
traffic movements (incoming lane -> outgoing lane), an M x M conflict matrix
coded 0 = none, 1 = conflict, 2 = partial, and its neighbor intersections.
Top-level ``links`` connect an outgoing lane of one intersection to an
incoming lane of another, and ``flows`` describe vehicle demand.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Any, Iterable, Sequence

import numpy as np

TURNS = ("left", "through", "right")
LANE_KINDS = ("incoming", "outgoing")


class ScenarioError(ValueError):
    """Scenario text could not be turned into a valid network."""

    def __init__(self, message: str, locus: str | None = None):
        self.locus = locus
        super().__init__(f"{locus}: {message}" if locus else message)


class DanglingReferenceError(ScenarioError):
    pass


class Relation(IntEnum):
    """Pairwise relation class between movements (and between phases)."""

    CONFLICT = 0
    PARTIAL = 1
    NONE = 2


@dataclass(frozen=True)
class Lane:
    id: str
    length: float
    free_flow_speed: float
    capacity: int
    kind: str

    @property
    def traversal_steps(self) -> int:
        return int(np.ceil(self.length / self.free_flow_speed - 1e-9))


@dataclass(frozen=True)
class Movement:
    id: str
    from_lane: str
    to_lane: str
    turn: str
    always_green: bool = False


@dataclass(frozen=True)
class ConflictMatrix:
    conflicts: np.ndarray  # (M, M) bool, symmetric, false diagonal
    partial: np.ndarray  # (M, M) bool, symmetric, disjoint from conflicts

    @property
    def size(self) -> int:
        return self.conflicts.shape[0]

    def relation(self, i: int, j: int) -> Relation:
        if self.conflicts[i, j]:
            return Relation.CONFLICT
        if self.partial[i, j]:
            return Relation.PARTIAL
        return Relation.NONE


@dataclass(frozen=True)
class Phase:
    id: int
    movements: tuple[int, ...]  # movement indices, sorted


@dataclass(frozen=True)
class Intersection:
    id: str
    lanes: tuple[Lane, ...]
    movements: tuple[Movement, ...]
    conflict: ConflictMatrix
    phases: tuple[Phase, ...]
    neighbors: tuple[str, ...]

    @property
    def incoming(self) -> tuple[Lane, ...]:
        return tuple(l for l in self.lanes if l.kind == "incoming")

    @property
    def outgoing(self) -> tuple[Lane, ...]:
        return tuple(l for l in self.lanes if l.kind == "outgoing")

    @property
    def always_green(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.movements) if m.always_green)

    def phase_relation(self, p: int, q: int) -> Relation:
        """Dominant relation between two phases: conflict > partial > none."""
        best = Relation.NONE
        for i in self.phases[p].movements:
            for j in self.phases[q].movements:
                r = self.conflict.relation(i, j)
                if r < best:
                    best = r
        return best


@dataclass(frozen=True)
class Link:
    from_lane: str
    to_lane: str


@dataclass(frozen=True)
class FlowEntry:
    route: tuple[str, ...]
    start_s: float
    end_s: float
    headway_s: float | None = None
    poisson_rate_vps: float | None = None

    def scaled(self, factor: float) -> "FlowEntry":
        if self.poisson_rate_vps is not None:
            return FlowEntry(self.route, self.start_s, self.end_s, None, self.poisson_rate_vps * factor)
        if factor <= 0:
            return FlowEntry(self.route, self.start_s, self.end_s, None, 0.0)
        return FlowEntry(self.route, self.start_s, self.end_s, self.headway_s / factor, None)

    def expected_vehicles(self, horizon_s: float) -> float:
        end = min(self.end_s, horizon_s - 1)
        if end < self.start_s:
            return 0.0
        if self.poisson_rate_vps is not None:
            return self.poisson_rate_vps * (end - self.start_s + 1)
        return float(np.floor((end - self.start_s) / self.headway_s) + 1)


@dataclass(frozen=True)
class FlowSpec:
    entries: tuple[FlowEntry, ...] = ()

    def scaled(self, factor: float) -> "FlowSpec":
        return FlowSpec(tuple(e.scaled(factor) for e in self.entries))


@dataclass
class RoadNetwork:
    id: str
    intersections: tuple[Intersection, ...]
    links: tuple[Link, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self._inter_index = {it.id: k for k, it in enumerate(self.intersections)}
        self._lanes: dict[str, Lane] = {}
        self._lane_owner: dict[str, str] = {}
        for it in self.intersections:
            for lane in it.lanes:
                self._lanes[lane.id] = lane
                self._lane_owner[lane.id] = it.id
        self._downstream: dict[str, list[str]] = {}
        self._upstream: dict[str, list[str]] = {}
        for link in self.links:
            self._downstream.setdefault(link.from_lane, []).append(link.to_lane)
            self._upstream.setdefault(link.to_lane, []).append(link.from_lane)

    @property
    def lanes(self) -> dict[str, Lane]:
        return self._lanes

    def lane_owner(self, lane_id: str) -> str:
        return self._lane_owner[lane_id]

    def intersection(self, key: str | int) -> Intersection:
        if isinstance(key, int):
            return self.intersections[key]
        try:
            return self.intersections[self._inter_index[key]]
        except KeyError:
            raise KeyError(f"unknown intersection {key!r}") from None

    def intersection_index(self, inter_id: str) -> int:
        return self._inter_index[inter_id]

    def downstream(self, lane_id: str) -> list[str]:
        return self._downstream.get(lane_id, [])

    def upstream(self, lane_id: str) -> list[str]:
        return self._upstream.get(lane_id, [])

    def is_source(self, lane_id: str) -> bool:
        return self._lanes[lane_id].kind == "incoming" and not self.upstream(lane_id)

    def is_sink(self, lane_id: str) -> bool:
        return self._lanes[lane_id].kind == "outgoing" and not self.downstream(lane_id)

    def find_movement(self, from_lane: str, to_lane: str) -> tuple[int, int] | None:
        """(intersection index, movement index) serving from_lane -> to_lane."""
        owner = self._lane_owner.get(from_lane)
        if owner is None:
            return None
        k = self._inter_index[owner]
        for i, m in enumerate(self.intersections[k].movements):
            if m.from_lane == from_lane and m.to_lane == to_lane:
                return k, i
        return None


def symmetrize_conflicts(raw: Any, partial: Any | None = None) -> ConflictMatrix:
    """OR-symmetrize a possibly asymmetric conflict relation (conflict wins)."""
    a = np.asarray(raw, dtype=bool)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"conflict matrix must be square, got shape {a.shape}")
    conflicts = a | a.T
    np.fill_diagonal(conflicts, False)
    if partial is None:
        part = np.zeros_like(conflicts)
    else:
        part = np.asarray(partial, dtype=bool)
        if part.shape != a.shape:
            raise ValueError("partial relation shape differs from conflict matrix")
        part = (part | part.T) & ~conflicts
        np.fill_diagonal(part, False)
    conflicts.setflags(write=False)
    part.setflags(write=False)
    return ConflictMatrix(conflicts, part)


def conflict_matrix_from_codes(codes: Sequence[Sequence[int]]) -> ConflictMatrix:
    c = np.asarray(codes, dtype=int)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"conflict matrix must be square, got shape {c.shape}")
    if not np.isin(c, (0, 1, 2)).all():
        raise ValueError("conflict matrix codes must be 0, 1 or 2")
    return symmetrize_conflicts(c == 1, c == 2)


def enumerate_phases(cm: ConflictMatrix, exclude: Iterable[int] = ()) -> list[Phase]:
    """All maximal sets of pairwise non-conflicting movements.

    Movements in ``exclude`` (always-green right turns) take no part. Phases
    are ordered lexicographically by their sorted movement tuples.
    """
    skip = set(exclude)
    nodes = [i for i in range(cm.size) if i not in skip]
    compat = {i: {j for j in nodes if j != i and not cm.conflicts[i, j]} for i in nodes}
    found: list[tuple[int, ...]] = []

    # Bron-Kerbosch with pivoting on the compatibility graph
    def expand(r: set[int], p: set[int], x: set[int]) -> None:
        if not p and not x:
            found.append(tuple(sorted(r)))
            return
        pivot = max(p | x, key=lambda u: (len(compat[u] & p), -u))
        for v in sorted(p - compat[pivot]):
            expand(r | {v}, p & compat[v], x & compat[v])
            p = p - {v}
            x = x | {v}

    if nodes:
        expand(set(), set(nodes), set())
    return [Phase(k, mv) for k, mv in enumerate(sorted(found))]


# --------------------------------------------------------------------------
# scenario parsing


def _req(obj: dict, key: str, locus: str) -> Any:
    if not isinstance(obj, dict):
        raise ScenarioError("expected an object", locus)
    if key not in obj:
        raise ScenarioError(f"missing field {key!r}", locus)
    return obj[key]


def _positive(value: Any, locus: str, integer: bool = False) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise ScenarioError(f"expected a number, got {value!r}", locus) from None
    if not np.isfinite(v) or v <= 0:
        raise ScenarioError(f"must be positive, got {value!r}", locus)
    if integer:
        if v != int(v):
            raise ScenarioError(f"must be an integer, got {value!r}", locus)
        return int(v)
    return v


def _parse_intersection(doc: dict, k: int) -> Intersection:
    locus = f"intersections[{k}]"
    inter_id = str(_req(doc, "id", locus))
    lanes = []
    for j, ld in enumerate(_req(doc, "lanes", locus)):
        ll = f"{locus}.lanes[{j}]"
        kind = _req(ld, "kind", ll)
        if kind not in LANE_KINDS:
            raise ScenarioError(f"kind must be one of {LANE_KINDS}, got {kind!r}", ll + ".kind")
        lanes.append(
            Lane(
                id=str(_req(ld, "id", ll)),
                length=_positive(_req(ld, "length_m", ll), ll + ".length_m"),
                free_flow_speed=_positive(_req(ld, "speed_mps", ll), ll + ".speed_mps"),
                capacity=_positive(_req(ld, "capacity", ll), ll + ".capacity", integer=True),
                kind=kind,
            )
        )
    lane_ids = {l.id: l for l in lanes}
    if len(lane_ids) != len(lanes):
        raise ScenarioError("duplicate lane id", locus + ".lanes")
    movements = []
    for j, md in enumerate(_req(doc, "movements", locus)):
        ml = f"{locus}.movements[{j}]"
        src, dst = str(_req(md, "from", ml)), str(_req(md, "to", ml))
        for name, ref in (("from", src), ("to", dst)):
            if ref not in lane_ids:
                raise DanglingReferenceError(f"unknown lane {ref!r}", f"{ml}.{name}")
        turn = _req(md, "turn", ml)
        if turn not in TURNS:
            raise ScenarioError(f"turn must be one of {TURNS}, got {turn!r}", ml + ".turn")
        movements.append(Movement(str(_req(md, "id", ml)), src, dst, turn, bool(md.get("always_green", False))))
    codes = _req(doc, "conflict_matrix", locus)
    try:
        cm = conflict_matrix_from_codes(codes)
    except ValueError as exc:
        raise ScenarioError(str(exc), locus + ".conflict_matrix") from None
    if cm.size != len(movements):
        raise ScenarioError(
            f"conflict matrix is {cm.size}x{cm.size} but there are {len(movements)} movements",
            locus + ".conflict_matrix",
        )
    always = [i for i, m in enumerate(movements) if m.always_green]
    phases = enumerate_phases(cm, exclude=always)
    neighbors = tuple(str(n) for n in doc.get("neighbors", []))
    return Intersection(inter_id, tuple(lanes), tuple(movements), cm, tuple(phases), neighbors)


def _parse_flow(doc: dict, k: int) -> FlowEntry:
    locus = f"flows[{k}]"
    route = tuple(str(r) for r in _req(doc, "route", locus))
    if len(route) < 2:
        raise ScenarioError("route needs at least two lanes", locus + ".route")
    start = float(doc.get("start_s", 0))
    end = float(doc.get("end_s", 3599))
    if start > end or start < 0:
        raise ScenarioError(f"need 0 <= start_s <= end_s, got {start}..{end}", locus)
    headway = doc.get("headway_s")
    rate = doc.get("poisson_rate_vps")
    if (headway is None) == (rate is None):
        raise ScenarioError("exactly one of headway_s / poisson_rate_vps is required", locus)
    if headway is not None:
        return FlowEntry(route, start, end, headway_s=_positive(headway, locus + ".headway_s"))
    rate = float(rate)
    if not np.isfinite(rate) or rate < 0:
        raise ScenarioError(f"poisson_rate_vps must be >= 0, got {rate}", locus)
    return FlowEntry(route, start, end, poisson_rate_vps=rate)


def parse_scenario(doc: dict) -> tuple[RoadNetwork, FlowSpec]:
    intersections = [_parse_intersection(d, k) for k, d in enumerate(_req(doc, "intersections", "<root>"))]
    ids = [it.id for it in intersections]
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate intersection id", "intersections")
    all_lanes: dict[str, str] = {}
    for it in intersections:
        for lane in it.lanes:
            if lane.id in all_lanes:
                raise ScenarioError(f"lane {lane.id!r} declared twice", f"intersection {it.id}")
            all_lanes[lane.id] = it.id
        for n in it.neighbors:
            if n not in ids:
                raise DanglingReferenceError(f"unknown neighbor {n!r}", f"intersection {it.id}.neighbors")
    links = []
    for k, ld in enumerate(doc.get("links", [])):
        locus = f"links[{k}]"
        link = Link(str(_req(ld, "from_lane", locus)), str(_req(ld, "to_lane", locus)))
        for name, ref in (("from_lane", link.from_lane), ("to_lane", link.to_lane)):
            if ref not in all_lanes:
                raise DanglingReferenceError(f"unknown lane {ref!r}", f"{locus}.{name}")
        links.append(link)
    flows = FlowSpec(tuple(_parse_flow(d, k) for k, d in enumerate(doc.get("flows", []))))
    meta = {k: v for k, v in doc.items() if k not in ("intersections", "links", "flows")}
    net = RoadNetwork(str(doc.get("id", "scenario")), tuple(intersections), tuple(links), meta)
    for k, entry in enumerate(flows.entries):
        for ref in entry.route:
            if ref not in all_lanes:
                raise DanglingReferenceError(f"unknown lane {ref!r}", f"flows[{k}].route")
    return net, flows


def load_scenario(text: str) -> tuple[RoadNetwork, FlowSpec]:
    """Parse and cross-check a scenario document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(exc.msg, f"line {exc.lineno} column {exc.colno}") from None
    return parse_scenario(doc)


def route_errors(net: RoadNetwork, route: Sequence[str]) -> list[str]:
    """Connectivity problems of a route; empty when it is drivable."""
    errs = []
    for ref in route:
        if ref not in net.lanes:
            return [f"unknown lane {ref!r}"]
    if not net.is_source(route[0]):
        errs.append(f"route starts at {route[0]!r}, which is not a source lane")
    if not net.is_sink(route[-1]):
        errs.append(f"route ends at {route[-1]!r}, which is not a sink lane")
    for a, b in zip(route, route[1:]):
        kind = net.lanes[a].kind
        if kind == "incoming":
            if net.find_movement(a, b) is None:
                errs.append(f"no movement from {a!r} to {b!r}")
        elif b not in net.downstream(a):
            errs.append(f"no link from {a!r} to {b!r}")
    return errs


def validate_network(net: RoadNetwork) -> list[str]:
    """List every invariant violation; an empty list means the network is valid."""
    report: list[str] = []
    ids = {it.id for it in net.intersections}
    for it in net.intersections:
        lanes = {l.id: l for l in it.lanes}
        for lane in it.lanes:
            if lane.capacity < 1:
                report.append(f"lane {lane.id}: capacity {lane.capacity} < 1")
            if not lane.length > 0:
                report.append(f"lane {lane.id}: non-positive length {lane.length}")
            if not lane.free_flow_speed > 0:
                report.append(f"lane {lane.id}: non-positive speed {lane.free_flow_speed}")
        pairs = set()
        for m in it.movements:
            src, dst = lanes.get(m.from_lane), lanes.get(m.to_lane)
            if src is None or dst is None:
                report.append(f"movement {it.id}/{m.id}: references a lane outside the intersection")
                continue
            if src.kind != "incoming" or dst.kind != "outgoing":
                report.append(f"movement {it.id}/{m.id}: must run incoming -> outgoing")
            if (m.from_lane, m.to_lane) in pairs:
                report.append(f"movement {it.id}/{m.id}: duplicate lane pair")
            pairs.add((m.from_lane, m.to_lane))
        c = it.conflict.conflicts
        if c.shape != (len(it.movements),) * 2:
            report.append(f"intersection {it.id}: conflict matrix shape {c.shape}")
        else:
            if not (c == c.T).all() or c.diagonal().any():
                report.append(f"intersection {it.id}: conflict matrix not symmetric with false diagonal")
            if (c & it.conflict.partial).any():
                report.append(f"intersection {it.id}: conflict and partial relations overlap")
        for ph in it.phases:
            for a in ph.movements:
                for b in ph.movements:
                    if a < b and c[a, b]:
                        report.append(f"intersection {it.id}: phase {ph.id} holds conflicting movements {a}, {b}")
        for n in it.neighbors:
            if n not in ids:
                report.append(f"intersection {it.id}: unknown neighbor {n}")
            elif it.id not in net.intersection(n).neighbors:
                report.append(f"neighbors not symmetric: {it.id} lists {n} but {n} does not list {it.id}")
    for link in net.links:
        for ref in (link.from_lane, link.to_lane):
            if ref not in net.lanes:
                report.append(f"link {link.from_lane}->{link.to_lane}: unknown lane {ref}")
        if link.from_lane in net.lanes and net.lanes[link.from_lane].kind != "outgoing":
            report.append(f"link {link.from_lane}->{link.to_lane}: must start on an outgoing lane")
        if link.to_lane in net.lanes and net.lanes[link.to_lane].kind != "incoming":
            report.append(f"link {link.from_lane}->{link.to_lane}: must end on an incoming lane")
    return report


def validate_flows(net: RoadNetwork, flows: FlowSpec) -> list[str]:
    report = []
    for k, e in enumerate(flows.entries):
        for err in route_errors(net, e.route):
            report.append(f"flows[{k}]: {err}")
    return report
