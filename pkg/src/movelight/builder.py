"""Synthetic four-leg intersections and grids in the scenario file format.

Legs are named by the side a vehicle enters from: W, N, E, S, listed in the
order a 90 degree rotation visits them. Movement numbering follows the
standard eight-movement conflict layout (1 WT, 2 EL, 3 NT, 4 SL, 5 ET,
6 WL, 7 ST, 8 NL) with the four right turns appended as 9..12 and served
on every phase.
"""

from __future__ import annotations

import json
from typing import Sequence

LEGS = ("W", "N", "E", "S")
OPPOSITE = {"W": "E", "E": "W", "N": "S", "S": "N"}
TURN_CODE = {"left": "L", "through": "T", "right": "R"}

MOVEMENT_LAYOUT = (
    ("W", "through"), ("E", "left"), ("N", "through"), ("S", "left"),
    ("E", "through"), ("W", "left"), ("S", "through"), ("N", "left"),
    ("W", "right"), ("N", "right"), ("E", "right"), ("S", "right"),
)

# Conflict rows for movements 1..8 as transcribed (1 = conflict). Row 3 leaves
# column 6 blank while row 6 marks column 3; symmetrization resolves it.
EIGHT_MOVEMENT_CONFLICTS = (
    (0, 1, 1, 1, 0, 0, 1, 1),
    (1, 0, 1, 1, 0, 0, 1, 1),
    (1, 1, 0, 1, 1, 0, 0, 0),
    (1, 1, 1, 0, 1, 1, 0, 0),
    (0, 0, 1, 1, 0, 1, 1, 1),
    (0, 0, 1, 1, 1, 0, 1, 1),
    (1, 1, 0, 0, 1, 1, 0, 1),
    (1, 1, 0, 0, 1, 1, 1, 0),
)


def exit_leg(approach: str, turn: str) -> str:
    """Side of the intersection a vehicle leaves by."""
    r = LEGS.index(approach)
    shift = {"left": 1, "through": 2, "right": 3}[turn]
    return LEGS[(r + shift) % 4]


def conflict_codes() -> list[list[int]]:
    codes = [[0] * 12 for _ in range(12)]
    for i in range(8):
        for j in range(8):
            codes[i][j] = EIGHT_MOVEMENT_CONFLICTS[i][j]
    # right turn vs through from the same approach: partial
    for r, (leg, turn) in enumerate(MOVEMENT_LAYOUT[8:], start=8):
        t = MOVEMENT_LAYOUT.index((leg, "through"))
        codes[r][t] = codes[t][r] = 2
    return codes


def in_lane(inter: str, approach: str, turn: str) -> str:
    return f"{inter}.in.{approach}.{TURN_CODE[turn]}"


def out_lane(inter: str, leg: str) -> str:
    return f"{inter}.out.{leg}"


def intersection_doc(inter: str, neighbors: Sequence[str] = (), length_m: float = 300.0,
                     speed_mps: float = 15.0, capacity: int = 40) -> dict:
    lanes = []
    for leg in LEGS:
        for turn in ("left", "through", "right"):
            lanes.append({"id": in_lane(inter, leg, turn), "length_m": length_m, "speed_mps": speed_mps,
                          "capacity": capacity, "kind": "incoming"})
    for leg in LEGS:
        lanes.append({"id": out_lane(inter, leg), "length_m": length_m, "speed_mps": speed_mps,
                      "capacity": capacity, "kind": "outgoing"})
    movements = []
    for k, (leg, turn) in enumerate(MOVEMENT_LAYOUT, start=1):
        mv = {"id": str(k), "from": in_lane(inter, leg, turn), "to": out_lane(inter, exit_leg(leg, turn)),
              "turn": turn}
        if turn == "right":
            mv["always_green"] = True
        movements.append(mv)
    return {"id": inter, "lanes": lanes, "movements": movements, "conflict_matrix": conflict_codes(),
            "neighbors": list(neighbors)}


def single_scenario(demand_ratio: float = 0.9, periods: Sequence[tuple[float, float, float]] | None = None,
                    horizon_s: int = 3600, through_share: float = 2 / 3, right_ratio: float = 0.5,
                    saturation: float = 0.5) -> dict:
    """One intersection with Poisson demand whose direction split shifts over time.

    ``periods`` holds (start_s, east-west share, north-south share); the
    shares split ``demand_ratio`` of the signal's service capacity between
    the two axes.
    """
    if periods is None:
        periods = ((0, 0.65, 0.35), (1200, 0.35, 0.65), (2400, 0.5, 0.5))
    inter = "I0"
    flows = []
    bounds = [p[0] for p in periods] + [horizon_s]
    for (start, ew, ns), end in zip(periods, bounds[1:]):
        for axis_share, legs in ((ew, ("W", "E")), (ns, ("N", "S"))):
            # one side of the axis ring (through + opposing left) needs this much green
            side_rate = demand_ratio * axis_share * saturation
            rates = {"through": side_rate * through_share, "left": side_rate * (1 - through_share)}
            rates["right"] = rates["left"] * right_ratio
            for leg in legs:
                for turn, rate in rates.items():
                    flows.append({
                        "route": [in_lane(inter, leg, turn), out_lane(inter, exit_leg(leg, turn))],
                        "start_s": start, "end_s": end - 1, "poisson_rate_vps": round(rate, 6),
                    })
    return {
        "id": "single",
        "description": "synthetic 1x1 intersection, bidirectional turning Poisson flows, direction split shifts "
                       "EW-heavy -> NS-heavy -> balanced",
        "demand_ratio": demand_ratio,
        "intersections": [intersection_doc(inter)],
        "links": [],
        "flows": flows,
    }


def _grid_name(r: int, c: int) -> str:
    return f"I{r}{c}"


def _step(r: int, c: int, leg: str) -> tuple[int, int]:
    dr, dc = {"N": (-1, 0), "S": (1, 0), "W": (0, -1), "E": (0, 1)}[leg]
    return r + dr, c + dc


def grid_route(rows: int, cols: int, r: int, c: int, approach: str, turns: Sequence[str]) -> list[str]:
    """Lane sequence of a vehicle entering (r, c) from ``approach``; ``turns[k]`` applies at the k-th node."""
    route = []
    k = 0
    while True:
        turn = turns[k] if k < len(turns) else "through"
        name = _grid_name(r, c)
        leave = exit_leg(approach, turn)
        route += [in_lane(name, approach, turn), out_lane(name, leave)]
        nr, nc = _step(r, c, leave)
        if not (0 <= nr < rows and 0 <= nc < cols):
            return route
        r, c, approach = nr, nc, OPPOSITE[leave]
        k += 1


def grid_scenario(rows: int = 4, cols: int = 4, through_rate: float = 0.06, turn_rate: float = 0.012,
                  horizon_s: int = 3600, length_m: float = 300.0) -> dict:
    intersections = []
    links = []
    for r in range(rows):
        for c in range(cols):
            nbrs = []
            for leg in LEGS:
                nr, nc = _step(r, c, leg)
                if 0 <= nr < rows and 0 <= nc < cols:
                    nbrs.append(_grid_name(nr, nc))
                    for turn in ("left", "through", "right"):
                        links.append({"from_lane": out_lane(_grid_name(r, c), leg),
                                      "to_lane": in_lane(_grid_name(nr, nc), OPPOSITE[leg], turn)})
            intersections.append(intersection_doc(_grid_name(r, c), nbrs, length_m=length_m))
    flows = []
    entries = ([(r, 0, "W") for r in range(rows)] + [(r, cols - 1, "E") for r in range(rows)]
               + [(0, c, "N") for c in range(cols)] + [(rows - 1, c, "S") for c in range(cols)])
    for r, c, approach in entries:
        flows.append({"route": grid_route(rows, cols, r, c, approach, ()), "start_s": 0,
                      "end_s": horizon_s - 1, "poisson_rate_vps": through_rate})
        depth = cols if approach in ("W", "E") else rows
        for k in range(depth):
            for turn in ("left", "right"):
                turns = ["through"] * k + [turn]
                flows.append({"route": grid_route(rows, cols, r, c, approach, turns), "start_s": 0,
                              "end_s": horizon_s - 1, "poisson_rate_vps": turn_rate})
    return {
        "id": f"grid{rows}x{cols}",
        "description": "synthetic grid, Poisson through and single-turn routes from every boundary entry",
        "intersections": intersections,
        "links": links,
        "flows": flows,
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1) + "\n"
