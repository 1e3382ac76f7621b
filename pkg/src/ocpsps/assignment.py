"""Parking assignment: weighted cost matrix, prioritized reduction and the Hungarian solver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import groupby
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvariantViolation, NonFiniteCost, UnknownLot
from .geometry import BBox
from .ingest import ParkingLot, bbox_to_list
from .routing import LatLon, RoutingProvider


@dataclass(frozen=True)
class Request:
    request_id: str
    arrival_time: float
    origin: LatLon

    def __post_init__(self):
        lat, lon = self.origin
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise InvariantViolation("origin", f"{self.origin} is not a valid coordinate")
        object.__setattr__(self, "origin", (float(lat), float(lon)))

    def to_dict(self) -> dict:
        return {"request_id": self.request_id, "arrival_time": self.arrival_time, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, obj: Mapping) -> "Request":
        return cls(str(obj["request_id"]), float(obj["arrival_time"]), tuple(obj["origin"]))


@dataclass(frozen=True, order=True)
class Slot:
    lot_id: str
    sector_id: str
    bbox: BBox

    def to_dict(self) -> dict:
        return {"lot_id": self.lot_id, "sector_id": self.sector_id, "bbox": bbox_to_list(self.bbox)}


@dataclass(frozen=True)
class CostWeights:
    gamma: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise InvariantViolation("gamma", f"{self.gamma} outside [0, 1]")


@dataclass
class CostMatrix:
    requests: List[Request]
    slots: List[Slot]
    costs: np.ndarray
    price: np.ndarray
    travel: np.ndarray
    distance: np.ndarray

    @property
    def shape(self) -> Tuple[int, int]:
        return self.costs.shape


@dataclass(frozen=True)
class AssignedPair:
    request_id: str
    slot: Optional[Slot]
    row: int
    col: int
    cost: float
    price: float = 0.0
    travel: float = 0.0
    distance: float = 0.0

    def to_dict(self) -> dict:
        out = {"request_id": self.request_id, "row": self.row, "col": self.col, "cost": self.cost,
               "components": {"price": self.price, "travel": self.travel, "distance": self.distance}}
        if self.slot is not None:
            out["slot"] = self.slot.to_dict()
        return out


@dataclass
class Assignment:
    pairs: List[AssignedPair] = field(default_factory=list)
    total_cost: float = 0.0
    unassigned_requests: List[str] = field(default_factory=list)

    def counts_by_lot(self, lot_ids: Sequence[str]) -> List[int]:
        counts = {l: 0 for l in lot_ids}
        for p in self.pairs:
            if p.slot is not None and p.slot.lot_id in counts:
                counts[p.slot.lot_id] += 1
        return [counts[l] for l in lot_ids]

    def to_dict(self) -> dict:
        return {
            "pairs": [p.to_dict() for p in self.pairs],
            "total_cost": self.total_cost,
            "unassigned_requests": list(self.unassigned_requests),
        }


def minmax(a: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return a.astype(float)
    lo, hi = float(a.min()), float(a.max())
    if hi == lo:
        return np.zeros_like(a, dtype=float)
    return (a - lo) / (hi - lo)


def build_cost_matrix(
    requests: Sequence[Request],
    slots: Sequence[Slot],
    lots: Union[Mapping[str, ParkingLot], Sequence[ParkingLot]],
    routing: RoutingProvider,
    weights: CostWeights = CostWeights(),
    traffic: Optional[Callable[[str], float]] = None,
) -> CostMatrix:
    """Cost of sending each request to each slot.

    Price, traffic-scaled travel time and route distance are min-max normalized
    over the whole matrix, then combined as
    ``gamma * price + (1 - gamma) * (travel + distance)``.
    ``traffic(lot_id)`` returns the travel-time multiplier (default 1).
    """
    if not isinstance(lots, Mapping):
        lots = {l.lot_id: l for l in lots}
    m, n = len(requests), len(slots)
    price = np.zeros((m, n))
    travel = np.zeros((m, n))
    distance = np.zeros((m, n))
    for j, slot in enumerate(slots):
        if slot.lot_id not in lots:
            raise UnknownLot(f"slot references unregistered lot {slot.lot_id!r}")
        price[:, j] = lots[slot.lot_id].price
    factor = {lid: (traffic(lid) if traffic else 1.0) for lid in {s.lot_id for s in slots}}
    for i, req in enumerate(requests):
        route_cache: Dict[str, Tuple[float, float]] = {}
        for j, slot in enumerate(slots):
            if slot.lot_id not in route_cache:
                r = routing.route(req.origin, slot.lot_id)
                route_cache[slot.lot_id] = (r.travel_min * factor[slot.lot_id], r.distance_km)
            travel[i, j], distance[i, j] = route_cache[slot.lot_id]
    p, t, d = minmax(price), minmax(travel), minmax(distance)
    g = weights.gamma
    costs = g * p + (1.0 - g) * (t + d)
    return CostMatrix(list(requests), list(slots), costs, p, t, d)


def prioritize(
    requests: Sequence[Request],
    slots: Sequence[Slot],
    lot_occupancy: Mapping[str, float],
) -> Tuple[List[Request], List[Slot]]:
    """Shrink the larger side so the assignment is square.

    More requests than slots keeps the earliest arrivals. More slots than
    requests keeps slots from the least occupied lots, drawing round-robin
    among lots that share a rate. Survivors keep their input order.
    """
    m, n = len(requests), len(slots)
    if m > n:
        order = sorted(range(m), key=lambda i: (requests[i].arrival_time, requests[i].request_id, i))
        keep = set(order[:n])
        return [r for i, r in enumerate(requests) if i in keep], list(slots)
    if n > m:
        by_lot: Dict[str, List[int]] = {}
        for j, s in enumerate(slots):
            by_lot.setdefault(s.lot_id, []).append(j)
        # unknown occupancy sorts last
        ranked = sorted(by_lot, key=lambda l: (lot_occupancy.get(l, math.inf), l))
        chosen: List[int] = []
        for _, group in groupby(ranked, key=lambda l: lot_occupancy.get(l, math.inf)):
            queues = [list(by_lot[l]) for l in group]
            while len(chosen) < m and any(queues):
                for q in queues:
                    if q and len(chosen) < m:
                        chosen.append(q.pop(0))
            if len(chosen) >= m:
                break
        keep = set(chosen)
        return list(requests), [s for j, s in enumerate(slots) if j in keep]
    return list(requests), list(slots)


def solve_square(cost: np.ndarray) -> List[int]:
    """Minimum-cost perfect matching on a square matrix; ``result[row] = col``.

    Shortest-augmenting-path Hungarian method with row/column potentials,
    O(n^3). Columns are scanned in index order and only strictly smaller
    reduced costs replace the incumbent, so ties resolve to the lowest index.
    """
    n = cost.shape[0]
    if n == 0:
        return []
    c = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_col = [0] * (n + 1)  # match_col[j] = row (1-based) owning column j
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    result = [0] * n
    for j in range(1, n + 1):
        result[match_col[j] - 1] = j - 1
    return result


def pad_square(costs: np.ndarray) -> np.ndarray:
    """Pad with dummy rows/columns costing more than any real cell."""
    m, n = costs.shape
    size = max(m, n)
    if m == n:
        return costs.copy()
    fill = 1.0 + (float(costs.max()) if costs.size else 0.0)
    out = np.full((size, size), fill)
    out[:m, :n] = costs
    return out


def hungarian(matrix: Union[CostMatrix, np.ndarray, Sequence[Sequence[float]]]) -> Assignment:
    """Minimal total cost matching of requests to slots.

    Accepts a :class:`CostMatrix` or a bare 2D array (request ids are then the
    row indices and pairs carry no slot). Rectangular input is padded; pairs
    that land on dummies are dropped, so ``min(M, N)`` pairs come back.
    """
    if isinstance(matrix, CostMatrix):
        costs = np.asarray(matrix.costs, dtype=float)
        ids = [r.request_id for r in matrix.requests]
        slots: Optional[List[Slot]] = matrix.slots
    else:
        costs = np.asarray(matrix, dtype=float)
        if costs.size == 0:
            costs = costs.reshape(len(matrix), 0) if costs.ndim < 2 else costs
        ids = [str(i) for i in range(costs.shape[0])]
        slots = None
    if costs.ndim != 2:
        raise InvariantViolation("costs", f"expected a 2D matrix, got shape {costs.shape}")
    if not np.all(np.isfinite(costs)):
        raise NonFiniteCost("cost matrix contains NaN or infinite entries")
    if np.any(costs < 0):
        raise InvariantViolation("costs", "costs must be non-negative")
    m, n = costs.shape
    if m == 0 or n == 0:
        return Assignment([], 0.0, list(ids))

    cols = solve_square(pad_square(costs))
    pairs = []
    assigned = set()
    for i in range(m):
        j = cols[i]
        if j >= n:
            continue
        assigned.add(i)
        if isinstance(matrix, CostMatrix):
            pairs.append(AssignedPair(ids[i], slots[j], i, j, float(costs[i, j]),
                                      float(matrix.price[i, j]), float(matrix.travel[i, j]),
                                      float(matrix.distance[i, j])))
        else:
            pairs.append(AssignedPair(ids[i], None, i, j, float(costs[i, j])))
    total = math.fsum(p.cost for p in pairs)
    return Assignment(pairs, total, [ids[i] for i in range(m) if i not in assigned])


def assign(
    requests: Sequence[Request],
    slots: Sequence[Slot],
    lots: Union[Mapping[str, ParkingLot], Sequence[ParkingLot]],
    routing: RoutingProvider,
    lot_occupancy: Mapping[str, float],
    weights: CostWeights = CostWeights(),
    traffic: Optional[Callable[[str], float]] = None,
) -> Tuple[Assignment, CostMatrix]:
    """Prioritize, price and solve in one step."""
    reqs, sl = prioritize(requests, slots, lot_occupancy)
    matrix = build_cost_matrix(reqs, sl, lots, routing, weights, traffic)
    result = hungarian(matrix)
    chosen = {r.request_id for r in reqs}
    result.unassigned_requests = sorted(
        set(result.unassigned_requests) | {r.request_id for r in requests if r.request_id not in chosen}
    )
    return result, matrix
