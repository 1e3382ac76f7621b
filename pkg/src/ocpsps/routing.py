"""Route lookups from request origins to parking lots.

Two providers share the ``route(origin, lot_id) -> Route`` surface: a static
matrix (hermetic, used by tests and the simulator) and a small HTTP client
for any service answering ``GET <base>?origin=lat,lon&destination=lat,lon``
with ``{"distance_km": ..., "travel_min": ...}``.
"""
from __future__ import annotations

import json
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence, Tuple

import requests

from .errors import InvariantViolation, RoutingUnavailable

LatLon = Tuple[float, float]

EARTH_RADIUS_KM = 6371.0088


@dataclass(frozen=True)
class Route:
    distance_km: float
    travel_min: float


class RoutingProvider(Protocol):
    def route(self, origin: LatLon, lot_id: str) -> Route: ...


def _key(origin: LatLon) -> LatLon:
    return (round(float(origin[0]), 6), round(float(origin[1]), 6))


class StaticRoutingMatrix:
    def __init__(self, origins: Sequence[LatLon], lots: Sequence[str], distance_km, travel_min):
        if len(distance_km) != len(origins) or len(travel_min) != len(origins):
            raise InvariantViolation("distance_km", "row count must equal the number of origins")
        self.origins = [_key(o) for o in origins]
        self.lots = list(lots)
        self._table: Dict[Tuple[LatLon, str], Route] = {}
        for o, drow, trow in zip(self.origins, distance_km, travel_min):
            if len(drow) != len(self.lots) or len(trow) != len(self.lots):
                raise InvariantViolation("travel_min", "column count must equal the number of lots")
            for lot, d, t in zip(self.lots, drow, trow):
                if not (d >= 0 and t >= 0) or math.isinf(d) or math.isinf(t):
                    raise InvariantViolation("distance_km", f"route {o}->{lot} must be finite and >= 0")
                self._table[(o, lot)] = Route(float(d), float(t))

    def route(self, origin: LatLon, lot_id: str) -> Route:
        try:
            return self._table[(_key(origin), lot_id)]
        except KeyError:
            raise RoutingUnavailable(origin, lot_id) from None

    def to_dict(self) -> dict:
        return {
            "origins": [list(o) for o in self.origins],
            "lots": self.lots,
            "distance_km": [[round(self._table[(o, l)].distance_km, 6) for l in self.lots] for o in self.origins],
            "travel_min": [[round(self._table[(o, l)].travel_min, 6) for l in self.lots] for o in self.origins],
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "StaticRoutingMatrix":
        for key in ("origins", "lots", "distance_km", "travel_min"):
            if key not in obj:
                raise InvariantViolation(key, "missing")
        return cls([tuple(o) for o in obj["origins"]], obj["lots"], obj["distance_km"], obj["travel_min"])

    @classmethod
    def load(cls, path) -> "StaticRoutingMatrix":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def haversine_km(a: LatLon, b: LatLon) -> float:
    lat1, lon1, lat2, lon2 = map(math.radians, (a[0], a[1], b[0], b[1]))
    h = math.sin((lat2 - lat1) / 2) ** 2 + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(math.sqrt(h))


def estimated_matrix(
    origins: Sequence[LatLon],
    lot_gps: Mapping[str, LatLon],
    circuity: float = 1.3,
    speed_kmh: float = 25.0,
) -> StaticRoutingMatrix:
    """Offline stand-in for a routing service: great-circle distance times a detour factor."""
    lots = sorted(lot_gps)
    dist = [[haversine_km(o, lot_gps[l]) * circuity for l in lots] for o in origins]
    travel = [[d / speed_kmh * 60.0 for d in row] for row in dist]
    return StaticRoutingMatrix(origins, lots, dist, travel)


class HttpRoutingClient:
    """Caching HTTP routing client, safe for concurrent use."""

    def __init__(self, base_url: str, lot_gps: Mapping[str, LatLon], timeout: float = 10.0,
                 session: Optional[requests.Session] = None, params: Optional[Mapping[str, str]] = None):
        self.base_url = base_url
        self.lot_gps = dict(lot_gps)
        self.timeout = timeout
        self.params = dict(params or {})
        self._session = session or requests.Session()
        self._cache: Dict[Tuple[LatLon, str], Route] = {}
        self._lock = threading.Lock()

    def route(self, origin: LatLon, lot_id: str) -> Route:
        key = (_key(origin), lot_id)
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        if lot_id not in self.lot_gps:
            raise RoutingUnavailable(origin, lot_id)
        dest = self.lot_gps[lot_id]
        params = dict(self.params)
        params["origin"] = f"{key[0][0]},{key[0][1]}"
        params["destination"] = f"{dest[0]},{dest[1]}"
        try:
            resp = self._session.get(self.base_url, params=params, timeout=self.timeout)
            resp.raise_for_status()
            body = resp.json()
            route = Route(float(body["distance_km"]), float(body["travel_min"]))
        except (requests.RequestException, ValueError, KeyError, TypeError) as exc:
            raise RoutingUnavailable(origin, lot_id) from exc
        with self._lock:
            self._cache.setdefault(key, route)
        return route

    def route_many(self, pairs: Iterable[Tuple[LatLon, str]], workers: int = 8) -> List[Route]:
        pairs = list(pairs)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda p: self.route(*p), pairs))
