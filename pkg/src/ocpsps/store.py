"""Per-sector occupancy middleware between the filter and the application layer."""
from __future__ import annotations

import enum
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple, Union

from .errors import InvariantViolation, StaleFrame, UnknownLot
from .filtering import FrameError
from .geometry import BBox, SlotClass
from .ingest import Detection, FrameInference, ParkingLot, bbox_to_list


@dataclass(frozen=True)
class Trusted:
    detections: Tuple[Detection, ...]


@dataclass(frozen=True)
class Unusable:
    err_total: float
    since: int


@dataclass(frozen=True)
class SectorState:
    sector_id: str
    lot_id: str
    last_update: int
    status: Union[Trusted, Unusable]
    frame_id: str = ""

    @property
    def usable(self) -> bool:
        return isinstance(self.status, Trusted)


@dataclass(frozen=True)
class LotSnapshot:
    lot_id: str
    available_slots: Tuple[Tuple[str, BBox], ...]
    occupied_count: int
    unusable_sector_count: int
    occupancy_rate: float

    def to_dict(self) -> dict:
        return {
            "lot_id": self.lot_id,
            "available_slots": [{"sector_id": s, "bbox": bbox_to_list(b)} for s, b in self.available_slots],
            "occupied_count": self.occupied_count,
            "unusable_sector_count": self.unusable_sector_count,
            "occupancy_rate": self.occupancy_rate,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "LotSnapshot":
        slots = tuple((s["sector_id"], BBox(*s["bbox"])) for s in obj.get("available_slots", []))
        snap = cls(
            lot_id=obj["lot_id"],
            available_slots=slots,
            occupied_count=int(obj.get("occupied_count", 0)),
            unusable_sector_count=int(obj.get("unusable_sector_count", 0)),
            occupancy_rate=float(obj.get("occupancy_rate", occupancy_rate(int(obj.get("occupied_count", 0)), len(slots)))),
        )
        if not 0.0 <= snap.occupancy_rate <= 1.0:
            raise InvariantViolation(f"{snap.lot_id}.occupancy_rate", "outside [0, 1]")
        return snap


class UnusablePolicy(str, enum.Enum):
    # rejected frame masks the sector until a newer trusted frame arrives
    UNTIL_TRUSTED = "until_trusted"
    # rejected frames are dropped; the last trusted state stays visible
    IGNORE = "ignore"


def occupancy_rate(occupied: int, available: int) -> float:
    """Occupied share of visible slots; a lot with nothing visible reads as full."""
    total = occupied + available
    return occupied / total if total else 1.0


class OccupancyStore:
    """Thread-safe registry of sector states.

    Commits take a per-sector lock for the stale check and a short registry
    lock only to publish the new immutable state, so different sectors do not
    serialize on each other. Snapshots copy the state references under the
    registry lock and aggregate outside it.
    """

    def __init__(self, lots: Iterable[ParkingLot] = (), policy: UnusablePolicy = UnusablePolicy.UNTIL_TRUSTED):
        self.policy = UnusablePolicy(policy)
        self._lots: Dict[str, ParkingLot] = {}
        self._states: Dict[Tuple[str, str], SectorState] = {}
        self._sector_locks: Dict[Tuple[str, str], threading.Lock] = {}
        self._registry = threading.Lock()
        for lot in lots:
            self.register_lot(lot)

    def register_lot(self, lot: ParkingLot) -> None:
        with self._registry:
            self._lots[lot.lot_id] = lot

    @property
    def lot_ids(self) -> List[str]:
        with self._registry:
            return sorted(self._lots)

    def lot(self, lot_id: str) -> ParkingLot:
        try:
            return self._lots[lot_id]
        except KeyError:
            raise UnknownLot(f"lot {lot_id!r} is not registered") from None

    def _lock_for(self, key) -> threading.Lock:
        with self._registry:
            lock = self._sector_locks.get(key)
            if lock is None:
                lock = self._sector_locks[key] = threading.Lock()
            return lock

    def state(self, lot_id: str, sector_id: str) -> Optional[SectorState]:
        with self._registry:
            return self._states.get((lot_id, sector_id))

    def commit(self, frame: FrameInference, frame_error: FrameError) -> SectorState:
        if frame.frame_id != frame_error.frame_id:
            raise InvariantViolation("frame_error.frame_id", "does not match the frame")
        self.lot(frame.lot_id)
        key = (frame.lot_id, frame.sector_id)
        with self._lock_for(key):
            current = self.state(*key)
            if current is not None and frame.timestamp < current.last_update:
                raise StaleFrame(frame.sector_id, frame.timestamp, current.last_update)
            if frame_error.trusted:
                status = Trusted(tuple(frame.detections))
            elif self.policy is UnusablePolicy.IGNORE:
                if current is None:
                    return SectorState(frame.sector_id, frame.lot_id, frame.timestamp,
                                       Unusable(frame_error.err_total, frame.timestamp), frame.frame_id)
                return current
            elif current is not None and isinstance(current.status, Unusable):
                # keep the original onset of an ongoing outage
                status = Unusable(frame_error.err_total, current.status.since)
            else:
                status = Unusable(frame_error.err_total, frame.timestamp)
            new = SectorState(frame.sector_id, frame.lot_id, frame.timestamp, status, frame.frame_id)
            if new == current:
                return current
            with self._registry:
                self._states[key] = new
            return new

    def snapshot(self, lot_id: str) -> LotSnapshot:
        return self.snapshot_many([lot_id])[0]

    def snapshot_all(self) -> List[LotSnapshot]:
        return self.snapshot_many(self.lot_ids)

    def snapshot_many(self, lot_ids: Iterable[str]) -> List[LotSnapshot]:
        lot_ids = list(lot_ids)
        with self._registry:
            for lot_id in lot_ids:
                if lot_id not in self._lots:
                    raise UnknownLot(f"lot {lot_id!r} is not registered")
            states = dict(self._states)
        return [_aggregate(lot_id, [s for (l, _), s in sorted(states.items()) if l == lot_id]) for lot_id in lot_ids]


def _aggregate(lot_id: str, states: List[SectorState]) -> LotSnapshot:
    available: List[Tuple[str, BBox]] = []
    occupied = 0
    unusable = 0
    for st in states:
        if not isinstance(st.status, Trusted):
            unusable += 1
            continue
        for det in st.status.detections:
            if det.cls is SlotClass.AVAILABLE:
                available.append((st.sector_id, det.bbox))
            elif det.cls is SlotClass.OCCUPIED:
                occupied += 1
    available.sort(key=lambda sb: (sb[0], sb[1].as_tuple()))
    return LotSnapshot(lot_id, tuple(available), occupied, unusable, occupancy_rate(occupied, len(available)))
