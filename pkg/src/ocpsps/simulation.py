"""Closed-loop replay: detections -> filter -> store -> assignment, scored against the labels."""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .assignment import Assignment, CostWeights, Request, Slot, assign
from .errors import InvariantViolation, StaleFrame, ValidationError
from .filtering import FilterConfig, FrameError, filter_batch
from .ingest import (
    FrameInference,
    GroundTruthFrame,
    ParkingLot,
    TrafficFeed,
    apply_overlap_mask,
    groundtruth_as_frame,
    load_dataset,
)
from .metrics import err_assign, err_cost
from .routing import RoutingProvider, StaticRoutingMatrix, estimated_matrix
from .store import LotSnapshot, OccupancyStore, UnusablePolicy

Region = Tuple[float, float, float, float]  # lat_min, lat_max, lon_min, lon_max


@dataclass(frozen=True)
class SimConfig:
    days: int = 5
    start_hour: int = 15
    end_hour: int = 18
    requests_per_day: int = 100
    lots: Tuple[str, ...] = ()  # empty: every lot in the dataset
    repeats: int = 10
    rng_seed: int = 0
    filter: FilterConfig = FilterConfig()
    weights: CostWeights = CostWeights()
    traffic_jitter: Tuple[float, float] = (0.8, 1.25)
    origin_region: Optional[Region] = None
    region_margin_deg: float = 0.01
    unusable_policy: str = UnusablePolicy.UNTIL_TRUSTED.value
    workers: int = 1

    def __post_init__(self):
        if self.repeats < 1:
            raise InvariantViolation("repeats", "must be >= 1")
        if self.days < 1:
            raise InvariantViolation("days", "must be >= 1")
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise InvariantViolation("end_hour", "need 0 <= start_hour < end_hour <= 24")
        if self.requests_per_day < 0:
            raise InvariantViolation("requests_per_day", "must be >= 0")
        lo, hi = self.traffic_jitter
        if not 0 < lo <= hi:
            raise InvariantViolation("traffic_jitter", "need 0 < low <= high")
        object.__setattr__(self, "lots", tuple(self.lots))
        UnusablePolicy(self.unusable_policy)

    @property
    def window(self) -> Tuple[int, int]:
        return (self.start_hour, self.end_hour)

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SimConfig":
        """Build from a parsed ``sim.toml`` (nested ``[filter]`` / ``[weights]`` tables)."""
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known - {"window"})
        if unknown:
            raise InvariantViolation(unknown[0], "unknown simulation setting")
        if "window" in data:
            data["start_hour"], data["end_hour"] = data.pop("window")
        if "filter" in data:
            fdata = dict(data["filter"])
            if "fused_resolution" in fdata and fdata["fused_resolution"] is not None:
                fdata["fused_resolution"] = tuple(fdata["fused_resolution"])
            data["filter"] = FilterConfig(**fdata)
        if "weights" in data:
            data["weights"] = CostWeights(**dict(data["weights"]))
        for key in ("lots", "traffic_jitter", "origin_region"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lots"] = list(self.lots)
        return out


@dataclass
class SimDataset:
    truths: List[GroundTruthFrame]
    frames: List[FrameInference]
    lots: List[ParkingLot]
    traffic: TrafficFeed = field(default_factory=TrafficFeed)
    routing: Optional[StaticRoutingMatrix] = None

    @classmethod
    def load(cls, directory) -> "SimDataset":
        d = Path(directory)
        data = load_dataset(d)
        routing = StaticRoutingMatrix.load(d / "routing_matrix.json") if (d / "routing_matrix.json").exists() else None
        return cls(data["truths"], data["frames"], data["lots"], data["traffic"], routing)


@dataclass
class RoundResult:
    hour: int
    gt_assignment: Assignment
    pred_assignment: Assignment
    gt_snapshots: List[LotSnapshot]
    pred_snapshots: List[LotSnapshot]
    rejected_frames: List[str] = field(default_factory=list)


def lots_region(lots: Sequence[ParkingLot], margin: float) -> Region:
    lats = [l.gps[0] for l in lots]
    lons = [l.gps[1] for l in lots]
    return (min(lats) - margin, max(lats) + margin, min(lons) - margin, max(lons) + margin)


def generate_requests(
    cfg: SimConfig,
    rng: np.random.Generator,
    region: Optional[Region] = None,
    day: int = 0,
    day_start: int = 0,
    origins: Optional[Sequence[Tuple[float, float]]] = None,
    prefix: str = "",
) -> List[Request]:
    """Requests for one day: arrivals uniform over the window, origins uniform in the region.

    When ``origins`` is given (a routing matrix's origin rows) origins are drawn
    uniformly from that set instead.
    """
    n = cfg.requests_per_day
    if n == 0:
        return []
    lo = day_start + cfg.start_hour * 3600
    hi = day_start + cfg.end_hour * 3600
    arrivals = rng.uniform(lo, hi, size=n)
    if origins is not None:
        picks = rng.integers(0, len(origins), size=n)
        pts = [tuple(origins[k]) for k in picks]
    else:
        region = region or cfg.origin_region
        if region is None:
            raise ValidationError("request origins need a region (origin_region or lots)")
        lat = rng.uniform(region[0], region[1], size=n)
        lon = rng.uniform(region[2], region[3], size=n)
        pts = [(round(float(a), 6), round(float(b), 6)) for a, b in zip(lat, lon)]
    order = np.argsort(arrivals, kind="stable")
    return [Request(f"{prefix}d{day}-r{rank:03d}", float(arrivals[k]), pts[k]) for rank, k in enumerate(order)]


def _slots(snapshots: Sequence[LotSnapshot]) -> List[Slot]:
    return [Slot(s.lot_id, sector, box) for s in snapshots for sector, box in s.available_slots]


def _commit_all(store: OccupancyStore, frames: Sequence[FrameInference], errors: Sequence[FrameError]) -> None:
    for fr, err in sorted(zip(frames, errors), key=lambda fe: (fe[0].timestamp, fe[0].frame_id)):
        try:
            store.commit(fr, err)
        except StaleFrame:
            pass


def run_round(
    truth_frames: Sequence[GroundTruthFrame],
    pred_frames: Sequence[FrameInference],
    requests: Sequence[Request],
    cfg: SimConfig,
    lots: Sequence[ParkingLot],
    routing: RoutingProvider,
    traffic: Optional[Callable[[str], float]] = None,
    gt_store: Optional[OccupancyStore] = None,
    pred_store: Optional[OccupancyStore] = None,
    hour: int = 0,
) -> RoundResult:
    """One window of both pipelines against the same requests and routes.

    Ground-truth frames are paired with predicted frames by ``frame_id``
    (labels carry no timestamp). Stores persist across rounds when passed in.
    """
    lot_ids = list(cfg.lots) or [l.lot_id for l in lots]
    gt_store = gt_store or OccupancyStore(lots, cfg.unusable_policy)
    pred_store = pred_store or OccupancyStore(lots, cfg.unusable_policy)
    truth_by_id = {t.frame_id: t for t in truth_frames}

    gt_frames, masked_preds = [], []
    for fr in pred_frames:
        gt = truth_by_id.get(fr.frame_id)
        if gt is None:
            raise ValidationError(f"predicted frame {fr.frame_id!r} has no ground truth")
        gt_frames.append(apply_overlap_mask(groundtruth_as_frame(gt, fr.timestamp), gt))
        masked_preds.append(apply_overlap_mask(fr, gt))

    _commit_all(gt_store, gt_frames, [FrameError(f.frame_id, 0.0, 0.0, 0.0, True) for f in gt_frames])
    _, rejected, errors = filter_batch(masked_preds, cfg.filter)
    _commit_all(pred_store, masked_preds, errors)

    gt_snaps = gt_store.snapshot_many(lot_ids)
    pred_snaps = pred_store.snapshot_many(lot_ids)
    lot_map = {l.lot_id: l for l in lots}
    gt_assign, _ = assign(requests, _slots(gt_snaps), lot_map, routing,
                          {s.lot_id: s.occupancy_rate for s in gt_snaps}, cfg.weights, traffic)
    pred_assign, _ = assign(requests, _slots(pred_snaps), lot_map, routing,
                            {s.lot_id: s.occupancy_rate for s in pred_snaps}, cfg.weights, traffic)
    return RoundResult(hour, gt_assign, pred_assign, gt_snaps, pred_snaps, [f.frame_id for f in rejected])


@dataclass
class SimReport:
    config: dict
    lots: List[str]
    # one record per (repeat, day), each holding its per-round breakdown
    records: List[dict]
    repeats: int
    days: int

    def matrix(self, key: str) -> np.ndarray:
        """``repeats x days`` array of ``err_cost`` or ``err_assign``."""
        out = np.full((self.repeats, self.days), math.nan)
        for r in self.records:
            out[r["repeat"], r["day"]] = r[key]
        return out

    def per_repeat(self, key: str) -> List[float]:
        return [float(np.mean(row)) for row in self.matrix(key)]

    def summary(self) -> dict:
        out = {}
        for key in ("err_cost", "err_assign"):
            m = self.matrix(key)
            reps = self.per_repeat(key)
            out[key] = {
                "mean": float(np.mean(reps)),
                "std": float(np.std(reps)),
                "per_repeat": reps,
                "per_day_mean": [float(v) for v in m.mean(axis=0)],
                "per_day_std": [float(v) for v in m.std(axis=0)],
            }
        return out

    def to_dict(self) -> dict:
        return {"config": self.config, "lots": self.lots, "summary": self.summary(), "records": self.records}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["repeat", "day", "err_cost", "err_assign", "cost_rounds", "assign_rounds", "rejected_frames"])
        for r in self.records:
            w.writerow([r["repeat"], r["day"], repr(r["err_cost"]), repr(r["err_assign"]),
                        r["cost_rounds"], r["assign_rounds"], sum(len(x["rejected"]) for x in r["rounds"])])
        return buf.getvalue()


def _day_metrics(rounds: List[RoundResult], lot_ids: Sequence[str]) -> dict:
    # rounds with no ground-truth booking leave the relative errors undefined and are skipped
    cost_g, cost_p, cnt_g, cnt_p, detail = [], [], [], [], []
    for rr in rounds:
        cg, cp = rr.gt_assignment.total_cost, rr.pred_assignment.total_cost
        ng, np_ = rr.gt_assignment.counts_by_lot(lot_ids), rr.pred_assignment.counts_by_lot(lot_ids)
        if cg > 0:
            cost_g.append(cg)
            cost_p.append(cp)
        if sum(ng) > 0:
            cnt_g.append(ng)
            cnt_p.append(np_)
        detail.append({"hour": rr.hour, "cost_gt": cg, "cost_pred": cp, "count_gt": ng, "count_pred": np_,
                       "rejected": rr.rejected_frames})
    return {
        "err_cost": err_cost(cost_g, cost_p) if cost_g else 0.0,
        "err_assign": err_assign(cnt_g, cnt_p) if cnt_g else 0.0,
        "cost_rounds": len(cost_g),
        "assign_rounds": len(cnt_g),
        "rounds": detail,
    }


def _select(dataset: SimDataset, cfg: SimConfig):
    lot_ids = list(cfg.lots) or sorted(l.lot_id for l in dataset.lots)
    known = {l.lot_id for l in dataset.lots}
    missing = [l for l in lot_ids if l not in known]
    if missing:
        raise ValidationError(f"simulation lots not in dataset: {missing}")
    lots = [l for l in dataset.lots if l.lot_id in set(lot_ids)]
    frames = [f for f in dataset.frames if f.lot_id in set(lot_ids) and cfg.start_hour <= f.hour < cfg.end_hour]
    days = sorted({f.day for f in frames})
    if len(days) < cfg.days:
        raise ValidationError(f"dataset covers {len(days)} day(s) in the window, {cfg.days} requested")
    return lot_ids, lots, frames, days[: cfg.days]


def run_repeat(dataset: SimDataset, cfg: SimConfig, repeat: int) -> List[dict]:
    lot_ids, lots, frames, days = _select(dataset, cfg)
    rng = np.random.default_rng(cfg.rng_seed + repeat)
    lo, hi = cfg.traffic_jitter
    jitter = {lid: float(rng.uniform(lo, hi)) for lid in lot_ids}
    region = cfg.origin_region or lots_region(lots, cfg.region_margin_deg)
    gps = {l.lot_id: l.gps for l in lots}
    gt_store = OccupancyStore(lots, cfg.unusable_policy)
    pred_store = OccupancyStore(lots, cfg.unusable_policy)
    by_slot: Dict[Tuple[int, int], List[FrameInference]] = {}
    for f in frames:
        by_slot.setdefault((f.day, f.hour), []).append(f)

    records = []
    for d_idx, day in enumerate(days):
        origins = dataset.routing.origins if dataset.routing is not None else None
        reqs = generate_requests(cfg, rng, region, d_idx, day * 86400, origins, prefix=f"x{repeat}-")
        routing = dataset.routing or estimated_matrix(sorted({r.origin for r in reqs}), gps)
        rounds = []
        for hour in range(cfg.start_hour, cfg.end_hour):
            hour_reqs = [r for r in reqs if int(r.arrival_time - day * 86400) // 3600 == hour]
            hour_frames = sorted(by_slot.get((day, hour), []), key=lambda f: (f.timestamp, f.frame_id))

            def traffic(lot_id: str, _h=hour) -> float:
                return dataset.traffic.factor(d_idx, _h, lot_id) * jitter[lot_id]

            rounds.append(run_round(dataset.truths, hour_frames, hour_reqs, cfg, lots, routing, traffic,
                                    gt_store, pred_store, hour))
        rec = {"repeat": repeat, "day": d_idx}
        rec.update(_day_metrics(rounds, lot_ids))
        records.append(rec)
    return records


def run_simulation(dataset: SimDataset, cfg: SimConfig) -> SimReport:
    lot_ids, _, _, _ = _select(dataset, cfg)
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunks = list(pool.map(run_repeat, [dataset] * cfg.repeats, [cfg] * cfg.repeats, range(cfg.repeats)))
    else:
        chunks = [run_repeat(dataset, cfg, r) for r in range(cfg.repeats)]
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r["repeat"], r["day"]))
    return SimReport(cfg.to_dict(), lot_ids, records, cfg.repeats, cfg.days)
