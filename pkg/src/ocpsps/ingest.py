"""Data model and JSON / JSON-lines I/O for frames, labels, lots and traffic."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import shapely

from .errors import FrameMismatch, InvariantViolation, ParseError, ValidationError
from .geometry import BBox, GridMap, Quad, SlotClass

FLOAT_DIGITS = 6
SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    cls: SlotClass
    score: float = 1.0
    keypoints: Optional[Quad] = None

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InvariantViolation("score", f"{self.score} outside [0, 1]")


@dataclass(frozen=True)
class FrameInference:
    frame_id: str
    lot_id: str
    sector_id: str
    timestamp: int
    detections: Tuple[Detection, ...] = ()
    soft_mask_levels: Tuple[GridMap, ...] = ()
    predicted_loss: float = 0.0

    def __post_init__(self):
        if not self.frame_id:
            raise InvariantViolation("frame_id", "must be non-empty")
        if not self.sector_id:
            raise InvariantViolation("sector_id", "must be non-empty")
        if not (self.predicted_loss >= 0.0) or math.isinf(self.predicted_loss):
            raise InvariantViolation("predicted_loss", f"{self.predicted_loss} is not a finite non-negative value")
        object.__setattr__(self, "detections", tuple(self.detections))
        object.__setattr__(self, "soft_mask_levels", tuple(self.soft_mask_levels))

    @property
    def day(self) -> int:
        """Days since the epoch (UTC)."""
        return self.timestamp // SECONDS_PER_DAY

    @property
    def hour(self) -> int:
        """Hour of day (UTC), 0..23."""
        return (self.timestamp % SECONDS_PER_DAY) // 3600


@dataclass(frozen=True)
class Label:
    quad: Quad
    cls: SlotClass


@dataclass(frozen=True)
class GroundTruthFrame:
    frame_id: str
    lot_id: str
    sector_id: str
    labels: Tuple[Label, ...] = ()
    overlap_mask: Optional[Tuple[Tuple[Tuple[float, float], ...], ...]] = None

    def __post_init__(self):
        if not self.frame_id:
            raise InvariantViolation("frame_id", "must be non-empty")
        object.__setattr__(self, "labels", tuple(self.labels))
        if self.overlap_mask is not None:
            polys = tuple(tuple((float(x), float(y)) for x, y in poly) for poly in self.overlap_mask)
            for k, poly in enumerate(polys):
                if len(poly) < 3 or not shapely.LinearRing(poly).is_simple:
                    raise InvariantViolation(f"overlap_mask[{k}]", "polygon must be simple with >= 3 vertices")
            object.__setattr__(self, "overlap_mask", polys)


@dataclass(frozen=True)
class ParkingLot:
    lot_id: str
    gps: Tuple[float, float]
    price: float
    capacity: int
    sectors: Tuple[str, ...] = ()

    def __post_init__(self):
        lat, lon = self.gps
        if not -90.0 <= lat <= 90.0:
            raise InvariantViolation("gps[0]", f"latitude {lat} outside [-90, 90]")
        if not -180.0 <= lon <= 180.0:
            raise InvariantViolation("gps[1]", f"longitude {lon} outside [-180, 180]")
        if self.capacity < 1:
            raise InvariantViolation("capacity", "must be >= 1")
        if self.price < 0:
            raise InvariantViolation("price", "must be >= 0")
        object.__setattr__(self, "gps", (float(lat), float(lon)))
        object.__setattr__(self, "sectors", tuple(self.sectors))


@dataclass(frozen=True)
class TrafficFeed:
    """Travel-time multipliers keyed by ``(day, hour, lot_id)``; missing keys read as 1.0."""

    factors: Mapping[Tuple[int, int, str], float] = field(default_factory=dict)

    def __post_init__(self):
        for key, f in self.factors.items():
            if not f >= 0.0:
                raise InvariantViolation(f"factor{list(key)}", f"{f} must be >= 0")

    def factor(self, day: int, hour: int, lot_id: str) -> float:
        return self.factors.get((day, hour, lot_id), 1.0)


# ---------------------------------------------------------------- parsing

def _num(obj, path: str) -> float:
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise InvariantViolation(path, f"expected a number, got {obj!r}")
    return float(obj)


def _req(obj: Mapping, key: str, path: str):
    if not isinstance(obj, Mapping):
        raise InvariantViolation(path or "<record>", "expected a JSON object")
    if key not in obj:
        raise InvariantViolation(f"{path}.{key}" if path else key, "missing")
    return obj[key]


def _point(obj, path: str) -> Tuple[float, float]:
    if not isinstance(obj, (list, tuple)) or len(obj) != 2:
        raise InvariantViolation(path, "expected [x, y]")
    return (_num(obj[0], f"{path}[0]"), _num(obj[1], f"{path}[1]"))


def _cls(obj, path: str) -> SlotClass:
    try:
        return SlotClass(obj)
    except ValueError:
        raise InvariantViolation(path, f"unknown class {obj!r}") from None


def _quad(obj, path: str) -> Quad:
    if not isinstance(obj, list) or len(obj) != 4:
        raise InvariantViolation(path, "expected 4 keypoints")
    pts = tuple(_point(p, f"{path}[{k}]") for k, p in enumerate(obj))
    return _wrap(path, Quad, pts)


def _wrap(path: str, ctor, *args, **kwargs):
    """Call ``ctor`` and prefix any invariant failure with ``path``."""
    try:
        return ctor(*args, **kwargs)
    except InvariantViolation as exc:
        inner = exc.field
        full = f"{path}.{inner}" if path and not inner.startswith(path) else inner
        raise InvariantViolation(full, str(exc).split(": ", 1)[-1]) from None


def parse_detection(obj, path: str) -> Detection:
    bbox = _req(obj, "bbox", path)
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise InvariantViolation(f"{path}.bbox", "expected [x1, y1, x2, y2]")
    box = _wrap(f"{path}.bbox", BBox, *(_num(v, f"{path}.bbox[{k}]") for k, v in enumerate(bbox)))
    cls = _cls(_req(obj, "class", path), f"{path}.class")
    score = _num(_req(obj, "score", path), f"{path}.score")
    if not 0.0 <= score <= 1.0:
        raise InvariantViolation(f"{path}.score", f"{score} outside [0, 1]")
    kps = obj.get("keypoints")
    quad = _quad(kps, f"{path}.keypoints") if kps is not None else None
    return Detection(box, cls, score, quad)


def parse_gridmap(obj, path: str) -> GridMap:
    h = _req(obj, "h", path)
    w = _req(obj, "w", path)
    values = _req(obj, "values", path)
    if not isinstance(h, int) or not isinstance(w, int) or h < 1 or w < 1:
        raise InvariantViolation(f"{path}.h", "grid dimensions must be positive integers")
    if not isinstance(values, list):
        raise InvariantViolation(f"{path}.values", "expected a list")
    return _wrap(path, GridMap.from_flat, h, w, [_num(v, f"{path}.values[{k}]") for k, v in enumerate(values)])


def _str(obj, path: str) -> str:
    if not isinstance(obj, str):
        raise InvariantViolation(path, f"expected a string, got {obj!r}")
    return obj


def parse_frame(obj) -> FrameInference:
    ts = _req(obj, "timestamp", "")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise InvariantViolation("timestamp", "expected integer epoch seconds")
    dets = _req(obj, "detections", "")
    masks = obj.get("soft_mask", [])
    if not isinstance(dets, list):
        raise InvariantViolation("detections", "expected a list")
    if not isinstance(masks, list):
        raise InvariantViolation("soft_mask", "expected a list")
    return _wrap(
        "",
        FrameInference,
        frame_id=_str(_req(obj, "frame_id", ""), "frame_id"),
        lot_id=_str(_req(obj, "lot_id", ""), "lot_id"),
        sector_id=_str(_req(obj, "sector_id", ""), "sector_id"),
        timestamp=ts,
        detections=tuple(parse_detection(d, f"detections[{k}]") for k, d in enumerate(dets)),
        soft_mask_levels=tuple(parse_gridmap(m, f"soft_mask[{k}]") for k, m in enumerate(masks)),
        predicted_loss=_num(obj.get("predicted_loss", 0.0), "predicted_loss"),
    )


def parse_groundtruth(obj) -> GroundTruthFrame:
    labels = []
    raw_labels = _req(obj, "labels", "")
    if not isinstance(raw_labels, list):
        raise InvariantViolation("labels", "expected a list")
    for k, lab in enumerate(raw_labels):
        path = f"labels[{k}]"
        labels.append(Label(_quad(_req(lab, "keypoints", path), f"{path}.keypoints"),
                            _cls(_req(lab, "class", path), f"{path}.class")))
    mask = obj.get("overlap_mask")
    if mask is not None:
        if not isinstance(mask, list):
            raise InvariantViolation("overlap_mask", "expected a list of polygons")
        mask = tuple(
            tuple(_point(p, f"overlap_mask[{k}][{m}]") for m, p in enumerate(poly))
            for k, poly in enumerate(mask)
        )
    return _wrap(
        "",
        GroundTruthFrame,
        frame_id=_str(_req(obj, "frame_id", ""), "frame_id"),
        lot_id=_str(_req(obj, "lot_id", ""), "lot_id"),
        sector_id=_str(_req(obj, "sector_id", ""), "sector_id"),
        labels=tuple(labels),
        overlap_mask=mask,
    )


def parse_lot(obj, path: str = "") -> ParkingLot:
    gps = _point(_req(obj, "gps", path), f"{path}.gps" if path else "gps")
    cap = _req(obj, "capacity", path)
    if isinstance(cap, bool) or not isinstance(cap, int):
        raise InvariantViolation(f"{path}.capacity" if path else "capacity", "expected an integer")
    return _wrap(
        path,
        ParkingLot,
        lot_id=_str(_req(obj, "lot_id", path), f"{path}.lot_id"),
        gps=gps,
        price=_num(_req(obj, "price", path), f"{path}.price"),
        capacity=cap,
        sectors=tuple(_str(s, f"{path}.sectors") for s in obj.get("sectors", [])),
    )


def iter_jsonl(path) -> Iterator[Tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(lineno, f"invalid JSON ({exc.msg})") from None


def _load_records(path, parser) -> list:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(parser(obj))
        except InvariantViolation as exc:
            exc.line = lineno
            exc.args = (f"line {lineno}: {exc.args[0]}",)
            raise
    return out


def load_frames(path) -> List[FrameInference]:
    return _load_records(path, parse_frame)


def load_groundtruth(path) -> List[GroundTruthFrame]:
    return _load_records(path, parse_groundtruth)


def _load_json(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.lineno, f"invalid JSON ({exc.msg})") from None


def load_lots(path) -> List[ParkingLot]:
    data = _load_json(path)
    if not isinstance(data, list):
        raise InvariantViolation("<root>", "lots file must be a JSON array")
    return [parse_lot(obj, f"[{k}]") for k, obj in enumerate(data)]


def load_traffic(path) -> TrafficFeed:
    data = _load_json(path)
    if not isinstance(data, list):
        raise InvariantViolation("<root>", "traffic file must be a JSON array")
    factors = {}
    for k, obj in enumerate(data):
        p = f"[{k}]"
        key = (int(_num(_req(obj, "day", p), f"{p}.day")), int(_num(_req(obj, "hour", p), f"{p}.hour")),
               _str(_req(obj, "lot_id", p), f"{p}.lot_id"))
        factors[key] = _num(_req(obj, "factor", p), f"{p}.factor")
    return _wrap("", TrafficFeed, factors)


# ---------------------------------------------------------------- canonical writing

def _f(v: float) -> float:
    r = round(float(v), FLOAT_DIGITS)
    return 0.0 if r == 0 else r


def bbox_to_list(b: BBox) -> list:
    return [_f(v) for v in b.as_tuple()]


def quad_to_list(q: Quad) -> list:
    return [[_f(x), _f(y)] for x, y in q.keypoints]


def gridmap_to_dict(g: GridMap) -> dict:
    return {"h": g.height, "w": g.width, "values": [_f(v) for v in g.flat()]}


def detection_to_dict(d: Detection) -> dict:
    out = {"bbox": bbox_to_list(d.bbox), "class": d.cls.value, "score": _f(d.score)}
    if d.keypoints is not None:
        out["keypoints"] = quad_to_list(d.keypoints)
    return out


def frame_to_dict(fr: FrameInference) -> dict:
    return {
        "frame_id": fr.frame_id,
        "lot_id": fr.lot_id,
        "sector_id": fr.sector_id,
        "timestamp": fr.timestamp,
        "detections": [detection_to_dict(d) for d in fr.detections],
        "soft_mask": [gridmap_to_dict(g) for g in fr.soft_mask_levels],
        "predicted_loss": _f(fr.predicted_loss),
    }


def groundtruth_to_dict(gt: GroundTruthFrame) -> dict:
    out = {
        "frame_id": gt.frame_id,
        "lot_id": gt.lot_id,
        "sector_id": gt.sector_id,
        "labels": [{"keypoints": quad_to_list(l.quad), "class": l.cls.value} for l in gt.labels],
    }
    if gt.overlap_mask is not None:
        out["overlap_mask"] = [[[_f(x), _f(y)] for x, y in poly] for poly in gt.overlap_mask]
    return out


def lot_to_dict(lot: ParkingLot) -> dict:
    return {
        "lot_id": lot.lot_id,
        "gps": [_f(lot.gps[0]), _f(lot.gps[1])],
        "price": _f(lot.price),
        "capacity": lot.capacity,
        "sectors": list(lot.sectors),
    }


def traffic_to_list(feed: TrafficFeed) -> list:
    return [
        {"day": d, "hour": h, "lot_id": lot, "factor": _f(f)}
        for (d, h, lot), f in sorted(feed.factors.items())
    ]


def dumps_line(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)


def write_jsonl(records: Iterable[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(dumps_line(rec) + "\n")


def write_frames(frames: Iterable[FrameInference], path) -> None:
    write_jsonl((frame_to_dict(f) for f in frames), path)


def write_groundtruth(truths: Iterable[GroundTruthFrame], path) -> None:
    write_jsonl((groundtruth_to_dict(t) for t in truths), path)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- operations

def mask_contains(polygons, xs, ys) -> np.ndarray:
    """Boolean array: which points fall inside (or on) any polygon."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    hit = np.zeros(xs.shape, dtype=bool)
    for poly in polygons:
        hit |= shapely.intersects_xy(shapely.Polygon(poly), xs, ys)
    return hit


def apply_overlap_mask(frame: FrameInference, gt: GroundTruthFrame) -> FrameInference:
    """Drop detections whose box center falls inside the ground truth's overlap mask."""
    if frame.frame_id != gt.frame_id:
        raise FrameMismatch(f"frame {frame.frame_id!r} vs ground truth {gt.frame_id!r}")
    if not gt.overlap_mask or not frame.detections:
        return frame
    centers = np.array([d.bbox.center for d in frame.detections])
    masked = mask_contains(gt.overlap_mask, centers[:, 0], centers[:, 1])
    if not masked.any():
        return frame
    kept = tuple(d for d, m in zip(frame.detections, masked) if not m)
    return replace(frame, detections=kept)


def groundtruth_as_frame(gt: GroundTruthFrame, timestamp: int) -> FrameInference:
    """View labels as perfect detections (score 1) so they can flow through the store."""
    dets = tuple(Detection(l.quad.bbox, l.cls, 1.0, l.quad) for l in gt.labels)
    return FrameInference(gt.frame_id, gt.lot_id, gt.sector_id, timestamp, dets)


@dataclass
class ValidationReport:
    orphan_frames: List[str] = field(default_factory=list)
    orphan_truths: List[str] = field(default_factory=list)
    unknown_lots: Dict[str, List[str]] = field(default_factory=dict)
    unknown_sectors: Dict[str, List[str]] = field(default_factory=dict)
    class_histogram: Dict[str, int] = field(default_factory=dict)

    @property
    def findings(self) -> List[str]:
        out = [f"orphan frame {fid!r}: no ground truth" for fid in self.orphan_frames]
        out += [f"orphan ground truth {fid!r}: no detections" for fid in self.orphan_truths]
        out += [f"unknown lot {lot!r} (frames {ids})" for lot, ids in self.unknown_lots.items()]
        out += [f"unknown sector {sec!r} (frames {ids})" for sec, ids in self.unknown_sectors.items()]
        return out

    @property
    def ok(self) -> bool:
        return not self.findings

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "findings": self.findings,
            "orphan_frames": self.orphan_frames,
            "orphan_truths": self.orphan_truths,
            "unknown_lots": self.unknown_lots,
            "unknown_sectors": self.unknown_sectors,
            "class_histogram": self.class_histogram,
        }


def validate_dataset(
    frames: Optional[Sequence[FrameInference]],
    truths: Sequence[GroundTruthFrame],
    lots: Optional[Sequence[ParkingLot]],
) -> ValidationReport:
    """Cross-check frames, labels and lot registry.

    ``frames`` or ``lots`` may be ``None`` to skip the checks needing them
    (e.g. a label-only manifest).
    """
    report = ValidationReport()
    hist = Counter({c.value: 0 for c in SlotClass})
    for gt in truths:
        hist.update(l.cls.value for l in gt.labels)
    report.class_histogram = dict(hist)

    if frames is not None:
        frame_ids = [f.frame_id for f in frames]
        truth_ids = {t.frame_id for t in truths}
        fset = set(frame_ids)
        report.orphan_frames = sorted(fid for fid in fset if fid not in truth_ids)
        report.orphan_truths = sorted(fid for fid in truth_ids if fid not in fset)

    if lots is not None:
        sectors = {lot.lot_id: set(lot.sectors) for lot in lots}
        unknown_lots: Dict[str, set] = {}
        unknown_sectors: Dict[str, set] = {}
        for rec in list(frames or []) + list(truths):
            if rec.lot_id not in sectors:
                unknown_lots.setdefault(rec.lot_id, set()).add(rec.frame_id)
            elif sectors[rec.lot_id] and rec.sector_id not in sectors[rec.lot_id]:
                unknown_sectors.setdefault(f"{rec.lot_id}/{rec.sector_id}", set()).add(rec.frame_id)
        report.unknown_lots = {k: sorted(v) for k, v in sorted(unknown_lots.items())}
        report.unknown_sectors = {k: sorted(v) for k, v in sorted(unknown_sectors.items())}
    return report


def load_dataset(directory) -> dict:
    """Load every known file present in a dataset directory."""
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"dataset directory {d} does not exist")
    out = {
        "frames": load_frames(d / "detections.jsonl") if (d / "detections.jsonl").exists() else [],
        "truths": load_groundtruth(d / "groundtruth.jsonl") if (d / "groundtruth.jsonl").exists() else [],
        "lots": load_lots(d / "lots.json") if (d / "lots.json").exists() else [],
        "traffic": load_traffic(d / "traffic.json") if (d / "traffic.json").exists() else TrafficFeed(),
    }
    return out
