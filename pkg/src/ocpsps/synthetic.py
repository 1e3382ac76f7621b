"""Seeded synthetic lots, labels and detector outputs for tests and demos."""
from __future__ import annotations

from dataclasses import replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import BBox, GridMap, Quad, SlotClass
from .ingest import (
    Detection,
    FrameInference,
    GroundTruthFrame,
    Label,
    ParkingLot,
    TrafficFeed,
    groundtruth_as_frame,
)

# 2022-03-07 00:00 UTC, a Monday
EPOCH_START = 1646611200
CENTER = (37.4602, 126.9520)


def slot_layout(rows: int = 2, cols: int = 4, rng: Optional[np.random.Generator] = None) -> List[Quad]:
    """Grid of parking-slot quads inside the unit image, lightly jittered."""
    quads = []
    cell_w, cell_h = 0.9 / cols, 0.9 / rows
    for r in range(rows):
        for c in range(cols):
            x0 = 0.05 + c * cell_w + 0.1 * cell_w
            y0 = 0.05 + r * cell_h + 0.1 * cell_h
            x1 = x0 + 0.8 * cell_w
            y1 = y0 + 0.8 * cell_h
            if rng is not None:
                j = rng.uniform(-0.02, 0.02, size=4) * np.array([cell_w, cell_h, cell_w, cell_h])
                x0, y0, x1, y1 = x0 + j[0], y0 + j[1], x1 + j[2], y1 + j[3]
            quads.append(Quad.from_box(x0, y0, x1, y1))
    return quads


def make_lots(n_lots: int = 6, sectors_per_lot: int = 2, slots_per_sector: int = 8,
              seed: int = 0) -> List[ParkingLot]:
    rng = np.random.default_rng(seed)
    lots = []
    for k in range(n_lots):
        lat = CENTER[0] + rng.uniform(-0.02, 0.02)
        lon = CENTER[1] + rng.uniform(-0.02, 0.02)
        price = float(np.round(rng.uniform(1.0, 5.0), 2))
        sectors = tuple(f"L{k}S{s}" for s in range(sectors_per_lot))
        lots.append(ParkingLot(f"L{k}", (lat, lon), price, sectors_per_lot * slots_per_sector, sectors))
    return lots


def make_scenario(
    lots: Sequence[ParkingLot],
    days: int = 5,
    hours: Tuple[int, int] = (15, 18),
    seed: int = 0,
    rows: int = 2,
    cols: int = 4,
    special_rate: float = 0.05,
) -> Tuple[List[GroundTruthFrame], List[FrameInference]]:
    """Ground truth for one frame per sector per hour, plus a perfect detector's output.

    Each lot gets its own base occupancy so lots differ in how full they are.
    """
    rng = np.random.default_rng(seed)
    layouts = {s: slot_layout(rows, cols, rng) for lot in lots for s in lot.sectors}
    base = {lot.lot_id: rng.uniform(0.2, 0.8) for lot in lots}
    truths, frames = [], []
    for d in range(days):
        for h in range(hours[0], hours[1]):
            for lot in lots:
                for s in lot.sectors:
                    ts = EPOCH_START + d * 86400 + h * 3600 + int(rng.integers(0, 3000))
                    labels = []
                    for q in layouts[s]:
                        u = rng.random()
                        if u < special_rate:
                            cls = SlotClass.ILLEGAL if rng.random() < 0.5 else SlotClass.RESTRICTED
                        elif rng.random() < base[lot.lot_id]:
                            cls = SlotClass.OCCUPIED
                        else:
                            cls = SlotClass.AVAILABLE
                        labels.append(Label(q, cls))
                    gt = GroundTruthFrame(f"{s}-d{d}-h{h}", lot.lot_id, s, tuple(labels))
                    truths.append(gt)
                    frames.append(perfect_frame(gt, ts))
    return truths, frames


def coverage_mask(boxes: Sequence[BBox], shape: Tuple[int, int], on: float = 0.9, off: float = 0.05) -> GridMap:
    """Soft mask lighting every cell a box touches."""
    h, w = shape
    arr = np.full((h, w), off)
    for b in boxes:
        r0, r1 = int(np.floor(b.y_min * h)), int(np.ceil(b.y_max * h))
        c0, c1 = int(np.floor(b.x_min * w)), int(np.ceil(b.x_max * w))
        arr[r0:r1, c0:c1] = on
    return GridMap(arr)


def perfect_frame(gt: GroundTruthFrame, timestamp: int, levels=((8, 8), (16, 16)), loss: float = 0.1) -> FrameInference:
    frame = groundtruth_as_frame(gt, timestamp)
    boxes = [d.bbox for d in frame.detections]
    masks = tuple(coverage_mask(boxes, shape) for shape in levels)
    return replace(frame, soft_mask_levels=masks, predicted_loss=loss)


def corrupt_frames(frames: Sequence[FrameInference], rate: float, seed: int = 0) -> List[FrameInference]:
    """Drop or flip (available <-> occupied) each detection with probability ``rate``."""
    rng = np.random.default_rng(seed)
    flip = {SlotClass.AVAILABLE: SlotClass.OCCUPIED, SlotClass.OCCUPIED: SlotClass.AVAILABLE}
    out = []
    for fr in frames:
        dets = []
        for d in fr.detections:
            u, v = rng.random(), rng.random()
            if u >= rate:
                dets.append(d)
            elif v < 0.5:
                continue
            else:
                dets.append(replace(d, cls=flip.get(d.cls, d.cls)))
        out.append(replace(fr, detections=tuple(dets)))
    return out


def traffic_feed(lots: Sequence[ParkingLot], days: int = 5, hours: Tuple[int, int] = (15, 18), seed: int = 0) -> TrafficFeed:
    rng = np.random.default_rng(seed)
    factors: Dict[Tuple[int, int, str], float] = {}
    for d in range(days):
        for h in range(hours[0], hours[1]):
            for lot in lots:
                factors[(d, h, lot.lot_id)] = float(np.round(rng.uniform(0.9, 1.6), 3))
    return TrafficFeed(factors)


def filter_benchmark(n_frames: int = 500, bad_fraction: float = 0.2, seed: int = 0,
                     ) -> Tuple[List[GroundTruthFrame], List[FrameInference]]:
    """Frames from a detector that fails badly on a hidden subset.

    Good frames carry tight boxes agreeing with their soft mask and a low
    predicted loss. Bad frames carry boxes displaced off the slots, random
    classes, a higher (noisy) predicted loss, and a soft mask lit for only
    two of the true slots.
    """
    rng = np.random.default_rng(seed)
    classes = [SlotClass.AVAILABLE, SlotClass.OCCUPIED]
    truths, preds = [], []
    n_bad = int(round(bad_fraction * n_frames))
    bad = set(rng.choice(n_frames, size=n_bad, replace=False).tolist())
    for k in range(n_frames):
        quads = slot_layout(2, 3, rng)
        labels = tuple(Label(q, classes[int(rng.integers(0, 2))]) for q in quads)
        gt = GroundTruthFrame(f"f{k:04d}", "L0", "S0", labels)
        seen = [l.quad.bbox for l in labels]
        if k in bad:
            # the failing detector only has a confident spatial map for a couple of slots
            seen = [seen[i] for i in sorted(rng.choice(len(seen), size=2, replace=False))]
        mask = coverage_mask(seen, (16, 16))
        dets = []
        for lab in labels:
            b = lab.quad.bbox
            if k in bad:
                dx, dy = rng.uniform(0.12, 0.2) * rng.choice([-1, 1]), rng.uniform(0.1, 0.15) * rng.choice([-1, 1])
                cls = classes[int(rng.integers(0, 2))]
            else:
                dx, dy = rng.normal(0, 0.004, size=2)
                cls = lab.cls
            x0, x1 = np.clip([b.x_min + dx, b.x_max + dx], 0.0, 1.0)
            y0, y1 = np.clip([b.y_min + dy, b.y_max + dy], 0.0, 1.0)
            if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
                continue
            score = float(rng.uniform(0.3, 0.7) if k in bad else rng.uniform(0.6, 1.0))
            dets.append(Detection(BBox(x0, y0, x1, y1), cls, score))
        loss = float(rng.gamma(4.0, 0.5) + (3.0 if k in bad else 0.0))
        truths.append(gt)
        preds.append(FrameInference(gt.frame_id, "L0", "S0", EPOCH_START + k, tuple(dets), (mask,), loss))
    return truths, preds
