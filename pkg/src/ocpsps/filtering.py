"""Frame trust scoring: spatial agreement with the soft mask, predicted loss, and budgeted rejection."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvariantViolation, MissingSoftMask, NoDetections
from .geometry import DEFAULT_BIN_THRESH, box_mask_overlap, fuse_levels
from .ingest import FrameInference


@dataclass(frozen=True)
class FilterConfig:
    gamma: float = 0.7
    alpha: float = 0.4
    bin_thresh: float = DEFAULT_BIN_THRESH
    # None: use the finest soft-mask level of each frame
    fused_resolution: Optional[Tuple[int, int]] = None
    trust_threshold: float = 0.5
    max_removals: int = 100
    max_fraction: float = 0.2
    enabled: bool = True

    def __post_init__(self):
        for name in ("gamma", "alpha", "bin_thresh", "trust_threshold", "max_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantViolation(name, f"{v} outside [0, 1]")
        if self.max_removals < 0:
            raise InvariantViolation("max_removals", "must be >= 0")
        if self.fused_resolution is not None:
            h, w = self.fused_resolution
            if h < 1 or w < 1:
                raise InvariantViolation("fused_resolution", "must be positive")

    def budget(self, n_frames: int) -> int:
        return min(self.max_removals, math.floor(self.max_fraction * n_frames + 1e-9))


@dataclass(frozen=True)
class FrameError:
    frame_id: str
    err_spatial: float
    err_training: float
    err_total: float
    trusted: bool
    empty: bool = False

    def to_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "err_spatial": self.err_spatial,
            "err_training": self.err_training,
            "err_total": self.err_total,
            "trusted": self.trusted,
            "empty": self.empty,
        }


def indicator(ratio: float, gamma: float) -> float:
    return 1.0 if ratio > gamma else ratio


def fused_map(frame: FrameInference, cfg: FilterConfig):
    levels = frame.soft_mask_levels
    if not levels:
        raise MissingSoftMask(f"frame {frame.frame_id!r} has no soft-mask levels")
    res = cfg.fused_resolution or max((g.shape for g in levels), key=lambda s: s[0] * s[1])
    return fuse_levels(levels, res)


def overlap_ratios(frame: FrameInference, cfg: FilterConfig) -> List[float]:
    s = fused_map(frame, cfg)
    return [box_mask_overlap(d.bbox, s, cfg.bin_thresh) for d in frame.detections]


def spatial_error(frame: FrameInference, cfg: FilterConfig) -> float:
    if not frame.detections:
        raise NoDetections(f"frame {frame.frame_id!r} has no detections")
    ratios = overlap_ratios(frame, cfg)
    return 1.0 - math.fsum(indicator(r, cfg.gamma) for r in ratios) / len(ratios)


def normalize_training_error(raw_losses: Sequence[float]) -> List[float]:
    arr = np.asarray(raw_losses, dtype=float)
    if arr.size == 0:
        raise ValueError("need at least one loss value")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return [0.0] * arr.size
    return ((arr - lo) / (hi - lo)).tolist()


def total_error(err_spatial: float, err_training: float, alpha: float) -> float:
    return alpha * err_training + (1.0 - alpha) * err_spatial


def score_frames(frames: Sequence[FrameInference], cfg: FilterConfig) -> List[Tuple[float, float, bool]]:
    """``(err_spatial, err_training, empty)`` per frame."""
    if not frames:
        return []
    training = normalize_training_error([f.predicted_loss for f in frames])
    out = []
    for frame, e_t in zip(frames, training):
        if not frame.detections:
            out.append((0.0, e_t, True))
        elif not frame.soft_mask_levels and cfg.alpha == 1.0:
            # spatial term carries zero weight
            out.append((0.0, e_t, False))
        else:
            out.append((spatial_error(frame, cfg), e_t, False))
    return out


def filter_batch(
    frames: Sequence[FrameInference], cfg: FilterConfig
) -> Tuple[List[FrameInference], List[FrameInference], List[FrameError]]:
    """Reject the worst frames above ``trust_threshold`` up to the removal budget.

    Returns ``(trusted, rejected, errors)``; both frame lists keep input order
    and ``errors`` is aligned with ``frames``.
    """
    if not cfg.enabled:
        errors = [FrameError(f.frame_id, 0.0, 0.0, 0.0, True, not f.detections) for f in frames]
        return list(frames), [], errors

    scored = score_frames(frames, cfg)
    totals = [total_error(e_s, e_t, cfg.alpha) for e_s, e_t, _ in scored]
    candidates = [k for k, e in enumerate(totals) if e > cfg.trust_threshold]
    candidates.sort(key=lambda k: (-totals[k], frames[k].frame_id))
    rejected_idx = set(candidates[: cfg.budget(len(frames))])

    errors = [
        FrameError(fr.frame_id, e_s, e_t, tot, k not in rejected_idx, empty)
        for k, (fr, (e_s, e_t, empty), tot) in enumerate(zip(frames, scored, totals))
    ]
    trusted = [fr for k, fr in enumerate(frames) if k not in rejected_idx]
    rejected = [fr for k, fr in enumerate(frames) if k in rejected_idx]
    return trusted, rejected, errors
