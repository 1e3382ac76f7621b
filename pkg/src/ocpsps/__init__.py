"""Camera-based parking occupancy pipeline: trust filtering, occupancy aggregation and slot assignment."""

__version__ = "0.1.0"

from .assignment import Assignment, CostMatrix, CostWeights, Request, Slot, build_cost_matrix, hungarian, prioritize
from .filtering import FilterConfig, FrameError, filter_batch, normalize_training_error, spatial_error, total_error
from .geometry import BBox, GridMap, Quad, SlotClass, box_mask_overlap, epsilon_diff, fuse_levels, iou, mask_target, size_loss
from .ingest import Detection, FrameInference, GroundTruthFrame, ParkingLot, TrafficFeed, apply_overlap_mask, load_frames, validate_dataset
from .metrics import err_assign, err_cost, evaluate_detections
from .store import LotSnapshot, OccupancyStore, SectorState
