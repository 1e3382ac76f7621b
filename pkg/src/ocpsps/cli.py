"""Command line entry point.

Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
Option precedence: command-line flag, then ``OCPSPS_<NAME>`` environment
variable, then the config file (``simulate --config``), then built-in defaults.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from . import __version__
from .assignment import CostWeights, Request, Slot, assign
from .errors import OcpError, ValidationError
from .filtering import FilterConfig, filter_batch
from .geometry import Quad, mask_target, size_loss
from .ingest import (
    apply_overlap_mask,
    dumps_line,
    frame_to_dict,
    gridmap_to_dict,
    groundtruth_to_dict,
    iter_jsonl,
    load_frames,
    load_groundtruth,
    load_lots,
    lot_to_dict,
    traffic_to_list,
    validate_dataset,
    load_dataset,
)
from .metrics import MEDIUM_MIN_AREA, evaluate_detections
from .routing import HttpRoutingClient, StaticRoutingMatrix
from .store import LotSnapshot, OccupancyStore

ENV_PREFIX = "OCPSPS_"

FORMATS = """file formats:
  detections.jsonl   {"frame_id","lot_id","sector_id","timestamp","detections":[{"bbox":[x1,y1,x2,y2],
                      "class","score","keypoints"?:[[x,y]x4]}],"soft_mask":[{"h","w","values":[...]}],
                      "predicted_loss"}
  groundtruth.jsonl  {"frame_id","lot_id","sector_id","labels":[{"keypoints":[[x,y]x4],"class"}],
                      "overlap_mask"?:[[[x,y],...],...]}
  lots.json          [{"lot_id","gps":[lat,lon],"price","capacity","sectors":[...]}]
  traffic.json       [{"day","hour","lot_id","factor"}]
  routing_matrix.json {"origins":[[lat,lon]...],"lots":[...],"distance_km":[[...]],"travel_min":[[...]]}
  requests.jsonl     {"request_id","arrival_time","origin":[lat,lon]}
  snapshot.json      [{"lot_id","available_slots":[{"sector_id","bbox"}],"occupied_count",
                      "unusable_sector_count","occupancy_rate"}]
coordinates are normalized to [0, 1]; classes are available|occupied|illegal|restricted.
"""


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def write_atomic(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, ensure_ascii=False) + "\n"


def _need_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{flag}: file {p} does not exist")
    return p


def _resolve(value, env: str, cast, fallback=None):
    if value is not None:
        return value
    raw = os.environ.get(ENV_PREFIX + env)
    if raw is not None and raw != "":
        try:
            return cast(raw)
        except ValueError:
            raise ValidationError(f"{ENV_PREFIX}{env}={raw!r} is not a valid {cast.__name__}") from None
    return fallback


def _filter_config(args, base: Optional[FilterConfig] = None) -> FilterConfig:
    base = base or FilterConfig()
    res = args.resolution or base.fused_resolution
    return FilterConfig(
        gamma=_resolve(args.gamma, "GAMMA", float, base.gamma),
        alpha=_resolve(args.alpha, "ALPHA", float, base.alpha),
        bin_thresh=_resolve(args.bin_thresh, "BIN_THRESH", float, base.bin_thresh),
        fused_resolution=tuple(res) if res else None,
        trust_threshold=_resolve(args.trust_threshold, "TRUST_THRESHOLD", float, base.trust_threshold),
        max_removals=_resolve(args.max_removals, "MAX_REMOVALS", int, base.max_removals),
        max_fraction=_resolve(args.max_fraction, "MAX_FRACTION", float, base.max_fraction),
        enabled=not args.no_filter if args.no_filter else base.enabled,
    )


def _add_filter_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("result filter")
    g.add_argument("--gamma", type=float, help="overlap threshold for the spatial indicator (default 0.7)")
    g.add_argument("--alpha", type=float, help="weight of the training error in the total error (default 0.4)")
    g.add_argument("--bin-thresh", type=float, help="soft-mask binarization threshold (default 0.5)")
    g.add_argument("--trust-threshold", type=float, help="frames need total error above this to be rejected (default 0.5)")
    g.add_argument("--max-removals", type=int, help="rejection budget in frames (default 100)")
    g.add_argument("--max-fraction", type=float, help="rejection budget as a share of the batch (default 0.2)")
    g.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"),
                   help="fused soft-mask resolution (default: finest level)")
    g.add_argument("--no-filter", action="store_true", default=None, help="trust every frame")


# ---------------------------------------------------------------- subcommands

def cmd_validate(args) -> int:
    d = Path(args.dataset)
    if not d.is_dir():
        raise ValidationError(f"--dataset: directory {d} does not exist")
    data = load_dataset(d)
    frames = data["frames"] if (d / "detections.jsonl").exists() else None
    lots = data["lots"] if (d / "lots.json").exists() else None
    report = validate_dataset(frames, data["truths"], lots)
    text = _json(report.to_dict())
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0 if report.ok else 1


def cmd_filter(args) -> int:
    frames = load_frames(_need_file(args.detections, "--detections"))
    if args.groundtruth:
        truths = {t.frame_id: t for t in load_groundtruth(_need_file(args.groundtruth, "--groundtruth"))}
        frames = [apply_overlap_mask(f, truths[f.frame_id]) if f.frame_id in truths else f for f in frames]
    if args.snapshot_out and not args.lots:
        raise ValidationError("--snapshot-out requires --lots")
    lots = load_lots(_need_file(args.lots, "--lots")) if args.lots else None
    cfg = _filter_config(args)
    trusted, rejected, errors = filter_batch(frames, cfg)
    write_atomic(args.out, "".join(dumps_line(e.to_dict()) + "\n" for e in errors))
    if args.rejected_out:
        write_atomic(args.rejected_out, "".join(dumps_line(frame_to_dict(f)) + "\n" for f in rejected))
    if lots is not None and args.snapshot_out:
        store = OccupancyStore(lots)
        for fr, err in sorted(zip(frames, errors), key=lambda fe: (fe[0].timestamp, fe[0].frame_id)):
            try:
                store.commit(fr, err)
            except OcpError as exc:
                print(f"skipping frame {fr.frame_id}: {exc}", file=sys.stderr)
        write_atomic(args.snapshot_out, _json([s.to_dict() for s in store.snapshot_all()]))
    if args.figure:
        from .plotting import plot_frame_errors
        plot_frame_errors(errors, args.figure, cfg.trust_threshold)
    print(f"{len(trusted)} trusted, {len(rejected)} rejected of {len(frames)} frames", file=sys.stderr)
    return 0


def cmd_eval_detection(args) -> int:
    preds = load_frames(_need_file(args.pred, "--pred"))
    truths = load_groundtruth(_need_file(args.gt, "--gt"))
    report = evaluate_detections(preds, truths, min_area=args.min_area)
    write_atomic(args.out, _json(report.to_dict()))
    if args.figure:
        from .plotting import plot_pr_curves
        plot_pr_curves(report, args.figure)
    return 0


def load_requests(path) -> List[Request]:
    out = []
    for lineno, obj in iter_jsonl(path):
        try:
            out.append(Request.from_dict(obj))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"{path}: line {lineno}: bad request record ({exc})") from None
    ids = [r.request_id for r in out]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{path}: request ids must be unique")
    return out


def load_snapshot(path) -> List[LotSnapshot]:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: snapshot must be a JSON array")
    try:
        return [LotSnapshot.from_dict(o) for o in data]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: bad snapshot record ({exc})") from None


def cmd_assign(args) -> int:
    snaps = load_snapshot(_need_file(args.snapshot, "--snapshot"))
    requests = load_requests(_need_file(args.requests, "--requests"))
    lots = load_lots(_need_file(args.lots, "--lots"))
    if args.routing:
        routing = StaticRoutingMatrix.load(_need_file(args.routing, "--routing"))
    elif args.routing_url:
        routing = HttpRoutingClient(args.routing_url, {l.lot_id: l.gps for l in lots})
    else:
        raise ValidationError("one of --routing or --routing-url is required")
    weights = CostWeights(_resolve(args.gamma, "WEIGHT_GAMMA", float, CostWeights().gamma))
    slots = [Slot(s.lot_id, sector, box) for s in snaps for sector, box in s.available_slots]
    result, _ = assign(requests, slots, lots, routing, {s.lot_id: s.occupancy_rate for s in snaps}, weights)
    out = result.to_dict()
    out["gamma"] = weights.gamma
    write_atomic(args.out, _json(out))
    return 0


SIM_FLAGS = {
    # dest: (env name, cast, config path)
    "days": ("DAYS", int, ("days",)),
    "repeats": ("REPEATS", int, ("repeats",)),
    "requests_per_day": ("REQUESTS_PER_DAY", int, ("requests_per_day",)),
    "seed": ("SEED", int, ("rng_seed",)),
    "workers": ("WORKERS", int, ("workers",)),
    "weight_gamma": ("WEIGHT_GAMMA", float, ("weights", "gamma")),
    "gamma": ("GAMMA", float, ("filter", "gamma")),
    "alpha": ("ALPHA", float, ("filter", "alpha")),
    "bin_thresh": ("BIN_THRESH", float, ("filter", "bin_thresh")),
    "trust_threshold": ("TRUST_THRESHOLD", float, ("filter", "trust_threshold")),
    "max_removals": ("MAX_REMOVALS", int, ("filter", "max_removals")),
    "max_fraction": ("MAX_FRACTION", float, ("filter", "max_fraction")),
}


def sim_config_from_args(args):
    from .simulation import SimConfig

    data: Dict[str, Any] = {}
    if args.config:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib

        with open(_need_file(args.config, "--config"), "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ValidationError(f"--config: {exc}") from None
    for dest, (env, cast, path) in SIM_FLAGS.items():
        value = _resolve(getattr(args, dest), env, cast)
        if value is None:
            continue
        node = data
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = value
    if args.resolution:
        data.setdefault("filter", {})["fused_resolution"] = list(args.resolution)
    if args.no_filter:
        data.setdefault("filter", {})["enabled"] = False
    try:
        return SimConfig.from_mapping(data)
    except TypeError as exc:
        raise ValidationError(f"bad simulation config: {exc}") from None


def cmd_simulate(args) -> int:
    from .simulation import SimDataset, run_simulation

    cfg = sim_config_from_args(args)
    d = Path(args.dataset)
    if not d.is_dir():
        raise ValidationError(f"--dataset: directory {d} does not exist")
    report = run_simulation(SimDataset.load(d), cfg)
    write_atomic(args.out, report.to_json())
    if args.csv:
        write_atomic(args.csv, report.to_csv())
    if args.figure:
        from .plotting import plot_sim_report
        plot_sim_report(report, args.figure)
    s = report.summary()
    print(f"err_cost {s['err_cost']['mean']:.4f} +/- {s['err_cost']['std']:.4f}, "
          f"err_assign {s['err_assign']['mean']:.4f} +/- {s['err_assign']['std']:.4f}", file=sys.stderr)
    return 0


def cmd_size_loss(args) -> int:
    matching = args.matching
    value = size_loss(tuple(args.box), [tuple(k) for k in args.keypoint], matching)
    print(json.dumps({"size_loss": value}))
    return 0


def _quad_arg(values: Sequence[float]) -> Quad:
    return Quad(tuple((values[2 * k], values[2 * k + 1]) for k in range(4)))


def cmd_mask_target(args) -> int:
    quads = [_quad_arg(q) for q in (args.quad or [])]
    if args.groundtruth:
        if not args.frame_id:
            raise ValidationError("--groundtruth requires --frame-id")
        truths = {t.frame_id: t for t in load_groundtruth(_need_file(args.groundtruth, "--groundtruth"))}
        if args.frame_id not in truths:
            raise ValidationError(f"frame {args.frame_id!r} not in {args.groundtruth}")
        quads += [l.quad for l in truths[args.frame_id].labels]
    grid = mask_target((args.height, args.width), quads)
    text = json.dumps(gridmap_to_dict(grid)) + "\n"
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_synth(args) -> int:
    from .synthetic import corrupt_frames, make_lots, make_scenario, traffic_feed

    lots = make_lots(args.lots, seed=args.seed)
    truths, frames = make_scenario(lots, days=args.days, seed=args.seed)
    if args.corruption > 0:
        frames = corrupt_frames(frames, args.corruption, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "detections.jsonl", "".join(dumps_line(frame_to_dict(f)) + "\n" for f in frames))
    write_atomic(out / "groundtruth.jsonl", "".join(dumps_line(groundtruth_to_dict(t)) + "\n" for t in truths))
    write_atomic(out / "lots.json", _json([lot_to_dict(l) for l in lots]))
    write_atomic(out / "traffic.json", _json(traffic_to_list(traffic_feed(lots, days=args.days, seed=args.seed))))
    return 0


# ---------------------------------------------------------------- wiring

def build_parser() -> Parser:
    p = Parser(
        prog="ocpsps",
        description="Parking occupancy pipeline: filter detector output, aggregate occupancy, "
                    "assign requests to vacant slots and score the result.",
        epilog=FORMATS,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--json-errors", action="store_true", help="report errors as JSON on stderr")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    v = sub.add_parser("validate", help="cross-check a dataset directory")
    v.add_argument("--dataset", required=True, help="directory with detections.jsonl, groundtruth.jsonl, lots.json")
    v.add_argument("--out", help="write the report here instead of stdout")
    v.set_defaults(func=cmd_validate)

    f = sub.add_parser("filter", help="score frames and reject untrustworthy ones")
    f.add_argument("--detections", required=True, help="detections.jsonl")
    f.add_argument("--groundtruth", help="groundtruth.jsonl; its overlap masks are applied first")
    f.add_argument("--out", required=True, help="errors.jsonl, one frame error record per line")
    f.add_argument("--rejected-out", help="write rejected frames (detections.jsonl format)")
    f.add_argument("--lots", help="lots.json, needed for --snapshot-out")
    f.add_argument("--snapshot-out", help="commit frames to an occupancy store and export snapshot.json")
    f.add_argument("--figure", help="histogram of frame errors (png/svg/pdf)")
    _add_filter_flags(f)
    f.set_defaults(func=cmd_filter)

    e = sub.add_parser("eval-detection", help="mAP / recall over IoU 0.5:0.95")
    e.add_argument("--pred", required=True, help="detections.jsonl")
    e.add_argument("--gt", required=True, help="groundtruth.jsonl")
    e.add_argument("--out", required=True, help="report.json")
    e.add_argument("--min-area", type=float, default=MEDIUM_MIN_AREA,
                   help=f"ignore ground truths below this normalized area (default {MEDIUM_MIN_AREA})")
    e.add_argument("--figure", help="precision/recall curves at IoU 0.5")
    e.set_defaults(func=cmd_eval_detection)

    a = sub.add_parser("assign", help="assign requests to vacant slots")
    a.add_argument("--snapshot", required=True, help="snapshot.json")
    a.add_argument("--requests", required=True, help="requests.jsonl")
    a.add_argument("--lots", required=True, help="lots.json")
    a.add_argument("--routing", help="routing_matrix.json")
    a.add_argument("--routing-url", help="HTTP routing endpoint (instead of --routing)")
    a.add_argument("--gamma", type=float, help="price weight of the cost function (default 0.5)")
    a.add_argument("--out", required=True, help="assignment.json")
    a.set_defaults(func=cmd_assign)

    s = sub.add_parser("simulate", help="closed-loop assignment simulation")
    s.add_argument("--config", help="sim.toml")
    s.add_argument("--dataset", required=True, help="dataset directory")
    s.add_argument("--out", required=True, help="report.json")
    s.add_argument("--csv", help="per-repeat, per-day rows")
    s.add_argument("--figure", help="per-day error bars (png/svg/pdf)")
    s.add_argument("--days", type=int)
    s.add_argument("--repeats", type=int)
    s.add_argument("--requests-per-day", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--weight-gamma", type=float, help="price weight of the cost function (default 0.5)")
    _add_filter_flags(s)
    s.set_defaults(func=cmd_simulate)

    sl = sub.add_parser("size-loss", help="keypoint coverage loss for one box")
    sl.add_argument("--box", type=float, nargs=4, required=True, metavar=("X1", "Y1", "X2", "Y2"))
    sl.add_argument("--keypoint", type=float, nargs=2, action="append", required=True, metavar=("X", "Y"),
                    help="repeat for up to 4 keypoints")
    sl.add_argument("--matching", type=int, nargs="+",
                    help="corner index per keypoint (0 top-left, clockwise); default minimal distance")
    sl.set_defaults(func=cmd_size_loss)

    mt = sub.add_parser("mask-target", help="binary target grid from slot quads")
    mt.add_argument("--height", type=int, required=True)
    mt.add_argument("--width", type=int, required=True)
    mt.add_argument("--quad", type=float, nargs=8, action="append", metavar="C",
                    help="x1 y1 x2 y2 x3 y3 x4 y4; repeatable")
    mt.add_argument("--groundtruth", help="take the quads from this groundtruth.jsonl")
    mt.add_argument("--frame-id")
    mt.add_argument("--out")
    mt.set_defaults(func=cmd_mask_target)

    sy = sub.add_parser("synth", help="write a seeded synthetic dataset directory")
    sy.add_argument("--out", required=True)
    sy.add_argument("--lots", type=int, default=6)
    sy.add_argument("--days", type=int, default=5)
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--corruption", type=float, default=0.0, help="drop/flip rate for detections")
    sy.set_defaults(func=cmd_synth)
    return p


def _report_error(exc: BaseException, code: int, as_json: bool) -> int:
    if as_json:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}), file=sys.stderr)
    else:
        print(str(exc) if isinstance(exc, UsageError) else f"error: {exc}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    as_json = "--json-errors" in argv
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except (ValidationError, json.JSONDecodeError) as exc:
        return _report_error(exc, 1, as_json)
    except Exception as exc:  # noqa: BLE001
        return _report_error(exc, 2, as_json)


if __name__ == "__main__":
    sys.exit(main())
