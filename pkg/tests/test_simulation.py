from dataclasses import replace

import numpy as np
import pytest

from ocpsps.assignment import Request
from ocpsps.filtering import FilterConfig
from ocpsps.geometry import SlotClass
from ocpsps.ingest import Detection
from ocpsps.routing import estimated_matrix
from ocpsps.simulation import SimConfig, SimDataset, generate_requests, run_round, run_simulation
from ocpsps.synthetic import corrupt_frames, make_lots, make_scenario, traffic_feed

A, O = SlotClass.AVAILABLE, SlotClass.OCCUPIED


@pytest.fixture(scope="module")
def world():
    lots = make_lots(4, seed=3)
    truths, frames = make_scenario(lots, days=2, seed=3)
    return lots, truths, frames


def dataset(world, frames=None):
    lots, truths, perfect = world
    return SimDataset(truths, list(perfect if frames is None else frames), lots, traffic_feed(lots, days=2))


def small_cfg(**kw):
    base = dict(days=2, repeats=2, requests_per_day=30, filter=FilterConfig(enabled=False))
    base.update(kw)
    return SimConfig(**base)


def test_generate_requests():
    cfg = SimConfig(requests_per_day=100)
    region = (37.4, 37.6, 126.9, 127.1)
    a = generate_requests(cfg, np.random.default_rng(5), region)
    b = generate_requests(cfg, np.random.default_rng(5), region)
    assert a == b and len(a) == 100
    assert all(15 <= r.arrival_time / 3600 < 18 for r in a)
    assert generate_requests(replace(cfg, requests_per_day=0), np.random.default_rng(5), region) == []


def _round_inputs(world, hour=15):
    lots, truths, perfect = world
    frames = [f for f in perfect if f.day == perfect[0].day and f.hour == hour]
    region = (37.54, 37.58, 126.96, 127.0)
    reqs = generate_requests(SimConfig(requests_per_day=12), np.random.default_rng(0), region)
    routing = estimated_matrix(sorted({r.origin for r in reqs}), {l.lot_id: l.gps for l in lots})
    return lots, truths, frames, reqs, routing


def test_perfect_round_identical(world):
    lots, truths, frames, reqs, routing = _round_inputs(world)
    rr = run_round(truths, frames, reqs, small_cfg(), lots, routing)
    assert rr.gt_assignment.to_dict() == rr.pred_assignment.to_dict()


def test_all_occupied_round_books_nothing(world):
    lots, truths, frames, reqs, routing = _round_inputs(world)
    flipped = [replace(f, detections=tuple(replace(d, cls=O) if d.cls is A else d for d in f.detections))
               for f in frames]
    rr = run_round(truths, flipped, reqs, small_cfg(), lots, routing)
    assert rr.pred_assignment.pairs == [] and rr.gt_assignment.pairs


def test_all_occupied_err_assign_is_round_count(world):
    lots, truths, perfect = world
    flipped = [replace(f, detections=tuple(replace(d, cls=O) if d.cls is A else d for d in f.detections))
               for f in perfect]
    rep = run_simulation(dataset(world, flipped), small_cfg(repeats=1))
    for rec in rep.records:
        assert rec["err_assign"] == rec["assign_rounds"] == 3


def test_rejected_sector_only_missing_from_prediction(world):
    lots, truths, frames, reqs, routing = _round_inputs(world)
    target = frames[0]
    # a soft mask of zeros makes this the only frame with spatial error 1
    from ocpsps.geometry import GridMap
    broken = [replace(f, soft_mask_levels=(GridMap.full(4, 4, 0.0),)) if f is target else f for f in frames]
    cfg = small_cfg(filter=FilterConfig(alpha=0.0, max_removals=1, max_fraction=1.0))
    rr = run_round(truths, broken, reqs, cfg, lots, routing)
    assert rr.rejected_frames == [target.frame_id]
    snap_gt = {s.lot_id: s for s in rr.gt_snapshots}[target.lot_id]
    snap_pred = {s.lot_id: s for s in rr.pred_snapshots}[target.lot_id]
    assert any(sec == target.sector_id for sec, _ in snap_gt.available_slots) or \
        not any(d.cls is A for d in target.detections)
    assert all(sec != target.sector_id for sec, _ in snap_pred.available_slots)
    assert all(p.slot.sector_id != target.sector_id for p in rr.pred_assignment.pairs)
    assert snap_pred.unusable_sector_count == 1


def test_assigned_slots_come_from_snapshots(world):
    lots, truths, perfect = world
    rep_frames = corrupt_frames(perfect, 0.3, seed=1)
    lots_, truths, frames, reqs, routing = _round_inputs((lots, truths, rep_frames))
    rr = run_round(truths, frames, reqs, small_cfg(), lots, routing)
    for pairs, snaps in ((rr.gt_assignment.pairs, rr.gt_snapshots), (rr.pred_assignment.pairs, rr.pred_snapshots)):
        visible = {(s.lot_id, sec, box) for s in snaps for sec, box in s.available_slots}
        used = [(p.slot.lot_id, p.slot.sector_id, p.slot.bbox) for p in pairs]
        assert len(set(used)) == len(used)
        assert set(used) <= visible


def test_perfect_detector_zero(world):
    rep = run_simulation(dataset(world), small_cfg())
    s = rep.summary()
    assert s["err_cost"]["mean"] == 0.0 and s["err_assign"]["mean"] == 0.0


def test_determinism(world):
    ds = dataset(world, corrupt_frames(world[2], 0.2, seed=4))
    a = run_simulation(ds, small_cfg()).to_json()
    b = run_simulation(ds, small_cfg()).to_json()
    assert a == b
    parallel = run_simulation(ds, small_cfg(workers=2))
    assert parallel.records == run_simulation(ds, small_cfg()).records


def test_seed_changes_draws_not_structure(world):
    ds = dataset(world, corrupt_frames(world[2], 0.2, seed=4))
    a = run_simulation(ds, small_cfg(rng_seed=0))
    b = run_simulation(ds, small_cfg(rng_seed=100))
    assert a.to_json() != b.to_json()
    assert [(r["repeat"], r["day"]) for r in a.records] == [(r["repeat"], r["day"]) for r in b.records]


def test_report_aggregation(world):
    rep = run_simulation(dataset(world, corrupt_frames(world[2], 0.2, seed=6)), small_cfg(repeats=3))
    s = rep.summary()
    for key in ("err_cost", "err_assign"):
        by_hand = [np.mean([r[key] for r in rep.records if r["repeat"] == k]) for k in range(3)]
        assert s[key]["per_repeat"] == pytest.approx(by_hand)
        assert s[key]["mean"] == pytest.approx(np.mean(by_hand))
    assert rep.to_csv().count("\n") == 1 + 3 * 2


def test_deleting_available_slots_degrades(world):
    lots, truths, perfect = world
    rng = np.random.default_rng(8)
    ranks = {(f.frame_id, k): rng.random() for f in perfect for k in range(len(f.detections))}

    def keep_fraction(q):
        return [replace(f, detections=tuple(d for k, d in enumerate(f.detections)
                                            if d.cls is not A or ranks[(f.frame_id, k)] >= q)) for f in perfect]

    reports = [run_simulation(dataset(world, keep_fraction(q)), small_cfg()) for q in (0.0, 0.3, 0.6, 1.0)]
    booked = [sum(sum(r["count_pred"]) for rec in rep.records for r in rec["rounds"]) for rep in reports]
    assert all(a >= b for a, b in zip(booked, booked[1:]))
    means = [rep.summary()["err_assign"]["mean"] for rep in reports]
    assert means[0] == 0.0 and means[-1] == 3.0
    # misplaced bookings can cost up to 2 per round, so partial deletion may sit above the fully empty case
    assert all(m > 0 for m in means[1:])


def test_config_from_mapping():
    cfg = SimConfig.from_mapping({"days": 2, "window": [9, 11], "filter": {"alpha": 0.0},
                                  "weights": {"gamma": 0.3}, "traffic_jitter": [1.0, 1.0]})
    assert cfg.window == (9, 11) and cfg.filter.alpha == 0.0 and cfg.weights.gamma == 0.3
    from ocpsps.errors import InvariantViolation
    with pytest.raises(InvariantViolation):
        SimConfig.from_mapping({"bogus": 1})
