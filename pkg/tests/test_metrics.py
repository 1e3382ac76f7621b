import numpy as np
import pytest

from ocpsps.errors import EmptyRound, MismatchedFrames, ShapeMismatch, ZeroGroundTruthCost
from ocpsps.geometry import BBox, Quad, SlotClass
from ocpsps.ingest import Detection, FrameInference, GroundTruthFrame, Label
from ocpsps.metrics import IOU_THRESHOLDS, err_assign, err_cost, evaluate_detections, interpolated_ap

from oracles import brute_force_ap

A = SlotClass.AVAILABLE


def gt_frame(fid, boxes, classes=None):
    classes = classes or [A] * len(boxes)
    return GroundTruthFrame(fid, "L0", "S0", tuple(Label(Quad.from_box(*b), c) for b, c in zip(boxes, classes)))


def pred_frame(fid, dets):
    return FrameInference(fid, "L0", "S0", 0, tuple(Detection(BBox(*b), c, s) for b, c, s in dets))


def random_box(rng):
    x, y = rng.uniform(0, 0.7, 2)
    return (x, y, x + rng.uniform(0.08, 0.3), y + rng.uniform(0.08, 0.3))


def jitter(rng, box, scale):
    d = rng.uniform(-scale, scale, 4)
    x1, y1, x2, y2 = np.clip(np.array(box) + d, 0, 1)
    if x2 - x1 < 0.01 or y2 - y1 < 0.01:
        return box
    return (x1, y1, x2, y2)


def random_dataset(rng, n_images, n_classes=2):
    classes = list(SlotClass)[:n_classes]
    truths, preds = [], []
    for k in range(n_images):
        gts = [(random_box(rng), classes[rng.integers(n_classes)]) for _ in range(rng.integers(0, 6))]
        dets = []
        for b, c in gts:
            if rng.uniform() < 0.8:
                cls = c if rng.uniform() < 0.85 else classes[rng.integers(n_classes)]
                # coarse scores force ties across images
                dets.append((jitter(rng, b, 0.05), cls, float(rng.integers(1, 6)) / 5))
        for _ in range(rng.integers(0, 3)):
            dets.append((random_box(rng), classes[rng.integers(n_classes)], float(rng.uniform(0.05, 1))))
        truths.append(gt_frame(f"i{k}", [b for b, _ in gts], [c for _, c in gts]))
        preds.append(pred_frame(f"i{k}", dets[:5]))
    return truths, preds


def per_class_images(truths, preds, cls):
    out = []
    for t, p in zip(truths, preds):
        g = [l.quad.bbox.as_tuple() for l in t.labels if l.cls is cls and l.quad.bbox.area >= 0.005]
        d = [(x.score, x.bbox.as_tuple()) for x in p.detections if x.cls is cls]
        out.append((g, d))
    return out


def test_perfect_predictions_score_one():
    boxes = [(0.1, 0.1, 0.3, 0.3), (0.5, 0.5, 0.8, 0.9)]
    truths = [gt_frame("a", boxes, [A, SlotClass.OCCUPIED])]
    preds = [pred_frame("a", [(boxes[0], A, 1.0), (boxes[1], SlotClass.OCCUPIED, 1.0)])]
    rep = evaluate_detections(preds, truths)
    assert rep.map_05 == rep.map_075 == rep.map_05_095 == rep.recall_05_095 == 1.0
    assert rep.per_class_ap_05 == {"available": 1.0, "occupied": 1.0}


def test_no_predictions_score_zero():
    truths = [gt_frame("a", [(0.1, 0.1, 0.3, 0.3)])]
    rep = evaluate_detections([], truths)
    assert rep.map_05 == rep.map_05_095 == rep.recall_05_095 == 0.0


def test_tp_then_fp():
    g1, g2 = (0.0, 0.0, 0.2, 0.2), (0.5, 0.5, 0.7, 0.7)
    d1 = (0.0, 0.0, 0.2, 0.15)  # IoU 0.75 with g1
    d2 = (0.5, 0.5, 0.7, 0.58)  # IoU 0.4 with g2
    truths = [gt_frame("a", [g1, g2])]
    preds = [pred_frame("a", [(d1, A, 0.9), (d2, A, 0.8)])]
    rep = evaluate_detections(preds, truths, iou_thresholds=(0.5,))
    # recall 0.5 reached at precision 1 for the first 51 of 101 recall points
    assert rep.map_05 == pytest.approx(51 / 101, abs=1e-12)


def test_interpolated_ap_simple():
    assert interpolated_ap(np.array([1.0, 0.0]), 2) == pytest.approx(51 / 101)
    assert interpolated_ap(np.array([1.0, 1.0]), 2) == 1.0
    assert interpolated_ap(np.array([]), 3) == 0.0


def test_small_truths_ignored():
    truths = [gt_frame("a", [(0.1, 0.1, 0.15, 0.15), (0.4, 0.4, 0.7, 0.7)])]
    preds = [pred_frame("a", [((0.4, 0.4, 0.7, 0.7), A, 0.9)])]
    assert evaluate_detections(preds, truths).map_05 == 1.0


def test_predictions_without_truth():
    with pytest.raises(MismatchedFrames):
        evaluate_detections([pred_frame("x", [])], [gt_frame("a", [])])


@pytest.mark.parametrize("seed", range(3))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    truths, preds = random_dataset(rng, 40)
    rep = evaluate_detections(preds, truths)
    for cls in list(SlotClass)[:2]:
        images = per_class_images(truths, preds, cls)
        if not any(g for g, _ in images):
            continue
        for t in IOU_THRESHOLDS:
            ap, recall = brute_force_ap(images, t)
            assert rep.ap_table[t][cls.value] == pytest.approx(ap, abs=1e-9)
            assert rep.recall_table[t][cls.value] == pytest.approx(recall, abs=1e-9)


def test_score_rescaling_invariant():
    rng = np.random.default_rng(9)
    truths, preds = random_dataset(rng, 30)
    rescaled = [FrameInference(p.frame_id, p.lot_id, p.sector_id, p.timestamp,
                               tuple(Detection(d.bbox, d.cls, d.score ** 3 * 0.5) for d in p.detections))
                for p in preds]
    a, b = evaluate_detections(preds, truths), evaluate_detections(rescaled, truths)
    assert a.ap_table == b.ap_table


def test_err_cost():
    assert err_cost([3.0, 4.0], [3.0, 4.0]) == 0.0
    assert err_cost([10.0], [14.0]) == pytest.approx(0.4)
    assert err_cost([2.0, 4.0], [1.0, 6.0]) == pytest.approx(1.0)
    with pytest.raises(ZeroGroundTruthCost):
        err_cost([0.0], [1.0])
    with pytest.raises(ShapeMismatch):
        err_cost([1.0], [1.0, 2.0])


def test_err_assign():
    assert err_assign([[3, 3]], [[3, 3]]) == 0.0
    assert err_assign([[3, 3]], [[4, 2]]) == pytest.approx(1 / 3)
    assert err_assign([[3, 3], [1, 4], [2, 0]], np.zeros((3, 2))) == 3.0
    with pytest.raises(EmptyRound):
        err_assign([[0, 0]], [[1, 0]])
