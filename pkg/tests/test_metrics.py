import json

import numpy as np
import pytest

from cofipara.boxes import BoundingBox
from cofipara.errors import ContractViolation
from cofipara.metrics import (
    IOU_THRESHOLDS, MetricReport, coco_ap, exact_match, msd_metrics, msd_report, msti_report, token_f1,
)
from oracles import coco_reference


def test_exact_match():
    assert exact_match("dlr train driver", ["dlr train driver"]) == 1
    assert exact_match("train driver", ["dlr train driver"]) == 0
    assert exact_match("A; b", ["b", "a"]) == 1
    assert exact_match("", []) == 1


def test_token_f1():
    assert token_f1("the wifi", ["the wifi"]) == 1.0
    assert token_f1("train driver", ["dlr train driver"]) == pytest.approx(0.8)
    assert token_f1("cat", ["dog"]) == 0.0


def test_thresholds():
    assert IOU_THRESHOLDS == (0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95)


def test_single_prediction_iou_06():
    gt = BoundingBox.from_corners(0.0, 0.0, 0.5, 0.5)
    # same height, shifted so that IoU = 0.6: overlap 0.375 of width 0.5 -> 0.375 / 0.625
    pred = BoundingBox.from_corners(0.125, 0.0, 0.625, 0.5)
    ap, ap50, ap75 = coco_ap([[(pred, 0.9)]], [[gt]])
    assert ap50 == 100.0 and ap75 == 0.0
    assert ap == pytest.approx(30.0)


def test_perfect_detector():
    gts = [[BoundingBox(0.3, 0.3, 0.2, 0.2), BoundingBox(0.7, 0.6, 0.3, 0.2)], [BoundingBox(0.5, 0.5, 0.4, 0.4)]]
    preds = [[(b, 1.0) for b in g] for g in gts]
    assert coco_ap(preds, gts) == (100.0, 100.0, 100.0)


def test_no_ground_truth_is_zero():
    assert coco_ap([[(BoundingBox(0.5, 0.5, 0.1, 0.1), 0.9)]], [[]]) == (0.0, 0.0, 0.0)


def test_contract_errors():
    with pytest.raises(ContractViolation):
        coco_ap([[]], [[], []])
    with pytest.raises(ContractViolation):
        coco_ap([[(BoundingBox(0.5, 0.5, 0.1, 0.1), 1.5)]], [[]])
    with pytest.raises(ContractViolation):
        msd_metrics(["sarcastic"], [])


def test_coco_matches_reference_small():
    rng = np.random.default_rng(11)
    for _ in range(40):
        gts, preds = [], []
        for _ in range(rng.integers(1, 4)):
            g = [BoundingBox(*rng.uniform(0.3, 0.7, 2), *rng.uniform(0.1, 0.4, 2)) for _ in range(rng.integers(0, 4))]
            p = []
            for _ in range(rng.integers(0, 4)):
                base = g[rng.integers(len(g))] if g and rng.random() < 0.8 else BoundingBox(0.5, 0.5, 0.3, 0.3)
                cx, cy = np.clip(np.array([base.cx, base.cy]) + rng.normal(0, 0.03, 2), 0.05, 0.95)
                w, h = np.clip(np.array([base.w, base.h]) * rng.uniform(0.8, 1.2, 2), 0.02, 0.9)
                p.append((BoundingBox(cx, cy, w, h), float(rng.choice([0.3, 0.5, 0.9]))))
            gts.append(g)
            preds.append(p)
        assert coco_ap(preds, gts) == coco_reference(preds, gts, IOU_THRESHOLDS)


def test_msd_metrics():
    s, n = "sarcastic", "non-sarcastic"
    assert msd_metrics([s, n], [s, n]) == (100.0, 100.0, 100.0, 100.0)
    acc, p, r, f = msd_metrics([s, s, s, s], [s, s, n, n])
    assert (acc, p, r) == (50.0, 50.0, 100.0) and f == pytest.approx(66.67, abs=0.01)
    acc, p, r, f = msd_metrics([n, n], [s, s])
    assert p == 0.0 and f == 0.0
    assert msd_metrics(["garbage", s], [n, s])[0] == 50.0


def test_report_serialization():
    r = msti_report(["the wifi"], [["the wifi"]], [[(BoundingBox(0.5, 0.5, 0.2, 0.2), 0.9)]],
                    [[BoundingBox(0.5, 0.5, 0.2, 0.2)]])
    d = json.loads(r.to_json())
    assert d == {"ap": 100.0, "ap50": 100.0, "ap75": 100.0, "em": 100.0, "f1": 100.0}
    assert "msd_accuracy" not in d
    assert "em" in r.table()
    assert msd_report(["sarcastic"], ["sarcastic"]).to_dict()["msd_accuracy"] == 100.0
    assert MetricReport().table() == ""
