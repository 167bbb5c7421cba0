"""FROC 평가 / 표 출력 / box CSV 테스트."""
import numpy as np
import pytest

from detection.geometry import Box3D, Detection
from evaluation.froc import (
    OPERATING_POINTS,
    FrocResult,
    MatchCriterion,
    evaluate_froc,
    format_froc_table,
    summary_frame,
    write_curve_csv,
)
from storage.box_csv import read_detections, read_ground_truth, write_detections, write_ground_truth
from utils.errors import ConfigError, InputError, UndefinedSensitivityError

CENTER = MatchCriterion(kind="center")

G1 = Box3D(10, 10, 10, 4, 4, 4)
G2 = Box3D(30, 30, 30, 4, 4, 4)
G3 = Box3D(20, 20, 20, 6, 6, 6)
FAR = Box3D(50, 50, 50, 4, 4, 4)


@pytest.fixture
def fixture_scans():
    gts = {"A": [G1, G2], "B": [G3]}
    dets = {
        "A": [Detection(G1, 0.9), Detection(FAR, 0.8), Detection(G1, 0.6)],
        "B": [Detection(G3, 0.7), Detection(FAR, 0.5)],
    }
    return dets, gts


def test_hand_computed_curve(fixture_scans):
    dets, gts = fixture_scans
    res = evaluate_froc(dets, gts, CENTER)
    expected_curve = [(0.0, 1 / 3), (0.5, 1 / 3), (0.5, 2 / 3), (1.0, 2 / 3), (1.5, 2 / 3)]
    assert len(res.curve) == len(expected_curve)
    for (f, s), (ef, es) in zip(res.curve, expected_curve):
        assert f == pytest.approx(ef) and s == pytest.approx(es)
    assert res.thresholds == (0.9, 0.8, 0.7, 0.6, 0.5)
    assert res.sensitivities == pytest.approx([1 / 3, 1 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3, 2 / 3])
    assert res.average == pytest.approx(4 / 7)
    assert res.auc == pytest.approx((0.5 / 3 + 7.5 * 2 / 3) / 8)
    assert res.n_scans == 2 and res.n_gt == 3


def test_perfect_and_empty_detections():
    gts = {"A": [G1, G2], "B": [G3], "C": []}
    perfect = {"A": [Detection(G1, 0.9), Detection(G2, 0.8)], "B": [Detection(G3, 0.7)]}
    res = evaluate_froc(perfect, gts, CENTER)
    assert res.sensitivities == (1.0,) * 7 and res.average == 1.0

    none = evaluate_froc({}, gts, CENTER)
    assert none.sensitivities == (0.0,) * 7
    assert none.curve == () and none.auc == 0.0


def test_iou_criterion_is_stricter():
    gts = {"A": [G1]}
    shifted = {"A": [Detection(Box3D(11.5, 10, 10, 4, 4, 4), 0.9)]}
    assert evaluate_froc(shifted, gts, CENTER).average == 1.0
    assert evaluate_froc(shifted, gts, MatchCriterion.parse("iou:0.5")).average == 0.0


def _random_case(rng):
    gts, dets = {}, {}
    for s in range(int(rng.integers(1, 5))):
        sid = f"scan{s}"
        boxes = [Box3D(*rng.uniform(5, 25, 3), *rng.uniform(2, 6, 3)) for _ in range(int(rng.integers(0, 4)))]
        gts[sid] = boxes
        cand = [Detection(Box3D(*(b.center + rng.normal(0, 1, 3)), b.depth, b.height, b.width), float(rng.random()))
                for b in boxes if rng.random() < 0.7]
        cand += [Detection(Box3D(*rng.uniform(0, 30, 3), 3, 3, 3), float(rng.random()))
                 for _ in range(int(rng.integers(0, 6)))]
        dets[sid] = cand
    if not any(gts.values()):
        gts["scan0"] = [Box3D(15, 15, 15, 4, 4, 4)]
    return dets, gts


def test_random_invariants():
    rng = np.random.default_rng(0)
    for _ in range(100):
        dets, gts = _random_case(rng)
        res = evaluate_froc(dets, gts, CENTER)
        sens = np.asarray(res.sensitivities)
        assert np.all(np.diff(sens) >= 0) and np.all((sens >= 0) & (sens <= 1))
        fps = [f for f, _ in res.curve]
        assert fps == sorted(fps)
        assert 0.0 <= res.auc <= 1.0

        scaled = {k: [Detection(d.box, d.score * 0.5) for d in v] for k, v in dets.items()}
        assert evaluate_froc(scaled, gts, CENTER).sensitivities == res.sensitivities

        shuffled = {k: [v[i] for i in rng.permutation(len(v))] for k, v in reversed(list(dets.items()))}
        assert evaluate_froc(shuffled, gts, CENTER).sensitivities == res.sensitivities


def test_errors():
    with pytest.raises(InputError):
        evaluate_froc({"Z": [Detection(G1, 0.5)]}, {"A": [G1]}, CENTER)
    with pytest.raises(UndefinedSensitivityError):
        evaluate_froc({}, {"A": []}, CENTER)
    for bad in ("bogus", "iou:1.5", "iou:x"):
        with pytest.raises(ConfigError):
            MatchCriterion.parse(bad)
    assert MatchCriterion.parse("IoU:0.25").label == "iou:0.25"


# ──────────────────────────────────────────────────────────────────────────────
# 표 / CSV
# ──────────────────────────────────────────────────────────────────────────────
def test_table_row_format():
    sens = [0.51594, 0.51594, 0.58184, 0.66884, 0.77334, 0.85354, 0.89874]
    table = format_froc_table([("2/3 G=4", FrocResult.from_sensitivities(sens))])
    header, row = table.splitlines()
    assert header == "Method  0.125 0.25 0.5 1.0 2.0 4.0 8.0 | Avg"
    assert row.startswith("2/3 G=4 ")
    assert row.endswith("51.59 51.59 58.18 66.88 77.33 85.35 89.87 | 68.69")


def test_table_edge_cases():
    assert format_froc_table([]) == "Method 0.125 0.25 0.5 1.0 2.0 4.0 8.0 | Avg\n"
    zero = format_froc_table([("none", FrocResult.from_sensitivities([0.0] * 7))]).splitlines()[1]
    assert zero.endswith("0.00 0.00 0.00 0.00 0.00 0.00 0.00 | 0.00")
    with pytest.raises(InputError):
        FrocResult.from_sensitivities([0.5] * 6)


def test_summary_and_curve_csv(tmp_path, fixture_scans):
    dets, gts = fixture_scans
    res = evaluate_froc(dets, gts, CENTER)
    df = summary_frame([("toy", res)])
    assert list(df.columns) == ["name"] + [f"fp_{p:g}" for p in OPERATING_POINTS] + ["average", "auc"]
    path = write_curve_csv(tmp_path / "curve.csv", res)
    assert path.read_text().splitlines()[0] == "threshold,fp_per_scan,sensitivity"
    assert len(path.read_text().splitlines()) == 1 + len(res.curve)


def test_box_csv_round_trip(tmp_path, fixture_scans):
    dets, gts = fixture_scans
    gts = {**gts, "C": []}
    assert read_detections(write_detections(tmp_path / "det.csv", dets)) == dets
    assert read_ground_truth(write_ground_truth(tmp_path / "gt.csv", gts)) == gts


def test_box_csv_errors(tmp_path):
    with pytest.raises(InputError):
        read_detections(tmp_path / "missing.csv")
    (tmp_path / "bad.csv").write_text("scan_id,cz,cy,cx\nA,1,2,3\n")
    with pytest.raises(InputError):
        read_detections(tmp_path / "bad.csv")
    (tmp_path / "neg.csv").write_text("scan_id,cz,cy,cx,d,h,w,score\nA,1,2,3,-1,2,2,0.5\n")
    with pytest.raises(InputError):
        read_detections(tmp_path / "neg.csv")
