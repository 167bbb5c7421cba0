"""anchor / IoU / box codec / NMS / RPN·FPR head / 검출 파이프라인 테스트."""
import itertools

import numpy as np
import pytest

from detection.geometry import (
    AnchorSet,
    Box3D,
    Detection,
    anchor_array,
    clip_box,
    decode_box,
    encode_box,
    generate_anchors,
    iou3d,
    iou_matrix,
    nms3d,
)
from detection.heads import (
    FprParams,
    RpnParams,
    adaptive_max_pool,
    collect_roi_features,
    fpr_head,
    roi_features,
    rpn_head,
    upsample_nearest,
)
from detection.pipeline import DetectConfig, detect_volume
from engine.tensor import FeatureVolume
from network.config import make_layout
from network.layers import conv3d_forward
from network.loss import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    AnchorTargets,
    assign_anchor_targets,
    detection_loss,
    flatten_rpn,
    fpr_loss,
    select_hard_negatives,
    unflatten_rpn,
)
from network.toynet import build_network
from utils.errors import ConfigError, InputError


def _random_box(rng, lo=0.0, hi=20.0):
    c = rng.uniform(lo, hi, 3)
    s = rng.uniform(1.0, 6.0, 3)
    return Box3D(*c, *s)


# ──────────────────────────────────────────────────────────────────────────────
# Anchors
# ──────────────────────────────────────────────────────────────────────────────
def test_anchors_single_cell():
    anchors = generate_anchors((1, 1, 1), AnchorSet(stride=4))
    assert len(anchors) == 5
    assert all(tuple(a.center) == (2.0, 2.0, 2.0) for a in anchors)
    assert [a.depth for a in anchors] == [5.0, 10.0, 20.0, 30.0, 50.0]


def test_anchors_cell_centers():
    arr = anchor_array((2, 2, 2), AnchorSet(sizes=(4.0,), stride=4))
    assert arr.shape == (8, 6)
    assert {tuple(r[:3]) for r in arr} == set(itertools.product((2.0, 6.0), repeat=3))


def test_anchors_match_loop_enumeration():
    anchor_set = AnchorSet(stride=4)
    arr = anchor_array((4, 6, 6), anchor_set)
    assert arr.shape == (720, 6)
    expected = [
        ((d + 0.5) * 4, (h + 0.5) * 4, (w + 0.5) * 4, s, s, s)
        for d in range(4) for h in range(6) for w in range(6) for s in anchor_set.sizes
    ]
    assert np.array_equal(arr, np.asarray(expected))


def test_anchor_set_validation():
    with pytest.raises(ValueError):
        AnchorSet(sizes=(10.0, 5.0))
    with pytest.raises(ValueError):
        AnchorSet(sizes=(0.0,))


# ──────────────────────────────────────────────────────────────────────────────
# IoU / codec
# ──────────────────────────────────────────────────────────────────────────────
def test_iou_examples():
    a = Box3D(0.5, 0.5, 0.5, 1, 1, 1)
    assert iou3d(a, a) == 1.0
    assert iou3d(a, Box3D(5, 5, 5, 1, 1, 1)) == 0.0
    assert iou3d(a, Box3D(1.0, 0.5, 0.5, 1, 1, 1)) == pytest.approx(1.0 / 3.0)
    with pytest.raises(InputError):
        Box3D(0, 0, 0, 1, 0, 1)
    with pytest.raises(InputError):
        Box3D(float("nan"), 0, 0, 1, 1, 1)
    with pytest.raises(InputError):
        Detection(a, 1.5)


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    boxes = np.stack([_random_box(rng).to_array() for _ in range(30)])
    m = iou_matrix(boxes, boxes)
    assert np.allclose(m, m.T)
    assert np.all((m >= 0) & (m <= 1))
    assert np.allclose(np.diag(m), 1.0)
    assert m[3, 7] == pytest.approx(iou3d(Box3D.from_array(boxes[3]), Box3D.from_array(boxes[7])))


def test_box_codec():
    anchor = Box3D(10, 10, 10, 5, 5, 5)
    assert np.array_equal(encode_box(anchor, anchor), np.zeros(6))
    doubled = Box3D(10, 10, 10, 10, 10, 10)
    assert np.allclose(encode_box(anchor, doubled), [0, 0, 0, np.log(2), np.log(2), np.log(2)])

    rng = np.random.default_rng(1)
    for _ in range(10):
        gt = _random_box(rng)
        back = decode_box(anchor, encode_box(anchor, gt))
        assert np.allclose(back.to_array(), gt.to_array(), rtol=1e-12, atol=1e-12)


# ──────────────────────────────────────────────────────────────────────────────
# NMS / clip
# ──────────────────────────────────────────────────────────────────────────────
def _nms_reference(dets, thr):
    remaining = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    while remaining:
        i = remaining.pop(0)
        kept.append(i)
        remaining = [j for j in remaining if iou3d(dets[i].box, dets[j].box) <= thr]
    return [dets[i] for i in kept]


def test_nms_examples():
    box = Box3D(5, 5, 5, 4, 4, 4)
    single = [Detection(box, 0.3)]
    assert nms3d(single, 0.5) == single
    pair = [Detection(box, 0.8), Detection(box, 0.9)]
    assert nms3d(pair, 0.5) == [pair[1]]
    assert nms3d([], 0.5) == []
    with pytest.raises(ConfigError):
        nms3d(single, 1.0)


def test_nms_matches_reference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        dets = [Detection(_random_box(rng, hi=10.0), float(rng.random())) for _ in range(15)]
        for thr in (0.1, 0.3, 0.5):
            out = nms3d(dets, thr)
            assert out == _nms_reference(dets, thr)
            scores = [d.score for d in out]
            assert scores == sorted(scores, reverse=True)


def test_clip_box():
    inside = Box3D(8, 8, 8, 4, 4, 4)
    assert clip_box(inside, (16, 16, 16)) == inside
    clipped = clip_box(Box3D(1, 8, 8, 4, 4, 4), (16, 16, 16))
    assert clipped.as_tuple() == (1.5, 8.0, 8.0, 3.0, 4.0, 4.0)
    assert clip_box(Box3D(30, 8, 8, 4, 4, 4), (16, 16, 16)) is None


# ──────────────────────────────────────────────────────────────────────────────
# RPN
# ──────────────────────────────────────────────────────────────────────────────
@pytest.mark.parametrize("anchor_count", [5, 3])
def test_rpn_zero_weights(anchor_count):
    x = FeatureVolume.random((4, 2, 3, 3), np.random.default_rng(3))
    scores, offsets = rpn_head(x, RpnParams.zeros(4, anchor_count))
    assert scores.shape == (anchor_count, 2, 3, 3)
    assert offsets.shape == (6 * anchor_count, 2, 3, 3)
    assert np.all(scores == 0.5) and np.all(offsets == 0.0)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv3d_matches_scalar_loop(stride, padding):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 4, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3, 3))
    b = rng.standard_normal(3)
    out = conv3d_forward(x, w, b, stride=stride, padding=padding)
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3)
    for o, d, h, ww in itertools.product(*(range(n) for n in out.shape)):
        window = xp[:, d * stride:d * stride + 3, h * stride:h * stride + 3, ww * stride:ww * stride + 3]
        assert out[o, d, h, ww] == pytest.approx(float(np.sum(window * w[o])) + b[o], abs=1e-10)


# ──────────────────────────────────────────────────────────────────────────────
# FPR
# ──────────────────────────────────────────────────────────────────────────────
def test_fpr_zero_weights_keep_boxes():
    rng = np.random.default_rng(5)
    shallow = FeatureVolume.random((2, 8, 8, 8), rng)
    deep = FeatureVolume.random((3, 4, 4, 4), rng)
    cands = [Detection(Box3D(4, 4, 4, 4, 4, 4), 0.9), Detection(Box3D(2, 5, 6, 2, 3, 2), 0.2)]
    out = fpr_head(cands, shallow, deep, FprParams.zeros(5, 4), shallow_stride=1, deep_stride=2)
    assert [d.score for d in out] == [0.5, 0.5]
    assert [d.box for d in out] == [c.box for c in cands]


def test_roi_features_constant_crop():
    shallow = np.broadcast_to(np.array([1.0, 2.0])[:, None, None, None], (2, 8, 8, 8))
    deep = np.full((1, 4, 4, 4), 7.0)
    feat = roi_features(Box3D(4, 4, 4, 3, 3, 3), shallow, deep, 1, 2)
    assert feat.reshape(3, 8).tolist() == [[1.0] * 8, [2.0] * 8, [7.0] * 8]


def test_adaptive_max_pool_ramp():
    values = np.arange(64, dtype=float).reshape(1, 4, 4, 4)
    pooled = adaptive_max_pool(values, 2)
    for i, j, k in itertools.product(range(2), repeat=3):
        assert pooled[0, i, j, k] == 16 * (2 * i + 1) + 4 * (2 * j + 1) + (2 * k + 1)
    # 3 칸을 2 bin 으로: (0,2), (1,3) 이 겹칩니다
    odd = np.arange(3, dtype=float).reshape(1, 3, 1, 1)
    assert adaptive_max_pool(odd, 2)[0, :, 0, 0].tolist() == [1.0, 2.0]


def test_upsample_nearest_repeats():
    values = np.arange(8, dtype=float).reshape(1, 2, 2, 2)
    up = upsample_nearest(values, (4, 4, 4))
    assert np.array_equal(up, values.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3))


def test_degenerate_crop_dropped():
    shallow = np.ones((1, 8, 8, 8))
    deep = np.ones((1, 4, 4, 4))
    tiny = Detection(Box3D(4, 4, 4, 0.5, 4, 4), 0.5)
    outside = Detection(Box3D(20, 4, 4, 2, 2, 2), 0.5)
    good = Detection(Box3D(4, 4, 4, 2, 2, 2), 0.5)
    kept, matrix = collect_roi_features([tiny, good, outside], shallow, deep, 1, 2)
    assert kept == [1]
    assert matrix.shape == (1, 16)


# ──────────────────────────────────────────────────────────────────────────────
# anchor 할당 / loss
# ──────────────────────────────────────────────────────────────────────────────
def test_assign_anchor_targets():
    gt = np.array([[10, 10, 10, 4, 4, 4]], dtype=float)
    anchors = np.array([
        [10, 10, 10, 4, 4, 4],   # IoU 1
        [11, 10, 10, 4, 4, 4],   # IoU 0.6
        [12, 12, 12, 4, 4, 4],   # IoU 8/120
        [40, 40, 40, 4, 4, 4],   # 0
    ], dtype=float)
    t = assign_anchor_targets(anchors, gt)
    assert t.labels.tolist() == [POSITIVE, POSITIVE, IGNORE, NEGATIVE]
    assert t.matched.tolist() == [0, 0, -1, -1]
    assert np.allclose(t.offsets[1], [-0.25, 0, 0, 0, 0, 0])

    empty = assign_anchor_targets(anchors, np.zeros((0, 6)))
    assert np.all(empty.labels == NEGATIVE)


def test_best_anchor_forced_positive():
    gt = np.array([[10, 10, 10, 4, 4, 4]], dtype=float)
    anchors = np.array([[12, 12, 12, 4, 4, 4], [40, 40, 40, 4, 4, 4]], dtype=float)
    t = assign_anchor_targets(anchors, gt)
    assert t.labels.tolist() == [POSITIVE, NEGATIVE]


def test_hard_negative_selection():
    logits = np.array([0.1, 0.9, 0.5, 0.9])
    assert select_hard_negatives(logits, np.arange(4), 2).tolist() == [1, 3]
    assert select_hard_negatives(logits, np.arange(4), 0).size == 0


def test_detection_loss_selects_three_negatives_per_positive():
    rng = np.random.default_rng(6)
    logits = rng.standard_normal((1, 2, 2, 2))
    offsets = rng.standard_normal((6, 2, 2, 2))
    labels = np.full(8, NEGATIVE, dtype=np.int8)
    labels[0] = POSITIVE
    targets = AnchorTargets(labels, np.zeros((8, 6)), np.where(labels == POSITIVE, 0, -1))
    loss, d_logits, d_offsets = detection_loss(logits, offsets, targets, neg_ratio=3, min_negatives=2)
    assert np.count_nonzero(d_logits) == 4
    assert np.count_nonzero(d_offsets) == 6
    assert loss.cls > 0 and loss.reg > 0

    no_pos = AnchorTargets(np.full(8, NEGATIVE, dtype=np.int8), np.zeros((8, 6)), np.full(8, -1))
    loss, d_logits, d_offsets = detection_loss(logits, offsets, no_pos, neg_ratio=3, min_negatives=2)
    assert np.count_nonzero(d_logits) == 2
    assert loss.reg == 0.0 and not np.any(d_offsets)


def _central_difference(loss_fn, arr, h=1e-6):
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        orig = arr[idx]
        arr[idx] = orig + h
        plus = loss_fn()
        arr[idx] = orig - h
        minus = loss_fn()
        arr[idx] = orig
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def _offset_residuals(rng, n):
    # |x| 가 smooth-L1 의 꺾이는 점 1 근처에 오지 않도록
    diff = rng.uniform(0.1, 0.8, (n, 6)) * rng.choice([-1.0, 1.0], (n, 6))
    diff[1, :3] = (1.6, -1.6, 2.0)
    return diff


def test_detection_loss_gradients_match_central_difference():
    rng = np.random.default_rng(11)
    # anchor 순서 (d,h,w,a), dims (1,2,2), A=2
    flat_logits = np.array([-1.0, 0.3, 1.2, -0.4, 0.8, 2.0, -0.7, 0.1])
    labels = np.array([NEGATIVE, POSITIVE, NEGATIVE, NEGATIVE, IGNORE, NEGATIVE, POSITIVE, NEGATIVE], dtype=np.int8)
    target_offsets = rng.standard_normal((8, 6))
    flat_offsets = target_offsets + _offset_residuals(rng, 8)
    targets = AnchorTargets(labels, target_offsets, np.where(labels == POSITIVE, 0, -1))
    logits, offsets = unflatten_rpn(flat_logits, flat_offsets, (1, 2, 2), 2)

    # positive 2 개 → hard negative 2 개 (logit 2.0, 1.2), 다음 후보 0.1 과는 충분히 떨어져 있음
    def total():
        return detection_loss(logits, offsets, targets, neg_ratio=1)[0].total

    _, d_logits, d_offsets = detection_loss(logits, offsets, targets, neg_ratio=1)
    np.testing.assert_allclose(_central_difference(total, logits), d_logits, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(_central_difference(total, offsets), d_offsets, rtol=1e-6, atol=1e-8)

    g_flat, go_flat = flatten_rpn(d_logits, d_offsets)
    assert np.all(g_flat[[0, 3, 4, 7]] == 0.0) and np.all(g_flat[[1, 2, 5, 6]] != 0.0)
    assert not np.any(go_flat[[0, 2, 3, 4, 5, 7]])


def test_fpr_loss_gradients_match_central_difference():
    rng = np.random.default_rng(12)
    labels = np.array([POSITIVE, NEGATIVE, POSITIVE, NEGATIVE, NEGATIVE])
    target_offsets = rng.standard_normal((5, 6))
    outputs = np.concatenate([rng.standard_normal((5, 1)), target_offsets + _offset_residuals(rng, 5)], axis=1)

    def total():
        return fpr_loss(outputs, labels, target_offsets)[0].total

    _, grad = fpr_loss(outputs, labels, target_offsets)
    np.testing.assert_allclose(_central_difference(total, outputs), grad, rtol=1e-6, atol=1e-8)
    assert not np.any(grad[[1, 3, 4], 1:])


# ──────────────────────────────────────────────────────────────────────────────
# pipeline
# ──────────────────────────────────────────────────────────────────────────────
@pytest.mark.parametrize("use_fpr", [True, False])
def test_detect_volume_runs(use_fpr):
    layout = make_layout(block_sequence="2/3", group_count=2, widths=(4, 4, 4, 4), patch=(16, 16, 16),
                         anchor_sizes=(4.0, 8.0))
    net = build_network(layout, seed=0)
    volume = np.random.default_rng(7).random((1, 16, 16, 16))
    cfg = DetectConfig(max_detections=5, use_fpr=use_fpr)
    dets = detect_volume(net, volume, cfg)
    assert 0 < len(dets) <= 5
    scores = [d.score for d in dets]
    assert scores == sorted(scores, reverse=True)
    for d in dets:
        lo, hi = d.box.bounds()
        assert np.all(lo >= -1e-9) and np.all(hi <= 16 + 1e-9)
    assert detect_volume(net, volume, cfg) == dets
