"""detection multi-task loss.

분류: binary cross-entropy, positive 전부 + hard negative (score 상위) 를 neg_ratio:1 로 선택.
회귀: positive anchor 의 6-파라미터 offset 에 smooth-L1.
anchor 할당: IoU ≥ pos_iou positive, < neg_iou negative, 그 사이는 무시. GT 마다 IoU 최대 anchor 는 강제 positive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from detection.geometry import encode_boxes, iou_matrix
from network.layers import sigmoid

logger = logging.getLogger(__name__)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True, eq=False)
class AnchorTargets:
    labels: np.ndarray   # (N,) int8, POSITIVE/NEGATIVE/IGNORE
    offsets: np.ndarray  # (N, 6), positive 행만 의미 있음
    matched: np.ndarray  # (N,) 매칭된 GT index, 없으면 -1

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


@dataclass(frozen=True)
class LossBreakdown:
    cls: float
    reg: float

    @property
    def total(self) -> float:
        return self.cls + self.reg


def assign_anchor_targets(
    anchors: np.ndarray, gt_boxes: np.ndarray, pos_iou: float = 0.5, neg_iou: float = 0.02
) -> AnchorTargets:
    n = anchors.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    offsets = np.zeros((n, 6))
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 6)
    if gt_boxes.shape[0] == 0:
        return AnchorTargets(labels, offsets, matched)

    ious = iou_matrix(anchors, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = IGNORE
    pos = best_iou >= pos_iou
    labels[pos] = POSITIVE
    matched[pos] = best_gt[pos]
    # GT 마다 최고 IoU anchor (동점이면 앞 index)
    for j in range(gt_boxes.shape[0]):
        i = int(ious[:, j].argmax())
        if ious[i, j] > 0:
            labels[i] = POSITIVE
            matched[i] = j
    idx = np.flatnonzero(labels == POSITIVE)
    if idx.size:
        offsets[idx] = encode_boxes(anchors[idx], gt_boxes[matched[idx]])
    return AnchorTargets(labels, offsets, matched)


def bce_with_logits(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """원소별 loss 와 d loss / d logit."""
    loss = np.maximum(logits, 0.0) - logits * labels + np.log1p(np.exp(-np.abs(logits)))
    return loss, sigmoid(logits) - labels


def smooth_l1(x: np.ndarray, beta: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    ax = np.abs(x)
    small = ax < beta
    loss = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta)
    grad = np.where(small, x / beta, np.sign(x))
    return loss, grad


def flatten_rpn(logits: np.ndarray, offsets: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """(A,d,h,w), (6A,d,h,w) → anchor 순서 (d,h,w,a) 의 (N,), (N,6)."""
    a = logits.shape[0]
    flat_logits = logits.transpose(1, 2, 3, 0).reshape(-1)
    flat_offsets = offsets.reshape((a, 6) + offsets.shape[1:]).transpose(2, 3, 4, 0, 1).reshape(-1, 6)
    return flat_logits, flat_offsets


def unflatten_rpn(d_logits: np.ndarray, d_offsets: np.ndarray, dims: Tuple[int, ...], a: int) -> Tuple[np.ndarray, np.ndarray]:
    d, h, w = dims
    gl = d_logits.reshape(d, h, w, a).transpose(3, 0, 1, 2)
    go = d_offsets.reshape(d, h, w, a, 6).transpose(3, 4, 0, 1, 2).reshape(6 * a, d, h, w)
    return np.ascontiguousarray(gl), np.ascontiguousarray(go)


def select_hard_negatives(logits: np.ndarray, negatives: np.ndarray, count: int) -> np.ndarray:
    """logit 내림차순 상위 count 개. 동점은 anchor index 순."""
    if count <= 0 or negatives.size == 0:
        return negatives[:0]
    order = np.argsort(-logits[negatives], kind="stable")
    return negatives[order[:count]]


def detection_loss(
    logits: np.ndarray,
    offsets: np.ndarray,
    targets: AnchorTargets,
    neg_ratio: int = 3,
    min_negatives: int = 8,
) -> Tuple[LossBreakdown, np.ndarray, np.ndarray]:
    """RPN 출력 ((A,d,h,w), (6A,d,h,w)) 에 대한 loss 와 같은 shape 의 gradient."""
    a = logits.shape[0]
    flat_logits, flat_offsets = flatten_rpn(logits, offsets)
    pos = targets.positives
    n_neg = neg_ratio * pos.size if pos.size else min_negatives
    neg = select_hard_negatives(flat_logits, targets.negatives, n_neg)

    d_logits = np.zeros_like(flat_logits)
    d_offsets = np.zeros_like(flat_offsets)
    cls_loss = 0.0
    selected = np.concatenate([pos, neg])
    if selected.size:
        y = (targets.labels[selected] == POSITIVE).astype(np.float64)
        loss, grad = bce_with_logits(flat_logits[selected], y)
        cls_loss = float(np.add.reduce(loss)) / selected.size
        d_logits[selected] = grad / selected.size

    reg_loss = 0.0
    if pos.size:
        loss, grad = smooth_l1(flat_offsets[pos] - targets.offsets[pos])
        reg_loss = float(np.add.reduce(loss.reshape(-1))) / pos.size
        d_offsets[pos] = grad / pos.size

    gl, go = unflatten_rpn(d_logits, d_offsets, logits.shape[1:], a)
    return LossBreakdown(cls=cls_loss, reg=reg_loss), gl, go


def fpr_loss(outputs: np.ndarray, labels: np.ndarray, offsets: np.ndarray) -> Tuple[LossBreakdown, np.ndarray]:
    """FPR head 출력 (N,7): 전체 후보 BCE 평균 + positive 후보 smooth-L1."""
    grad = np.zeros_like(outputs)
    n = outputs.shape[0]
    if n == 0:
        return LossBreakdown(0.0, 0.0), grad
    y = labels.astype(np.float64)
    loss, g = bce_with_logits(outputs[:, 0], y)
    grad[:, 0] = g / n
    pos = np.flatnonzero(labels == POSITIVE)
    reg = 0.0
    if pos.size:
        l1, g1 = smooth_l1(outputs[pos, 1:] - offsets[pos])
        reg = float(np.add.reduce(l1.reshape(-1))) / pos.size
        grad[pos, 1:] = g1 / pos.size
    return LossBreakdown(cls=float(np.add.reduce(loss)) / n, reg=reg), grad
