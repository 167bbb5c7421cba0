"""볼륨 한 개에 대한 2-stage 검출: RPN proposal → decode → clip → NMS → FPR 재채점 → NMS."""
from __future__ import annotations

import logging
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, Field

from detection.geometry import Box3D, Detection, anchor_array, clip_box, decode_boxes, nms3d
from detection.heads import fpr_head
from engine.tensor import FeatureVolume
from network.layers import sigmoid
from network.loss import flatten_rpn
from network.toynet import NetOutputs, ToyNetParams, network_forward

logger = logging.getLogger(__name__)


class DetectConfig(BaseModel):
    pre_nms_top_k: int = Field(default=64, ge=1, description="NMS 전 score 상위 anchor 수")
    nms_iou: float = Field(default=0.1, gt=0.0, lt=1.0)
    max_detections: int = Field(default=16, ge=1)
    use_fpr: bool = Field(default=True, description="FPR head 로 재채점")


def propose(net: ToyNetParams, outputs: NetOutputs, top_k: int, nms_iou: float) -> List[Detection]:
    """RPN 출력에서 score 상위 top_k anchor 를 box 로 풀어 NMS 까지 적용."""
    flat_logits, flat_offsets = flatten_rpn(outputs.logits, outputs.offsets)
    anchors = anchor_array(outputs.logits.shape[1:], net.anchor_set)
    order = np.argsort(-flat_logits, kind="stable")[:top_k]
    boxes = decode_boxes(anchors[order], flat_offsets[order])
    scores = sigmoid(flat_logits[order])
    limits = net.layout.patch
    dets = []
    for row, score in zip(boxes, scores):
        if not np.all(np.isfinite(row)):
            continue
        clipped = clip_box(Box3D.from_array(row), limits)
        if clipped is not None:
            dets.append(Detection(box=clipped, score=float(score)))
    return nms3d(dets, nms_iou)


def rescore(net: ToyNetParams, outputs: NetOutputs, candidates: List[Detection]) -> List[Detection]:
    """FPR head 로 score / box 를 다시 매깁니다. 퇴화 crop 후보는 빠집니다."""
    refined = fpr_head(
        candidates,
        FeatureVolume(outputs.shallow),
        FeatureVolume(outputs.head),
        net.fpr(),
        shallow_stride=1,
        deep_stride=net.layout.output_stride,
    )
    results = []
    for det in refined:
        clipped = clip_box(det.box, net.layout.patch)
        if clipped is not None:
            results.append(Detection(box=clipped, score=det.score))
    return results


def detect_volume(
    net: ToyNetParams, volume: np.ndarray, cfg: Optional[DetectConfig] = None
) -> List[Detection]:
    """score 내림차순 검출 목록."""
    cfg = cfg or DetectConfig()
    outputs, _ = network_forward(net, volume)
    dets = propose(net, outputs, cfg.pre_nms_top_k, cfg.nms_iou)
    if cfg.use_fpr and dets:
        dets = nms3d(rescore(net, outputs, dets), cfg.nms_iou)
    return dets[: cfg.max_detections]
