"""3-D detection 기하 연산: cube anchor, 6-파라미터 box codec, IoU, NMS.

좌표계: voxel i 는 연속 구간 [i, i+1) 을 차지하고 중심은 i + 0.5 입니다. anchor 크기와
box 는 모두 입력 볼륨 voxel 단위입니다.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from utils.errors import ConfigError, InputError, ShapeError

logger = logging.getLogger(__name__)

CT_ANCHOR_SIZES = (5.0, 10.0, 20.0, 30.0, 50.0)


@dataclass(frozen=True)
class Box3D:
    """축 정렬 box. 중심 (z, y, x) 와 크기 (depth, height, width)."""
    center_z: float
    center_y: float
    center_x: float
    depth: float
    height: float
    width: float

    def __post_init__(self):
        vals = self.as_tuple()
        if not all(np.isfinite(vals)):
            raise InputError(f"Box3D 값이 유한하지 않습니다: {vals}")
        if min(self.depth, self.height, self.width) <= 0:
            raise InputError(f"Box3D 크기는 양수여야 합니다: {vals[3:]}")

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.center_z, self.center_y, self.center_x, self.depth, self.height, self.width)

    def to_array(self) -> np.ndarray:
        return np.asarray(self.as_tuple(), dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in arr))

    @property
    def center(self) -> np.ndarray:
        return np.asarray([self.center_z, self.center_y, self.center_x])

    @property
    def extent(self) -> np.ndarray:
        return np.asarray([self.depth, self.height, self.width])

    @property
    def volume(self) -> float:
        return self.depth * self.height * self.width

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        half = self.extent / 2.0
        return self.center - half, self.center + half

    def contains_point(self, point: Sequence[float]) -> bool:
        lo, hi = self.bounds()
        p = np.asarray(point, dtype=np.float64)
        return bool(np.all(p >= lo) and np.all(p <= hi))


@dataclass(frozen=True)
class Detection:
    """score 가 붙은 box."""
    box: Box3D
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise InputError(f"score 는 [0,1] 범위여야 합니다: {self.score}")


class AnchorSet(BaseModel):
    """cube anchor 크기 목록과 feature stride."""
    sizes: Tuple[float, ...] = Field(default=CT_ANCHOR_SIZES, description="cube 한 변 길이 (voxel)")
    stride: int = Field(default=4, ge=1, description="feature cell 당 입력 voxel 수")

    @field_validator("sizes")
    @classmethod
    def _sorted_positive(cls, v):
        if not v or any(s <= 0 for s in v):
            raise ValueError("anchor 크기는 모두 양수여야 합니다.")
        if list(v) != sorted(v) or len(set(v)) != len(v):
            raise ValueError("anchor 크기는 엄격히 오름차순이어야 합니다.")
        return tuple(float(s) for s in v)


# ──────────────────────────────────────────────────────────────────────────────
# Anchors
# ──────────────────────────────────────────────────────────────────────────────
def anchor_array(feature_dims: Sequence[int], anchor_set: AnchorSet) -> np.ndarray:
    """(D_f·H_f·W_f·|sizes|, 6) 배열. 순서: d → h → w → size."""
    dims = tuple(int(v) for v in feature_dims)
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"feature dims 는 3 개의 양수여야 합니다: {feature_dims}")
    s = float(anchor_set.stride)
    zz, yy, xx = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    centers = (np.stack([zz, yy, xx], axis=-1).reshape(-1, 3) + 0.5) * s
    sizes = np.asarray(anchor_set.sizes, dtype=np.float64)
    n_cells, n_sizes = centers.shape[0], sizes.shape[0]
    out = np.empty((n_cells, n_sizes, 6), dtype=np.float64)
    out[:, :, :3] = centers[:, None, :]
    out[:, :, 3:] = sizes[None, :, None]
    return out.reshape(-1, 6)


def generate_anchors(feature_dims: Sequence[int], anchor_set: AnchorSet) -> List[Box3D]:
    return [Box3D.from_array(row) for row in anchor_array(feature_dims, anchor_set)]


# ──────────────────────────────────────────────────────────────────────────────
# IoU
# ──────────────────────────────────────────────────────────────────────────────
def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N,6) × (M,6) → (N,M) IoU."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    a_lo, a_hi = a[:, :3] - a[:, 3:] / 2, a[:, :3] + a[:, 3:] / 2
    b_lo, b_hi = b[:, :3] - b[:, 3:] / 2, b[:, :3] + b[:, 3:] / 2
    lo = np.maximum(a_lo[:, None, :], b_lo[None, :, :])
    hi = np.minimum(a_hi[:, None, :], b_hi[None, :, :])
    inter = np.clip(hi - lo, 0.0, None).prod(axis=-1)
    vol_a = a[:, 3:].prod(axis=1)
    vol_b = b[:, 3:].prod(axis=1)
    union = vol_a[:, None] + vol_b[None, :] - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    inter = float(np.prod(np.clip(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b), 0.0, None)))
    union = a.volume + b.volume - inter
    return min(max(inter / union, 0.0), 1.0)


# ──────────────────────────────────────────────────────────────────────────────
# Box codec
# ──────────────────────────────────────────────────────────────────────────────
def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """중심 차이를 anchor 크기로 나누고, 크기는 log 비율. (N,6)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 6)
    out = np.empty_like(gts)
    out[:, :3] = (gts[:, :3] - anchors[:, :3]) / anchors[:, 3:]
    out[:, 3:] = np.log(gts[:, 3:] / anchors[:, 3:])
    return out


def decode_boxes(anchors: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 6)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 6)
    out = np.empty_like(offsets)
    out[:, :3] = anchors[:, :3] + offsets[:, :3] * anchors[:, 3:]
    out[:, 3:] = anchors[:, 3:] * np.exp(offsets[:, 3:])
    return out


def encode_box(anchor: Box3D, gt: Box3D) -> np.ndarray:
    return encode_boxes(anchor.to_array(), gt.to_array())[0]


def decode_box(anchor: Box3D, offsets: Sequence[float]) -> Box3D:
    return Box3D.from_array(decode_boxes(anchor.to_array(), offsets)[0])


# ──────────────────────────────────────────────────────────────────────────────
# NMS / clipping
# ──────────────────────────────────────────────────────────────────────────────
def nms3d(dets: Sequence[Detection], iou_threshold: float) -> List[Detection]:
    """score 내림차순 greedy NMS. 동점은 입력 순서를 유지합니다."""
    if not 0.0 < iou_threshold < 1.0:
        raise ConfigError(f"iou_threshold 는 (0,1) 범위여야 합니다: {iou_threshold}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.stack([d.box.to_array() for d in dets])
    ious = iou_matrix(boxes, boxes)
    kept: List[int] = []
    for i in order:
        if all(ious[i, k] <= iou_threshold for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def clip_box(box: Box3D, volume_dims: Sequence[float]) -> Optional[Box3D]:
    """box 를 [0, D]×[0, H]×[0, W] 안으로 자릅니다. 겹치는 부분이 없으면 None."""
    lo, hi = box.bounds()
    limit = np.asarray(volume_dims, dtype=np.float64)
    lo = np.clip(lo, 0.0, limit)
    hi = np.clip(hi, 0.0, limit)
    extent = hi - lo
    if np.any(extent <= 0):
        return None
    center = (lo + hi) / 2.0
    return Box3D(*center.tolist(), *extent.tolist())
