"""RPN head 와 false-positive-reduction (FPR) head.

RPN: 3×3×3 conv → ReLU → 두 갈래 1×1×1 conv (anchor 별 score / 6 offset).
FPR: 후보 box 로 shallow / deep feature 를 잘라 deep crop 을 nearest-neighbor 로 키우고
채널 방향으로 이어 붙인 뒤 고정 grid 로 max-pool, FC 두 층으로 score 와 보정 offset 을 냅니다.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from detection.geometry import Box3D, Detection, decode_box
from engine.tensor import FeatureVolume, conv1x1
from network.layers import conv3d_backward, conv3d_forward, he_init, relu, relu_backward, sigmoid
from utils.errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_POOL_GRID = 2
FPR_OUTPUTS = 7  # score logit + 6 offsets


# ──────────────────────────────────────────────────────────────────────────────
# RPN
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class RpnParams:
    conv_w: np.ndarray  # (C, C, 3, 3, 3)
    conv_b: np.ndarray
    cls_w: np.ndarray   # (A, C)
    cls_b: np.ndarray
    reg_w: np.ndarray   # (6A, C)
    reg_b: np.ndarray

    @property
    def channels(self) -> int:
        return self.conv_w.shape[1]

    @property
    def anchor_count(self) -> int:
        return self.cls_w.shape[0]

    @classmethod
    def init(cls, channels: int, anchor_count: int, rng: np.random.Generator) -> "RpnParams":
        return cls(
            conv_w=he_init(rng, (channels, channels, 3, 3, 3), channels * 27),
            conv_b=np.zeros(channels),
            cls_w=rng.standard_normal((anchor_count, channels)) * 0.01,
            cls_b=np.zeros(anchor_count),
            reg_w=rng.standard_normal((6 * anchor_count, channels)) * 0.01,
            reg_b=np.zeros(6 * anchor_count),
        )

    @classmethod
    def zeros(cls, channels: int, anchor_count: int) -> "RpnParams":
        return cls(
            conv_w=np.zeros((channels, channels, 3, 3, 3)),
            conv_b=np.zeros(channels),
            cls_w=np.zeros((anchor_count, channels)),
            cls_b=np.zeros(anchor_count),
            reg_w=np.zeros((6 * anchor_count, channels)),
            reg_b=np.zeros(6 * anchor_count),
        )


@dataclass
class RpnCache:
    feature: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray


def rpn_forward(feature: np.ndarray, p: RpnParams) -> Tuple[np.ndarray, np.ndarray, RpnCache]:
    """logits (A,d,h,w), offsets (6A,d,h,w). offset 채널 순서는 anchor a 의 k 번째 값이 a*6+k."""
    if feature.ndim != 4 or feature.shape[0] != p.channels:
        raise ShapeError(f"RPN 입력 {feature.shape} 이 head 채널 {p.channels} 과 맞지 않습니다.")
    pre = conv3d_forward(feature, p.conv_w, p.conv_b, stride=1, padding=1)
    hidden = relu(pre)
    logits = conv1x1(hidden, p.cls_w, p.cls_b)
    offsets = conv1x1(hidden, p.reg_w, p.reg_b)
    return logits, offsets, RpnCache(feature=feature, pre=pre, hidden=hidden)


def rpn_backward(
    cache: RpnCache, p: RpnParams, d_logits: np.ndarray, d_offsets: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    h = cache.hidden.reshape(cache.hidden.shape[0], -1)
    dl = d_logits.reshape(d_logits.shape[0], -1)
    do = d_offsets.reshape(d_offsets.shape[0], -1)
    grads = {
        "cls_w": dl @ h.T,
        "cls_b": dl.sum(axis=1),
        "reg_w": do @ h.T,
        "reg_b": do.sum(axis=1),
    }
    d_hidden = np.tensordot(p.cls_w.T, d_logits, axes=([1], [0])) + np.tensordot(p.reg_w.T, d_offsets, axes=([1], [0]))
    d_pre = relu_backward(cache.pre, d_hidden)
    d_feat, grads["conv_w"], grads["conv_b"] = conv3d_backward(cache.feature, p.conv_w, d_pre, stride=1, padding=1)
    return d_feat, grads


def rpn_head(feature: FeatureVolume, p: RpnParams) -> Tuple[np.ndarray, np.ndarray]:
    """sigmoid score (A,d,h,w) 와 offset (6A,d,h,w)."""
    logits, offsets, _ = rpn_forward(np.asarray(feature.values, dtype=np.float64), p)
    return sigmoid(logits), offsets


# ──────────────────────────────────────────────────────────────────────────────
# FPR: crop / upsample / pool
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class FprParams:
    fc1_w: np.ndarray  # (hidden, (C_s + C_d)·P³)
    fc1_b: np.ndarray
    fc2_w: np.ndarray  # (7, hidden)
    fc2_b: np.ndarray
    pool_grid: int = DEFAULT_POOL_GRID

    @classmethod
    def init(cls, in_channels: int, hidden: int, rng: np.random.Generator,
             pool_grid: int = DEFAULT_POOL_GRID) -> "FprParams":
        fan_in = in_channels * pool_grid ** 3
        return cls(
            fc1_w=he_init(rng, (hidden, fan_in), fan_in),
            fc1_b=np.zeros(hidden),
            fc2_w=rng.standard_normal((FPR_OUTPUTS, hidden)) * 0.01,
            fc2_b=np.zeros(FPR_OUTPUTS),
            pool_grid=pool_grid,
        )

    @classmethod
    def zeros(cls, in_channels: int, hidden: int, pool_grid: int = DEFAULT_POOL_GRID) -> "FprParams":
        return cls(
            fc1_w=np.zeros((hidden, in_channels * pool_grid ** 3)),
            fc1_b=np.zeros(hidden),
            fc2_w=np.zeros((FPR_OUTPUTS, hidden)),
            fc2_b=np.zeros(FPR_OUTPUTS),
            pool_grid=pool_grid,
        )


def crop_region(box: Box3D, stride: int, feature_dims: Sequence[int]) -> Optional[Tuple[slice, ...]]:
    """입력 voxel 좌표 box 를 stride 로 나눠 feature grid 의 slice 로. 비면 None."""
    lo, hi = box.bounds()
    out = []
    for a in range(3):
        start = max(int(math.floor(lo[a] / stride)), 0)
        stop = min(int(math.ceil(hi[a] / stride)), int(feature_dims[a]))
        if stop - start < 1:
            return None
        out.append(slice(start, stop))
    return tuple(out)


def upsample_nearest(values: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """(C,d,h,w) → (C,*dims). 목표 index i 는 원본 floor((i+0.5)·n/N) 에서 가져옵니다."""
    out = values
    for axis, target in enumerate(dims, start=1):
        n = out.shape[axis]
        idx = np.minimum(((np.arange(target) + 0.5) * n / target).astype(np.int64), n - 1)
        out = np.take(out, idx, axis=axis)
    return out


def _bins(n: int, grid: int) -> List[Tuple[int, int]]:
    return [(j * n // grid, -(-(j + 1) * n // grid)) for j in range(grid)]


def adaptive_max_pool(values: np.ndarray, grid: int) -> np.ndarray:
    """(C,d,h,w) → (C,grid,grid,grid). 축 길이가 grid 보다 작으면 bin 이 겹칩니다."""
    c = values.shape[0]
    out = np.empty((c, grid, grid, grid), dtype=values.dtype)
    bd, bh, bw = (_bins(n, grid) for n in values.shape[1:])
    for i, (d0, d1) in enumerate(bd):
        for j, (h0, h1) in enumerate(bh):
            for k, (w0, w1) in enumerate(bw):
                out[:, i, j, k] = values[:, d0:d1, h0:h1, w0:w1].max(axis=(1, 2, 3))
    return out


def roi_features(
    box: Box3D, shallow: np.ndarray, deep: np.ndarray,
    shallow_stride: int, deep_stride: int, grid: int = DEFAULT_POOL_GRID,
) -> Optional[np.ndarray]:
    """후보 하나의 pooled multi-scale feature (1-D). crop 이 비거나 box 가 1 voxel 미만이면 None."""
    if float(box.extent.min()) < 1.0:
        return None
    region_s = crop_region(box, shallow_stride, shallow.shape[1:])
    region_d = crop_region(box, deep_stride, deep.shape[1:])
    if region_s is None or region_d is None:
        return None
    crop_s = shallow[(slice(None),) + region_s]
    crop_d = upsample_nearest(deep[(slice(None),) + region_d], crop_s.shape[1:])
    fused = np.concatenate([crop_s, crop_d], axis=0)
    return adaptive_max_pool(fused, grid).reshape(-1)


# ──────────────────────────────────────────────────────────────────────────────
# FPR: FC layers
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class FprCache:
    inputs: np.ndarray  # (N, F)
    pre: np.ndarray     # (N, hidden)


def fpr_forward(inputs: np.ndarray, p: FprParams) -> Tuple[np.ndarray, FprCache]:
    """(N, F) → (N, 7)."""
    if inputs.ndim != 2 or inputs.shape[1] != p.fc1_w.shape[1]:
        raise ShapeError(f"FPR 입력 {inputs.shape} 이 fc1 {p.fc1_w.shape} 과 맞지 않습니다.")
    pre = inputs @ p.fc1_w.T + p.fc1_b
    out = relu(pre) @ p.fc2_w.T + p.fc2_b
    return out, FprCache(inputs=inputs, pre=pre)


def fpr_backward(cache: FprCache, p: FprParams, d_out: np.ndarray) -> Dict[str, np.ndarray]:
    hidden = relu(cache.pre)
    d_hidden = d_out @ p.fc2_w
    d_pre = relu_backward(cache.pre, d_hidden)
    return {
        "fc2_w": d_out.T @ hidden,
        "fc2_b": d_out.sum(axis=0),
        "fc1_w": d_pre.T @ cache.inputs,
        "fc1_b": d_pre.sum(axis=0),
    }


def collect_roi_features(
    candidates: Sequence[Detection], shallow: np.ndarray, deep: np.ndarray,
    shallow_stride: int, deep_stride: int, grid: int = DEFAULT_POOL_GRID,
) -> Tuple[List[int], np.ndarray]:
    """살아남은 후보의 index 와 feature 행렬. 퇴화 crop 은 경고 후 제외."""
    kept, rows = [], []
    for i, det in enumerate(candidates):
        feat = roi_features(det.box, shallow, deep, shallow_stride, deep_stride, grid)
        if feat is None:
            logger.warning(f"⚠️ FPR 후보 {i} 제외: crop 이 1 voxel 미만입니다 ({det.box.as_tuple()})")
            continue
        kept.append(i)
        rows.append(feat)
    width = (shallow.shape[0] + deep.shape[0]) * grid ** 3
    matrix = np.stack(rows) if rows else np.zeros((0, width))
    return kept, matrix


def fpr_head(
    candidates: Sequence[Detection],
    shallow_feat: FeatureVolume,
    deep_feat: FeatureVolume,
    p: FprParams,
    shallow_stride: int = 1,
    deep_stride: int = 2,
) -> List[Detection]:
    """후보마다 score 를 다시 매기고 box 를 보정합니다. 출력은 입력 순서를 따릅니다."""
    shallow = np.asarray(shallow_feat.values, dtype=np.float64)
    deep = np.asarray(deep_feat.values, dtype=np.float64)
    kept, matrix = collect_roi_features(candidates, shallow, deep, shallow_stride, deep_stride, p.pool_grid)
    if not kept:
        return []
    out, _ = fpr_forward(matrix, p)
    scores = sigmoid(out[:, 0])
    return [
        Detection(box=decode_box(candidates[i].box, out[row, 1:]), score=float(scores[row]))
        for row, i in enumerate(kept)
    ]
