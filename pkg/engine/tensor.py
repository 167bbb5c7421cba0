"""3-D feature volume 기본 자료형과 attention 수식에 필요한 최소 연산.

레이아웃은 C-major 후 D, H, W 순서로 고정합니다. depth grouping 이 두 번째 축에 대한
gather 가 되므로 SliceGrouping 은 순수한 index permutation 으로 표현됩니다.

정밀도 정책:
    - 검증(gradcheck / oracle) 경로: float64
    - benchmark 경로: float32
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from utils.errors import InputError, ShapeError

logger = logging.getLogger(__name__)

VERIFY_DTYPE = np.float64
BENCH_DTYPE = np.float32

Dims = Tuple[int, int, int, int]


def ensure_finite(values: np.ndarray, what: str = "values") -> None:
    """NaN/Inf 가 섞여 있으면 InputError 로 즉시 실패."""
    if not np.all(np.isfinite(values)):
        raise InputError(f"{what} 에 NaN/Inf 값이 포함되어 있습니다.")


def _resolve_dtype(values: np.ndarray, dtype) -> np.dtype:
    if dtype is not None:
        return np.dtype(dtype)
    if values.dtype == np.float32:
        return np.dtype(np.float32)
    return np.dtype(np.float64)


@dataclass(frozen=True)
class FeatureVolume:
    """C×D×H×W 실수 볼륨 (값 의미론, 읽기 전용 버퍼)."""

    values: np.ndarray

    def __init__(self, values, dtype=None):
        arr = np.asarray(values)
        if arr.ndim != 4:
            raise ShapeError(f"FeatureVolume 은 rank-4 (C,D,H,W) 여야 합니다. 현재 shape={arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"모든 차원은 1 이상이어야 합니다. 현재 shape={arr.shape}")
        arr = np.array(arr, dtype=_resolve_dtype(arr, dtype), order="C", copy=True)
        ensure_finite(arr, "FeatureVolume")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    # ── 차원 정보 ─────────────────────────────────────────────
    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def depth(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[2]

    @property
    def width(self) -> int:
        return self.values.shape[3]

    @property
    def dims(self) -> Dims:
        return tuple(self.values.shape)  # type: ignore[return-value]

    @property
    def size(self) -> int:
        return int(self.values.size)

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    # ── 생성 헬퍼 ─────────────────────────────────────────────
    @classmethod
    def zeros(cls, dims: Dims, dtype=VERIFY_DTYPE) -> "FeatureVolume":
        return cls(np.zeros(dims, dtype=dtype))

    @classmethod
    def random(cls, dims: Dims, rng: np.random.Generator, dtype=VERIFY_DTYPE) -> "FeatureVolume":
        return cls(rng.standard_normal(dims).astype(dtype))

    def with_values(self, values: np.ndarray) -> "FeatureVolume":
        """같은 dtype 으로 새 볼륨을 만듭니다."""
        return FeatureVolume(values, dtype=self.dtype)

    def copy_array(self) -> np.ndarray:
        """쓰기 가능한 복사본."""
        return np.array(self.values, copy=True)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureVolume):
            return NotImplemented
        return self.dims == other.dims and bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.dims, self.values.tobytes()))


@dataclass(frozen=True)
class FlatEmbedding:
    """vec(·) 결과. 길이 L 의 1-D 실수 배열."""

    values: np.ndarray

    def __init__(self, values, dtype=None):
        arr = np.asarray(values)
        if arr.ndim != 1:
            raise ShapeError(f"FlatEmbedding 은 1-D 여야 합니다. 현재 shape={arr.shape}")
        arr = np.array(arr, dtype=_resolve_dtype(arr, dtype), copy=True)
        ensure_finite(arr, "FlatEmbedding")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def length(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FlatEmbedding):
            return NotImplemented
        return bool(np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash(self.values.tobytes())


# ──────────────────────────────────────────────────────────────────────────────
# 1×1×1 convolution
# ──────────────────────────────────────────────────────────────────────────────
def conv1x1(values: np.ndarray, w: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """ndarray 버전 pointwise convolution. (C_in,D,H,W) → (C_out,D,H,W)."""
    w = np.asarray(w)
    if w.ndim != 2 or w.shape[1] != values.shape[0]:
        raise ShapeError(
            f"가중치 shape {w.shape} 와 입력 채널 {values.shape[0]} 이 맞지 않습니다."
        )
    out = np.tensordot(w.astype(values.dtype, copy=False), values, axes=([1], [0]))
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (w.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} 가 출력 채널 {w.shape[0]} 과 맞지 않습니다.")
        out = out + bias.astype(values.dtype, copy=False)[:, None, None, None]
    return out


def pointwise_conv(x: FeatureVolume, w: np.ndarray, bias: Optional[np.ndarray] = None) -> FeatureVolume:
    """각 voxel 의 채널 벡터에 w 를 곱하는 1×1×1 convolution."""
    return x.with_values(conv1x1(x.values, w, bias))


# ──────────────────────────────────────────────────────────────────────────────
# vec / devec
# ──────────────────────────────────────────────────────────────────────────────
def vectorize(x: FeatureVolume) -> FlatEmbedding:
    """C-major → D → H → W 순서로 펼칩니다. (c,d,h,w) → ((c·D + d)·H + h)·W + w."""
    return FlatEmbedding(x.values.reshape(-1), dtype=x.dtype)


def devectorize(e: FlatEmbedding, dims: Dims) -> FeatureVolume:
    dims = tuple(int(v) for v in dims)
    if len(dims) != 4 or int(np.prod(dims)) != e.length:
        raise ShapeError(f"dims {dims} 의 원소 수가 embedding 길이 {e.length} 와 다릅니다.")
    return FeatureVolume(e.values.reshape(dims), dtype=e.values.dtype)


# ──────────────────────────────────────────────────────────────────────────────
# 1-D 산술
# ──────────────────────────────────────────────────────────────────────────────
def _check_same_length(a: FlatEmbedding, b: FlatEmbedding) -> None:
    if a.length != b.length:
        raise ShapeError(f"길이가 다릅니다: {a.length} vs {b.length}")


def reduce_dot(a: np.ndarray, b: np.ndarray) -> float:
    """원소곱 후 numpy pairwise 합산 (np.add.reduce, 연속 1-D 버퍼 기준 고정 트리).

    BLAS 를 거치지 않으므로 같은 입력이면 실행마다 비트 단위로 같은 결과가 나옵니다.
    """
    prod = np.multiply(a.reshape(-1), b.reshape(-1))
    return float(np.add.reduce(prod))


def dot(a: FlatEmbedding, b: FlatEmbedding) -> float:
    _check_same_length(a, b)
    return reduce_dot(a.values, b.values)


def scale(a: FlatEmbedding, s: float) -> FlatEmbedding:
    return FlatEmbedding(a.values * a.values.dtype.type(s))


def add(a: FlatEmbedding, b: FlatEmbedding) -> FlatEmbedding:
    _check_same_length(a, b)
    return FlatEmbedding(a.values + b.values)
