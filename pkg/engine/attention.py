"""Non-local 계열 attention 과 long/short slice grouping.

    - nonlocal_original      : 위치 간 dot-product affinity (DHW × DHW), DHW 로 정규화
    - compact_nonlocal_naive : 채널을 위치에 합친 (CDHW × CDHW) affinity, 크기 상한이 있는 oracle
    - compact_nonlocal_fast  : dot-product kernel 의 결합법칙 rewrite, Y = (<vecφ, vecg>/CDHW) · θ(X)
    - lssg_forward/backward  : SSG(연속 블록) / LSG(stride-G) 그룹마다 위 연산을 적용 후 depth 복원

f 에는 softmax 를 쓰지 않고 짝지어진 원소 수로 나눕니다 (원본 non-local 의 dot-product 관례).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.tensor import FeatureVolume, conv1x1, ensure_finite, reduce_dot
from utils.config import get_oracle_cap
from utils.errors import CapacityError, ConfigError, PartitionError, ShapeError

logger = logging.getLogger(__name__)


class GroupingMode(str, Enum):
    """slice grouping 방식"""
    SHORT = "ssg"  # 인접 depth 를 연속 블록으로
    LONG = "lsg"   # 간격 G 로 샘플링

    @classmethod
    def parse(cls, value) -> "GroupingMode":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"ssg": cls.SHORT, "short": cls.SHORT, "s": cls.SHORT,
                   "lsg": cls.LONG, "long": cls.LONG, "l": cls.LONG}
        if key not in aliases:
            raise ConfigError(f"알 수 없는 grouping mode: {value!r} (ssg|lsg)")
        return aliases[key]


class AttentionKernel(str, Enum):
    """그룹 내부에서 쓰는 non-local 형태"""
    COMPACT = "cnl"   # 채널-위치 결합 (CNL-LSSG)
    ORIGINAL = "nl"   # 위치 간 affinity (NL-LSSG)

    @classmethod
    def parse(cls, value) -> "AttentionKernel":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ConfigError(f"알 수 없는 kernel: {value!r} (nl|cnl)") from None


# ──────────────────────────────────────────────────────────────────────────────
# 가중치
# ──────────────────────────────────────────────────────────────────────────────
def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    out = np.array(arr, dtype=np.float32 if arr.dtype == np.float32 else np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class AttentionWeights:
    """W_θ, W_φ, W_g. 기본은 C×C 정사각, channel-reduction 시 C_inner×C."""

    w_theta: np.ndarray
    w_phi: np.ndarray
    w_g: np.ndarray

    def __post_init__(self):
        mats = {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g}
        shapes = set()
        for name, mat in mats.items():
            mat = np.asarray(mat)
            if mat.ndim != 2:
                raise ShapeError(f"{name} 는 2-D 행렬이어야 합니다. shape={mat.shape}")
            ensure_finite(mat, name)
            shapes.add(mat.shape)
            object.__setattr__(self, name, _frozen(mat))
        if len(shapes) != 1:
            raise ShapeError(f"W_θ, W_φ, W_g 의 shape 이 서로 다릅니다: {sorted(shapes)}")
        inner, channels = next(iter(shapes))
        if inner > channels:
            raise ShapeError(f"inner_channels({inner}) 는 channels({channels}) 이하여야 합니다.")

    @property
    def channels(self) -> int:
        return self.w_theta.shape[1]

    @property
    def inner_channels(self) -> int:
        return self.w_theta.shape[0]

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        inner_channels: Optional[int] = None,
        dtype=np.float64,
    ) -> "AttentionWeights":
        """N(0, 1/C) 초기화. inner_channels=None 이면 reduction 없이 C×C."""
        inner = channels if inner_channels is None else int(inner_channels)
        std = 1.0 / np.sqrt(channels)
        mats = [(rng.standard_normal((inner, channels)) * std).astype(dtype) for _ in range(3)]
        return cls(*mats)

    @classmethod
    def zeros_like(cls, other: "AttentionWeights") -> "AttentionWeights":
        z = np.zeros_like(other.w_theta)
        return cls(z, z, z)

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {"w_theta": self.w_theta, "w_phi": self.w_phi, "w_g": self.w_g}


# ──────────────────────────────────────────────────────────────────────────────
# Slice grouping
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True)
class SliceGrouping:
    """D 개의 depth 를 G 개 그룹으로 나누는 명시적 permutation."""

    mode: GroupingMode
    group_count: int
    depth: int
    assignment: Tuple[Tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.assignment) != self.group_count:
            raise PartitionError(
                f"그룹 수 {len(self.assignment)} 가 group_count {self.group_count} 와 다릅니다."
            )
        flat = [i for group in self.assignment for i in group]
        if sorted(flat) != list(range(self.depth)):
            raise PartitionError(f"assignment 가 0..{self.depth - 1} 의 분할이 아닙니다: {self.assignment}")
        sizes = {len(group) for group in self.assignment}
        if len(sizes) != 1:
            raise PartitionError(f"그룹 크기가 균일하지 않습니다: {sorted(sizes)}")

    @property
    def depth_per_group(self) -> int:
        return self.depth // self.group_count

    def indices(self, g: int) -> np.ndarray:
        if not 0 <= g < self.group_count:
            raise PartitionError(f"그룹 인덱스 {g} 가 범위 [0, {self.group_count}) 밖입니다.")
        return np.asarray(self.assignment[g], dtype=np.intp)


def build_grouping(mode, depth: int, group_count: int) -> SliceGrouping:
    """SSG: [g·D', (g+1)·D'-1] / LSG: {g, g+G, g+2G, ...}."""
    mode = GroupingMode.parse(mode)
    if group_count < 1:
        raise ConfigError(f"group_count 는 1 이상이어야 합니다: {group_count}")
    if depth < 1:
        raise ConfigError(f"depth 는 1 이상이어야 합니다: {depth}")
    if depth % group_count != 0:
        raise ConfigError(
            f"G={group_count} 가 D={depth} 를 나누어 떨어지게 하지 않습니다 "
            f"(G must divide D; divisibility required, 나머지 depth 는 지원하지 않습니다)."
        )
    per = depth // group_count
    if mode is GroupingMode.SHORT:
        assignment = tuple(tuple(range(g * per, (g + 1) * per)) for g in range(group_count))
    else:
        assignment = tuple(tuple(range(g, depth, group_count)) for g in range(group_count))
    return SliceGrouping(mode=mode, group_count=group_count, depth=depth, assignment=assignment)


def _check_depth(values: np.ndarray, grouping: SliceGrouping) -> None:
    if values.shape[1] != grouping.depth:
        raise ShapeError(f"볼륨 depth {values.shape[1]} 와 grouping depth {grouping.depth} 가 다릅니다.")


def gather_array(values: np.ndarray, grouping: SliceGrouping, g: int) -> np.ndarray:
    _check_depth(values, grouping)
    return values[:, grouping.indices(g)]


def scatter_arrays(groups: Sequence[np.ndarray], grouping: SliceGrouping) -> np.ndarray:
    if len(groups) != grouping.group_count:
        raise PartitionError(
            f"그룹 {len(groups)} 개로는 {grouping.group_count} 개 그룹의 depth 를 모두 덮을 수 없습니다."
        )
    first = groups[0]
    expected = (first.shape[0], grouping.depth_per_group) + tuple(first.shape[2:])
    out = np.empty((first.shape[0], grouping.depth) + tuple(first.shape[2:]), dtype=first.dtype)
    for g, sub in enumerate(groups):
        if tuple(sub.shape) != expected:
            raise PartitionError(f"그룹 {g} shape {sub.shape} 가 기대값 {expected} 과 다릅니다.")
        out[:, grouping.indices(g)] = sub
    return out


def gather_group(x: FeatureVolume, grouping: SliceGrouping, g: int) -> FeatureVolume:
    return x.with_values(gather_array(x.values, grouping, g))


def scatter_groups(groups: Sequence[FeatureVolume], grouping: SliceGrouping) -> FeatureVolume:
    """recover: 각 그룹의 slice 를 원래 depth 위치로 되돌립니다."""
    if not groups:
        raise PartitionError(f"빈 그룹 목록으로는 depth {grouping.depth} 를 복원할 수 없습니다.")
    return groups[0].with_values(scatter_arrays([grp.values for grp in groups], grouping))


# ──────────────────────────────────────────────────────────────────────────────
# 그룹 단위 커널 (ndarray)
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class _KernelCache:
    x: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    g: np.ndarray
    kernel: AttentionKernel
    s: float = 0.0
    a: Optional[np.ndarray] = None


def _check_weights(values: np.ndarray, w: AttentionWeights) -> None:
    if values.shape[0] != w.channels:
        raise ShapeError(f"입력 채널 {values.shape[0]} 과 가중치 채널 {w.channels} 이 다릅니다.")


def _compact_fast(theta: np.ndarray, phi: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, float]:
    s = reduce_dot(phi, g) / phi.size
    return s * theta, s


def _original_fast(theta: np.ndarray, phi: np.ndarray, g: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    c = theta.shape[0]
    n = theta[0].size
    t, p, gm = theta.reshape(c, n), phi.reshape(c, n), g.reshape(c, n)
    a = (gm @ p.T) / n
    return (a @ t).reshape(theta.shape), a


def _original_pairwise(theta: np.ndarray, phi: np.ndarray, g: np.ndarray) -> np.ndarray:
    c = theta.shape[0]
    n = theta[0].size
    t, p, gm = theta.reshape(c, n), phi.reshape(c, n), g.reshape(c, n)
    affinity = (t.T @ p) / n
    return (gm @ affinity.T).reshape(theta.shape)


def group_attention_forward(
    xs: np.ndarray,
    w: AttentionWeights,
    kernel: AttentionKernel = AttentionKernel.COMPACT,
) -> Tuple[np.ndarray, _KernelCache]:
    """(C, D', H, W) 부분 볼륨 하나에 대한 attention."""
    _check_weights(xs, w)
    theta = conv1x1(xs, w.w_theta)
    phi = conv1x1(xs, w.w_phi)
    g = conv1x1(xs, w.w_g)
    cache = _KernelCache(x=xs, theta=theta, phi=phi, g=g, kernel=kernel)
    if kernel is AttentionKernel.COMPACT:
        y, cache.s = _compact_fast(theta, phi, g)
    else:
        y, cache.a = _original_fast(theta, phi, g)
    return y, cache


def group_attention_backward(
    cache: _KernelCache, w: AttentionWeights, dy: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """group_attention_forward 의 해석적 gradient. (dx, {w_theta, w_phi, w_g})"""
    theta, phi, g = cache.theta, cache.phi, cache.g
    if dy.shape != theta.shape:
        raise ShapeError(f"grad shape {dy.shape} 가 출력 shape {theta.shape} 과 다릅니다.")
    if cache.kernel is AttentionKernel.COMPACT:
        m = phi.size
        d_theta = cache.s * dy
        ds = reduce_dot(dy, theta)
        d_phi = (ds / m) * g
        d_g = (ds / m) * phi
    else:
        c = theta.shape[0]
        n = theta[0].size
        t, p, gm = theta.reshape(c, n), phi.reshape(c, n), g.reshape(c, n)
        dy_m = dy.reshape(c, n)
        d_a = dy_m @ t.T
        d_theta = (cache.a.T @ dy_m).reshape(theta.shape)
        d_g = ((d_a @ p) / n).reshape(g.shape)
        d_phi = ((d_a.T @ gm) / n).reshape(phi.shape)

    cin = cache.x.shape[0]
    x_m = cache.x.reshape(cin, -1)
    grads = {}
    dx = np.zeros_like(cache.x)
    for name, d_emb, mat in (("w_theta", d_theta, w.w_theta), ("w_phi", d_phi, w.w_phi), ("w_g", d_g, w.w_g)):
        d_m = d_emb.reshape(d_emb.shape[0], -1)
        grads[name] = d_m @ x_m.T
        dx += np.tensordot(mat.T, d_emb, axes=([1], [0]))
    return dx, grads


# ──────────────────────────────────────────────────────────────────────────────
# 공개 연산
# ──────────────────────────────────────────────────────────────────────────────
def nonlocal_original(x: FeatureVolume, w: AttentionWeights, pairwise: bool = False) -> FeatureVolume:
    """Y = g(X) · (θᵀφ / DHW)ᵀ.

    pairwise=True 이면 (DHW × DHW) affinity 를 실제로 만들고, 기본값은 (gφᵀ/N)θ 결합 순서로
    C×C 중간값만 만듭니다. dot-product kernel 에서는 두 경로가 수학적으로 같습니다.
    """
    _check_weights(x.values, w)
    theta = conv1x1(x.values, w.w_theta)
    phi = conv1x1(x.values, w.w_phi)
    g = conv1x1(x.values, w.w_g)
    if pairwise:
        y = _original_pairwise(theta, phi, g)
    else:
        y, _ = _original_fast(theta, phi, g)
    return x.with_values(y)


def compact_nonlocal_naive(x: FeatureVolume, w: AttentionWeights, cap: Optional[int] = None) -> FeatureVolume:
    """(CDHW × CDHW) pairwise 행렬을 실제로 만드는 oracle."""
    _check_weights(x.values, w)
    cap = get_oracle_cap() if cap is None else int(cap)
    m = w.inner_channels * x.depth * x.height * x.width
    if m > cap:
        raise CapacityError(f"CDHW={m} 가 naive 경로 상한 {cap} 을 넘습니다 (LSSG_ORACLE_CAP 로 조정).")
    v_theta = conv1x1(x.values, w.w_theta).reshape(-1)
    v_phi = conv1x1(x.values, w.w_phi).reshape(-1)
    v_g = conv1x1(x.values, w.w_g).reshape(-1)
    affinity = np.outer(v_theta, v_phi) / m
    y = affinity @ v_g
    return x.with_values(y.reshape((w.inner_channels,) + x.dims[1:]))


def compact_nonlocal_fast(x: FeatureVolume, w: AttentionWeights) -> FeatureVolume:
    """s = <vecφ, vecg>/CDHW, Y = s·θ(X). O(CDHW)."""
    y, _ = group_attention_forward(x.values, w, AttentionKernel.COMPACT)
    return x.with_values(y)


def lssg_forward(
    x: FeatureVolume,
    w: AttentionWeights,
    grouping: SliceGrouping,
    kernel=AttentionKernel.COMPACT,
) -> FeatureVolume:
    """그룹마다 gather → attention (그룹별 정규화) → scatter."""
    kernel = AttentionKernel.parse(kernel)
    _check_depth(x.values, grouping)
    outputs: List[np.ndarray] = []
    for gi in range(grouping.group_count):
        y, _ = group_attention_forward(gather_array(x.values, grouping, gi), w, kernel)
        outputs.append(y)
    return x.with_values(scatter_arrays(outputs, grouping))


def lssg_backward(
    x: FeatureVolume,
    w: AttentionWeights,
    grouping: SliceGrouping,
    grad_out: FeatureVolume,
    kernel=AttentionKernel.COMPACT,
) -> Tuple[FeatureVolume, AttentionWeights]:
    """lssg_forward 의 해석적 gradient (grad_x, grad_w)."""
    kernel = AttentionKernel.parse(kernel)
    _check_depth(x.values, grouping)
    expected = (w.inner_channels,) + x.dims[1:]
    if grad_out.dims != expected:
        raise ShapeError(f"grad_out shape {grad_out.dims} 가 forward 출력 shape {expected} 과 다릅니다.")

    dx_groups: List[np.ndarray] = []
    totals = {name: np.zeros_like(mat) for name, mat in w.as_dict().items()}
    for gi in range(grouping.group_count):
        _, cache = group_attention_forward(gather_array(x.values, grouping, gi), w, kernel)
        dx, grads = group_attention_backward(cache, w, gather_array(grad_out.values, grouping, gi))
        dx_groups.append(dx)
        for name in totals:
            totals[name] += grads[name]
    grad_x = x.with_values(scatter_arrays(dx_groups, grouping))
    return grad_x, AttentionWeights(**totals)
