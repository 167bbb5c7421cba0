"""LSSG residual block: Z = recover(GN(W_z · Y')) + X.

그룹마다 attention → W_z (1×1×1) → GN 을 적용한 뒤 depth 를 복원하고 residual 을 더합니다.
gn_scope="volume" 은 복원 후 전체 볼륨에 GN 을 한 번 적용하는 ablation 변형입니다.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np

from engine.attention import (
    AttentionKernel,
    AttentionWeights,
    GroupingMode,
    SliceGrouping,
    build_grouping,
    gather_array,
    group_attention_backward,
    group_attention_forward,
    scatter_arrays,
)
from engine.tensor import FeatureVolume, conv1x1, ensure_finite
from utils.errors import ConfigError, ShapeError, StateError

logger = logging.getLogger(__name__)

DEFAULT_GN_GROUPS = 4
DEFAULT_EPS = 1e-5


class GnScope(str, Enum):
    """GN 적용 위치"""
    GROUP = "group"    # slice group 마다 (recover 이전)
    VOLUME = "volume"  # recover 이후 전체 볼륨


# ──────────────────────────────────────────────────────────────────────────────
# Group Normalization
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class GroupNormStats:
    """forward 에서 쓴 norm-group 별 평균/분산 (backward 캐시)."""
    mean: np.ndarray
    var: np.ndarray
    gn_groups: int
    eps: float
    shape: Tuple[int, ...]


def _check_gn(channels: int, gamma: np.ndarray, beta: np.ndarray, gn_groups: int, eps: float) -> None:
    if gn_groups < 1 or channels % gn_groups != 0:
        raise ConfigError(f"gn_groups={gn_groups} 가 채널 수 {channels} 를 나누지 않습니다.")
    if eps <= 0:
        raise ConfigError(f"eps 는 양수여야 합니다: {eps}")
    if np.shape(gamma) != (channels,) or np.shape(beta) != (channels,):
        raise ShapeError(f"gamma/beta shape 은 ({channels},) 이어야 합니다.")


def gn_forward(
    values: np.ndarray, gamma: np.ndarray, beta: np.ndarray, gn_groups: int, eps: float = DEFAULT_EPS
) -> Tuple[np.ndarray, GroupNormStats]:
    c = values.shape[0]
    _check_gn(c, gamma, beta, gn_groups, eps)
    grouped = values.reshape(gn_groups, -1)
    mean = grouped.mean(axis=1)
    var = grouped.var(axis=1)
    xhat = (grouped - mean[:, None]) / np.sqrt(var + eps)[:, None]
    xhat = xhat.reshape(values.shape)
    out = xhat * gamma[:, None, None, None] + beta[:, None, None, None]
    stats = GroupNormStats(mean=mean, var=var, gn_groups=gn_groups, eps=eps, shape=tuple(values.shape))
    return out, stats


def gn_backward(
    values: np.ndarray, gamma: np.ndarray, stats: GroupNormStats, dy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dx, dgamma, dbeta)"""
    if tuple(values.shape) != stats.shape or dy.shape != values.shape:
        raise StateError(f"GN 캐시 shape {stats.shape} 과 입력 {values.shape}/grad {dy.shape} 이 다릅니다.")
    k = stats.gn_groups
    inv_std = 1.0 / np.sqrt(stats.var + stats.eps)
    xhat = ((values.reshape(k, -1) - stats.mean[:, None]) * inv_std[:, None]).reshape(values.shape)
    spatial = (1, 2, 3)
    dgamma = (dy * xhat).sum(axis=spatial)
    dbeta = dy.sum(axis=spatial)
    dxhat = (dy * gamma[:, None, None, None]).reshape(k, -1)
    xh = xhat.reshape(k, -1)
    n = xh.shape[1]
    dx = (inv_std[:, None] / n) * (
        n * dxhat - dxhat.sum(axis=1, keepdims=True) - xh * (dxhat * xh).sum(axis=1, keepdims=True)
    )
    return dx.reshape(values.shape), dgamma, dbeta


def group_norm(
    x: FeatureVolume, gamma, beta, gn_groups: int, eps: float = DEFAULT_EPS
) -> Tuple[FeatureVolume, GroupNormStats]:
    """채널을 gn_groups 묶음으로 나눠 (채널×D×H×W) 단위로 정규화 후 채널별 affine."""
    out, stats = gn_forward(x.values, np.asarray(gamma, dtype=x.dtype), np.asarray(beta, dtype=x.dtype), gn_groups, eps)
    return x.with_values(out), stats


def group_norm_backward(
    x: FeatureVolume, gamma, stats: GroupNormStats, grad_out: FeatureVolume
) -> Tuple[FeatureVolume, np.ndarray, np.ndarray]:
    dx, dgamma, dbeta = gn_backward(x.values, np.asarray(gamma, dtype=x.dtype), stats, grad_out.values)
    return x.with_values(dx), dgamma, dbeta


# ──────────────────────────────────────────────────────────────────────────────
# Block parameters
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class LssgBlockParams:
    """LSSG block 학습 파라미터 + grouping 설정."""

    attn: AttentionWeights
    w_z: np.ndarray
    gn_gamma: np.ndarray
    gn_beta: np.ndarray
    gn_groups: int = DEFAULT_GN_GROUPS
    grouping_mode: GroupingMode = GroupingMode.SHORT
    group_count: int = 4
    kernel: AttentionKernel = AttentionKernel.COMPACT
    gn_scope: GnScope = GnScope.GROUP
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        c = self.attn.channels
        inner = self.attn.inner_channels
        for name in ("w_z", "gn_gamma", "gn_beta"):
            arr = np.array(getattr(self, name), dtype=self.attn.w_theta.dtype, copy=True)
            ensure_finite(arr, name)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w_z.shape != (c, inner):
            raise ShapeError(f"w_z shape {self.w_z.shape} 는 ({c}, {inner}) 이어야 합니다.")
        if self.group_count < 1:
            raise ConfigError(f"group_count 는 1 이상이어야 합니다: {self.group_count}")
        object.__setattr__(self, "grouping_mode", GroupingMode.parse(self.grouping_mode))
        object.__setattr__(self, "kernel", AttentionKernel.parse(self.kernel))
        object.__setattr__(self, "gn_scope", GnScope(self.gn_scope))
        _check_gn(c, self.gn_gamma, self.gn_beta, self.gn_groups, self.eps)

    @property
    def channels(self) -> int:
        return self.attn.channels

    def grouping(self, depth: int) -> SliceGrouping:
        return build_grouping(self.grouping_mode, depth, self.group_count)

    @classmethod
    def init(
        cls,
        channels: int,
        rng: np.random.Generator,
        grouping_mode=GroupingMode.SHORT,
        group_count: int = 4,
        kernel=AttentionKernel.COMPACT,
        gn_groups: Optional[int] = None,
        inner_channels: Optional[int] = None,
        gamma_init: float = 0.1,
        gn_scope=GnScope.GROUP,
        dtype=np.float64,
    ) -> "LssgBlockParams":
        """gamma 를 작게 두어 학습 초기에 block 이 거의 identity 로 동작합니다."""
        attn = AttentionWeights.init(channels, rng, inner_channels=inner_channels, dtype=dtype)
        inner = attn.inner_channels
        w_z = (rng.standard_normal((channels, inner)) / np.sqrt(inner)).astype(dtype)
        if gn_groups is None:
            gn_groups = math.gcd(DEFAULT_GN_GROUPS, channels)
        return cls(
            attn=attn,
            w_z=w_z,
            gn_gamma=np.full(channels, gamma_init, dtype=dtype),
            gn_beta=np.zeros(channels, dtype=dtype),
            gn_groups=gn_groups,
            grouping_mode=grouping_mode,
            group_count=group_count,
            kernel=kernel,
            gn_scope=gn_scope,
        )

    def arrays(self) -> Dict[str, np.ndarray]:
        out = dict(self.attn.as_dict())
        out.update(w_z=self.w_z, gn_gamma=self.gn_gamma, gn_beta=self.gn_beta)
        return out

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "LssgBlockParams":
        """같은 설정에 배열만 교체한 새 파라미터 (gradient 컨테이너로도 사용)."""
        attn = AttentionWeights(arrays["w_theta"], arrays["w_phi"], arrays["w_g"])
        return replace(self, attn=attn, w_z=arrays["w_z"], gn_gamma=arrays["gn_gamma"], gn_beta=arrays["gn_beta"])


# ──────────────────────────────────────────────────────────────────────────────
# Block forward / backward (ndarray)
# ──────────────────────────────────────────────────────────────────────────────
@dataclass(frozen=True, eq=False)
class BlockStats:
    """lssg_block_forward 가 남기는 GN 통계. scope=group 이면 slice group 마다 하나."""
    gn: Tuple[GroupNormStats, ...]
    scope: GnScope
    group_count: int
    shape: Tuple[int, ...]


@dataclass
class BlockCache:
    grouping: SliceGrouping
    kernel_caches: List = field(default_factory=list)
    projected: List[np.ndarray] = field(default_factory=list)
    attended: List[np.ndarray] = field(default_factory=list)
    stats: Optional[BlockStats] = None


def block_forward_arrays(values: np.ndarray, p: LssgBlockParams) -> Tuple[np.ndarray, BlockCache]:
    if values.shape[0] != p.channels:
        raise ShapeError(f"입력 채널 {values.shape[0]} 이 block 채널 {p.channels} 과 다릅니다.")
    grouping = p.grouping(values.shape[1])
    cache = BlockCache(grouping=grouping)
    gamma, beta = p.gn_gamma, p.gn_beta

    attended = []
    for gi in range(grouping.group_count):
        y, kc = group_attention_forward(gather_array(values, grouping, gi), p.attn, p.kernel)
        cache.kernel_caches.append(kc)
        attended.append(y)

    gn_stats = []
    if p.gn_scope is GnScope.GROUP:
        normed = []
        cache.attended.extend(attended)
        for y in attended:
            proj = conv1x1(y, p.w_z)
            out, st = gn_forward(proj, gamma, beta, p.gn_groups, p.eps)
            cache.projected.append(proj)
            normed.append(out)
            gn_stats.append(st)
        branch = scatter_arrays(normed, grouping)
    else:
        y_full = scatter_arrays(attended, grouping)
        proj = conv1x1(y_full, p.w_z)
        branch, st = gn_forward(proj, gamma, beta, p.gn_groups, p.eps)
        cache.attended.append(y_full)
        cache.projected.append(proj)
        gn_stats.append(st)

    cache.stats = BlockStats(
        gn=tuple(gn_stats), scope=p.gn_scope, group_count=grouping.group_count, shape=tuple(values.shape)
    )
    return branch + values, cache


def block_backward_arrays(
    cache: BlockCache, p: LssgBlockParams, dz: np.ndarray
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    grouping = cache.grouping
    gamma = p.gn_gamma
    grads = {name: np.zeros_like(arr) for name, arr in p.arrays().items()}
    dx = dz.copy()  # residual

    if p.gn_scope is GnScope.GROUP:
        d_attended = []
        for gi in range(grouping.group_count):
            d_norm = gather_array(dz, grouping, gi)
            d_proj, dgam, dbet = gn_backward(cache.projected[gi], gamma, cache.stats.gn[gi], d_norm)
            grads["gn_gamma"] += dgam
            grads["gn_beta"] += dbet
            y = cache.attended[gi]
            grads["w_z"] += d_proj.reshape(d_proj.shape[0], -1) @ y.reshape(y.shape[0], -1).T
            d_attended.append(np.tensordot(p.w_z.T, d_proj, axes=([1], [0])))
    else:
        d_proj, dgam, dbet = gn_backward(cache.projected[0], gamma, cache.stats.gn[0], dz)
        grads["gn_gamma"] += dgam
        grads["gn_beta"] += dbet
        y_full = cache.attended[0]
        grads["w_z"] += d_proj.reshape(d_proj.shape[0], -1) @ y_full.reshape(y_full.shape[0], -1).T
        d_y_full = np.tensordot(p.w_z.T, d_proj, axes=([1], [0]))
        d_attended = [gather_array(d_y_full, grouping, gi) for gi in range(grouping.group_count)]

    dx_groups = []
    for gi, kc in enumerate(cache.kernel_caches):
        dxs, g_attn = group_attention_backward(kc, p.attn, d_attended[gi])
        dx_groups.append(dxs)
        for name, val in g_attn.items():
            grads[name] += val
    dx += scatter_arrays(dx_groups, grouping)
    return dx, grads


# ──────────────────────────────────────────────────────────────────────────────
# 공개 연산
# ──────────────────────────────────────────────────────────────────────────────
def lssg_block_forward_with_stats(x: FeatureVolume, p: LssgBlockParams) -> Tuple[FeatureVolume, BlockStats]:
    z, cache = block_forward_arrays(x.values, p)
    return x.with_values(z), cache.stats


def lssg_block_forward(x: FeatureVolume, p: LssgBlockParams) -> FeatureVolume:
    return lssg_block_forward_with_stats(x, p)[0]


def _stats_match(expected: BlockStats, actual: BlockStats) -> bool:
    if expected.scope != actual.scope or expected.group_count != actual.group_count:
        return False
    if expected.shape != actual.shape or len(expected.gn) != len(actual.gn):
        return False
    return all(
        np.array_equal(a.mean, b.mean) and np.array_equal(a.var, b.var)
        for a, b in zip(expected.gn, actual.gn)
    )


def lssg_block_backward(
    x: FeatureVolume, p: LssgBlockParams, stats: BlockStats, grad_out: FeatureVolume
) -> Tuple[FeatureVolume, LssgBlockParams]:
    """residual → GN → W_z → attention → grouping 순으로 역전파.

    forward 중간값은 (x, p) 로 다시 계산하고, 다시 얻은 GN 통계가 stats 와 다르면
    StateError 를 냅니다.
    """
    if grad_out.dims != x.dims:
        raise ShapeError(f"grad_out shape {grad_out.dims} 가 입력 shape {x.dims} 과 다릅니다.")
    _, cache = block_forward_arrays(x.values, p)
    if not _stats_match(stats, cache.stats):
        raise StateError("전달된 GN 통계가 현재 (x, params) 의 forward 결과와 맞지 않습니다 (stale stats).")
    dx, grads = block_backward_arrays(cache, p, grad_out.values)
    return x.with_values(dx), p.with_arrays(grads)
