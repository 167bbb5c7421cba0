"""중앙 차분 gradient 검사.

loss 는 출력과 고정 난수 텐서 R 의 내적 <R, f(·)> 입니다. 파라미터 묶음마다 일부 원소를 골라
해석적 gradient 와 수치 gradient 를 비교하고, 상대 오차는 ‖a − n‖ / (‖a‖ + ‖n‖) 로 잽니다.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from engine.attention import AttentionKernel, AttentionWeights, GroupingMode, build_grouping, lssg_backward, lssg_forward
from engine.blocks import GnScope, LssgBlockParams, group_norm, group_norm_backward, lssg_block_backward, lssg_block_forward_with_stats
from engine.tensor import FeatureVolume, reduce_dot
from network.config import make_layout
from network.toynet import FPR_KEYS, ToyNetParams, build_network, network_backward, network_forward

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-6
E2E_TOLERANCE = 1e-4
FD_STEP = 1e-5
OP_SAMPLES = 12
E2E_SAMPLES = 3


@dataclass(frozen=True)
class GradcheckRecord:
    suite: str
    param: str
    rel_error: float
    tolerance: float
    entries: int

    @property
    def passed(self) -> bool:
        return self.rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    diff = float(np.linalg.norm(a - n))
    scale = float(np.linalg.norm(a) + np.linalg.norm(n))
    if scale < 1e-300:
        return diff
    return diff / scale


def _sample_indices(rng: np.random.Generator, shape: Tuple[int, ...], k: int) -> List[Tuple[int, ...]]:
    size = int(np.prod(shape))
    flat = np.arange(size) if size <= k else np.sort(rng.choice(size, size=k, replace=False))
    return [tuple(int(v) for v in np.unravel_index(i, shape)) for i in flat]


def check_arrays(
    suite: str,
    loss_fn: Callable[[], float],
    arrays: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    rng: np.random.Generator,
    tolerance: float,
    samples: int,
    corrupt: Optional[str] = None,
) -> List[GradcheckRecord]:
    """arrays 를 제자리에서 흔들어 수치 gradient 를 얻습니다. loss_fn 은 arrays 를 읽어야 합니다."""
    records = []
    for name, arr in arrays.items():
        idx = _sample_indices(rng, arr.shape, samples)
        numeric = np.empty(len(idx))
        for k, i in enumerate(idx):
            orig = arr[i]
            arr[i] = orig + FD_STEP
            plus = loss_fn()
            arr[i] = orig - FD_STEP
            minus = loss_fn()
            arr[i] = orig
            numeric[k] = (plus - minus) / (2.0 * FD_STEP)
        ana = np.array([analytic[name][i] for i in idx])
        if corrupt is not None and name == corrupt:
            ana = ana * 1.5 + 1e-3
        records.append(GradcheckRecord(suite, name, relative_error(ana, numeric), tolerance, len(idx)))
    return records


# ──────────────────────────────────────────────────────────────────────────────
# suites
# ──────────────────────────────────────────────────────────────────────────────
def _weights(arrays: Dict[str, np.ndarray]) -> AttentionWeights:
    return AttentionWeights(arrays["w_theta"], arrays["w_phi"], arrays["w_g"])


def lssg_suite(
    shape: Sequence[int], mode, group_count: int, kernel, seed: int, corrupt: Optional[str] = None
) -> List[GradcheckRecord]:
    mode, kernel = GroupingMode.parse(mode), AttentionKernel.parse(kernel)
    rng = np.random.default_rng(seed)
    grouping = build_grouping(mode, shape[1], group_count)
    w = AttentionWeights.init(shape[0], rng)
    arrays = {"x": rng.standard_normal(tuple(shape)), **{k: np.array(v) for k, v in w.as_dict().items()}}
    proj = rng.standard_normal(tuple(shape))

    def loss() -> float:
        y = lssg_forward(FeatureVolume(arrays["x"]), _weights(arrays), grouping, kernel)
        return reduce_dot(y.values, proj)

    dx, dw = lssg_backward(FeatureVolume(arrays["x"]), _weights(arrays), grouping, FeatureVolume(proj), kernel)
    analytic = {"x": dx.values, **dw.as_dict()}
    suite = f"lssg_forward[{mode.value},G={group_count},{kernel.value}]"
    return check_arrays(suite, loss, arrays, analytic, rng, OP_TOLERANCE, OP_SAMPLES, corrupt)


def group_norm_suite(shape: Sequence[int], seed: int, corrupt: Optional[str] = None) -> List[GradcheckRecord]:
    rng = np.random.default_rng(seed)
    c = shape[0]
    gn_groups = int(np.gcd(4, c))
    arrays = {
        "x": rng.standard_normal(tuple(shape)),
        "gn_gamma": rng.standard_normal(c),
        "gn_beta": rng.standard_normal(c),
    }
    proj = rng.standard_normal(tuple(shape))

    def loss() -> float:
        y, _ = group_norm(FeatureVolume(arrays["x"]), arrays["gn_gamma"], arrays["gn_beta"], gn_groups)
        return reduce_dot(y.values, proj)

    x = FeatureVolume(arrays["x"])
    _, stats = group_norm(x, arrays["gn_gamma"], arrays["gn_beta"], gn_groups)
    dx, dgamma, dbeta = group_norm_backward(x, arrays["gn_gamma"], stats, FeatureVolume(proj))
    analytic = {"x": dx.values, "gn_gamma": dgamma, "gn_beta": dbeta}
    return check_arrays(f"group_norm[groups={gn_groups}]", loss, arrays, analytic, rng, OP_TOLERANCE, OP_SAMPLES, corrupt)


def block_suite(
    shape: Sequence[int], mode, group_count: int, kernel, seed: int,
    gn_scope=GnScope.GROUP, corrupt: Optional[str] = None,
) -> List[GradcheckRecord]:
    rng = np.random.default_rng(seed)
    base = LssgBlockParams.init(shape[0], rng, grouping_mode=mode, group_count=group_count,
                                kernel=kernel, gn_scope=gn_scope)
    arrays = {"x": rng.standard_normal(tuple(shape)), **{k: np.array(v) for k, v in base.arrays().items()}}
    arrays["gn_gamma"] = rng.standard_normal(shape[0])
    arrays["gn_beta"] = rng.standard_normal(shape[0])
    proj = rng.standard_normal(tuple(shape))

    def params() -> LssgBlockParams:
        return base.with_arrays({k: v for k, v in arrays.items() if k != "x"})

    def loss() -> float:
        z, _ = lssg_block_forward_with_stats(FeatureVolume(arrays["x"]), params())
        return reduce_dot(z.values, proj)

    x = FeatureVolume(arrays["x"])
    p = params()
    _, stats = lssg_block_forward_with_stats(x, p)
    dx, dp = lssg_block_backward(x, p, stats, FeatureVolume(proj))
    analytic = {"x": dx.values, **dp.arrays()}
    suite = f"lssg_block[{p.grouping_mode.value},G={group_count},{p.kernel.value},{p.gn_scope.value}]"
    return check_arrays(suite, loss, arrays, analytic, rng, OP_TOLERANCE, OP_SAMPLES, corrupt)


def miniature_layout(kernel=AttentionKernel.COMPACT):
    """2 채널, 8³ patch, SSG / LSG block 각 1 개."""
    return make_layout(
        kernel=kernel,
        block_sequence="S,L,-,-,-",
        group_count=2,
        widths=(2, 2, 2, 2),
        patch=(8, 8, 8),
        anchor_sizes=(2.0, 4.0),
        gamma_init=1.0,
    )


def network_suite(seed: int, corrupt: Optional[str] = None, kernel=AttentionKernel.COMPACT) -> List[GradcheckRecord]:
    layout = miniature_layout(kernel)
    net = build_network(layout, seed)
    rng = np.random.default_rng(seed + 1)
    volume = rng.random((1,) + tuple(layout.patch))
    fixed = {k: net[k] for k in FPR_KEYS}
    arrays = {k: np.array(v) for k, v in net.arrays.items() if k not in FPR_KEYS}
    outputs, cache = network_forward(net, volume)
    r_logits = rng.standard_normal(outputs.logits.shape)
    r_offsets = rng.standard_normal(outputs.offsets.shape)

    def loss() -> float:
        out, _ = network_forward(ToyNetParams(layout, {**arrays, **fixed}), volume)
        return reduce_dot(out.logits, r_logits) + reduce_dot(out.offsets, r_offsets)

    analytic = network_backward(net, cache, r_logits, r_offsets)
    return check_arrays(f"network[{layout.label},{layout.kernel.value}]", loss, arrays, analytic, rng,
                        E2E_TOLERANCE, E2E_SAMPLES, corrupt)


def summarize(records: Sequence[GradcheckRecord]) -> Tuple[bool, List[GradcheckRecord]]:
    failed = [r for r in records if not r.passed]
    for r in failed:
        logger.error(f"❌ gradcheck 실패: {r.suite}.{r.param} rel_error={r.rel_error:.3e} (tol {r.tolerance:g})")
    return not failed, failed
