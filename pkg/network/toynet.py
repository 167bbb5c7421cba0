"""toy 3-D encoder-decoder + RPN/FPR head.

    stem    3×3×3 conv, 1 → w0                     (stride 1, FPR shallow feature)
    stage1  residual, w0 → w0, stride 2
    stage2  residual, w0 → w1, stride 1            + LSSG slot 0, 1
    stage3  residual, w1 → w2, stride 2            + LSSG slot 2, 3, 4
    stage4  residual, w2 → w3, stride 2
    dec1    2×2×2 deconv w3 → w2, concat skip3 (1×1×1 w2 → w2)
    dec2    2×2×2 deconv 2·w2 → w1, concat skip2 (1×1×1 w1 → w1)   → head feature (stride 2)

residual unit: ReLU(conv3(ReLU(conv3(x, s))) + proj(x)). proj 는 stride/채널이 바뀔 때만 1×1×1 conv.
LSSG slot 은 stage 내 residual unit 출력 뒤에 붙습니다.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from detection.geometry import AnchorSet
from detection.heads import FprParams, RpnParams, rpn_backward, rpn_forward
from engine.attention import AttentionWeights, GroupingMode
from engine.blocks import DEFAULT_GN_GROUPS, LssgBlockParams, block_backward_arrays, block_forward_arrays
from network.config import STAGE_STRIDES, LayoutConfig
from network.layers import (
    conv3d_backward,
    conv3d_forward,
    deconv3d_backward,
    deconv3d_forward,
    he_init,
    relu,
    relu_backward,
)
from utils.errors import ShapeError, StateError

logger = logging.getLogger(__name__)

RPN_KEYS = {"rpn.conv.w": "conv_w", "rpn.conv.b": "conv_b", "rpn.cls.w": "cls_w",
            "rpn.cls.b": "cls_b", "rpn.reg.w": "reg_w", "rpn.reg.b": "reg_b"}
FPR_KEYS = {"fpr.fc1.w": "fc1_w", "fpr.fc1.b": "fc1_b", "fpr.fc2.w": "fc2_w", "fpr.fc2.b": "fc2_b"}
FPR_HIDDEN = 32


# ──────────────────────────────────────────────────────────────────────────────
# Registry
# ──────────────────────────────────────────────────────────────────────────────
def _unit_channels(layout: LayoutConfig, stage: int, unit: int) -> Tuple[int, int, int]:
    """(c_in, c_out, stride)"""
    w = layout.widths
    c_out = w[stage - 1]
    c_in = (w[0] if stage == 1 else w[stage - 2]) if unit == 0 else c_out
    stride = STAGE_STRIDES[stage - 1] if unit == 0 else 1
    return c_in, c_out, stride


def _needs_proj(c_in: int, c_out: int, stride: int) -> bool:
    return stride != 1 or c_in != c_out


def registry_shapes(layout: LayoutConfig) -> Dict[str, Tuple[int, ...]]:
    """layer path → shape. 순서가 초기화 순서입니다."""
    w = layout.widths
    shapes: Dict[str, Tuple[int, ...]] = {"stem.w": (w[0], 1, 3, 3, 3), "stem.b": (w[0],)}
    for stage in range(1, 5):
        for unit in range(layout.units_per_stage[stage - 1]):
            c_in, c_out, stride = _unit_channels(layout, stage, unit)
            pre = f"stage{stage}.unit{unit}"
            shapes[f"{pre}.conv1.w"] = (c_out, c_in, 3, 3, 3)
            shapes[f"{pre}.conv1.b"] = (c_out,)
            shapes[f"{pre}.conv2.w"] = (c_out, c_out, 3, 3, 3)
            shapes[f"{pre}.conv2.b"] = (c_out,)
            if _needs_proj(c_in, c_out, stride):
                shapes[f"{pre}.proj.w"] = (c_out, c_in, 1, 1, 1)
                shapes[f"{pre}.proj.b"] = (c_out,)
        for k, _, _ in layout.slots(stage):
            c = w[stage - 1]
            pre = f"stage{stage}.lssg{k}"
            for name in ("w_theta", "w_phi", "w_g"):
                shapes[f"{pre}.{name}"] = (c, c)
            shapes[f"{pre}.w_z"] = (c, c)
            shapes[f"{pre}.gn_gamma"] = (c,)
            shapes[f"{pre}.gn_beta"] = (c,)
    shapes["dec1.w"] = (w[3], w[2], 2, 2, 2)
    shapes["dec1.b"] = (w[2],)
    shapes["skip3.w"] = (w[2], w[2], 1, 1, 1)
    shapes["skip3.b"] = (w[2],)
    shapes["dec2.w"] = (2 * w[2], w[1], 2, 2, 2)
    shapes["dec2.b"] = (w[1],)
    shapes["skip2.w"] = (w[1], w[1], 1, 1, 1)
    shapes["skip2.b"] = (w[1],)
    head = layout.head_channels
    a = len(layout.anchor_sizes)
    shapes.update({
        "rpn.conv.w": (head, head, 3, 3, 3), "rpn.conv.b": (head,),
        "rpn.cls.w": (a, head), "rpn.cls.b": (a,),
        "rpn.reg.w": (6 * a, head), "rpn.reg.b": (6 * a,),
    })
    fpr_in = (w[0] + head) * 8
    shapes.update({
        "fpr.fc1.w": (FPR_HIDDEN, fpr_in), "fpr.fc1.b": (FPR_HIDDEN,),
        "fpr.fc2.w": (7, FPR_HIDDEN), "fpr.fc2.b": (7,),
    })
    return shapes


@dataclass
class ToyNetParams:
    """layer path 로 찾는 파라미터 registry."""

    layout: LayoutConfig
    arrays: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        expected = registry_shapes(self.layout)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise StateError(f"registry 불일치: missing={missing[:5]}, extra={extra[:5]}")
        for name, shape in expected.items():
            if tuple(self.arrays[name].shape) != shape:
                raise StateError(f"{name}: shape {self.arrays[name].shape} != {shape}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def copy(self) -> "ToyNetParams":
        return ToyNetParams(self.layout, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> "ToyNetParams":
        return ToyNetParams(self.layout, {k: np.zeros_like(v) for k, v in self.arrays.items()})

    def with_arrays(self, arrays: Dict[str, np.ndarray]) -> "ToyNetParams":
        return ToyNetParams(self.layout, dict(arrays))

    @property
    def anchor_set(self) -> AnchorSet:
        return AnchorSet(sizes=self.layout.anchor_sizes, stride=self.layout.output_stride)

    def conv(self, name: str) -> Tuple[np.ndarray, np.ndarray]:
        return self.arrays[f"{name}.w"], self.arrays[f"{name}.b"]

    def lssg(self, stage: int, k: int, mode: GroupingMode) -> LssgBlockParams:
        pre = f"stage{stage}.lssg{k}"
        c = self.layout.widths[stage - 1]
        return LssgBlockParams(
            attn=AttentionWeights(self.arrays[f"{pre}.w_theta"], self.arrays[f"{pre}.w_phi"], self.arrays[f"{pre}.w_g"]),
            w_z=self.arrays[f"{pre}.w_z"],
            gn_gamma=self.arrays[f"{pre}.gn_gamma"],
            gn_beta=self.arrays[f"{pre}.gn_beta"],
            gn_groups=_gn_groups(c),
            grouping_mode=mode,
            group_count=self.layout.group_count,
            kernel=self.layout.kernel,
        )

    def rpn(self) -> RpnParams:
        return RpnParams(**{field_: self.arrays[key] for key, field_ in RPN_KEYS.items()})

    def fpr(self) -> FprParams:
        return FprParams(**{field_: self.arrays[key] for key, field_ in FPR_KEYS.items()})


def _gn_groups(channels: int) -> int:
    return math.gcd(DEFAULT_GN_GROUPS, channels)


def build_network(layout: LayoutConfig, seed: int) -> ToyNetParams:
    """seed 로 결정되는 초기화. 같은 seed 면 비트 단위로 같은 파라미터."""
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}
    for name, shape in registry_shapes(layout).items():
        if ".lssg" in name:
            continue
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        elif name in ("rpn.cls.w", "rpn.reg.w", "fpr.fc2.w"):
            arrays[name] = rng.standard_normal(shape) * 0.01
        else:
            fan_in = int(np.prod(shape[1:])) if not name.startswith("dec") else shape[0]
            arrays[name] = he_init(rng, shape, fan_in)
    for stage in (2, 3):
        for k, _, mode in layout.slots(stage):
            block = LssgBlockParams.init(
                layout.widths[stage - 1], rng,
                grouping_mode=mode,
                group_count=layout.group_count,
                kernel=layout.kernel,
                gamma_init=layout.gamma_init,
            )
            for key, value in block.arrays().items():
                arrays[f"stage{stage}.lssg{k}.{key}"] = np.array(value)
    ordered = {name: arrays[name] for name in registry_shapes(layout)}
    net = ToyNetParams(layout, ordered)
    logger.info(
        f"🧱 toy network 생성: layout={layout.label} G={layout.group_count} kernel={layout.kernel.value} "
        f"params={sum(v.size for v in ordered.values())}"
    )
    return net


# ──────────────────────────────────────────────────────────────────────────────
# Forward / backward
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class NetOutputs:
    logits: np.ndarray   # (A, d, h, w)
    offsets: np.ndarray  # (6A, d, h, w)
    head: np.ndarray     # decoder feature (2·w1, d, h, w)
    shallow: np.ndarray  # stem feature (w0, D, H, W)


@dataclass
class NetCache:
    steps: List[Tuple[str, tuple]] = field(default_factory=list)
    rpn: Optional[object] = None


def _unit_forward(net: ToyNetParams, pre: str, x: np.ndarray, stride: int, steps: list) -> np.ndarray:
    w1, b1 = net.conv(f"{pre}.conv1")
    w2, b2 = net.conv(f"{pre}.conv2")
    a1 = conv3d_forward(x, w1, b1, stride=stride, padding=1)
    h1 = relu(a1)
    a2 = conv3d_forward(h1, w2, b2, stride=1, padding=1)
    if f"{pre}.proj.w" in net.arrays:
        wp, bp = net.conv(f"{pre}.proj")
        sc = conv3d_forward(x, wp, bp, stride=stride, padding=0)
    else:
        sc = x
    s = a2 + sc
    steps.append(("unit", (pre, x, stride, a1, h1, s)))
    return relu(s)


def _unit_backward(net: ToyNetParams, args: tuple, dy: np.ndarray, grads: Dict[str, np.ndarray]) -> np.ndarray:
    pre, x, stride, a1, h1, s = args
    ds = relu_backward(s, dy)
    w2 = net[f"{pre}.conv2.w"]
    dh1, grads[f"{pre}.conv2.w"], grads[f"{pre}.conv2.b"] = conv3d_backward(h1, w2, ds, stride=1, padding=1)
    da1 = relu_backward(a1, dh1)
    w1 = net[f"{pre}.conv1.w"]
    dx, grads[f"{pre}.conv1.w"], grads[f"{pre}.conv1.b"] = conv3d_backward(x, w1, da1, stride=stride, padding=1)
    if f"{pre}.proj.w" in net.arrays:
        dxp, grads[f"{pre}.proj.w"], grads[f"{pre}.proj.b"] = conv3d_backward(
            x, net[f"{pre}.proj.w"], ds, stride=stride, padding=0
        )
        dx = dx + dxp
    else:
        dx = dx + ds
    return dx


def _encoder_stage(net: ToyNetParams, stage: int, x: np.ndarray, steps: list) -> np.ndarray:
    layout = net.layout
    slots = layout.slots(stage)
    for unit in range(layout.units_per_stage[stage - 1]):
        _, _, stride = _unit_channels(layout, stage, unit)
        x = _unit_forward(net, f"stage{stage}.unit{unit}", x, stride, steps)
        for k, _, mode in slots:
            if layout.slot_unit(stage, k) != unit:
                continue
            p = net.lssg(stage, k, mode)
            x, cache = block_forward_arrays(x, p)
            steps.append(("lssg", (f"stage{stage}.lssg{k}", p, cache)))
    return x


def _conv_relu(net: ToyNetParams, name: str, x: np.ndarray, steps: list, padding: int) -> np.ndarray:
    w, b = net.conv(name)
    a = conv3d_forward(x, w, b, stride=1, padding=padding)
    steps.append(("conv", (name, x, a, padding)))
    return relu(a)


def _deconv_relu(net: ToyNetParams, name: str, x: np.ndarray, steps: list) -> np.ndarray:
    w, b = net.conv(name)
    a = deconv3d_forward(x, w, b)
    steps.append(("deconv", (name, x, a)))
    return relu(a)


def network_forward(net: ToyNetParams, volume: np.ndarray) -> Tuple[NetOutputs, NetCache]:
    """volume (1,D,H,W) 또는 (D,H,W) → NetOutputs."""
    x = np.asarray(volume, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape != (1,) + tuple(net.layout.patch):
        raise ShapeError(f"입력 {x.shape} 이 patch {(1,) + tuple(net.layout.patch)} 와 다릅니다.")
    cache = NetCache()
    steps = cache.steps

    shallow = _conv_relu(net, "stem", x, steps, padding=1)
    h = shallow
    outs = {}
    for stage in range(1, 5):
        h = _encoder_stage(net, stage, h, steps)
        outs[stage] = h
        steps.append(("mark", (f"stage{stage}",)))

    up1 = _deconv_relu(net, "dec1", outs[4], steps)
    sk3 = _conv_relu(net, "skip3", outs[3], steps, padding=0)
    cat1 = np.concatenate([up1, sk3], axis=0)
    up2 = _deconv_relu(net, "dec2", cat1, steps)
    sk2 = _conv_relu(net, "skip2", outs[2], steps, padding=0)
    head = np.concatenate([up2, sk2], axis=0)

    logits, offsets, cache.rpn = rpn_forward(head, net.rpn())
    return NetOutputs(logits=logits, offsets=offsets, head=head, shallow=shallow), cache


def network_backward(
    net: ToyNetParams,
    cache: NetCache,
    d_logits: np.ndarray,
    d_offsets: np.ndarray,
    d_head: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """RPN 출력 gradient → registry 와 같은 키의 gradient dict. FPR 파라미터는 0."""
    grads: Dict[str, np.ndarray] = {k: np.zeros_like(v) for k, v in net.arrays.items()}
    d_feat, g_rpn = rpn_backward(cache.rpn, net.rpn(), d_logits, d_offsets)
    for key, field_ in RPN_KEYS.items():
        grads[key] = g_rpn[field_]
    if d_head is not None:
        d_feat = d_feat + d_head

    steps = {args[0]: args for kind, args in cache.steps if kind in ("conv", "deconv")}
    w1 = net.layout.widths[1]
    d_up2, d_sk2 = d_feat[:w1], d_feat[w1:]

    def conv_back(name: str, dy: np.ndarray) -> np.ndarray:
        _, x, a, padding = steps[name]
        da = relu_backward(a, dy)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = conv3d_backward(x, net[f"{name}.w"], da, stride=1, padding=padding)
        return dx

    def deconv_back(name: str, dy: np.ndarray) -> np.ndarray:
        _, x, a = steps[name]
        da = relu_backward(a, dy)
        dx, grads[f"{name}.w"], grads[f"{name}.b"] = deconv3d_backward(x, net[f"{name}.w"], da)
        return dx

    d_stage = {2: conv_back("skip2", d_sk2)}
    d_cat1 = deconv_back("dec2", d_up2)
    w2 = net.layout.widths[2]
    d_stage[3] = conv_back("skip3", d_cat1[w2:])
    d_stage[4] = deconv_back("dec1", d_cat1[:w2])

    # encoder: 기록된 순서를 거꾸로 따라가며 stage 출력 gradient 를 합칩니다.
    dy: Optional[np.ndarray] = None
    for kind, args in reversed(cache.steps):
        if kind == "mark":
            stage = int(args[0][len("stage"):])
            extra = d_stage.get(stage)
            if extra is not None:
                dy = extra if dy is None else dy + extra
        elif kind == "lssg":
            pre, p, bcache = args
            dy, g = block_backward_arrays(bcache, p, dy)
            for key, value in g.items():
                grads[f"{pre}.{key}"] = value
        elif kind == "unit":
            dy = _unit_backward(net, args, dy, grads)
        elif kind == "conv" and args[0] == "stem":
            conv_back("stem", dy)
    return grads


def forward_shapes(layout: LayoutConfig) -> Dict[str, Tuple[int, ...]]:
    """stride 계산으로 얻는 주요 출력 shape."""
    d, h, w = layout.patch
    out = {"shallow": (layout.widths[0], d, h, w)}
    for stage in range(1, 5):
        s = layout.stage_stride(stage)
        out[f"stage{stage}"] = (layout.widths[stage - 1], d // s, h // s, w // s)
    od = layout.output_dims
    a = len(layout.anchor_sizes)
    out["head"] = (layout.head_channels,) + od
    out["logits"] = (a,) + od
    out["offsets"] = (6 * a,) + od
    return out
