"""toy 네트워크 layout / 학습 설정 (pydantic) 과 key=value 설정 파일 로더."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from engine.attention import AttentionKernel, GroupingMode
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

SLOT_COUNT = 5
# 2 slots in stage 2, 3 slots in stage 3
SLOT_STAGES: Tuple[int, ...] = (2, 2, 3, 3, 3)
STAGE_STRIDES: Tuple[int, ...] = (2, 1, 2, 2)
STANDARD_LAYOUTS = ("5/0", "3/2", "2/3", "0/5")
GROUP_SWEEP = (2, 4, 8)
# CT_ANCHOR_SIZES 의 앞 3 개. 32³ patch 와 stage 2 출력 (stride 2) 위 head 에 맞춘 toy 크기.
DEFAULT_ANCHOR_SIZES = (5.0, 10.0, 20.0)

_TAGS = {
    "s": GroupingMode.SHORT, "ssg": GroupingMode.SHORT,
    "l": GroupingMode.LONG, "lsg": GroupingMode.LONG,
    "-": None, "n": None, "none": None, "": None,
}


def alternate_layout(n_short: int, n_long: int) -> List[Optional[GroupingMode]]:
    """SSG 부터 번갈아 배치하고, 한쪽이 떨어지면 나머지를 뒤에 붙입니다. 빈 slot 은 None."""
    if n_short < 0 or n_long < 0 or n_short + n_long > SLOT_COUNT:
        raise ConfigError(f"layout {n_short}/{n_long}: 합이 0..{SLOT_COUNT} 범위여야 합니다.")
    seq: List[Optional[GroupingMode]] = []
    s, l = n_short, n_long
    while s or l:
        if s:
            seq.append(GroupingMode.SHORT)
            s -= 1
        if l:
            seq.append(GroupingMode.LONG)
            l -= 1
    return seq + [None] * (SLOT_COUNT - len(seq))


def parse_layout(text: str) -> List[Optional[GroupingMode]]:
    """'2/3' 같은 개수 표기 또는 'S,L,S,L,L' 같은 명시 순서."""
    text = str(text).strip()
    if "/" in text:
        try:
            a, b = (int(v) for v in text.split("/"))
        except ValueError as exc:
            raise ConfigError(f"layout 형식 오류: {text!r} (예: 2/3)") from exc
        return alternate_layout(a, b)
    tags = [t.strip().lower() for t in text.split(",")]
    if len(tags) != SLOT_COUNT:
        raise ConfigError(f"layout 은 slot {SLOT_COUNT} 개를 지정해야 합니다: {text!r}")
    try:
        return [_TAGS[t] for t in tags]
    except KeyError as exc:
        raise ConfigError(f"알 수 없는 slot tag: {exc.args[0]!r} (S/L/-)") from exc


def layout_label(seq) -> str:
    short = sum(1 for m in seq if m is GroupingMode.SHORT)
    long_ = sum(1 for m in seq if m is GroupingMode.LONG)
    return f"{short}/{long_}"


def _int_tuple(value, sep: str = ",") -> Tuple[int, ...]:
    if isinstance(value, str):
        return tuple(int(v) for v in value.replace("x", sep).split(sep) if v.strip())
    return tuple(int(v) for v in value)


class LayoutConfig(BaseModel):
    """LSSG slot 배치와 네트워크 크기."""

    block_sequence: Tuple[Optional[GroupingMode], ...] = Field(
        default=tuple(alternate_layout(2, 3)), description="slot 별 SSG/LSG/None"
    )
    group_count: int = Field(default=4, ge=1, description="slice group 수 G")
    widths: Tuple[int, int, int, int] = Field(default=(8, 16, 32, 64), description="stage 별 채널 수")
    patch: Tuple[int, int, int] = Field(default=(32, 32, 32), description="입력 patch (D,H,W)")
    units_per_stage: Tuple[int, int, int, int] = Field(default=(1, 1, 1, 1), description="stage 별 residual unit 수")
    kernel: AttentionKernel = Field(default=AttentionKernel.COMPACT, description="cnl 또는 nl")
    anchor_sizes: Tuple[float, ...] = Field(default=DEFAULT_ANCHOR_SIZES, description="anchor 한 변 길이")
    gamma_init: float = Field(default=0.1, description="LSSG GN gamma 초기값")

    @field_validator("block_sequence", mode="before")
    @classmethod
    def _parse_sequence(cls, v):
        if isinstance(v, str):
            return tuple(parse_layout(v))
        return tuple(None if t is None else GroupingMode.parse(t) for t in v)

    @field_validator("kernel", mode="before")
    @classmethod
    def _parse_kernel(cls, v):
        return AttentionKernel.parse(v)

    @field_validator("widths", "patch", "units_per_stage", mode="before")
    @classmethod
    def _parse_ints(cls, v):
        return _int_tuple(v)

    @field_validator("anchor_sizes", mode="before")
    @classmethod
    def _parse_sizes(cls, v):
        if isinstance(v, str):
            v = [s for s in v.split(",") if s.strip()]
        return tuple(float(s) for s in v)

    @model_validator(mode="after")
    def _check_topology(self):
        if len(self.block_sequence) != SLOT_COUNT:
            raise ConfigError(f"block_sequence 길이는 {SLOT_COUNT} 이어야 합니다: {len(self.block_sequence)}")
        if min(self.widths) < 1 or min(self.units_per_stage) < 1:
            raise ConfigError("widths 와 units_per_stage 는 모두 1 이상이어야 합니다.")
        if any(n < 8 or n % 8 != 0 for n in self.patch):
            raise ConfigError(f"patch 각 축은 8 의 배수여야 합니다: {self.patch}")
        for slot, mode in enumerate(self.block_sequence):
            if mode is None:
                continue
            depth = self.stage_depth(SLOT_STAGES[slot])
            if depth % self.group_count != 0:
                raise ConfigError(
                    f"slot {slot} (stage {SLOT_STAGES[slot]}): group_count={self.group_count} 가 "
                    f"depth={depth} 를 나누지 않습니다 (divisibility)."
                )
        return self

    def stage_stride(self, stage: int) -> int:
        """stage 출력의 입력 대비 누적 stride (stage 1..4)."""
        stride = 1
        for s in STAGE_STRIDES[:stage]:
            stride *= s
        return stride

    def stage_depth(self, stage: int) -> int:
        return self.patch[0] // self.stage_stride(stage)

    @property
    def output_stride(self) -> int:
        return self.stage_stride(2)

    @property
    def output_dims(self) -> Tuple[int, int, int]:
        return tuple(n // self.output_stride for n in self.patch)  # type: ignore[return-value]

    @property
    def head_channels(self) -> int:
        return 2 * self.widths[1]

    @property
    def label(self) -> str:
        return layout_label(self.block_sequence)

    def slots(self, stage: int) -> List[Tuple[int, int, GroupingMode]]:
        """(stage 내 번호 k, 전체 slot 번호, mode) 목록. None slot 은 제외."""
        out = []
        k = 0
        for slot, st in enumerate(SLOT_STAGES):
            if st != stage:
                continue
            mode = self.block_sequence[slot]
            if mode is not None:
                out.append((k, slot, mode))
            k += 1
        return out

    def slot_unit(self, stage: int, k: int) -> int:
        """stage 내 k 번째 slot 이 붙는 residual unit 번호."""
        n_slots = SLOT_STAGES.count(stage)
        return k * self.units_per_stage[stage - 1] // n_slots


class TrainConfig(BaseModel):
    """SGD 와 anchor 할당 설정."""

    learning_rate: float = Field(default=0.001, ge=0.0, description="0 이면 파라미터 고정")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    batch_size: int = Field(default=16, ge=1)
    epochs: int = Field(default=10, ge=1)
    fpr_epochs: int = Field(default=2, ge=0, description="RPN 학습 후 FPR head 학습 epoch")
    seed: int = Field(default=0)
    pos_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    neg_iou: float = Field(default=0.02, ge=0.0, lt=1.0)
    neg_ratio: int = Field(default=3, ge=1, description="hard negative : positive")
    min_negatives: int = Field(default=8, ge=1, description="positive 가 없을 때 쓰는 negative 수")

    @model_validator(mode="after")
    def _check_thresholds(self):
        if self.neg_iou >= self.pos_iou:
            raise ConfigError(f"neg_iou({self.neg_iou}) 는 pos_iou({self.pos_iou}) 보다 작아야 합니다.")
        return self


def _validation_message(exc: ValidationError) -> str:
    return "; ".join(str(err.get("msg", "")).removeprefix("Value error, ") for err in exc.errors())


def make_layout(**kwargs) -> LayoutConfig:
    """LayoutConfig 생성. 검증 실패는 ConfigError 로 바꿔 올립니다."""
    try:
        return LayoutConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc


def make_train_config(**kwargs) -> TrainConfig:
    try:
        return TrainConfig(**kwargs)
    except ValidationError as exc:
        raise ConfigError(_validation_message(exc)) from exc


# ──────────────────────────────────────────────────────────────────────────────
# key=value 설정 파일
# ──────────────────────────────────────────────────────────────────────────────
_LAYOUT_KEYS = {"layout": "block_sequence", "groups": "group_count", "g": "group_count"}


def _read_kv(path: Union[str, Path]) -> Dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"설정 파일이 없습니다: {path}")
    values = {k.strip().lower(): v for k, v in dotenv_values(path).items() if v is not None}
    logger.debug(f"설정 파일 로드: {path} ({len(values)} keys)")
    return values


def read_layout_values(path: Union[str, Path]) -> Dict[str, str]:
    """검증 전의 layout 파일 값 (LayoutConfig 필드 이름으로)."""
    return {_LAYOUT_KEYS.get(k, k): v for k, v in _read_kv(path).items()}


def load_layout_config(path: Union[str, Path]) -> LayoutConfig:
    return make_layout(**read_layout_values(path))


def load_train_config(path: Union[str, Path]) -> TrainConfig:
    raw = _read_kv(path)
    aliases = {"lr": "learning_rate", "wd": "weight_decay"}
    return make_train_config(**{aliases.get(k, k): v for k, v in raw.items()})
