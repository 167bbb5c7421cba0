# app/schemas.py

from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator

from utils.errors import ConfigError


class ExitCode(IntEnum):
    """명령 종료 코드"""
    OK = 0              # 모든 검사 통과
    CHECK_FAILED = 1    # 검사 실패
    USAGE_ERROR = 2     # 잘못된 인자 / 입력


class CommandOutcome(BaseModel):
    """CLI 명령 하나의 결과"""
    exit_code: ExitCode = Field(..., description="0 통과, 1 검사 실패, 2 사용 오류")
    report_path: Optional[Path] = Field(default=None, description="사람이 읽는 보고서")
    data_path: Optional[Path] = Field(default=None, description="기계가 읽는 CSV")
    message: str = Field(default="", description="한 줄 요약")

    @property
    def ok(self) -> bool:
        return self.exit_code == ExitCode.OK


def parse_shape(text: str, rank: int = 4) -> Tuple[int, ...]:
    """'2x8x3x3' → (2, 8, 3, 3)."""
    try:
        dims = tuple(int(v) for v in str(text).lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"shape 형식 오류: {text!r} (예: {'x'.join(['2'] * rank)})") from exc
    if len(dims) != rank or min(dims) < 1:
        raise ConfigError(f"shape 은 양의 정수 {rank} 개여야 합니다: {text!r}")
    return dims


def parse_int_list(text: str) -> List[int]:
    try:
        values = [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"정수 목록 형식 오류: {text!r}") from exc
    if not values or min(values) < 1:
        raise ConfigError(f"양의 정수 목록이어야 합니다: {text!r}")
    return values


class GradcheckRequest(BaseModel):
    shape: Tuple[int, int, int, int] = Field(default=(2, 8, 3, 3), description="C×D×H×W")
    modes: List[str] = Field(default=["ssg", "lsg"])
    groups: List[int] = Field(default=[1, 2, 4])
    kernels: List[str] = Field(default=["cnl", "nl"])
    seed: int = Field(default=0)
    end_to_end: bool = Field(default=True, description="miniature 네트워크 검사 포함")
    corrupt: Optional[str] = Field(default=None, description="test hook: 이 파라미터의 해석적 gradient 를 일부러 틀리게")
    out_dir: Path = Field(default=Path("reports/gradcheck"))


class OracleRequest(BaseModel):
    trials: int = Field(default=20, description="무작위 볼륨 수 (≥1)")
    seed: int = Field(default=0)
    shape: Optional[Tuple[int, int, int, int]] = Field(default=None, description="고정 shape (없으면 무작위)")
    out_dir: Path = Field(default=Path("reports/oracle"))

    @field_validator("trials")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError(f"trials 는 1 이상이어야 합니다: {v}")
        return v


class BenchRequest(BaseModel):
    shape: Tuple[int, int, int, int] = Field(default=(4, 16, 8, 8), description="CDHW = 4096 (naive 상한)")
    groups: List[int] = Field(default=[2, 4, 8])
    reps: int = Field(default=3, ge=1)
    seed: int = Field(default=0)
    out_dir: Path = Field(default=Path("reports/bench"))


class PhantomRequest(BaseModel):
    n_samples: int = Field(default=100, ge=1)
    difficulty: str = Field(default="easy")
    dims: Tuple[int, int, int] = Field(default=(32, 32, 32))
    seed: int = Field(default=0)
    out_dir: Path = Field(default=Path("data/phantoms"))


class FrocRequest(BaseModel):
    detections: Path
    ground_truth: Path
    criterion: str = Field(..., description="center | iou:T (기본값 없음)")
    name: str = Field(default="detector")
    out_dir: Path = Field(default=Path("reports/froc"))


class ExperimentRequest(BaseModel):
    dataset: Path
    criterion: str = Field(..., description="center | iou:T (기본값 없음)")
    layout: Optional[str] = Field(default=None, description="A/B 또는 S,L,... 순서 (None 이면 파일 / 기본값)")
    groups: Optional[int] = Field(default=None)
    kernel: Optional[str] = Field(default=None)
    seed: int = Field(default=0)
    train_config: Optional[Path] = Field(default=None, description="key=value 학습 설정 파일")
    layout_config: Optional[Path] = Field(default=None, description="key=value layout 설정 파일")
    epochs: Optional[int] = Field(default=None)
    learning_rate: Optional[float] = Field(default=None)
    batch_size: Optional[int] = Field(default=None)
    eval_fraction: float = Field(default=0.2, gt=0.0, lt=1.0)
    out_dir: Path = Field(default=Path("reports/experiment"))
