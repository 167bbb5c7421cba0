"""FROC (Free-Response ROC) 평가.

모든 scan 의 검출을 모아 score 내림차순으로 정렬하고 (동점은 scan_id, 입력 순서), 위에서부터
greedy 하게 아직 맞히지 않은 GT 하나와 짝지웁니다. 서로 다른 score 마다 curve 점 하나를 찍고,
7 개 operating point 의 sensitivity 는 "FP/scan ≤ 해당 값" 인 점들 중 최대값 (step function) 입니다.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, model_validator
from sklearn.metrics import auc

from detection.geometry import Box3D, Detection, iou3d
from utils.errors import ConfigError, InputError, UndefinedSensitivityError

logger = logging.getLogger(__name__)

OPERATING_POINTS: Tuple[float, ...] = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
AUC_MAX_FP = 8.0


class MatchCriterion(BaseModel):
    """검출이 GT 를 맞혔다고 볼 조건."""

    kind: Literal["center", "iou"] = Field(..., description="center: 검출 중심이 GT box 안 / iou: IoU ≥ t")
    threshold: Optional[float] = Field(default=None, description="kind=iou 일 때 t ∈ (0,1)")

    @model_validator(mode="after")
    def _check_threshold(self):
        if self.kind == "iou":
            if self.threshold is None or not 0.0 < self.threshold < 1.0:
                raise ValueError(f"IoU 기준 threshold 는 (0,1) 범위여야 합니다: {self.threshold}")
        elif self.threshold is not None:
            raise ValueError("center 기준에는 threshold 를 지정하지 않습니다.")
        return self

    @classmethod
    def parse(cls, text: str) -> "MatchCriterion":
        """'center' 또는 'iou:T'."""
        key = str(text).strip().lower()
        try:
            if key == "center":
                return cls(kind="center")
            if key.startswith("iou:"):
                return cls(kind="iou", threshold=float(key[4:]))
        except ValueError as exc:
            raise ConfigError(f"잘못된 criterion: {text!r} ({exc})") from exc
        raise ConfigError(f"잘못된 criterion: {text!r} (center | iou:T)")

    @property
    def label(self) -> str:
        return "center" if self.kind == "center" else f"iou:{self.threshold:g}"

    def hits(self, det: Box3D, gt: Box3D) -> bool:
        if self.kind == "center":
            return gt.contains_point(det.center)
        return iou3d(det, gt) >= self.threshold


@dataclass(frozen=True)
class FrocResult:
    operating_points: Tuple[float, ...]
    sensitivities: Tuple[float, ...]
    average: float
    curve: Tuple[Tuple[float, float], ...]
    thresholds: Tuple[float, ...] = ()
    auc: float = 0.0
    n_scans: int = 0
    n_gt: int = 0

    @classmethod
    def from_sensitivities(cls, sensitivities: Sequence[float]) -> "FrocResult":
        """표 출력용: 이미 알려진 7 개 sensitivity 로 결과를 만듭니다."""
        sens = tuple(float(s) for s in sensitivities)
        if len(sens) != len(OPERATING_POINTS):
            raise InputError(f"sensitivity 는 {len(OPERATING_POINTS)} 개여야 합니다: {len(sens)}")
        return cls(OPERATING_POINTS, sens, float(np.mean(sens)), curve=())


def _pooled(detections: Mapping[str, Sequence[Detection]]) -> List[Tuple[float, str, int, Detection]]:
    pooled = [(d.score, sid, i, d) for sid, dets in detections.items() for i, d in enumerate(dets)]
    pooled.sort(key=lambda t: (-t[0], t[1], t[2]))
    return pooled


def _best_unmatched(det: Detection, gts: Sequence[Box3D], used: List[bool], criterion: MatchCriterion) -> int:
    """기준을 만족하는 미사용 GT 중 IoU 가 가장 큰 것 (동점이면 앞 index). 없으면 -1."""
    best, best_iou = -1, -1.0
    for j, gt in enumerate(gts):
        if used[j] or not criterion.hits(det.box, gt):
            continue
        overlap = iou3d(det.box, gt)
        if overlap > best_iou:
            best, best_iou = j, overlap
    return best


def _staircase_area(curve: Sequence[Tuple[float, float]], max_fp: float) -> float:
    xs, ys = [0.0], [0.0]
    last = 0.0
    for fp, sens in curve:
        if fp > max_fp:
            break
        xs += [fp, fp]
        ys += [last, sens]
        last = sens
    xs.append(max_fp)
    ys.append(last)
    return float(auc(np.asarray(xs), np.asarray(ys))) / max_fp


def evaluate_froc(
    detections: Mapping[str, Sequence[Detection]],
    ground_truths: Mapping[str, Sequence[Box3D]],
    criterion: MatchCriterion,
) -> FrocResult:
    unknown = sorted(set(detections) - set(ground_truths))
    if unknown:
        raise InputError(f"GT 에 없는 scan id 가 검출에 있습니다: {unknown[:5]}")
    n_scans = len(ground_truths)
    n_gt = sum(len(v) for v in ground_truths.values())
    if n_gt == 0:
        raise UndefinedSensitivityError("GT 가 하나도 없어 sensitivity 를 정의할 수 없습니다.")

    used = {sid: [False] * len(gts) for sid, gts in ground_truths.items()}
    pooled = _pooled(detections)
    curve: List[Tuple[float, float]] = []
    thresholds: List[float] = []
    tp = fp = 0
    for k, (score, sid, _, det) in enumerate(pooled):
        j = _best_unmatched(det, ground_truths[sid], used[sid], criterion)
        if j >= 0:
            used[sid][j] = True
            tp += 1
        else:
            fp += 1
        if k + 1 == len(pooled) or pooled[k + 1][0] != score:
            curve.append((fp / n_scans, tp / n_gt))
            thresholds.append(score)

    sens = []
    for point in OPERATING_POINTS:
        reachable = [s for f, s in curve if f <= point]
        sens.append(max(reachable) if reachable else 0.0)
    result = FrocResult(
        operating_points=OPERATING_POINTS,
        sensitivities=tuple(sens),
        average=float(np.mean(sens)),
        curve=tuple(curve),
        thresholds=tuple(thresholds),
        auc=_staircase_area(curve, AUC_MAX_FP),
        n_scans=n_scans,
        n_gt=n_gt,
    )
    logger.debug(f"📊 FROC: scans={n_scans} gt={n_gt} dets={len(pooled)} avg={result.average:.4f}")
    return result


# ──────────────────────────────────────────────────────────────────────────────
# 출력
# ──────────────────────────────────────────────────────────────────────────────
def _percent(values: Sequence[float]) -> str:
    return " ".join(f"{v * 100:.2f}" for v in values)


def format_froc_table(results: Sequence[Tuple[str, FrocResult]]) -> str:
    """0.125 0.25 0.5 1.0 2.0 4.0 8.0 | Avg 열, 값은 % 두 자리."""
    width = max([len("Method")] + [len(name) for name, _ in results])
    header = f"{'Method':<{width}} " + " ".join(f"{p:g}" if p < 1 else f"{p:.1f}" for p in OPERATING_POINTS) + " | Avg"
    lines = [header]
    for name, res in results:
        lines.append(f"{name:<{width}} {_percent(res.sensitivities)} | {res.average * 100:.2f}")
    return "\n".join(lines) + "\n"


def curve_frame(result: FrocResult) -> pd.DataFrame:
    fps = [f for f, _ in result.curve]
    sens = [s for _, s in result.curve]
    return pd.DataFrame({"threshold": list(result.thresholds), "fp_per_scan": fps, "sensitivity": sens})


def write_curve_csv(path: Union[str, Path], result: FrocResult) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    curve_frame(result).to_csv(path, index=False)
    return path


def summary_frame(results: Sequence[Tuple[str, FrocResult]]) -> pd.DataFrame:
    rows = []
    for name, res in results:
        row: Dict[str, object] = {"name": name}
        row.update({f"fp_{p:g}": s for p, s in zip(res.operating_points, res.sensitivities)})
        row.update(average=res.average, auc=res.auc)
        rows.append(row)
    return pd.DataFrame(rows)
