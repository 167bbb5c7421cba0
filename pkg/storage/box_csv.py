"""검출 / 정답 box CSV.

    detections:   scan_id,cz,cy,cx,d,h,w,score
    ground truth: scan_id,cz,cy,cx,d,h,w

정답 파일에서 box 값이 비어 있는 행은 "nodule 이 없는 scan" 을 뜻합니다 (scan 수 집계용).
"""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import pandas as pd

from detection.geometry import Box3D, Detection
from utils.errors import InputError

logger = logging.getLogger(__name__)

BOX_COLUMNS = ["cz", "cy", "cx", "d", "h", "w"]
GT_COLUMNS = ["scan_id"] + BOX_COLUMNS
DET_COLUMNS = GT_COLUMNS + ["score"]


def _read(path: Union[str, Path], columns: List[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise InputError(f"CSV 파일이 없습니다: {path}")
    df = pd.read_csv(path, dtype={"scan_id": str}, keep_default_na=False, na_values=[""], float_precision="round_trip")
    missing = [c for c in columns if c not in df.columns]
    if missing:
        raise InputError(f"{path.name}: 필수 컬럼 누락 {missing} (필요: {','.join(columns)})")
    return df


def ground_truth_frame(ground_truths: Mapping[str, Sequence[Box3D]]) -> pd.DataFrame:
    rows = []
    for scan_id, boxes in ground_truths.items():
        if not boxes:
            rows.append([scan_id] + [None] * 6)
        rows.extend([scan_id, *b.as_tuple()] for b in boxes)
    return pd.DataFrame(rows, columns=GT_COLUMNS)


def detection_frame(detections: Mapping[str, Sequence[Detection]]) -> pd.DataFrame:
    rows = [
        [scan_id, *d.box.as_tuple(), d.score]
        for scan_id, dets in detections.items()
        for d in dets
    ]
    return pd.DataFrame(rows, columns=DET_COLUMNS)


def write_ground_truth(path: Union[str, Path], ground_truths: Mapping[str, Sequence[Box3D]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ground_truth_frame(ground_truths).to_csv(path, index=False)
    return path


def write_detections(path: Union[str, Path], detections: Mapping[str, Sequence[Detection]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    detection_frame(detections).to_csv(path, index=False)
    return path


def read_ground_truth(path: Union[str, Path]) -> Dict[str, List[Box3D]]:
    df = _read(path, GT_COLUMNS)
    out: Dict[str, List[Box3D]] = {}
    for row in df.itertuples(index=False):
        boxes = out.setdefault(str(row.scan_id), [])
        values = [getattr(row, c) for c in BOX_COLUMNS]
        if any(pd.isna(v) for v in values):
            continue
        try:
            boxes.append(Box3D(*(float(v) for v in values)))
        except ValueError as exc:
            raise InputError(f"{path}: scan {row.scan_id} 의 box 가 잘못되었습니다: {exc}") from exc
    logger.debug(f"GT 로드: {path} ({len(out)} scans)")
    return out


def read_detections(path: Union[str, Path]) -> Dict[str, List[Detection]]:
    df = _read(path, DET_COLUMNS)
    out: Dict[str, List[Detection]] = {}
    for row in df.itertuples(index=False):
        try:
            box = Box3D(*(float(getattr(row, c)) for c in BOX_COLUMNS))
            det = Detection(box=box, score=float(row.score))
        except (ValueError, TypeError) as exc:
            raise InputError(f"{path}: scan {row.scan_id} 의 검출 행이 잘못되었습니다: {exc}") from exc
        out.setdefault(str(row.scan_id), []).append(det)
    logger.debug(f"검출 로드: {path} ({sum(len(v) for v in out.values())} rows)")
    return out
