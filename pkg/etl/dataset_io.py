"""phantom dataset 디렉터리 입출력: <root>/sample_%04d/{volume.lssv, gt.csv}."""
from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

from tqdm import tqdm

from etl.phantom import PhantomSample
from storage.box_csv import read_ground_truth, write_ground_truth
from storage.volume_format import read_volume, write_volume
from utils.errors import InputError

logger = logging.getLogger(__name__)

SAMPLE_PATTERN = "sample_{:04d}"
VOLUME_FILE = "volume.lssv"
GT_FILE = "gt.csv"


def scan_id(index: int) -> str:
    return SAMPLE_PATTERN.format(index)


def write_dataset(root: Union[str, Path], samples: Sequence[PhantomSample], progress: bool = False) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, sample in enumerate(tqdm(samples, desc="write", disable=not progress)):
        sid = scan_id(i)
        folder = root / sid
        folder.mkdir(exist_ok=True)
        write_volume(folder / VOLUME_FILE, sample.volume)
        write_ground_truth(folder / GT_FILE, {sid: sample.gt_boxes})
    logger.info(f"💾 dataset 저장: {root} ({len(samples)} samples)")
    return root


def read_dataset(root: Union[str, Path]) -> List[Tuple[str, PhantomSample]]:
    """(scan_id, sample) 목록. 폴더 이름 순."""
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"dataset 디렉터리가 없습니다: {root}")
    folders = sorted(p for p in root.iterdir() if p.is_dir() and p.name.startswith("sample_"))
    if not folders:
        raise InputError(f"{root} 에 sample_* 폴더가 없습니다.")
    out = []
    for folder in folders:
        if not (folder / VOLUME_FILE).exists() or not (folder / GT_FILE).exists():
            raise InputError(f"{folder} 에 {VOLUME_FILE} / {GT_FILE} 이 모두 있어야 합니다.")
        volume = read_volume(folder / VOLUME_FILE)
        gts = read_ground_truth(folder / GT_FILE).get(folder.name, [])
        out.append((folder.name, PhantomSample(volume=volume, gt_boxes=gts)))
    logger.info(f"📂 dataset 로드: {root} ({len(out)} samples)")
    return out


def ground_truth_table(named: Sequence[Tuple[str, PhantomSample]]) -> Dict[str, list]:
    return {sid: list(sample.gt_boxes) for sid, sample in named}
