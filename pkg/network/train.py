"""SGD 학습 루프 (RPN 단계 → FPR 단계) 와 LSSP checkpoint."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from detection.geometry import Box3D, Detection, anchor_array, encode_boxes
from detection.heads import collect_roi_features, fpr_backward, fpr_forward
from detection.pipeline import propose
from network.config import LayoutConfig, TrainConfig
from network.loss import (
    NEGATIVE,
    POSITIVE,
    assign_anchor_targets,
    detection_loss,
    fpr_loss,
)
from network.toynet import FPR_KEYS, ToyNetParams, network_backward, network_forward
from storage.param_format import read_params, write_params
from utils.errors import StateError, TrainingDivergedError

logger = logging.getLogger(__name__)

LOG_COLUMNS = ["step", "loss_cls", "loss_reg", "loss_total"]
FPR_CANDIDATES = 8


# ──────────────────────────────────────────────────────────────────────────────
# SGD
# ──────────────────────────────────────────────────────────────────────────────
def sgd_step(
    params: Union[ToyNetParams, Mapping[str, np.ndarray]],
    grads: Mapping[str, np.ndarray],
    cfg: TrainConfig,
    velocity: Optional[Dict[str, np.ndarray]] = None,
):
    """v ← μ·v + (g + λ·p),  p ← p − lr·v. velocity 가 None 이면 0 에서 시작합니다.

    weight decay 는 gradient 에 더하는 L2 항으로 처리합니다. 반환: (새 params, 새 velocity).
    """
    arrays = params.arrays if isinstance(params, ToyNetParams) else params
    if set(grads) != set(arrays):
        raise StateError(f"gradient registry 불일치: {sorted(set(grads) ^ set(arrays))[:5]}")
    if velocity is None:
        velocity = {k: np.zeros_like(v) for k, v in arrays.items()}
    elif set(velocity) != set(arrays):
        raise StateError("velocity registry 가 파라미터와 다릅니다.")

    new_params: Dict[str, np.ndarray] = {}
    new_velocity: Dict[str, np.ndarray] = {}
    for name, p in arrays.items():
        g = np.asarray(grads[name])
        if g.shape != p.shape:
            raise StateError(f"{name}: gradient shape {g.shape} != {p.shape}")
        v = cfg.momentum * velocity[name] + (g + cfg.weight_decay * p)
        new_velocity[name] = v
        new_params[name] = p - cfg.learning_rate * v
    if isinstance(params, ToyNetParams):
        return params.with_arrays(new_params), new_velocity
    return new_params, new_velocity


# ──────────────────────────────────────────────────────────────────────────────
# Training
# ──────────────────────────────────────────────────────────────────────────────
@dataclass
class TrainResult:
    params: ToyNetParams
    log: pd.DataFrame
    fpr_log: pd.DataFrame = field(default_factory=lambda: pd.DataFrame(columns=LOG_COLUMNS))

    @property
    def losses(self) -> List[float]:
        return self.log["loss_total"].tolist()


def _gt_array(boxes: Sequence[Box3D]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 6))
    return np.stack([b.to_array() for b in boxes])


def _sample_arrays(sample) -> Tuple[np.ndarray, np.ndarray]:
    return np.asarray(sample.volume.values, dtype=np.float64), _gt_array(sample.gt_boxes)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _check_finite(value: float, step: int, batch: np.ndarray, stage: str) -> None:
    if not np.isfinite(value):
        idx = [int(i) for i in batch]
        logger.error(f"❌ {stage} loss 가 발산했습니다: step={step}, batch={idx}")
        raise TrainingDivergedError(f"{stage} loss 가 NaN/Inf 입니다 (step {step}, batch {idx})", step, idx)


def rpn_batch_gradients(
    net: ToyNetParams, dataset: Sequence, batch: np.ndarray, cfg: TrainConfig, anchors: np.ndarray
) -> Tuple[Dict[str, np.ndarray], float, float]:
    """batch 평균 gradient 와 (cls, reg) loss. sample 순서대로 누적합니다."""
    total = {k: np.zeros_like(v) for k, v in net.arrays.items()}
    cls_sum = reg_sum = 0.0
    for i in batch:
        volume, gts = _sample_arrays(dataset[int(i)])
        outputs, cache = network_forward(net, volume)
        targets = assign_anchor_targets(anchors, gts, cfg.pos_iou, cfg.neg_iou)
        loss, d_logits, d_offsets = detection_loss(
            outputs.logits, outputs.offsets, targets, cfg.neg_ratio, cfg.min_negatives
        )
        grads = network_backward(net, cache, d_logits, d_offsets)
        for k, g in grads.items():
            total[k] += g
        cls_sum += loss.cls
        reg_sum += loss.reg
    n = len(batch)
    return {k: g / n for k, g in total.items()}, cls_sum / n, reg_sum / n


def _fpr_targets(candidates, gts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """후보 중심이 GT box 안이면 positive, offset 목표는 그 GT."""
    labels = np.full(len(candidates), NEGATIVE, dtype=np.int8)
    offsets = np.zeros((len(candidates), 6))
    for c, det in enumerate(candidates):
        for j in range(gts.shape[0]):
            gt = Box3D.from_array(gts[j])
            if gt.contains_point(det.box.center):
                labels[c] = POSITIVE
                offsets[c] = encode_boxes(det.box.to_array(), gts[j])[0]
                break
    return labels, offsets


def fpr_batch_gradients(
    net: ToyNetParams, dataset: Sequence, batch: np.ndarray, nms_iou: float = 0.1
) -> Tuple[Dict[str, np.ndarray], float, float]:
    """backbone feature 는 고정하고 FC 층 gradient 만 계산합니다."""
    fpr = net.fpr()
    total = {k: np.zeros_like(net[k]) for k in FPR_KEYS}
    cls_sum = reg_sum = 0.0
    for i in batch:
        volume, gts = _sample_arrays(dataset[int(i)])
        outputs, _ = network_forward(net, volume)
        candidates = propose(net, outputs, FPR_CANDIDATES, nms_iou)
        candidates += [Detection(box=Box3D.from_array(g), score=1.0) for g in gts]
        kept, matrix = collect_roi_features(
            candidates, outputs.shallow, outputs.head, 1, net.layout.output_stride, fpr.pool_grid
        )
        if not kept:
            continue
        labels, offsets = _fpr_targets([candidates[k] for k in kept], gts)
        out, cache = fpr_forward(matrix, fpr)
        loss, d_out = fpr_loss(out, labels, offsets)
        grads = fpr_backward(cache, fpr, d_out)
        for key, field_ in FPR_KEYS.items():
            total[key] += grads[field_]
        cls_sum += loss.cls
        reg_sum += loss.reg
    n = len(batch)
    return {k: g / n for k, g in total.items()}, cls_sum / n, reg_sum / n


def train_toy(
    net: ToyNetParams,
    dataset: Sequence,
    cfg: TrainConfig,
    log_path: Optional[Union[str, Path]] = None,
    progress: bool = False,
) -> TrainResult:
    """dataset 원소는 volume (FeatureVolume, 1 채널) 과 gt_boxes 를 가진 객체 (PhantomSample)."""
    if not dataset:
        raise StateError("학습 dataset 이 비어 있습니다.")
    rng = np.random.default_rng(cfg.seed)
    anchors = anchor_array(net.layout.output_dims, net.anchor_set)
    logger.info(
        f"🚀 학습 시작: samples={len(dataset)} epochs={cfg.epochs}+{cfg.fpr_epochs} "
        f"batch={cfg.batch_size} lr={cfg.learning_rate} layout={net.layout.label}"
    )

    rows = []
    velocity = None
    step = 0
    for _ in tqdm(range(cfg.epochs), desc="rpn", disable=not progress):
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            grads, l_cls, l_reg = rpn_batch_gradients(net, dataset, batch, cfg, anchors)
            _check_finite(l_cls + l_reg, step, batch, "RPN")
            rows.append((step, l_cls, l_reg, l_cls + l_reg))
            net, velocity = sgd_step(net, grads, cfg, velocity)
            step += 1

    fpr_rows = []
    fpr_arrays = {k: net[k] for k in FPR_KEYS}
    fpr_velocity = None
    step = 0
    for _ in tqdm(range(cfg.fpr_epochs), desc="fpr", disable=not progress):
        for batch in _batches(len(dataset), cfg.batch_size, rng):
            grads, l_cls, l_reg = fpr_batch_gradients(net, dataset, batch)
            _check_finite(l_cls + l_reg, step, batch, "FPR")
            fpr_rows.append((step, l_cls, l_reg, l_cls + l_reg))
            fpr_arrays, fpr_velocity = sgd_step(fpr_arrays, grads, cfg, fpr_velocity)
            net = net.with_arrays({**net.arrays, **fpr_arrays})
            step += 1

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    fpr_log = pd.DataFrame(fpr_rows, columns=LOG_COLUMNS)
    if log_path is not None:
        write_train_log(log_path, log, fpr_log)
    if len(log):
        logger.info(f"✅ 학습 완료: loss {log['loss_total'].iloc[0]:.4f} → {log['loss_total'].iloc[-1]:.4f}")
    return TrainResult(params=net, log=log, fpr_log=fpr_log)


def write_train_log(path: Union[str, Path], log: pd.DataFrame, fpr_log: Optional[pd.DataFrame] = None) -> Path:
    """RPN 로그는 path 에, FPR 로그는 같은 폴더의 <stem>_fpr.csv 에 씁니다."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, index=False, columns=LOG_COLUMNS)
    if fpr_log is not None and len(fpr_log):
        fpr_log.to_csv(path.with_name(f"{path.stem}_fpr.csv"), index=False, columns=LOG_COLUMNS)
    return path


# ──────────────────────────────────────────────────────────────────────────────
# Checkpoint
# ──────────────────────────────────────────────────────────────────────────────
def save_checkpoint(path: Union[str, Path], net: ToyNetParams) -> Path:
    return write_params(path, net.arrays, {"layout": net.layout.model_dump(mode="json")})


def load_checkpoint(path: Union[str, Path]) -> ToyNetParams:
    arrays, meta = read_params(path)
    if "layout" not in meta:
        raise StateError(f"checkpoint 에 layout 메타데이터가 없습니다: {path}")
    layout = LayoutConfig(**meta["layout"])
    return ToyNetParams(layout, {name: arrays[name] for name in arrays})
