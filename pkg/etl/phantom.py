"""CT 를 흉내 낸 합성 phantom 볼륨 생성기.

구형 nodule 과 여러 slice 를 가로지르는 관(tube, 혈관/기관지) 을 배경 위에 그립니다.
voxel i 의 중심은 i + 0.5 이고, 각 물체는 경계에서 1 voxel 폭으로 부드럽게 사라지는 indicator
clip(r + 0.5 − dist, 0, 1) 로 기여합니다. 여러 물체가 겹치면 큰 값을 씁니다.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator
from tqdm import tqdm

from detection.geometry import Box3D, clip_box
from engine.tensor import FeatureVolume
from utils.errors import SpecError

logger = logging.getLogger(__name__)

Point = Tuple[float, float, float]


class NoduleSpec(BaseModel):
    center: Point = Field(..., description="(z, y, x) voxel 좌표")
    radius: float = Field(..., gt=0)
    intensity: float = Field(default=0.8, ge=0.0, le=1.0)


class TubeSpec(BaseModel):
    path: List[Point] = Field(..., description="polyline 꼭짓점 (z, y, x)")
    radius: float = Field(..., gt=0)
    intensity: float = Field(default=0.7, ge=0.0, le=1.0)

    @field_validator("path")
    @classmethod
    def _two_points(cls, v):
        if len(v) < 2:
            raise ValueError("tube path 는 꼭짓점이 2 개 이상이어야 합니다.")
        return v


class PhantomSpec(BaseModel):
    volume_dims: Tuple[int, int, int] = Field(default=(32, 32, 32), description="(D, H, W)")
    nodules: List[NoduleSpec] = Field(default_factory=list)
    tubes: List[TubeSpec] = Field(default_factory=list)
    background: float = Field(default=0.1, ge=0.0, le=1.0)
    noise_std: float = Field(default=0.0, ge=0.0)
    seed: int = Field(default=0)

    @field_validator("volume_dims")
    @classmethod
    def _positive_dims(cls, v):
        if min(v) < 1:
            raise ValueError(f"volume_dims 는 모두 1 이상이어야 합니다: {v}")
        return v


@dataclass
class PhantomSample:
    volume: FeatureVolume
    gt_boxes: List[Box3D]
    nodule_voxels: float = 0.0
    tube_voxels: float = 0.0
    spec: Optional[PhantomSpec] = field(default=None, repr=False)


# ──────────────────────────────────────────────────────────────────────────────
# indicator
# ──────────────────────────────────────────────────────────────────────────────
def voxel_centers(dims: Tuple[int, int, int]) -> np.ndarray:
    """(D, H, W, 3) voxel 중심 좌표."""
    axes = [np.arange(n, dtype=np.float64) + 0.5 for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def soft_indicator(dist: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def sphere_indicator(centers: np.ndarray, nodule: NoduleSpec) -> np.ndarray:
    dist = np.linalg.norm(centers - np.asarray(nodule.center), axis=-1)
    return soft_indicator(dist, nodule.radius)


def segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=-1)
    t = np.clip(((points - a) @ ab) / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[..., None] * ab), axis=-1)


def tube_indicator(centers: np.ndarray, tube: TubeSpec) -> np.ndarray:
    nodes = np.asarray(tube.path, dtype=np.float64)
    dist = np.full(centers.shape[:-1], np.inf)
    for a, b in zip(nodes[:-1], nodes[1:]):
        dist = np.minimum(dist, segment_distance(centers, a, b))
    return soft_indicator(dist, tube.radius)


def nodule_box(nodule: NoduleSpec) -> Box3D:
    side = 2.0 * nodule.radius
    return Box3D(*nodule.center, side, side, side)


def _tube_reaches_volume(tube: TubeSpec, dims: Tuple[int, int, int]) -> bool:
    nodes = np.asarray(tube.path, dtype=np.float64)
    lo = nodes.min(axis=0) - tube.radius
    hi = nodes.max(axis=0) + tube.radius
    return bool(np.all(hi > 0) and np.all(lo < np.asarray(dims)))


# ──────────────────────────────────────────────────────────────────────────────
# 생성
# ──────────────────────────────────────────────────────────────────────────────
def generate_phantom(spec: PhantomSpec) -> PhantomSample:
    """seed 로 결정되는 phantom 한 개. 볼륨 밖에 완전히 놓인 물체는 SpecError."""
    dims = tuple(spec.volume_dims)
    centers = voxel_centers(dims)
    objects = np.zeros(dims)
    gt_boxes: List[Box3D] = []
    nodule_voxels = tube_voxels = 0.0

    for i, nodule in enumerate(spec.nodules):
        box = nodule_box(nodule)
        lo, hi = box.bounds()
        if np.all(lo >= 0) and np.all(hi <= np.asarray(dims)):
            clipped = box
        else:
            clipped = clip_box(box, dims)
            if clipped is None:
                raise SpecError(f"nodule {i} 가 볼륨 {dims} 밖에 있습니다: center={nodule.center}")
            logger.warning(f"⚠️ nodule {i} 의 GT box 가 볼륨 경계에서 잘렸습니다.")
        ind = sphere_indicator(centers, nodule)
        objects = np.maximum(objects, nodule.intensity * ind)
        nodule_voxels += float(ind.sum())
        gt_boxes.append(clipped)

    for i, tube in enumerate(spec.tubes):
        if not _tube_reaches_volume(tube, dims):
            raise SpecError(f"tube {i} 가 볼륨 {dims} 밖에 있습니다.")
        ind = tube_indicator(centers, tube)
        objects = np.maximum(objects, tube.intensity * ind)
        tube_voxels += float(ind.sum())

    values = spec.background + objects
    if spec.noise_std > 0:
        rng = np.random.default_rng(spec.seed)
        values = values + rng.normal(0.0, spec.noise_std, size=dims)
    values = np.clip(values, 0.0, 1.0)
    return PhantomSample(
        volume=FeatureVolume(values[None]),
        gt_boxes=gt_boxes,
        nodule_voxels=nodule_voxels,
        tube_voxels=tube_voxels,
        spec=spec,
    )


class Difficulty(str, Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"


# nodules / tubes 개수 범위 (양끝 포함), 반지름 범위, 잡음
DIFFICULTY_TABLE: Dict[Difficulty, dict] = {
    Difficulty.EASY: dict(nodules=(1, 3), tubes=(2, 5), nodule_radius=(2.5, 4.5),
                          tube_radius=(1.5, 2.5), noise=0.02),
    Difficulty.MEDIUM: dict(nodules=(1, 3), tubes=(4, 7), nodule_radius=(2.0, 4.0),
                            tube_radius=(1.5, 2.5), noise=0.05),
    Difficulty.HARD: dict(nodules=(1, 2), tubes=(6, 9), nodule_radius=(2.0, 3.5),
                          tube_radius=(1.5, 3.0), noise=0.08),
}


def _random_nodules(rng: np.random.Generator, dims, count: int, radius_range) -> List[NoduleSpec]:
    nodules: List[NoduleSpec] = []
    attempts = 0
    while len(nodules) < count and attempts < 100:
        attempts += 1
        r = float(rng.uniform(*radius_range))
        center = tuple(float(rng.uniform(r + 1.0, n - r - 1.0)) for n in dims)
        if any(np.linalg.norm(np.subtract(center, o.center)) < r + o.radius + 2.0 for o in nodules):
            continue
        nodules.append(NoduleSpec(center=center, radius=r, intensity=float(rng.uniform(0.6, 0.9))))
    return nodules


def _random_tube(rng: np.random.Generator, dims, radius_range) -> TubeSpec:
    """depth 축을 따라 볼륨 전체를 지나가는 3 구간 polyline."""
    d, h, w = dims
    z = np.linspace(-2.0, d + 2.0, 4)
    y = np.clip(rng.uniform(4.0, h - 4.0) + np.cumsum(rng.normal(0.0, h / 8.0, 4)), 1.0, h - 1.0)
    x = np.clip(rng.uniform(4.0, w - 4.0) + np.cumsum(rng.normal(0.0, w / 8.0, 4)), 1.0, w - 1.0)
    path = [(float(a), float(b), float(c)) for a, b, c in zip(z, y, x)]
    return TubeSpec(path=path, radius=float(rng.uniform(*radius_range)), intensity=float(rng.uniform(0.5, 0.8)))


def random_spec(rng: np.random.Generator, difficulty: Difficulty, dims=(32, 32, 32)) -> PhantomSpec:
    table = DIFFICULTY_TABLE[Difficulty(difficulty)]
    n_nod = int(rng.integers(table["nodules"][0], table["nodules"][1] + 1))
    n_tube = int(rng.integers(table["tubes"][0], table["tubes"][1] + 1))
    nodules = _random_nodules(rng, dims, n_nod, table["nodule_radius"])
    tubes = [_random_tube(rng, dims, table["tube_radius"]) for _ in range(n_tube)]
    return PhantomSpec(
        volume_dims=tuple(dims),
        nodules=nodules,
        tubes=tubes,
        noise_std=table["noise"],
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def generate_dataset(
    n_samples: int,
    difficulty=Difficulty.EASY,
    seed: int = 0,
    dims: Tuple[int, int, int] = (32, 32, 32),
    progress: bool = False,
) -> List[PhantomSample]:
    """sample 마다 SeedSequence 로 파생한 독립 seed 를 씁니다."""
    if n_samples < 1:
        raise SpecError(f"n_samples 는 1 이상이어야 합니다: {n_samples}")
    difficulty = Difficulty(difficulty)
    children = np.random.SeedSequence(seed).spawn(n_samples)
    samples = []
    for child in tqdm(children, desc=f"phantom[{difficulty.value}]", disable=not progress):
        rng = np.random.default_rng(child)
        samples.append(generate_phantom(random_spec(rng, difficulty, dims)))
    logger.info(
        f"✅ phantom {n_samples} 개 생성 (difficulty={difficulty.value}, seed={seed}, "
        f"nodules={sum(len(s.gt_boxes) for s in samples)})"
    )
    return samples
