"""LSSV 볼륨 파일 포맷 (bit-exact).

    magic   b"LSSV"
    version u8 (0x01)
    C,D,H,W u32 little-endian ×4
    prec    u8 (4 → float32, 8 → float64)
    payload C·D·H·W 개의 little-endian IEEE-754 값 (C-major, D, H, W 순)
"""
from __future__ import annotations

import logging
import struct
from pathlib import Path
from typing import Union

import numpy as np

from engine.tensor import FeatureVolume
from utils.errors import InputError

logger = logging.getLogger(__name__)

MAGIC = b"LSSV"
VERSION = 0x01
_HEADER = struct.Struct("<4sB4IB")
_PRECISION = {4: "<f4", 8: "<f8"}


def encode_volume(volume: FeatureVolume) -> bytes:
    precision = volume.dtype.itemsize
    if precision not in _PRECISION:
        raise InputError(f"지원하지 않는 정밀도입니다: {volume.dtype}")
    header = _HEADER.pack(MAGIC, VERSION, *volume.dims, precision)
    payload = volume.values.astype(_PRECISION[precision], copy=False).tobytes(order="C")
    return header + payload


def decode_volume(blob: bytes) -> FeatureVolume:
    if len(blob) < _HEADER.size:
        raise InputError("LSSV 헤더가 잘렸습니다.")
    magic, version, c, d, h, w, precision = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise InputError(f"LSSV magic 불일치: {magic!r}")
    if version != VERSION:
        raise InputError(f"지원하지 않는 LSSV 버전: {version}")
    if precision not in _PRECISION:
        raise InputError(f"알 수 없는 precision byte: {precision}")
    count = c * d * h * w
    expected = _HEADER.size + count * precision
    if len(blob) != expected:
        raise InputError(f"LSSV payload 길이 불일치: {len(blob)} != {expected}")
    values = np.frombuffer(blob, dtype=_PRECISION[precision], count=count, offset=_HEADER.size)
    native = np.float32 if precision == 4 else np.float64
    return FeatureVolume(values.reshape(c, d, h, w), dtype=native)


def write_volume(path: Union[str, Path], volume: FeatureVolume) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_volume(volume))
    logger.debug(f"💾 LSSV 저장: {path} {volume.dims}")
    return path


def read_volume(path: Union[str, Path]) -> FeatureVolume:
    path = Path(path)
    if not path.exists():
        raise InputError(f"볼륨 파일이 없습니다: {path}")
    return decode_volume(path.read_bytes())
