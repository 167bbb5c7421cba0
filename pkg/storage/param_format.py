"""LSSP 파라미터 컨테이너 (block 파라미터, 네트워크 checkpoint 공용).

    magic      b"LSSP"
    version    u8 (0x01)
    precision  u8 (4|8)
    n_sections u32
    meta_len   u32, 이어서 UTF-8 JSON 메타데이터 (설정값)
    section table, 항목마다:
        name_len u16, name (UTF-8), ndim u8, dims u32×ndim, offset u64, length u64
    payload    섹션 순서대로 이어 붙인 little-endian IEEE-754 값 (offset 은 파일 시작 기준)
"""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from engine.attention import AttentionWeights
from engine.blocks import LssgBlockParams
from utils.errors import InputError

logger = logging.getLogger(__name__)

MAGIC = b"LSSP"
VERSION = 0x01
_PREFIX = struct.Struct("<4sBBII")
_PRECISION = {4: "<f4", 8: "<f8"}


def _entry_size(name: bytes, ndim: int) -> int:
    return 2 + len(name) + 1 + 4 * ndim + 8 + 8


def encode_params(arrays: Dict[str, np.ndarray], meta: Optional[dict] = None, precision: int = 8) -> bytes:
    if precision not in _PRECISION:
        raise InputError(f"지원하지 않는 precision: {precision}")
    meta_bytes = json.dumps(meta or {}, sort_keys=True, ensure_ascii=False).encode("utf-8")
    names = [name.encode("utf-8") for name in arrays]
    header_len = _PREFIX.size + len(meta_bytes) + sum(
        _entry_size(n, np.ndim(arr)) for n, arr in zip(names, arrays.values())
    )

    table = bytearray()
    payload = bytearray()
    offset = header_len
    for name, arr in zip(names, arrays.values()):
        data = np.ascontiguousarray(arr, dtype=_PRECISION[precision]).tobytes(order="C")
        shape = np.shape(arr)
        table += struct.pack("<H", len(name)) + name
        table += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}I", *shape)
        table += struct.pack("<QQ", offset, len(data))
        payload += data
        offset += len(data)

    prefix = _PREFIX.pack(MAGIC, VERSION, precision, len(names), len(meta_bytes))
    return bytes(prefix + meta_bytes + table + payload)


def decode_params(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < _PREFIX.size:
        raise InputError("LSSP 헤더가 잘렸습니다.")
    magic, version, precision, count, meta_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC or version != VERSION:
        raise InputError(f"LSSP 헤더 불일치: magic={magic!r}, version={version}")
    if precision not in _PRECISION:
        raise InputError(f"알 수 없는 precision byte: {precision}")
    pos = _PREFIX.size
    try:
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8")) if meta_len else {}
        arrays = _read_sections(blob, pos + meta_len, count, precision)
    except InputError:
        raise
    except (struct.error, ValueError) as exc:
        raise InputError(f"LSSP 본문이 손상되었습니다: {exc}") from exc
    return arrays, meta


def _read_sections(blob: bytes, pos: int, count: int, precision: int) -> Dict[str, np.ndarray]:
    native = np.float32 if precision == 4 else np.float64
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        offset, length = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        if offset + length > len(blob):
            raise InputError(f"섹션 {name!r} 이 파일 끝을 넘어섭니다.")
        values = np.frombuffer(blob, dtype=_PRECISION[precision], count=length // precision, offset=offset)
        arrays[name] = values.reshape(shape).astype(native)
    return arrays


def write_params(path: Union[str, Path], arrays: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_params(arrays, meta))
    logger.info(f"💾 파라미터 저장: {path} ({len(arrays)} sections)")
    return path


def read_params(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"파라미터 파일이 없습니다: {path}")
    return decode_params(path.read_bytes())


# ──────────────────────────────────────────────────────────────────────────────
# LSSG block 전용 헬퍼
# ──────────────────────────────────────────────────────────────────────────────
def block_meta(p: LssgBlockParams) -> dict:
    return {
        "gn_groups": p.gn_groups,
        "grouping_mode": p.grouping_mode.value,
        "group_count": p.group_count,
        "kernel": p.kernel.value,
        "gn_scope": p.gn_scope.value,
        "eps": p.eps,
    }


def save_block_params(path: Union[str, Path], p: LssgBlockParams) -> Path:
    return write_params(path, p.arrays(), block_meta(p))


def load_block_params(path: Union[str, Path]) -> LssgBlockParams:
    arrays, meta = read_params(path)
    missing = {"w_theta", "w_phi", "w_g", "w_z", "gn_gamma", "gn_beta"} - set(arrays)
    if missing:
        raise InputError(f"block 파라미터 섹션 누락: {sorted(missing)}")
    return LssgBlockParams(
        attn=AttentionWeights(arrays["w_theta"], arrays["w_phi"], arrays["w_g"]),
        w_z=arrays["w_z"],
        gn_gamma=arrays["gn_gamma"],
        gn_beta=arrays["gn_beta"],
        **meta,
    )
