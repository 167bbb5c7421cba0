"""toy 네트워크용 3-D convolution / deconvolution / 활성화 (forward + backward).

모든 함수는 batch 축 없이 (C, D, H, W) 배열 하나를 다룹니다. 커널 오프셋 순서로 누적하므로
같은 입력이면 결과가 항상 같습니다.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from utils.errors import ShapeError


def _out_len(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _window(k_off: int, stride: int, out_len: int) -> slice:
    return slice(k_off, k_off + stride * (out_len - 1) + 1, stride)


def conv3d_forward(
    x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, padding: int = 1
) -> np.ndarray:
    """x (C_in,D,H,W), w (C_out,C_in,k,k,k) → (C_out,D',H',W')."""
    if w.ndim != 5 or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv 가중치 {w.shape} 와 입력 {x.shape} 이 맞지 않습니다.")
    k = w.shape[2]
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3) if padding else x
    out_dims = tuple(_out_len(n, k, stride, padding) for n in x.shape[1:])
    if min(out_dims) < 1:
        raise ShapeError(f"입력 {x.shape} 가 커널 {k} 에 비해 너무 작습니다.")
    out = np.zeros((w.shape[0],) + out_dims, dtype=x.dtype)
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                patch = xp[:, _window(kd, stride, out_dims[0]), _window(kh, stride, out_dims[1]),
                           _window(kw, stride, out_dims[2])]
                out += np.tensordot(w[:, :, kd, kh, kw], patch, axes=([1], [0]))
    out += b[:, None, None, None]
    return out


def conv3d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray, stride: int = 1, padding: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dx, dw, db)"""
    k = w.shape[2]
    xp = np.pad(x, ((0, 0),) + ((padding, padding),) * 3) if padding else x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    out_dims = dy.shape[1:]
    for kd in range(k):
        for kh in range(k):
            for kw in range(k):
                sl = (slice(None), _window(kd, stride, out_dims[0]), _window(kh, stride, out_dims[1]),
                      _window(kw, stride, out_dims[2]))
                dw[:, :, kd, kh, kw] = np.tensordot(dy, xp[sl], axes=([1, 2, 3], [1, 2, 3]))
                dxp[sl] += np.tensordot(w[:, :, kd, kh, kw].T, dy, axes=([1], [0]))
    db = dy.sum(axis=(1, 2, 3))
    if padding:
        d, h, wd = x.shape[1:]
        dxp = dxp[:, padding:padding + d, padding:padding + h, padding:padding + wd]
    return dxp, dw, db


def deconv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2×2×2, stride 2 transposed convolution. w (C_in, C_out, 2, 2, 2)."""
    if w.ndim != 5 or w.shape[0] != x.shape[0] or w.shape[2:] != (2, 2, 2):
        raise ShapeError(f"deconv 가중치 {w.shape} 와 입력 {x.shape} 이 맞지 않습니다.")
    d, h, wd = x.shape[1:]
    out = np.empty((w.shape[1], 2 * d, 2 * h, 2 * wd), dtype=x.dtype)
    for kd in range(2):
        for kh in range(2):
            for kw in range(2):
                out[:, kd::2, kh::2, kw::2] = np.tensordot(w[:, :, kd, kh, kw].T, x, axes=([1], [0]))
    out += b[:, None, None, None]
    return out


def deconv3d_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    dx = np.zeros_like(x)
    dw = np.zeros_like(w)
    for kd in range(2):
        for kh in range(2):
            for kw in range(2):
                dy_k = dy[:, kd::2, kh::2, kw::2]
                dx += np.tensordot(w[:, :, kd, kh, kw], dy_k, axes=([1], [0]))
                dw[:, :, kd, kh, kw] = np.tensordot(x, dy_k, axes=([1, 2, 3], [1, 2, 3]))
    return dx, dw, dy.sum(axis=(1, 2, 3))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # 큰 음수에서 overflow 경고가 나지 않도록 부호별로 계산
    out = np.empty_like(x, dtype=np.result_type(x, np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def he_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)
