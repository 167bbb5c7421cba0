"""FeatureVolume / pointwise conv / vec 연산 테스트."""
from fractions import Fraction

import numpy as np
import pytest

from engine.tensor import (
    FeatureVolume,
    FlatEmbedding,
    add,
    devectorize,
    dot,
    pointwise_conv,
    scale,
    vectorize,
)
from storage.volume_format import decode_volume, encode_volume, read_volume, write_volume
from utils.errors import InputError, ShapeError


def test_feature_volume_rejects_bad_rank_and_nan():
    with pytest.raises(ShapeError):
        FeatureVolume(np.zeros((2, 3, 3)))
    with pytest.raises(InputError):
        FeatureVolume(np.full((1, 1, 1, 1), np.nan))


def test_feature_volume_is_read_only_copy():
    raw = np.ones((1, 2, 2, 2))
    x = FeatureVolume(raw)
    raw[0, 0, 0, 0] = 5.0
    assert x.values[0, 0, 0, 0] == 1.0, "생성 후 원본 수정이 볼륨에 새어 들어오면 안 됩니다"
    with pytest.raises(ValueError):
        x.values[0, 0, 0, 0] = 2.0


def test_pointwise_conv_identity_and_zero():
    rng = np.random.default_rng(0)
    x = FeatureVolume.random((3, 2, 4, 4), rng)
    assert pointwise_conv(x, np.eye(3)) == x
    out = pointwise_conv(x, np.zeros((2, 3)), np.zeros(2))
    assert np.all(out.values == 0.0)
    assert out.dims == (2, 2, 4, 4)


def test_pointwise_conv_matches_scalar_loop():
    rng = np.random.default_rng(1)
    x = FeatureVolume.random((3, 2, 3, 2), rng)
    w = rng.standard_normal((2, 3))
    out = pointwise_conv(x, w).values
    for o in range(2):
        for d in range(2):
            for h in range(3):
                for ww in range(2):
                    expected = sum(w[o, c] * x.values[c, d, h, ww] for c in range(3))
                    assert abs(out[o, d, h, ww] - expected) < 1e-12


def test_pointwise_conv_is_linear_and_leaves_inputs_untouched():
    rng = np.random.default_rng(2)
    x = FeatureVolume.random((3, 2, 2, 2), rng)
    y = FeatureVolume.random((3, 2, 2, 2), rng)
    w = rng.standard_normal((4, 3))
    before = x.values.copy()
    lhs = pointwise_conv(x.with_values(2.0 * x.values - 0.5 * y.values), w).values
    rhs = 2.0 * pointwise_conv(x, w).values - 0.5 * pointwise_conv(y, w).values
    assert np.linalg.norm(lhs - rhs) <= 1e-10 * np.linalg.norm(rhs)
    assert np.array_equal(x.values, before)


def test_pointwise_conv_shape_mismatch():
    x = FeatureVolume(np.ones((3, 1, 1, 1)))
    with pytest.raises(ShapeError):
        pointwise_conv(x, np.ones((2, 4)))


def test_vectorize_ordering_and_round_trip():
    assert vectorize(FeatureVolume(np.full((1, 1, 1, 1), 7.0))).values.tolist() == [7.0]

    rng = np.random.default_rng(3)
    x = FeatureVolume.random((4, 6, 5, 5), rng)
    e = vectorize(x)
    assert devectorize(e, x.dims) == x

    marker = np.zeros((2, 3, 4, 5))
    marker[1, 0, 0, 0] = 1.0
    flat = vectorize(FeatureVolume(marker)).values
    assert int(np.argmax(flat)) == 3 * 4 * 5, "(c=1,d=0,h=0,w=0) 는 D·H·W 위치여야 합니다"

    with pytest.raises(ShapeError):
        devectorize(e, (4, 6, 5, 4))


def test_dot_basis_and_zero():
    n = 5
    for i in range(n):
        for j in range(n):
            ei, ej = FlatEmbedding(np.eye(n)[i]), FlatEmbedding(np.eye(n)[j])
            assert dot(ei, ej) == (1.0 if i == j else 0.0)
    x = FlatEmbedding(np.arange(n, dtype=float))
    assert dot(x, FlatEmbedding(np.zeros(n))) == 0.0
    with pytest.raises(ShapeError):
        dot(x, FlatEmbedding(np.zeros(n + 1)))


def test_dot_against_exact_rational_sum():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal(64), rng.standard_normal(64)
    exact = float(sum(Fraction(float(u)) * Fraction(float(v)) for u, v in zip(a, b)))
    got = dot(FlatEmbedding(a), FlatEmbedding(b))
    assert abs(got - exact) <= 1e-12 * max(abs(exact), 1.0)


def test_dot_is_deterministic():
    rng = np.random.default_rng(5)
    a, b = FlatEmbedding(rng.standard_normal(1000)), FlatEmbedding(rng.standard_normal(1000))
    assert dot(a, b) == dot(a, b)


def test_scale_and_add():
    a = FlatEmbedding(np.array([1.0, -2.0]))
    b = FlatEmbedding(np.array([0.5, 0.5]))
    assert scale(a, 2.0) == FlatEmbedding(np.array([2.0, -4.0]))
    assert add(a, b) == FlatEmbedding(np.array([1.5, -1.5]))


def test_lssv_file_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    for dtype in (np.float32, np.float64):
        x = FeatureVolume.random((2, 3, 4, 5), rng, dtype=dtype)
        path = write_volume(tmp_path / f"v_{np.dtype(dtype).itemsize}.lssv", x)
        y = read_volume(path)
        assert y == x and y.dtype == x.dtype


def test_lssv_rejects_corrupt_blob():
    blob = encode_volume(FeatureVolume(np.ones((1, 2, 2, 2))))
    with pytest.raises(InputError):
        decode_volume(b"XXXX" + blob[4:])
    with pytest.raises(InputError):
        decode_volume(blob[:-1])
