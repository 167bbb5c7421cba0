"""Group norm / LSSG block 테스트."""
import struct

import numpy as np
import pytest

from engine.attention import build_grouping, gather_group, lssg_forward, scatter_groups
from engine.blocks import (
    GnScope,
    LssgBlockParams,
    group_norm,
    lssg_block_backward,
    lssg_block_forward,
    lssg_block_forward_with_stats,
)
from engine.tensor import FeatureVolume, pointwise_conv
from evaluation.gradcheck import OP_TOLERANCE, block_suite, group_norm_suite
from storage.param_format import decode_params, encode_params, load_block_params, save_block_params
from utils.errors import ConfigError, InputError, ShapeError, StateError


def _block(shape, seed=0, **kw):
    rng = np.random.default_rng(seed)
    return FeatureVolume.random(shape, rng), LssgBlockParams.init(shape[0], rng, **kw)


# ──────────────────────────────────────────────────────────────────────────────
# Group norm
# ──────────────────────────────────────────────────────────────────────────────
def test_group_norm_constant_and_zero_gamma():
    x = FeatureVolume(np.full((4, 2, 2, 2), 3.0))
    y, _ = group_norm(x, np.ones(4), np.zeros(4), 2)
    assert np.all(y.values == 0.0)

    rng = np.random.default_rng(1)
    x = FeatureVolume.random((4, 2, 2, 2), rng)
    beta = np.array([1.0, 2.0, 3.0, 4.0])
    y, _ = group_norm(x, np.zeros(4), beta, 2)
    assert np.array_equal(y.values, np.broadcast_to(beta[:, None, None, None], (4, 2, 2, 2)))


def test_group_norm_statistics():
    rng = np.random.default_rng(2)
    x = FeatureVolume(100.0 * rng.standard_normal((4, 2, 2, 2)))
    y, _ = group_norm(x, np.ones(4), np.zeros(4), 2)
    grouped = y.values.reshape(2, -1)
    assert np.all(np.abs(grouped.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(grouped.var(axis=1) - 1.0) < 1e-6)


def test_group_norm_rejects_bad_groups():
    x = FeatureVolume(np.ones((3, 1, 1, 1)))
    with pytest.raises(ConfigError):
        group_norm(x, np.ones(3), np.zeros(3), 2)


def test_group_norm_gradcheck():
    for r in group_norm_suite((4, 2, 2, 2), seed=3):
        assert r.rel_error < OP_TOLERANCE, f"{r.param}: {r.rel_error:.3e}"


# ──────────────────────────────────────────────────────────────────────────────
# Block
# ──────────────────────────────────────────────────────────────────────────────
def test_zero_projection_is_identity():
    x, p = _block((2, 4, 2, 2), grouping_mode="lsg", group_count=2)
    arrays = p.arrays()
    arrays.update(w_z=np.zeros((2, 2)), gn_beta=np.zeros(2))
    z = lssg_block_forward(x, p.with_arrays(arrays))
    assert z == x


@pytest.mark.parametrize("mode", ["ssg", "lsg"])
@pytest.mark.parametrize("groups", [1, 2, 4])
def test_block_preserves_shape(mode, groups):
    x, p = _block((2, 8, 3, 3), seed=groups, grouping_mode=mode, group_count=groups)
    assert lssg_block_forward(x, p).dims == x.dims


def test_block_matches_composed_reference():
    x, p = _block((2, 4, 2, 2), seed=4, grouping_mode="ssg", group_count=2, gamma_init=1.3)
    grouping = build_grouping("ssg", 4, 2)
    y = lssg_forward(x, p.attn, grouping)
    parts = []
    for g in range(2):
        proj = pointwise_conv(gather_group(y, grouping, g), p.w_z)
        normed, _ = group_norm(proj, p.gn_gamma, p.gn_beta, p.gn_groups)
        parts.append(normed)
    expected = scatter_groups(parts, grouping).values + x.values
    assert np.array_equal(lssg_block_forward(x, p).values, expected)


def test_volume_scope_differs_from_group_scope():
    x, p = _block((2, 4, 2, 2), seed=5, group_count=2, gamma_init=1.0)
    p_vol = LssgBlockParams(attn=p.attn, w_z=p.w_z, gn_gamma=p.gn_gamma, gn_beta=p.gn_beta,
                            gn_groups=p.gn_groups, group_count=2, gn_scope=GnScope.VOLUME)
    assert lssg_block_forward(x, p_vol).dims == x.dims
    assert not np.array_equal(lssg_block_forward(x, p_vol).values, lssg_block_forward(x, p).values)


def test_residual_only_gradient():
    x, p = _block((2, 4, 2, 2), seed=6, group_count=2)
    arrays = p.arrays()
    arrays["w_z"] = np.zeros((2, 2))
    p = p.with_arrays(arrays)
    _, stats = lssg_block_forward_with_stats(x, p)
    g = FeatureVolume(np.random.default_rng(7).standard_normal((2, 4, 2, 2)))
    dx, _ = lssg_block_backward(x, p, stats, g)
    assert np.array_equal(dx.values, g.values)


def test_constant_input_gamma_gradient_vanishes():
    x = FeatureVolume(np.full((2, 4, 2, 2), 0.7))
    p = LssgBlockParams.init(2, np.random.default_rng(8), group_count=2)
    _, stats = lssg_block_forward_with_stats(x, p)
    g = FeatureVolume(np.random.default_rng(9).standard_normal((2, 4, 2, 2)))
    _, dp = lssg_block_backward(x, p, stats, g)
    assert np.allclose(dp.gn_gamma, 0.0, atol=1e-12)


def test_stale_stats_rejected():
    x, p = _block((2, 4, 2, 2), seed=10, group_count=2)
    _, stats = lssg_block_forward_with_stats(x, p)
    other = FeatureVolume(x.values + 1.0)
    with pytest.raises(StateError):
        lssg_block_backward(other, p, stats, FeatureVolume.zeros(x.dims))
    with pytest.raises(ShapeError):
        lssg_block_backward(x, p, stats, FeatureVolume.zeros((2, 4, 2, 1)))


@pytest.mark.parametrize("mode", ["ssg", "lsg"])
@pytest.mark.parametrize("groups", [1, 2, 4])
def test_block_gradcheck(mode, groups):
    for r in block_suite((2, 4, 2, 2), mode, groups, "cnl", seed=11):
        assert r.rel_error < OP_TOLERANCE, f"{r.suite}.{r.param}: {r.rel_error:.3e}"


def test_block_gradcheck_nl_kernel_and_volume_scope():
    for r in block_suite((2, 4, 2, 2), "lsg", 2, "nl", seed=12, gn_scope=GnScope.VOLUME):
        assert r.rel_error < OP_TOLERANCE, f"{r.suite}.{r.param}: {r.rel_error:.3e}"


def test_block_params_file_round_trip(tmp_path):
    _, p = _block((4, 4, 2, 2), seed=13, grouping_mode="lsg", group_count=2, kernel="nl")
    q = load_block_params(save_block_params(tmp_path / "block.lssp", p))
    assert q.grouping_mode == p.grouping_mode and q.kernel == p.kernel and q.group_count == 2
    for k, v in p.arrays().items():
        assert np.array_equal(q.arrays()[k], v)


def test_damaged_param_blob_is_input_error():
    blob = encode_params({"w": np.ones((2, 3))})
    # prefix 14 바이트 + meta "{}" 2 바이트 뒤에 section table, 'w' 의 length 필드는 36 번째 바이트부터
    with pytest.raises(InputError):
        decode_params(blob[:20])
    short_length = bytearray(blob)
    struct.pack_into("<Q", short_length, 36, 8)
    with pytest.raises(InputError):
        decode_params(bytes(short_length))
    bad_meta = bytearray(blob)
    bad_meta[14:16] = b"\xff\xff"
    with pytest.raises(InputError):
        decode_params(bytes(bad_meta))
    arrays, meta = decode_params(blob)
    assert meta == {} and np.array_equal(arrays["w"], np.ones((2, 3)))
