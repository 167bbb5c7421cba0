"""Slice grouping / non-local 계열 attention 테스트."""
import numpy as np
import pytest

from engine.attention import (
    AttentionKernel,
    AttentionWeights,
    GroupingMode,
    build_grouping,
    compact_nonlocal_fast,
    compact_nonlocal_naive,
    gather_group,
    lssg_backward,
    lssg_forward,
    nonlocal_original,
    scatter_groups,
)
from engine.tensor import FeatureVolume
from evaluation.gradcheck import FD_STEP, OP_TOLERANCE, check_arrays, lssg_suite
from utils.errors import CapacityError, ConfigError, PartitionError, ShapeError


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _setup(shape, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureVolume.random(shape, rng), AttentionWeights.init(shape[0], rng)


# ──────────────────────────────────────────────────────────────────────────────
# Grouping
# ──────────────────────────────────────────────────────────────────────────────
def test_grouping_examples():
    assert build_grouping("ssg", 8, 4).assignment == ((0, 1), (2, 3), (4, 5), (6, 7))
    assert build_grouping("lsg", 8, 4).assignment == ((0, 4), (1, 5), (2, 6), (3, 7))
    for mode in ("ssg", "lsg"):
        assert build_grouping(mode, 4, 1).assignment == ((0, 1, 2, 3),)


def test_grouping_rejects_non_divisible():
    with pytest.raises(ConfigError, match="divisibility"):
        build_grouping("ssg", 8, 3)


def test_grouping_partition_and_inverse_sweep():
    rng = np.random.default_rng(0)
    for depth in range(1, 33):
        for g in range(1, depth + 1):
            if depth % g:
                continue
            for mode in (GroupingMode.SHORT, GroupingMode.LONG):
                grouping = build_grouping(mode, depth, g)
                flat = sorted(i for grp in grouping.assignment for i in grp)
                assert flat == list(range(depth))
                x = FeatureVolume.random((1, depth, 1, 2), rng)
                parts = [gather_group(x, grouping, k) for k in range(g)]
                assert scatter_groups(parts, grouping) == x


def test_scatter_single_slice_groups_and_reinterleave():
    x = FeatureVolume(np.arange(2 * 2 * 1 * 1, dtype=float).reshape(2, 2, 1, 1))
    grouping = build_grouping("ssg", 2, 2)
    assert np.array_equal(gather_group(x, grouping, 1).values, x.values[:, [1]])

    grouping = build_grouping("lsg", 6, 3)
    assert grouping.assignment == ((0, 3), (1, 4), (2, 5))
    parts = [FeatureVolume(np.array(grp, dtype=float).reshape(1, 2, 1, 1)) for grp in grouping.assignment]
    out = scatter_groups(parts, grouping)
    assert out.values.reshape(-1).tolist() == [0.0, 1.0, 2.0, 3.0, 4.0, 5.0]


def test_scatter_incomplete_groups():
    grouping = build_grouping("ssg", 4, 2)
    x = FeatureVolume(np.ones((1, 4, 1, 1)))
    with pytest.raises(PartitionError):
        scatter_groups([gather_group(x, grouping, 0)], grouping)


# ──────────────────────────────────────────────────────────────────────────────
# Non-local
# ──────────────────────────────────────────────────────────────────────────────
def test_nonlocal_original_zero_g_and_single_position():
    x, w = _setup((3, 2, 2, 2))
    zero_g = AttentionWeights(w.w_theta, w.w_phi, np.zeros((3, 3)))
    assert np.all(nonlocal_original(x, zero_g).values == 0.0)

    rng = np.random.default_rng(1)
    x1 = FeatureVolume(rng.standard_normal((2, 1, 1, 1)))
    w1 = AttentionWeights.init(2, rng)
    v = x1.values[:, 0, 0, 0]
    theta, phi, g = w1.w_theta @ v, w1.w_phi @ v, w1.w_g @ v
    expected = (theta @ phi) * g
    assert np.allclose(nonlocal_original(x1, w1).values[:, 0, 0, 0], expected, rtol=1e-12)


def test_nonlocal_original_matches_position_loop():
    x, w = _setup((2, 2, 2, 3), seed=2)
    c, n = 2, 12
    theta = (w.w_theta @ x.values.reshape(c, n))
    phi = (w.w_phi @ x.values.reshape(c, n))
    g = (w.w_g @ x.values.reshape(c, n))
    expected = np.zeros((c, n))
    for i in range(n):
        for j in range(n):
            expected[:, i] += (theta[:, i] @ phi[:, j]) / n * g[:, j]
    assert _rel(nonlocal_original(x, w).values.reshape(c, n), expected) < 1e-10
    assert _rel(nonlocal_original(x, w, pairwise=True).values.reshape(c, n), expected) < 1e-10


def test_compact_naive_examples():
    x, w = _setup((2, 2, 3, 3), seed=3)
    zero_theta = AttentionWeights(np.zeros((2, 2)), w.w_phi, w.w_g)
    assert np.all(compact_nonlocal_naive(x, zero_theta).values == 0.0)
    assert _rel(compact_nonlocal_naive(x, w).values, compact_nonlocal_fast(x, w).values) < 1e-10

    one = FeatureVolume(np.array([[[[2.0]]]]))
    w1 = AttentionWeights(np.array([[3.0]]), np.array([[5.0]]), np.array([[7.0]]))
    assert compact_nonlocal_naive(one, w1).values.item() == pytest.approx(6.0 * 10.0 * 14.0)


def test_compact_fast_matches_naive_on_random_volumes():
    rng = np.random.default_rng(4)
    for _ in range(20):
        dims = tuple(int(v) for v in rng.integers(1, 5, size=4))
        x = FeatureVolume.random(dims, rng)
        w = AttentionWeights.init(dims[0], rng)
        assert _rel(compact_nonlocal_fast(x, w).values, compact_nonlocal_naive(x, w).values) < 1e-10


def test_compact_fast_zero_input_and_bilinear_in_g():
    x, w = _setup((2, 3, 2, 2), seed=5)
    assert np.all(compact_nonlocal_fast(FeatureVolume.zeros((2, 3, 2, 2)), w).values == 0.0)
    doubled = AttentionWeights(w.w_theta, w.w_phi, 2.0 * w.w_g)
    assert np.allclose(compact_nonlocal_fast(x, doubled).values, 2.0 * compact_nonlocal_fast(x, w).values, rtol=1e-12)


def test_naive_capacity_cap(monkeypatch):
    x, w = _setup((2, 4, 4, 4))
    with pytest.raises(CapacityError):
        compact_nonlocal_naive(x, w, cap=64)
    monkeypatch.setenv("LSSG_ORACLE_CAP", "100")
    with pytest.raises(CapacityError):
        compact_nonlocal_naive(x, w)


def test_channel_reduction_weights():
    rng = np.random.default_rng(6)
    w = AttentionWeights.init(4, rng, inner_channels=2)
    assert w.w_theta.shape == (2, 4) and w.inner_channels == 2
    with pytest.raises(ShapeError):
        AttentionWeights(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 2)))


# ──────────────────────────────────────────────────────────────────────────────
# LSSG
# ──────────────────────────────────────────────────────────────────────────────
@pytest.mark.parametrize("mode", ["ssg", "lsg"])
def test_lssg_single_group_is_ungrouped_compact(mode):
    x, w = _setup((2, 6, 3, 3), seed=7)
    y = lssg_forward(x, w, build_grouping(mode, 6, 1))
    assert np.array_equal(y.values, compact_nonlocal_fast(x, w).values)


def test_lssg_singleton_groups_coincide():
    x, w = _setup((2, 4, 2, 2), seed=8)
    short = lssg_forward(x, w, build_grouping("ssg", 4, 4))
    long_ = lssg_forward(x, w, build_grouping("lsg", 4, 4))
    assert short == long_


@pytest.mark.parametrize("mode", ["ssg", "lsg"])
def test_lssg_groups_match_naive_oracle(mode):
    x, w = _setup((2, 8, 3, 3), seed=9)
    grouping = build_grouping(mode, 8, 4)
    y = lssg_forward(x, w, grouping)
    for g in range(4):
        expected = compact_nonlocal_naive(gather_group(x, grouping, g), w)
        assert _rel(gather_group(y, grouping, g).values, expected.values) < 1e-10


def test_lssg_spatial_permutation_equivariance():
    x, w = _setup((2, 4, 3, 3), seed=10)
    grouping = build_grouping("lsg", 4, 2)
    perm = np.random.default_rng(11).permutation(9)
    flat = x.values.reshape(2, 4, 9)
    permuted = FeatureVolume(flat[:, :, perm].reshape(2, 4, 3, 3))
    y = lssg_forward(x, w, grouping).values.reshape(2, 4, 9)
    y_perm = lssg_forward(permuted, w, grouping).values.reshape(2, 4, 9)
    assert np.allclose(y_perm, y[:, :, perm], rtol=1e-12, atol=1e-14)


def test_lssg_depth_mismatch():
    x, w = _setup((2, 4, 2, 2))
    with pytest.raises(ShapeError):
        lssg_forward(x, w, build_grouping("ssg", 8, 2))


@pytest.mark.parametrize("kernel", ["cnl", "nl"])
def test_lssg_backward_zero_grad(kernel):
    x, w = _setup((2, 4, 2, 2), seed=12)
    grouping = build_grouping("lsg", 4, 2)
    dx, dw = lssg_backward(x, w, grouping, FeatureVolume.zeros((2, 4, 2, 2)), kernel)
    assert np.all(dx.values == 0.0)
    assert all(np.all(v == 0.0) for v in dw.as_dict().values())


def test_lssg_backward_linear_in_g_adjoint():
    """θ, φ 를 고정하면 출력은 w_g 에 선형이므로 <R, Y(w_g)> 의 gradient 는 Y(E_ij) 로 직접 얻습니다."""
    x, w = _setup((2, 4, 2, 2), seed=13)
    grouping = build_grouping("ssg", 4, 2)
    r = np.random.default_rng(14).standard_normal((2, 4, 2, 2))
    _, dw = lssg_backward(x, w, grouping, FeatureVolume(r))
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            basis = np.zeros((2, 2))
            basis[i, j] = 1.0
            y = lssg_forward(x, AttentionWeights(w.w_theta, w.w_phi, basis), grouping)
            expected[i, j] = float(np.sum(r * y.values))
    assert np.allclose(dw.w_g, expected, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("mode", ["ssg", "lsg"])
@pytest.mark.parametrize("kernel", ["cnl", "nl"])
def test_lssg_gradcheck(mode, kernel):
    records = lssg_suite((2, 4, 2, 2), mode, 2, kernel, seed=15)
    assert {r.param for r in records} == {"x", "w_theta", "w_phi", "w_g"}
    for r in records:
        assert r.rel_error < OP_TOLERANCE, f"{r.suite}.{r.param}: {r.rel_error:.3e}"


def test_kernel_parse():
    assert AttentionKernel.parse("NL") is AttentionKernel.ORIGINAL
    with pytest.raises(ConfigError):
        AttentionKernel.parse("softmax")


def test_central_difference_step_on_cubic():
    # 중앙 차분의 절단 오차는 h² 수준
    x = np.random.default_rng(21).uniform(0.5, 2.0, (3, 4))
    arrays = {"x": x}
    records = check_arrays("cubic", lambda: float(np.sum(arrays["x"] ** 3)), arrays, {"x": 3 * x ** 2},
                           np.random.default_rng(0), OP_TOLERANCE, samples=12)
    (rec,) = records
    assert FD_STEP == 1e-5
    assert rec.entries == 12 and rec.passed
    assert rec.rel_error < 1e-8
