import itertools

import numpy as np
import pytest

from minkunext import ops
from minkunext.reference import dense_conv3d, random_sparse_instance
from minkunext.voxels import (
    CoordinateMap,
    SparseTensor,
    build_coordinate_map,
    build_kernel_map,
    stride_coords,
)


def _identity_kmap(n):
    coords = np.column_stack([np.zeros(n, np.int64), np.arange(n), np.zeros((n, 2), np.int64)])
    m = build_coordinate_map(coords)
    return build_kernel_map(m, m, 1, 1), m


class TestSparseConv:
    def test_k1_identity_weights(self):
        kmap, m = _identity_kmap(1)
        feats = np.array([[2.0, -1.0]])
        w = np.eye(2)[None, :, :]
        out, _ = ops.sparse_conv(feats, w, None, kmap, 1)
        assert np.array_equal(out, feats)

    def test_k1_channel_expansion(self):
        kmap, _ = _identity_kmap(1)
        out, _ = ops.sparse_conv(np.array([[1.0]]), np.array([[[2.0, 3.0]]]), None, kmap, 1)
        assert out.tolist() == [[2.0, 3.0]]

    def test_channel_mismatch_rejected(self):
        kmap, _ = _identity_kmap(1)
        with pytest.raises(ValueError, match="channel mismatch"):
            ops.sparse_conv(np.ones((1, 3)), np.ones((1, 2, 2)), None, kmap, 1)

    def test_row_count_mismatch_rejected(self):
        kmap, _ = _identity_kmap(2)
        with pytest.raises(ValueError, match="input rows"):
            ops.sparse_conv(np.ones((3, 1)), np.ones((1, 1, 1)), None, kmap, 2)

    @pytest.mark.parametrize("kernel,stride", [(1, 1), (2, 2), (3, 1), (3, 2), (5, 1)])
    def test_matches_dense_oracle(self, kernel, stride):
        rng = np.random.default_rng(kernel * 10 + stride)
        coords, feats = random_sparse_instance(rng, grid=5, channels=2, occupancy=0.5, batch=2)
        in_map = build_coordinate_map(coords, 1)
        if stride == 1:
            out_map = in_map
        else:
            out_map = CoordinateMap(stride_coords(coords, stride, 1), tensor_stride=stride)
        kmap = build_kernel_map(in_map, out_map, kernel, stride)
        weights = rng.standard_normal((kernel**3, 2, 3))
        got, _ = ops.sparse_conv(feats, weights, None, kmap, len(out_map))
        ref_coords, ref = dense_conv3d(coords, feats, weights, kernel, stride)
        assert np.array_equal(ref_coords, out_map.coords)
        assert np.abs(got - ref).max() < 1e-10

    def test_deterministic_bitwise(self):
        rng = np.random.default_rng(11)
        coords, feats = random_sparse_instance(rng, grid=4, channels=3, occupancy=0.6)
        m = build_coordinate_map(coords, 1)
        kmap = build_kernel_map(m, m, 3, 1)
        w = rng.standard_normal((27, 3, 3))
        a, _ = ops.sparse_conv(feats, w, None, kmap, len(m))
        b, _ = ops.sparse_conv(feats, w, None, kmap, len(m))
        assert np.array_equal(a, b)


class TestSparseConvTranspose:
    def test_k1_identity(self):
        kmap, m = _identity_kmap(3)
        # a k=1 transpose over identical coords behaves as identity
        km_t = build_kernel_map(m, m, 1, 1, transposed=True)
        feats = np.arange(6, dtype=np.float64).reshape(3, 2)
        out, _ = ops.sparse_conv_transpose(feats, np.eye(2)[None], None, km_t, 3)
        assert np.array_equal(out, feats)

    def test_coarse_scatters_to_all_fine(self):
        cells = np.array(list(itertools.product([0, 1], repeat=3)))
        fine_coords = np.unique(np.column_stack([np.zeros(8, np.int64), cells]), axis=0)
        fine = build_coordinate_map(fine_coords, 1)
        coarse = CoordinateMap(stride_coords(fine_coords, 2, 1), tensor_stride=2)
        km = build_kernel_map(coarse, fine, 2, 2, transposed=True)
        feats = np.array([[3.0]])
        w = np.ones((8, 1, 1))
        out, _ = ops.sparse_conv_transpose(feats, w, None, km, 8)
        assert np.allclose(out, 3.0)

    def test_requires_transposed_kmap(self):
        kmap, m = _identity_kmap(1)
        with pytest.raises(ValueError, match="transposed"):
            ops.sparse_conv_transpose(np.ones((1, 1)), np.ones((1, 1, 1)), None, kmap, 1)

    def test_adjoint_identity(self):
        # <conv_W(x), y> == <x, conv_transpose_W(y)> with shared weights
        rng = np.random.default_rng(12)
        for trial in range(5):
            coords, x = random_sparse_instance(rng, grid=4, channels=2, occupancy=0.5)
            fine = build_coordinate_map(coords, 1)
            coarse = CoordinateMap(stride_coords(coords, 2, 1), tensor_stride=2)
            km_f = build_kernel_map(fine, coarse, 2, 2)
            km_t = build_kernel_map(coarse, fine, 2, 2, transposed=True)
            w = rng.standard_normal((8, 2, 3))
            y = rng.standard_normal((len(coarse), 3))
            fwd, _ = ops.sparse_conv(x, w, None, km_f, len(coarse))
            # shared weights: the transpose uses W[j] transposed per offset
            back, _ = ops.sparse_conv_transpose(y, np.transpose(w, (0, 2, 1)), None, km_t, len(fine))
            lhs = float((fwd * y).sum())
            rhs = float((x * back).sum())
            assert abs(lhs - rhs) <= 1e-9 * max(1.0, abs(lhs))


class TestBatchNorm:
    def test_constant_column_zeroed(self):
        x = np.full((4, 1), 3.5)
        out, _ = ops.batch_norm(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)
        assert np.allclose(out, 0.0)

    def test_standardized_input_nearly_unchanged(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((400, 1))
        x = (x - x.mean()) / x.std()
        out, _ = ops.batch_norm(x, np.ones(1), np.zeros(1), np.zeros(1), np.ones(1), True)
        assert np.abs(out - x).max() < 1e-4  # only the eps in the denominator differs

    def test_matches_two_pass_oracle(self):
        rng = np.random.default_rng(14)
        x = rng.standard_normal((8, 4))
        gamma = rng.uniform(0.5, 2.0, 4)
        beta = rng.standard_normal(4)
        out, _ = ops.batch_norm(x, gamma, beta, np.zeros(4), np.ones(4), True)
        mean = np.array([sum(x[:, c]) / 8 for c in range(4)])
        var = np.array([sum((x[:, c] - mean[c]) ** 2) / 8 for c in range(4)])
        expected = gamma * (x - mean) / np.sqrt(var + ops.BN_EPS) + beta
        assert np.allclose(out, expected, atol=1e-12)

    def test_running_stats_updated_and_used_in_eval(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal((16, 2)) * 3 + 1
        rm, rv = np.zeros(2), np.ones(2)
        ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, True)
        assert not np.allclose(rm, 0.0)
        out_eval, _ = ops.batch_norm(x, np.ones(2), np.zeros(2), rm, rv, False)
        expected = (x - rm) / np.sqrt(rv + ops.BN_EPS)
        assert np.allclose(out_eval, expected)

    def test_degenerate_batch_rejected(self):
        with pytest.raises(ValueError, match="degenerate batch"):
            ops.batch_norm(np.ones((1, 2)), np.ones(2), np.zeros(2),
                           np.zeros(2), np.ones(2), True)


class TestLayerNorm:
    def test_constant_row_zeroed(self):
        out, _ = ops.layer_norm(np.array([[1.0, 1.0, 1.0, 1.0]]), np.ones(4), np.zeros(4))
        assert np.allclose(out, 0.0)

    def test_symmetric_row(self):
        a = 2.0
        out, _ = ops.layer_norm(np.array([[-a, a]]), np.ones(2), np.zeros(2))
        expected = np.array([[-1.0, 1.0]]) / np.sqrt(1.0 + ops.LN_EPS / a**2)
        assert np.allclose(out, expected, atol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal((1, 6))
        gamma = rng.uniform(0.5, 2.0, 6)
        beta = rng.standard_normal(6)
        out, _ = ops.layer_norm(x, gamma, beta)
        mu = x.mean()
        var = ((x - mu) ** 2).mean()
        assert np.allclose(out, gamma * (x - mu) / np.sqrt(var + ops.LN_EPS) + beta)

    def test_rows_standardized(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal((10, 32)) * 5
        out, _ = ops.layer_norm(x, np.ones(32), np.zeros(32))
        assert np.abs(out.mean(axis=1)).max() < 1e-6
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-6


class TestActivations:
    def test_relu_values(self):
        out, _ = ops.relu(np.array([-3.0, 3.0]))
        assert out.tolist() == [0.0, 3.0]

    def test_gelu_zero(self):
        out, _ = ops.gelu(np.array([0.0]))
        assert out[0] == 0.0

    def test_gelu_against_mpmath_oracle(self):
        import mpmath

        mpmath.mp.dps = 50
        for x in (1.0, -0.5, 2.3):
            expected = float(mpmath.mpf(x) * 0.5 * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))))
            got, _ = ops.gelu(np.array([x]))
            assert abs(got[0] - expected) < 1e-14


class TestConcat:
    def test_basic(self):
        coords = np.array([[0, 0, 0, 0]])
        a = SparseTensor(coords, np.array([[1.0, 2.0]]))
        b = SparseTensor(coords, np.array([[3.0]]))
        out = ops.concat_channels(a, b)
        assert out.features.tolist() == [[1.0, 2.0, 3.0]]

    def test_empty_channel_identity(self):
        coords = np.array([[0, 0, 0, 0]])
        a = SparseTensor(coords, np.array([[1.0, 2.0]]))
        b = SparseTensor(coords, np.empty((1, 0)))
        out = ops.concat_channels(a, b)
        assert np.array_equal(out.features, a.features)

    def test_coordinate_mismatch_rejected(self):
        a = SparseTensor(np.array([[0, 0, 0, 0]]), np.ones((1, 1)))
        b = SparseTensor(np.array([[0, 1, 0, 0]]), np.ones((1, 1)))
        with pytest.raises(ValueError, match="coordinate"):
            ops.concat_channels(a, b)

    def test_rowwise_against_lookup_oracle(self):
        rng = np.random.default_rng(18)
        coords = np.unique(
            np.column_stack([np.zeros(30, np.int64), rng.integers(0, 5, (30, 3))]), axis=0
        )
        a = SparseTensor(coords, rng.standard_normal((len(coords), 2)))
        b = SparseTensor(coords, rng.standard_normal((len(coords), 3)))
        out = ops.concat_channels(a, b)
        for i, c in enumerate(coords.tolist()):
            row = np.concatenate([a.features[i], b.features[i]])
            assert np.array_equal(out.features[i], row)


class TestLinear:
    def test_identity(self):
        x = np.array([[1.0, 2.0]])
        out, _ = ops.linear(x, np.eye(2), np.zeros(2))
        assert np.array_equal(out, x)

    def test_scalar_affine(self):
        out, _ = ops.linear(np.array([[2.0]]), np.array([[3.0]]), np.array([1.0]))
        assert out.tolist() == [[7.0]]

    def test_matches_matrix_product_oracle(self):
        rng = np.random.default_rng(19)
        x = rng.standard_normal((5, 3))
        w = rng.standard_normal((3, 4))
        b = rng.standard_normal(4)
        out, _ = ops.linear(x, w, b)
        expected = np.array([[sum(x[i, k] * w[k, j] for k in range(3)) + b[j]
                              for j in range(4)] for i in range(5)])
        assert np.allclose(out, expected, atol=1e-12)


class TestGemPool:
    def test_p1_is_mean(self):
        x = np.array([[1.0, 4.0], [3.0, 2.0]])
        out, _ = ops.gem_pool(x, 1.0)
        assert np.allclose(out, x.mean(axis=0))

    def test_single_row_unchanged(self):
        x = np.array([[0.5, 2.0, 7.0]])
        for p in (1.0, 2.5, 6.0):
            out, _ = ops.gem_pool(x, p)
            assert np.allclose(out, x[0], rtol=1e-10)

    def test_p3_two_rows(self):
        out, _ = ops.gem_pool(np.array([[1.0], [2.0]]), 3.0)
        assert abs(out[0] - 4.5 ** (1.0 / 3.0)) < 1e-12

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="empty descriptor set"):
            ops.gem_pool(np.empty((0, 3)), 3.0)

    def test_monotone_in_p(self):
        rng = np.random.default_rng(20)
        for _ in range(10):
            x = rng.uniform(0.1, 5.0, size=(6, 3))
            outs = [ops.gem_pool(x, p)[0] for p in (1.0, 2.0, 4.0, 8.0)]
            for lo, hi in zip(outs, outs[1:]):
                assert (hi >= lo - 1e-12).all()

    def test_negative_features_clamped(self):
        out, _ = ops.gem_pool(np.array([[-5.0]]), 3.0)
        assert out[0] == pytest.approx(ops.GEM_EPS)
