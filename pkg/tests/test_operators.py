import numpy as np
import pytest

from snips.operators import (
    DecompositionError,
    DegradationSVD,
    LinearOperator,
    load_operator,
    make_block_average,
    make_inpainting_mask,
    make_random_projection,
    make_uniform_blur,
    operator_from_bytes,
    operator_to_bytes,
    save_operator,
    svd_decompose,
)


class TestSvdDecompose:
    def test_identity(self):
        svd = svd_decompose(LinearOperator(np.eye(4)))
        np.testing.assert_allclose(svd.singulars, np.ones(4))
        np.testing.assert_allclose(svd.u @ svd.v.T, np.eye(4), atol=1e-12)

    def test_two_row_block_average(self):
        # rows [1/2,1/2,0,0] and [0,0,1/2,1/2]; H H^T = I/2, so both
        # singular values are sqrt(1/2) (checked via brute eigendecomposition)
        h = np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.0, 0.5, 0.5]])
        eig = np.sqrt(np.linalg.eigvalsh(h @ h.T))[::-1]
        svd = svd_decompose(LinearOperator(h))
        np.testing.assert_allclose(svd.singulars, eig, atol=1e-12)
        np.testing.assert_allclose(svd.singulars, np.sqrt(2) / 2, atol=1e-12)

    def test_zero_operator(self):
        svd = svd_decompose(LinearOperator(np.zeros((2, 3))))
        np.testing.assert_array_equal(svd.singulars, np.zeros(2))
        np.testing.assert_array_equal(svd.extended_singulars, np.zeros(3))

    def test_round_trip_random(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m, n = rng.integers(1, 33, size=2)
            op = LinearOperator(rng.standard_normal((m, n)))
            svd = svd_decompose(op)
            assert np.max(np.abs(svd.reconstruct() - op.matrix)) < 1e-8
            assert np.all(np.diff(svd.singulars) <= 0)
            assert np.all(svd.singulars >= 0)

    def test_factor_apply_matches_dense(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            m, n = rng.integers(1, 20, size=2)
            op = LinearOperator(rng.standard_normal((m, n)))
            svd = svd_decompose(op)
            x = rng.standard_normal(n)
            dense = op.apply(x)
            np.testing.assert_allclose(svd.apply(x), dense, rtol=1e-10, atol=1e-12)

    def test_rank_deficient_gets_exact_zeros(self):
        rng = np.random.default_rng(9)
        u, _ = np.linalg.qr(rng.standard_normal((4, 4)))
        v, _ = np.linalg.qr(rng.standard_normal((6, 6)))
        h = (u * np.array([2.0, 1.0, 0.0, 0.0])) @ v[:, :4].T
        svd = svd_decompose(LinearOperator(h))
        assert svd.singulars[2] == 0.0 and svd.singulars[3] == 0.0

    def test_validation_rejects_bad_factors(self):
        with pytest.raises(ValueError):
            DegradationSVD(
                u=np.eye(2) * 2.0,  # not orthogonal
                singulars=np.ones(2),
                v=np.eye(2),
                extended_singulars=np.ones(2),
            )

    def test_nonfinite_rejected(self):
        with pytest.raises(ValueError):
            LinearOperator(np.array([[np.inf, 0.0]]))


class TestUniformBlur:
    def test_degenerate_single_pixel(self):
        op = make_uniform_blur(1, 1)
        np.testing.assert_array_equal(op.matrix, np.eye(1))

    def test_rows_have_nine_ninths(self):
        op = make_uniform_blur(4, 3)
        for row in op.matrix:
            nz = row[row > 0]
            assert nz.size == 9
            np.testing.assert_allclose(nz, 1.0 / 9.0)

    def test_constant_image_preserved(self):
        op = make_uniform_blur(8, 5)
        x = np.full(64, 0.37)
        np.testing.assert_allclose(op.apply(x), x, rtol=1e-12)

    def test_rows_sum_to_one(self):
        op = make_uniform_blur(6, 3)
        np.testing.assert_allclose(op.matrix.sum(axis=1), 1.0, rtol=1e-12)

    @pytest.mark.parametrize("side,kernel", [(4, 2), (3, 5), (4, 0)])
    def test_bad_kernel(self, side, kernel):
        with pytest.raises(ValueError):
            make_uniform_blur(side, kernel)

    def test_unknown_boundary(self):
        with pytest.raises(ValueError):
            make_uniform_blur(4, 3, boundary="mirror")


class TestBlockAverage:
    def test_single_block(self):
        op = make_block_average(2, 2)
        np.testing.assert_allclose(op.matrix, np.full((1, 4), 0.25))
        svd = svd_decompose(op)
        np.testing.assert_allclose(svd.singulars, [0.5], atol=1e-12)

    def test_block_one_is_identity(self):
        op = make_block_average(4, 1)
        np.testing.assert_array_equal(op.matrix, np.eye(16))

    def test_ones_stay_ones(self):
        op = make_block_average(4, 2)
        np.testing.assert_allclose(op.apply(np.ones(16)), np.ones(4), rtol=1e-12)

    def test_all_singulars_inverse_block(self):
        svd = svd_decompose(make_block_average(8, 4))
        np.testing.assert_allclose(svd.singulars, 0.25, atol=1e-10)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            make_block_average(6, 4)


class TestRandomProjection:
    def test_full_keep_is_orthogonal(self):
        op = make_random_projection(4, 1.0, seed=0)
        np.testing.assert_allclose(op.matrix @ op.matrix.T, np.eye(4), atol=1e-10)

    def test_quarter_keep_unit_singulars(self):
        op = make_random_projection(16, 0.25, seed=1)
        assert op.rows == 4 and op.cols == 16
        svd = svd_decompose(op)
        np.testing.assert_allclose(svd.singulars, 1.0, atol=1e-8)

    def test_deterministic(self):
        a = make_random_projection(10, 0.5, seed=42)
        b = make_random_projection(10, 0.5, seed=42)
        np.testing.assert_array_equal(a.matrix, b.matrix)

    def test_zero_rows_rejected(self):
        with pytest.raises(ValueError):
            make_random_projection(10, 0.01, seed=0)


class TestInpaintingMask:
    def test_keep_all(self):
        op = make_inpainting_mask(3, [0, 1, 2])
        np.testing.assert_array_equal(op.matrix, np.eye(3))

    def test_selection_rows(self):
        op = make_inpainting_mask(4, [0, 2])
        svd = svd_decompose(op)
        np.testing.assert_allclose(svd.singulars, [1.0, 1.0])
        np.testing.assert_allclose(op.apply(np.array([1.0, 2.0, 3.0, 4.0])), [1.0, 3.0])

    @pytest.mark.parametrize("kept", [[], [0, 0], [5]])
    def test_bad_indices(self, kept):
        with pytest.raises(ValueError):
            make_inpainting_mask(4, kept)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        op = LinearOperator(rng.standard_normal((5, 7)))
        save_operator(op, tmp_path / "op.snop")
        loaded = load_operator(tmp_path / "op.snop")
        np.testing.assert_array_equal(loaded.matrix, op.matrix)

    def test_header_layout(self):
        op = LinearOperator(np.array([[1.5]]))
        blob = operator_to_bytes(op)
        assert blob[:4] == b"SNOP"
        assert blob[4:6] == (1).to_bytes(2, "little")
        assert int.from_bytes(blob[6:10], "little") == 1
        assert int.from_bytes(blob[10:14], "little") == 1
        assert np.frombuffer(blob, dtype="<f8", offset=14)[0] == 1.5

    def test_bad_magic(self):
        blob = bytearray(operator_to_bytes(LinearOperator(np.eye(2))))
        blob[:4] = b"XXXX"
        with pytest.raises(ValueError, match="magic"):
            operator_from_bytes(bytes(blob))

    def test_truncation(self):
        blob = operator_to_bytes(LinearOperator(np.eye(2)))
        with pytest.raises(ValueError):
            operator_from_bytes(blob[:-3])

    def test_unknown_version(self):
        blob = bytearray(operator_to_bytes(LinearOperator(np.eye(2))))
        blob[4:6] = (9).to_bytes(2, "little")
        with pytest.raises(ValueError, match="version"):
            operator_from_bytes(bytes(blob))


def test_decomposition_error_mentions_shape(monkeypatch):
    def boom(*args, **kwargs):
        raise np.linalg.LinAlgError("no convergence")

    monkeypatch.setattr(np.linalg, "svd", boom)
    with pytest.raises(DecompositionError, match="3x4"):
        svd_decompose(LinearOperator(np.ones((3, 4))))
