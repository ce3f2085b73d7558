import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ics.autodiff import ContractError, DimensionError, Tensor
from ics.sampling import (
    MeasurementMatrix,
    PaddedMeasurements,
    SamplingConfig,
    adaptive_sample,
    assemble_blocks,
    block_vectors,
    devectorize_block,
    image_block_rows,
    image_from_block_rows,
    init_measurement_matrix,
    initial_sample,
    measure_full,
    partition_blocks,
    random_measurement_matrix,
    sample_block,
    vectorize_block,
)


@pytest.fixture(scope="module")
def mm32():
    return random_measurement_matrix(32, seed=0, mode="orthonormal")


class TestConfig:
    @pytest.mark.parametrize("sr, n0", [(0.1, 51), (0.25, 85), (0.5, 170), (0.01, 5), (0.04, 20)])
    def test_n0(self, sr, n0):
        assert SamplingConfig(sr).n0 == n0

    def test_m_defaults_to_full(self):
        assert SamplingConfig(0.1).M == 1024

    @pytest.mark.parametrize("sr", [0.0, -0.1, 1.5])
    def test_bad_ratio(self, sr):
        with pytest.raises(ContractError):
            SamplingConfig(sr)

    def test_n0_zero_rejected(self):
        with pytest.raises(ContractError):
            SamplingConfig(0.001)


class TestBlocks:
    def test_partition_grid(self):
        g = partition_blocks(np.random.default_rng(0).random((64, 64)), 32)
        assert g.shape == (2, 2, 32, 32)

    def test_partition_content(self):
        img = np.arange(16.0).reshape(4, 4)
        g = partition_blocks(img, 2)
        np.testing.assert_array_equal(g[0, 1], [[2, 3], [6, 7]])
        np.testing.assert_array_equal(g[1, 0], [[8, 9], [12, 13]])

    def test_assemble_inverts(self):
        img = np.random.default_rng(1).random((96, 64))
        np.testing.assert_array_equal(assemble_blocks(partition_blocks(img, 32)), img)

    def test_indivisible(self):
        with pytest.raises(DimensionError):
            partition_blocks(np.zeros((96, 80)), 32)

    def test_vectorize_row_major(self):
        np.testing.assert_array_equal(vectorize_block(np.array([[1.0, 2.0], [3.0, 4.0]])), [1, 2, 3, 4])

    def test_vectorize_round_trip(self):
        b = np.random.default_rng(2).random((5, 5))
        np.testing.assert_array_equal(devectorize_block(vectorize_block(b), 5), b)

    def test_constant_block(self):
        np.testing.assert_array_equal(vectorize_block(np.full((3, 3), 0.4)), np.full(9, 0.4))


class TestSampleBlock:
    def test_identity_rows(self):
        block = np.random.default_rng(0).random((4, 4))
        np.testing.assert_array_equal(sample_block(np.eye(16)[:5], block), block.reshape(-1)[:5])

    def test_mean_row(self):
        block = np.random.default_rng(0).random((4, 4))
        assert sample_block(np.full((1, 16), 1 / 16), block)[0] == pytest.approx(block.mean(), abs=1e-15)

    def test_double_loop_oracle(self):
        mm = random_measurement_matrix(4, seed=0, mode="gaussian")
        block = np.random.default_rng(7).random((4, 4))
        want = np.zeros(16)
        for r in range(16):
            s = 0.0
            for i in range(4):
                for j in range(4):
                    s += mm.phi[r, i * 4 + j] * block[i, j]
            want[r] = s
        np.testing.assert_allclose(sample_block(mm.phi, block), want, atol=1e-12, rtol=0)

    def test_empty_rows(self):
        with pytest.raises(ContractError):
            sample_block(np.zeros((0, 16)), np.zeros((4, 4)))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 16), st.integers(1, 16))
    def test_prefix_consistency(self, seed, k1, k2):
        k1, k2 = sorted((k1, k2))
        mm = random_measurement_matrix(4, seed=seed % 97)
        x = np.random.default_rng(seed).random((4, 4))
        short, long = sample_block(mm.phi[:k1], x), sample_block(mm.phi[:k2], x)
        assert short.tobytes() == long[:k1].tobytes()

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        phi = random_measurement_matrix(4, seed=3).phi[:9]
        x, z = rng.random((4, 4)), rng.random((4, 4))
        np.testing.assert_allclose(
            sample_block(phi, a * x + b * z), a * sample_block(phi, x) + b * sample_block(phi, z), atol=1e-12
        )


class TestMatrix:
    def test_orthonormal_rows(self, mm32):
        np.testing.assert_allclose(mm32.phi @ mm32.phi.T, np.eye(1024), atol=1e-10)

    def test_psi_is_transpose(self):
        for mode in ("gaussian", "orthonormal"):
            mm = init_measurement_matrix(SamplingConfig(0.1, B=8, seed=3), mode)
            assert mm.psi.tobytes() == np.ascontiguousarray(mm.phi.T).tobytes()

    def test_deterministic(self):
        a = random_measurement_matrix(8, seed=11)
        b = random_measurement_matrix(8, seed=11)
        assert a.phi.tobytes() == b.phi.tobytes()
        assert a.phi.tobytes() != random_measurement_matrix(8, seed=12).phi.tobytes()

    def test_gaussian_scale(self):
        mm = random_measurement_matrix(32, seed=0)
        assert mm.phi.shape == (1024, 1024)
        assert mm.phi.std() == pytest.approx(1 / 32, rel=0.01)
        assert np.all(np.abs(mm.phi).sum(axis=1) > 0)

    def test_partial_rows(self):
        mm = random_measurement_matrix(4, M=10, seed=0, mode="orthonormal")
        assert mm.phi.shape == (10, 16)
        np.testing.assert_allclose(mm.phi @ mm.phi.T, np.eye(10), atol=1e-12)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            random_measurement_matrix(4, mode="bernoulli")


class TestInitialAndAdaptive:
    def test_initial_uses_n0_rows(self, mm32):
        img = np.random.default_rng(0).random((64, 96))
        cfg = SamplingConfig(0.1)
        y0 = initial_sample(img, mm32, cfg)
        assert y0.shape == (2, 3, 51)
        np.testing.assert_allclose(y0[1, 2], mm32.phi[:51] @ img[32:, 64:].reshape(-1), atol=1e-12)

    def test_zero_image(self, mm32):
        assert not initial_sample(np.zeros((64, 64)), mm32, SamplingConfig(0.25)).any()

    def test_all_n0_equals_initial(self, mm32):
        img = np.random.default_rng(1).random((64, 64))
        cfg = SamplingConfig(0.25)
        y0 = initial_sample(img, mm32, cfg)
        Y = adaptive_sample(img, mm32, np.full((2, 2), cfg.n0), y0, cfg)
        for yk, ref in zip(Y.y, y0.reshape(4, -1)):
            assert yk.tobytes() == ref.tobytes()

    def test_full_block(self, mm32):
        img = np.random.default_rng(2).random((64, 64))
        cfg = SamplingConfig(0.25)
        y0 = initial_sample(img, mm32, cfg)
        m = np.array([[1024, 85], [85, 85]])
        Y = adaptive_sample(img, mm32, m, y0, cfg)
        assert len(Y.y[0]) == 1024
        np.testing.assert_allclose(Y.y[0], mm32.phi @ img[:32, :32].reshape(-1), atol=1e-12)

    def test_worked_example_lengths(self, mm32):
        img = np.random.default_rng(3).random((64, 64))
        cfg = SamplingConfig(0.25)
        m = np.array([[358, 290], [221, 153]])
        Y = adaptive_sample(img, mm32, m, initial_sample(img, mm32, cfg), cfg)
        assert [len(v) for v in Y.y] == [358, 290, 221, 153]
        assert Y.total == 1022

    def test_matches_direct_measurement(self, mm32):
        img = np.random.default_rng(4).random((64, 64))
        cfg = SamplingConfig(0.1)
        m = np.array([[51, 200], [77, 1024]])
        a = adaptive_sample(img, mm32, m, initial_sample(img, mm32, cfg), cfg)
        b = measure_full(img, mm32, m, cfg)
        for ya, yb in zip(a.y, b.y):
            np.testing.assert_allclose(ya, yb, atol=1e-12)

    @pytest.mark.parametrize("bad", [50, 1025])
    def test_out_of_range(self, mm32, bad):
        img = np.zeros((64, 64))
        cfg = SamplingConfig(0.1)
        with pytest.raises(ContractError):
            adaptive_sample(img, mm32, np.array([[bad, 60], [60, 60]]), initial_sample(img, mm32, cfg), cfg)

    def test_grid_mismatch(self, mm32):
        img = np.zeros((64, 64))
        cfg = SamplingConfig(0.1)
        with pytest.raises(DimensionError):
            adaptive_sample(img, mm32, np.full((1, 4), 60), initial_sample(img, mm32, cfg), cfg)

    def test_padded_and_mask(self, mm32):
        img = np.random.default_rng(5).random((64, 64))
        cfg = SamplingConfig(0.1)
        Y = measure_full(img, mm32, np.array([[51, 60], [70, 80]]), cfg)
        ypad, mask = Y.padded(90)
        assert ypad.shape == (4, 90)
        assert mask.sum(axis=1).tolist() == [51, 60, 70, 80]
        assert not ypad[mask == 0].any()
        assert [len(v) for v in Y.initial()] == [51] * 4


class TestBatchedLayout:
    def test_block_rows_match_vectors(self):
        imgs = np.random.default_rng(0).random((2, 1, 8, 12))
        rows = image_block_rows(Tensor(imgs), 4).data
        for n in range(2):
            np.testing.assert_array_equal(rows[n], block_vectors(imgs[n, 0], 4))

    def test_block_rows_round_trip(self):
        imgs = Tensor(np.random.default_rng(1).random((2, 3, 8, 8)))
        rows = image_block_rows(imgs, 4, keep_channels=True)
        assert rows.shape == (2, 4, 3, 16)
        np.testing.assert_array_equal(image_from_block_rows(rows, 2, 2, 4).data, imgs.data)

    def test_differentiable_measure_matches_sets(self):
        mm = random_measurement_matrix(4, seed=0, mode="orthonormal")
        cfg = SamplingConfig(0.25, B=4)
        imgs = np.random.default_rng(2).random((2, 8, 8))
        ms = [np.array([[4, 9], [16, 5]]), np.array([[6, 6], [7, 12]])]
        a = PaddedMeasurements.measure(Tensor(imgs[:, None]), Tensor(mm.phi), np.stack(ms), 4, cfg.n0)
        b = PaddedMeasurements.from_sets([measure_full(x, mm, m, cfg) for x, m in zip(imgs, ms)])
        np.testing.assert_allclose(a.y.data, b.y.data, atol=1e-12)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_matrix_container_shape():
    mm = MeasurementMatrix(np.zeros((5, 16)), np.zeros((16, 5)))
    assert (mm.M, mm.B) == (5, 4)
