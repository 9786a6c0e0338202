import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptau.dataset import Interactions, popularity_grouping, zipf_interactions
from adaptau.embedding import (
    EmbeddingTable,
    ZeroNormError,
    cosine_score,
    lightgcn_propagate,
    load_checkpoint,
    magnitude_report,
    propagation_matrix,
    raw_score,
    save_checkpoint,
    xavier_init,
)

finite_rows = arrays(np.float64, (2, 5), elements=st.floats(-10, 10, allow_nan=False))


def table_from(users, items, mode="both"):
    return EmbeddingTable(np.asarray(users, float), np.asarray(items, float), mode)


class TestXavier:
    def test_bound(self):
        t = xavier_init(100, 150, 64, seed=0)
        bound = np.sqrt(6 / 128)
        assert bound == pytest.approx(0.2165, abs=1e-4)
        assert np.abs(t.user_emb).max() <= bound
        assert np.abs(t.item_emb).max() <= bound

    def test_deterministic(self):
        a, b = xavier_init(10, 20, 8, seed=3), xavier_init(10, 20, 8, seed=3)
        np.testing.assert_array_equal(a.user_emb, b.user_emb)
        np.testing.assert_array_equal(a.item_emb, b.item_emb)

    def test_mean_within_three_sigma(self):
        t = xavier_init(500, 10, 64, seed=1)
        bound = np.sqrt(6 / 128)
        sigma = bound / np.sqrt(3) / np.sqrt(t.user_emb.size)
        assert abs(t.user_emb.mean()) < 3 * sigma

    def test_rejects_bad_dims(self):
        with pytest.raises(ValueError):
            xavier_init(0, 3, 4)


class TestScores:
    def test_identical(self):
        t = table_from([[0.3, -2.0]], [[0.3, -2.0]])
        assert cosine_score(t, 0, 0) == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal(self):
        assert cosine_score(table_from([[1.0, 0.0]], [[0.0, 3.0]]), 0, 0) == 0.0

    def test_hand_value(self):
        assert cosine_score(table_from([[1.0, 0.0]], [[1.0, 1.0]]), 0, 0) == pytest.approx(1 / np.sqrt(2), abs=1e-12)

    def test_zero_norm(self):
        with pytest.raises(ZeroNormError):
            cosine_score(table_from([[0.0, 0.0]], [[1.0, 1.0]]), 0, 0)

    def test_raw(self):
        t = table_from([[1.0, 2.0], [0.0, 0.0]], [[3.0, 4.0]])
        assert raw_score(t, 0, 0) == 11.0
        assert raw_score(t, 1, 0) == 0.0

    @given(finite_rows)
    def test_raw_equals_cosine_times_norms(self, rows):
        t = table_from(rows[:1], rows[1:])
        nu, ni = np.linalg.norm(rows[0]), np.linalg.norm(rows[1])
        if nu < 1e-6 or ni < 1e-6:
            return
        assert raw_score(t, 0, 0) == pytest.approx(cosine_score(t, 0, 0) * nu * ni, rel=1e-10, abs=1e-12)

    @given(finite_rows, st.floats(1e-3, 1e3))
    def test_cosine_bounded_and_scale_invariant(self, rows, alpha):
        if np.linalg.norm(rows[0]) < 1e-6 or np.linalg.norm(rows[1]) < 1e-6:
            return
        c = cosine_score(table_from(rows[:1], rows[1:]), 0, 0)
        assert -1 - 1e-12 <= c <= 1 + 1e-12
        scaled = cosine_score(table_from(alpha * rows[:1], rows[1:]), 0, 0)
        assert scaled == pytest.approx(c, abs=1e-12)

    def test_score_matrix_modes(self):
        t = xavier_init(4, 6, 3, seed=0, norm_mode="none")
        np.testing.assert_allclose(t.score_matrix(), t.user_emb @ t.item_emb.T)
        t.norm_mode = "both"
        S = t.score_matrix()
        for u in range(4):
            for i in range(6):
                assert S[u, i] == pytest.approx(cosine_score(t, u, i), abs=1e-12)


class TestLightGCN:
    def test_no_edges_scaled(self):
        # every node isolated: layers 1..L are zero
        train = Interactions(2, 3, np.empty((0, 2), np.int64))
        t = xavier_init(2, 3, 4, seed=0)
        out = lightgcn_propagate(t, train, 2)
        np.testing.assert_allclose(out.user_emb, t.user_emb / 3)
        np.testing.assert_allclose(out.item_emb, t.item_emb / 3)

    def test_single_edge_one_layer(self):
        train = Interactions.from_pairs([[0, 0]], 2, 2)
        t = xavier_init(2, 2, 4, seed=1)
        out = lightgcn_propagate(t, train, 1)
        np.testing.assert_allclose(out.user_emb[0], (t.user_emb[0] + t.item_emb[0]) / 2)
        np.testing.assert_allclose(out.item_emb[0], (t.user_emb[0] + t.item_emb[0]) / 2)
        np.testing.assert_allclose(out.user_emb[1], t.user_emb[1] / 2)
        np.testing.assert_allclose(out.item_emb[1], t.item_emb[1] / 2)

    def test_adjacency_entries(self):
        train = Interactions.from_pairs([[0, 0], [0, 1], [1, 0]], 2, 2)
        A = propagation_matrix(train, 1).adjacency.toarray()
        # user 0 has degree 2, item 0 has degree 2
        assert A[0, 2] == pytest.approx(1 / 2)
        assert A[0, 3] == pytest.approx(1 / np.sqrt(2))
        np.testing.assert_allclose(A, A.T)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 1000), st.integers(1, 3))
    def test_linear_and_self_adjoint(self, seed, layers):
        train = zipf_interactions(15, 20, mean_degree=4, seed=seed)
        op = propagation_matrix(train, layers)
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((35, 3)), rng.standard_normal((35, 3))
        np.testing.assert_allclose(op.apply(a + b), op.apply(a) + op.apply(b), atol=1e-12)
        # <P a, b> == <a, P b>
        assert np.sum(op.apply(a) * b) == pytest.approx(np.sum(a * op.apply(b)), rel=1e-10)

    def test_layers_validated(self):
        with pytest.raises(ValueError):
            propagation_matrix(Interactions.from_pairs([[0, 0]]), 0)


class TestMagnitude:
    def test_unit_and_scaled(self):
        data = zipf_interactions(10, 20, mean_degree=4, seed=0)
        t = xavier_init(10, 20, 5, seed=0)
        t.item_emb /= np.linalg.norm(t.item_emb, axis=1, keepdims=True)
        grouping = popularity_grouping(data, 4)
        np.testing.assert_allclose(magnitude_report(t, grouping), 1.0)
        t.item_emb *= 2
        np.testing.assert_allclose(magnitude_report(t, grouping), 2.0)


class TestCheckpoint:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_roundtrip(self, tmp_path, dtype):
        t = xavier_init(7, 9, 5, seed=2, dtype=dtype)
        save_checkpoint(t, tmp_path / "c.bin")
        back = load_checkpoint(tmp_path / "c.bin")
        assert back.user_emb.dtype == dtype
        np.testing.assert_array_equal(back.user_emb, t.user_emb)
        np.testing.assert_array_equal(back.item_emb, t.item_emb)

    def test_header_layout(self, tmp_path):
        t = xavier_init(2, 3, 4, seed=0)
        save_checkpoint(t, tmp_path / "c.bin")
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == b"ADTEMB01"
        assert int.from_bytes(raw[8:16], "little") == 2
        assert int.from_bytes(raw[16:24], "little") == 3
        assert int.from_bytes(raw[24:32], "little") == 4
        assert len(raw) == 36 + (2 + 3) * 4 * 8

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"nope" * 10)
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "x.bin")
