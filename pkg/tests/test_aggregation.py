import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedlora import aggregation, linalg
from fedlora.adapters import FactorPair, delta
from fedlora.aggregation import AggregationConfig
from fedlora.errors import ConfigError, ShapeError


def random_pair(rng, d_out, d_in, rank):
    return FactorPair(a=rng.normal(size=(rank, d_in)), b=rng.normal(size=(d_out, rank)))


def dense_weighted_sum(pairs, weights):
    """Independent oracle: sum of per-client dense products."""
    return sum(w * (p.b @ p.a) for w, p in zip(weights, pairs))


def cfg(strategy="selective_stacking", weights=(1.0,), rank_budget=4):
    return AggregationConfig(strategy=strategy, weights=np.asarray(weights), rank_budget=rank_budget)


class TestConfig:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError):
            cfg(weights=(0.5, 0.6))

    def test_negative_weight_rejected(self):
        with pytest.raises(ConfigError):
            cfg(weights=(1.5, -0.5))

    def test_unknown_strategy(self):
        with pytest.raises(ConfigError):
            cfg(strategy="averaging")

    def test_rank_budget_positive(self):
        with pytest.raises(ConfigError):
            cfg(rank_budget=0)


class TestStack:
    def test_orthogonal_rank_one_clients(self):
        p1 = FactorPair(a=np.array([[1.0, 0.0]]), b=np.array([[1.0], [0.0]]))
        p2 = FactorPair(a=np.array([[0.0, 1.0]]), b=np.array([[0.0], [1.0]]))
        out = aggregation.stack([p1, p2], [0.5, 0.5])
        assert np.allclose(delta(out), 0.5 * np.eye(2), atol=1e-15)

    def test_singleton(self):
        rng = np.random.default_rng(0)
        p = random_pair(rng, 3, 4, 2)
        out = aggregation.stack([p], [1.0])
        assert np.allclose(delta(out), delta(p), atol=1e-15)

    def test_three_clients_heterogeneous(self):
        rng = np.random.default_rng(1)
        pairs = [random_pair(rng, 4, 5, r) for r in (1, 2, 3)]
        w = [0.2, 0.3, 0.5]
        out = aggregation.stack(pairs, w)
        assert out.rank == 6
        assert np.allclose(delta(out), dense_weighted_sum(pairs, w), atol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ShapeError):
            aggregation.stack([], [])

    def test_shape_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError):
            aggregation.stack([random_pair(rng, 3, 4, 1), random_pair(rng, 4, 3, 1)], [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_stacking_equivalence_property(seed, k):
    rng = np.random.default_rng(seed)
    d_out, d_in = int(rng.integers(1, 33)), int(rng.integers(1, 33))
    pairs = [random_pair(rng, d_out, d_in, int(rng.integers(1, 17))) for _ in range(k)]
    w = rng.random(k)
    w = w / w.sum()
    stacked = aggregation.stack(pairs, w)
    oracle = dense_weighted_sum(pairs, w)
    scale = max(1.0, linalg.frobenius_norm(oracle))
    assert linalg.frobenius_norm(delta(stacked) - oracle) <= 1e-10 * scale


class TestRecompress:
    def test_lossless_when_rank_fits(self):
        rng = np.random.default_rng(3)
        low = random_pair(rng, 6, 8, 2)
        dense = delta(low)
        out = aggregation.recompress(dense, 4)
        assert out.rank <= 4
        assert linalg.frobenius_norm(delta(out) - dense) <= 1e-8

    def test_eckart_young_diag(self):
        out = aggregation.recompress(np.diag([3.0, 1.0]), 1)
        assert np.allclose(delta(out), np.diag([3.0, 0.0]), atol=1e-10)

    def test_tail_energy_and_balance(self):
        rng = np.random.default_rng(4)
        dense = rng.normal(size=(10, 10))
        out = aggregation.recompress(dense, 4)
        err = linalg.frobenius_norm(dense - delta(out))
        tail = np.sqrt(np.sum(np.linalg.svd(dense, compute_uv=False)[4:] ** 2))
        assert abs(err - tail) <= 1e-8
        # sqrt(s) split evenly between the factors
        gram_gap = np.linalg.norm(out.b.T @ out.b - out.a @ out.a.T)
        assert gram_gap <= 1e-8 * max(1.0, np.linalg.norm(out.a @ out.a.T))

    def test_zero_delta(self):
        out = aggregation.recompress(np.zeros((3, 5)), 2)
        assert out.rank == 1
        assert np.array_equal(delta(out), np.zeros((3, 5)))


class TestSelective:
    def test_within_budget_passes_through(self):
        rng = np.random.default_rng(5)
        pairs = [random_pair(rng, 4, 6, 2) for _ in range(2)]
        w = [0.25, 0.75]
        out = aggregation.aggregate_selective(pairs, cfg(weights=w, rank_budget=8))
        oracle = dense_weighted_sum(pairs, w)
        assert out.rank == 4
        assert linalg.frobenius_norm(delta(out) - oracle) <= 1e-10 * max(1.0, np.linalg.norm(oracle))

    def test_over_budget_recompresses(self):
        rng = np.random.default_rng(6)
        pairs = [random_pair(rng, 8, 9, 4) for _ in range(3)]
        w = [0.5, 0.3, 0.2]
        out = aggregation.aggregate_selective(pairs, cfg(weights=w, rank_budget=3))
        assert out.rank <= 3
        oracle = dense_weighted_sum(pairs, w)
        res = np.linalg.svd(oracle, compute_uv=False)
        best = np.sqrt(np.sum(res[3:] ** 2))
        err = linalg.frobenius_norm(oracle - delta(out))
        assert abs(err - best) <= 1e-8

    def test_consensus(self):
        rng = np.random.default_rng(7)
        p = random_pair(rng, 5, 4, 2)
        out = aggregation.aggregate_selective(
            [p.copy() for _ in range(4)], cfg(weights=[0.25] * 4, rank_budget=16)
        )
        assert np.allclose(delta(out), delta(p), atol=1e-12)

    def test_homogeneous_degeneracy_matches_dense_sum(self):
        # equal ranks, stacked rank within budget: the delta (not the
        # factors) coincides with the weighted-sum oracle fedavg targets
        rng = np.random.default_rng(8)
        pairs = [random_pair(rng, 5, 6, 2) for _ in range(3)]
        w = [1 / 3] * 3
        out = aggregation.aggregate_selective(pairs, cfg(weights=w, rank_budget=6))
        oracle = dense_weighted_sum(pairs, w)
        scale = max(1.0, linalg.frobenius_norm(oracle))
        assert linalg.frobenius_norm(delta(out) - oracle) <= 1e-10 * scale

    def test_module_level_budget_invariant(self):
        rng = np.random.default_rng(9)
        modules = [
            {0: random_pair(rng, 6, 7, 3), 1: random_pair(rng, 4, 6, 3)} for _ in range(4)
        ]
        update = aggregation.aggregate_selective_update(
            modules, cfg(weights=[0.25] * 4, rank_budget=5), round_index=3
        )
        assert update.round_index == 3
        for pair in update.layers.values():
            assert pair.rank <= 5


class TestZeroPadding:
    def test_consensus(self):
        rng = np.random.default_rng(10)
        p = random_pair(rng, 4, 5, 3)
        out = aggregation.aggregate_zero_padding(
            [p.copy(), p.copy()], cfg(weights=[0.5, 0.5], rank_budget=4)
        )
        assert np.allclose(delta(out), delta(p), atol=1e-12)

    def test_documented_bias(self):
        p1 = FactorPair(a=np.array([[1.0, 0.0]]), b=np.array([[1.0], [0.0]]))
        p2 = FactorPair(a=np.array([[0.0, 1.0]]), b=np.array([[0.0], [1.0]]))
        out = aggregation.aggregate_zero_padding([p1, p2], cfg(weights=[0.5, 0.5]))
        assert np.allclose(delta(out), np.full((2, 2), 0.25), atol=1e-15)
        assert not np.allclose(delta(out), 0.5 * np.eye(2))

    def test_single_client_unchanged(self):
        rng = np.random.default_rng(11)
        p = random_pair(rng, 3, 4, 2)
        out = aggregation.aggregate_zero_padding([p], cfg(weights=[1.0]))
        assert np.array_equal(out.a, p.a) and np.array_equal(out.b, p.b)

    def test_pads_to_max_rank(self):
        rng = np.random.default_rng(12)
        pairs = [random_pair(rng, 4, 5, r) for r in (1, 3, 2)]
        out = aggregation.aggregate_zero_padding(pairs, cfg(weights=[0.2, 0.5, 0.3]))
        assert out.rank == 3


class TestFedavg:
    def test_identity_on_consensus(self):
        rng = np.random.default_rng(13)
        p = random_pair(rng, 4, 5, 2)
        out = aggregation.aggregate_fedavg([p.copy(), p.copy()], cfg(weights=[0.5, 0.5]))
        assert np.allclose(out.a, p.a, atol=1e-15) and np.allclose(out.b, p.b, atol=1e-15)

    def test_heterogeneous_rejected(self):
        rng = np.random.default_rng(14)
        with pytest.raises(ConfigError):
            aggregation.aggregate_fedavg(
                [random_pair(rng, 4, 5, 2), random_pair(rng, 4, 5, 3)], cfg(weights=[0.5, 0.5])
            )

    def test_equal_weight_mean_oracle(self):
        rng = np.random.default_rng(15)
        pairs = [random_pair(rng, 4, 5, 2) for _ in range(2)]
        out = aggregation.aggregate_fedavg(pairs, cfg(weights=[0.5, 0.5]))
        assert np.allclose(out.a, (pairs[0].a + pairs[1].a) / 2, atol=1e-12)
        assert np.allclose(out.b, (pairs[0].b + pairs[1].b) / 2, atol=1e-12)


class TestFlora:
    def test_single_client_increments_accum(self):
        rng = np.random.default_rng(16)
        p = random_pair(rng, 4, 5, 2)
        accum = rng.normal(size=(4, 5))
        out = aggregation.aggregate_flora([p], cfg(weights=[1.0]), accum)
        assert np.allclose(out - accum, delta(p), atol=1e-12)

    def test_two_clients_dense_oracle(self):
        rng = np.random.default_rng(17)
        pairs = [random_pair(rng, 4, 5, r) for r in (2, 3)]
        accum = np.zeros((4, 5))
        out = aggregation.aggregate_flora(pairs, cfg(weights=[0.5, 0.5]), accum)
        assert np.allclose(out, dense_weighted_sum(pairs, [0.5, 0.5]), atol=1e-10)

    def test_zero_adapters_leave_accum(self):
        accum = np.ones((3, 4))
        zero = FactorPair(a=np.zeros((2, 4)), b=np.zeros((3, 2)))
        out = aggregation.aggregate_flora([zero], cfg(weights=[1.0]), accum)
        assert np.array_equal(out, accum)
