"""
Tests for Evaluation Metrics
"""

import numpy as np
import pytest

from errors import DomainError, SamplerError, ShapeError
from metrics import (
    RankTable, logprob_per_point, predictive_mse, rank_uniformity_pvalue, sbc_eod, sbc_eod_lower_bound, sbc_ranks,
    subset_indices, swd,
)


class TestSwd:
    """Test the sliced Wasserstein distance"""

    def test_identical_sets(self, rng):
        """Identical samples are at distance zero"""
        a = rng.standard_normal((50, 4))
        assert swd(a, a.copy(), rng=rng) == 0.0

    def test_one_dimensional_shift(self, rng):
        """In 1-D a shift by c is at distance |c|"""
        a = rng.standard_normal((200, 1))
        assert swd(a, a + 0.7, n_projections=5, rng=rng) == pytest.approx(0.7, rel=1e-12)

    def test_symmetric(self, rng):
        """swd(a, b) = swd(b, a) for the same projections"""
        a, b = rng.standard_normal((2, 100, 3))
        assert swd(a, b, rng=np.random.default_rng(4)) == pytest.approx(swd(b, a, rng=np.random.default_rng(4)))

    def test_unequal_counts(self, rng):
        """Large sets from one distribution are close"""
        a = rng.standard_normal((4000, 2))
        b = rng.standard_normal((3000, 2))
        assert swd(a, b, rng=rng) < 0.1

    def test_invalid_inputs(self, rng):
        """Test mismatched dimensions and single samples"""
        with pytest.raises(ShapeError):
            swd(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))
        with pytest.raises(DomainError):
            swd(rng.standard_normal((1, 2)), rng.standard_normal((5, 2)))


class TestSbc:
    """Test ranks and the error of diagonal"""

    def test_eod_of_evenly_spread_ranks(self):
        """Ranks 0..N-1 out of N give 1/(2N)"""
        n = 40
        table = RankTable(np.arange(n)[:, None], n_post=n)
        assert sbc_eod(table) == pytest.approx(1.0 / (2 * n), rel=1e-12)

    def test_eod_of_point_masses(self):
        """All ranks at an end give 1/2"""
        assert sbc_eod(RankTable(np.zeros((10, 3), dtype=int), n_post=100)) == pytest.approx(0.5)
        assert sbc_eod(RankTable(np.full((10, 3), 100), n_post=100)) == pytest.approx(0.5)

    def test_lower_bound(self):
        """Uniform ranks have a small but positive error"""
        bound = sbc_eod_lower_bound(100, 10, 100, n_replicates=20)
        assert 0.0 < bound < 0.05

    def test_ranks_count_draws_strictly_below(self):
        """Ties are dithered upward"""
        truths = np.array([[0.0, 10.0], [-10.0, 0.5]])

        def sampler(j):
            return np.tile([0.0, 0.0], (8, 1)) if j == 0 else np.linspace(0, 1, 8)[:, None].repeat(2, axis=1)

        table = sbc_ranks(sampler, truths, 8)
        assert table.ranks.tolist() == [[0, 8], [0, 4]]
        assert table.metadata["rank_convention"] == "strictly_below"

    def test_sampler_failure_names_record(self):
        """Test a failing posterior sampler"""
        def sampler(j):
            if j == 2:
                raise RuntimeError("boom")
            return np.zeros((4, 1))

        with pytest.raises(SamplerError) as exc:
            sbc_ranks(sampler, np.zeros((3, 1)), 4)
        assert exc.value.record_index == 2

    def test_rank_range(self):
        """Test ranks outside [0, n_post]"""
        with pytest.raises(DomainError):
            RankTable(np.array([[5]]), n_post=4)
        with pytest.raises(DomainError):
            sbc_eod(RankTable(np.zeros((0, 2), dtype=int), n_post=4))

    def test_uniformity_pvalue(self, rng):
        """Uniform ranks pass and collapsed ranks fail"""
        uniform = RankTable(rng.integers(0, 100, size=(2000, 1)), n_post=99)
        collapsed = RankTable(np.zeros((2000, 1), dtype=int), n_post=99)
        assert rank_uniformity_pvalue(uniform) > 1e-3
        assert rank_uniformity_pvalue(collapsed) < 1e-10


class TestPredictive:
    """Test predictive MSE and per-point log-probability"""

    def test_constant_offset(self):
        """An offset of one in every channel costs C_x per point"""
        observations = [np.zeros((5, 2)), np.ones((5, 2))]
        samples = [np.zeros((3, 4, 1))] * 2

        def simulator(j, draws):
            return np.broadcast_to(observations[j] + 1.0, (len(draws), 5, 2))

        result = predictive_mse(samples, simulator, observations)
        assert result.mse == pytest.approx(2.0)
        assert result.n_failed == 0

    def test_failed_records_are_excluded(self):
        """Test a simulator that fails on one record"""
        observations = [np.zeros((4, 1))] * 3
        samples = [np.zeros((2, 4, 1))] * 3

        def simulator(j, draws):
            if j == 1:
                raise ValueError("solver failed")
            return np.full((2, 4, 1), float(j))

        result = predictive_mse(samples, simulator, observations)
        assert result.n_failed == 1
        assert result.mse == pytest.approx(2.0)

    def test_all_failed(self):
        """No successful record gives NaN"""
        def simulator(j, draws):
            raise ValueError("solver failed")

        result = predictive_mse([np.zeros((1, 2, 1))], simulator, [np.zeros((2, 1))])
        assert np.isnan(result.mse) and result.n_failed == 1

    def test_logprob_per_point(self):
        """Log-probabilities are divided by each record's point count"""
        values = [-10.0, -30.0]
        assert logprob_per_point(lambda j: values[j], [10, 20]) == pytest.approx(-1.25)
        with pytest.raises(DomainError):
            logprob_per_point(lambda j: 0.0, [])

    def test_subset_indices(self, rng):
        """Subsets are sorted and distinct"""
        idx = subset_indices(100, 10, rng)
        assert len(set(idx.tolist())) == 10
        assert np.all(np.diff(idx) > 0)
        assert subset_indices(5, 10, rng).tolist() == [0, 1, 2, 3, 4]


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
