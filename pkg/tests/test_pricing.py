"""
Tests for Pricing.

Tests the time grid, configuration validation, reproducibility across
threads and memory modes, the estimators and the fair-fee solver on
small, coarse runs.
"""

import math
import pytest
import sys
from pathlib import Path

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from exceptions import BracketError, ParameterError
from model_params import ContractSpec, JumpLoading
from pricing import (
    Estimate,
    Measure,
    MemoryMode,
    SimConfig,
    batch_estimate,
    fair_base_fee,
    fair_fee_consistency,
    fee_and_payout,
    grid_annuity,
    loss_samples,
    net_liability,
    simulate,
    time_grid,
)


@pytest.fixture
def short_config():
    """One-year contract, coarse grid, few paths."""
    return SimConfig.default(
        contract=ContractSpec.constant(100.0, 100.0),
        n_paths=400,
        h=0.05,
        n_batches=20,
        seed=17,
    )


@pytest.fixture
def weighted_config(short_config):
    """Same contract with nu off the explicit set."""
    return short_config.with_market(nu=0.1773)


class TestTimeGrid:
    """Test grid construction."""

    def test_exact_multiple(self):
        """Test T/h integral gives K + 1 points ending at T."""
        grid = time_grid(1.0, 0.25)
        np.testing.assert_allclose(grid, [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_fractional_last_step(self):
        """Test a remainder adds a final shorter step."""
        grid = time_grid(1.0, 0.3)
        np.testing.assert_allclose(grid, [0.0, 0.3, 0.6, 0.9, 1.0])

    def test_step_longer_than_maturity(self):
        """Test h > T is rejected."""
        with pytest.raises(ParameterError):
            time_grid(1.0, 2.0)


class TestSimConfig:
    """Test run configuration validation."""

    def test_default_matches_base_case(self):
        """Test the default config holds the base-case contract."""
        cfg = SimConfig.default()
        assert cfg.contract.maturity == pytest.approx(100.0 / 7.0)
        assert cfg.measure is Measure.Q
        assert not cfg.sde.weighted

    def test_too_few_paths(self):
        """Test N0 < 2 is rejected."""
        with pytest.raises(ParameterError):
            SimConfig.default(n_paths=1, n_batches=1)

    def test_batches_exceed_paths(self):
        """Test more batches than paths is rejected."""
        with pytest.raises(ParameterError):
            SimConfig.default(n_paths=10, n_batches=20)

    def test_threads_positive(self):
        """Test threads < 1 is rejected."""
        with pytest.raises(ParameterError):
            SimConfig.default(threads=0)


class TestEstimators:
    """Test the batch-means estimator."""

    def test_constant_values(self):
        """Test unit values and weights give 1 with zero error."""
        estimate = batch_estimate(np.ones(100), np.ones(100), np.arange(100), 100, 10)
        assert estimate.value == 1.0
        assert estimate.std_error == 0.0
        assert estimate.n_effective == pytest.approx(100.0)

    def test_normalised_by_initial_count(self):
        """Test the sum is divided by N0 rather than the final count."""
        values = np.ones(6)
        weights = np.full(6, 0.5)
        roots = np.array([0, 0, 1, 1, 2, 2])
        estimate = batch_estimate(values, weights, roots, 3, 3)
        assert estimate.value == pytest.approx(1.0)

    def test_within(self):
        """Test the n-sigma comparison."""
        estimate = Estimate(value=1.0, std_error=0.1, n_effective=10, n_batches=10)
        assert estimate.within(1.3, 4.0)
        assert not estimate.within(1.5, 4.0)


class TestSimulation:
    """Test full simulation runs."""

    def test_deterministic(self, short_config):
        """Test identical configs give bitwise identical estimates."""
        first = net_liability(short_config)
        second = net_liability(short_config)
        assert first.value == second.value
        assert first.std_error == second.std_error

    def test_thread_count_invariant(self, weighted_config):
        """Test the thread count never changes results."""
        base = weighted_config.replace(chunk_size=100)
        one = simulate(base.replace(threads=1)).particles
        four = simulate(base.replace(threads=4)).particles
        for name in ("v", "l", "g", "c_acc", "w_acc", "ids"):
            np.testing.assert_array_equal(getattr(one, name), getattr(four, name))

    def test_pooled_matches_streaming(self, short_config):
        """Test pregenerated pools reproduce the streaming run."""
        streaming = simulate(short_config).particles
        pooled = simulate(short_config.replace(pooled=True)).particles
        np.testing.assert_array_equal(streaming.v, pooled.v)
        np.testing.assert_array_equal(streaming.c_acc, pooled.c_acc)

    def test_unit_weights_when_explicit(self, short_config):
        """Test L is identically one and no branching happens."""
        result = simulate(short_config)
        assert not result.weighted
        assert np.all(result.weights == 1.0)
        assert len(result.particles) == short_config.n_paths

    def test_weighted_run_has_positive_weights(self, weighted_config):
        """Test weights stay positive through branching."""
        result = simulate(weighted_config)
        assert result.weighted
        assert np.all(result.weights > 0)
        assert len(result.particles) > 0

    def test_replay_matches_single_pass_state(self, weighted_config):
        """Test the replay mode reproduces the variance and weight paths."""
        single = simulate(weighted_config).particles
        replay = simulate(weighted_config.replace(memory_mode=MemoryMode.ANCESTRY_REPLAY)).particles
        np.testing.assert_array_equal(single.v, replay.v)
        np.testing.assert_array_equal(single.l, replay.l)
        np.testing.assert_array_equal(single.ids, replay.ids)

    def test_replay_matches_without_branching(self, short_config):
        """Test both memory modes agree exactly when nothing branches."""
        single = simulate(short_config).particles
        replay = simulate(short_config.replace(memory_mode=MemoryMode.ANCESTRY_REPLAY)).particles
        np.testing.assert_allclose(single.c_acc, replay.c_acc, rtol=1e-12)
        np.testing.assert_allclose(single.w_acc, replay.w_acc, rtol=1e-12)

    def test_ancestry_recorded(self, weighted_config):
        """Test requested ancestry covers every step."""
        result = simulate(weighted_config.replace(record_ancestry=True))
        assert result.ancestry is not None
        assert result.ancestry.steps == len(result.times) - 1
        assert result.ancestry.matrix().shape[0] == len(result.particles)

    def test_sub_steps_run(self, weighted_config):
        """Test the refined trapezoid runs end to end."""
        estimate = net_liability(weighted_config.replace(sub_steps=3))
        assert math.isfinite(estimate.value)


class TestPricingOperations:
    """Test liability, fee and consistency operations."""

    def test_net_is_payout_minus_fees(self, short_config):
        """Test the net estimate decomposes into payout and fees."""
        fp = fee_and_payout(short_config.with_fee(c_bar=0.01))
        assert fp.net.value == pytest.approx(fp.payout.value - fp.fees.value, abs=1e-9)
        assert fp.fees.value > 0
        assert fp.payout.value >= 0

    def test_fees_increase_with_base_fee(self, short_config):
        """Test a higher base fee collects more fees on common random numbers."""
        low = fee_and_payout(short_config.with_fee(c_bar=0.01)).fees.value
        high = fee_and_payout(short_config.with_fee(c_bar=0.03)).fees.value
        assert high > low

    def test_requires_risk_neutral(self, short_config):
        """Test pricing under P is rejected."""
        with pytest.raises(ParameterError):
            net_liability(short_config.replace(measure=Measure.P))

    def test_grid_annuity(self):
        """Test the grid annuity approaches the closed form."""
        contract = ContractSpec.constant(100.0, 7.0)
        times = time_grid(contract.maturity, 0.001)
        approx = grid_annuity(times, contract.rates(times), 0.02)
        assert approx == pytest.approx(contract.annuity_value(0.02), rel=1e-6)

    def test_consistency_reports_annuity(self, short_config):
        """Test the consistency residual is finite and uses the grid annuity."""
        result = fair_fee_consistency(short_config)
        times = short_config.times
        assert result.annuity == pytest.approx(
            grid_annuity(times, short_config.contract.rates(times), short_config.market.r)
        )
        assert math.isfinite(result.residual.value)

    def test_loss_samples_switch_to_p(self, short_config):
        """Test loss samples are drawn under the real-world measure."""
        samples = loss_samples(short_config)
        assert len(samples.values) == len(samples.weights)
        assert np.all(samples.batch_ids < short_config.n_batches)


class TestFairFee:
    """Test the fair base fee solver on the base contract."""

    @pytest.fixture
    def coarse_base(self):
        return SimConfig.default(n_paths=1000, h=0.25, n_batches=20, seed=3)

    def test_fair_fee_in_range(self, coarse_base):
        """Test the solved fee lies inside the bracket near the base-case level."""
        result = fair_base_fee(0.0, coarse_base, tol=1e-4)
        assert 0.01 < result.c_bar < 0.04
        assert result.iterations >= 1
        assert abs(result.net.value) < 1.0

    def test_bracket_error(self, coarse_base):
        """Test a bracket that does not straddle zero raises BracketError."""
        with pytest.raises(BracketError):
            fair_base_fee(0.0, coarse_base, bracket=(0.045, 0.05))

    def test_invalid_bracket(self, coarse_base):
        """Test lo >= hi is rejected."""
        with pytest.raises(ParameterError):
            fair_base_fee(0.0, coarse_base, bracket=(0.05, 0.01))

    def test_consistency_residual_vanishes_at_fair_fee(self):
        """Test the optional-stopping residual is near zero at the solved fee."""
        base = SimConfig.default(n_paths=4000, h=0.1, n_batches=20, seed=11)
        fair = fair_base_fee(0.0, base, tol=1e-5)
        result = fair_fee_consistency(base.with_fee(c_bar=fair.c_bar, m=0.0))
        assert result.net.value == pytest.approx(fair.net.value)
        tolerance = 4 * math.hypot(result.residual.std_error, result.net.std_error) + 0.25
        assert abs(result.residual.value) <= tolerance

    def test_residual_tracks_minus_net(self):
        """Test the residual equals minus the net liability away from the fair fee."""
        base = SimConfig.default(n_paths=4000, h=0.1, n_batches=20, seed=12).with_fee(c_bar=0.005)
        result = fair_fee_consistency(base)
        assert result.net.value > 1.0
        tolerance = 4 * math.hypot(result.residual.std_error, result.net.std_error) + 0.25
        assert abs(result.residual.value + result.net.value) <= tolerance


class TestStepConvergence:
    """Test the net liability settles as the step shrinks."""

    @pytest.mark.parametrize("nu", [0.18, 0.1773])
    def test_coarse_and_fine_agree(self, short_config, nu):
        """Test h = 1/10 and h = 1/100 agree within four combined standard errors."""
        base = short_config.replace(n_paths=4000, n_batches=20).with_market(nu=nu).with_fee(c_bar=0.01)
        coarse = net_liability(base.replace(h=0.1))
        fine = net_liability(base.replace(h=0.01))
        combined = math.hypot(coarse.std_error, fine.std_error)
        assert abs(coarse.value - fine.value) <= 4 * combined + 0.1


class TestReferenceFees:
    """Test the published fair fees price the base contract."""

    @pytest.mark.parametrize("m, c_bar", [(0.0, 0.02465), (0.3, 0.0103)])
    def test_net_liability_near_zero(self, m, c_bar):
        """Test the net liability at the reference fee is zero within noise."""
        base = SimConfig.default(n_paths=20_000, h=1.0 / 50.0, n_batches=20, seed=7)
        estimate = net_liability(base.with_fee(c_bar=c_bar, m=m))
        assert abs(estimate.value) <= 4 * estimate.std_error + 0.3

    def test_scaled_loading_underprices(self):
        """Test scaling the jump part by m leaves a clearly positive liability at m = 0.3."""
        base = SimConfig.default(n_paths=20_000, h=1.0 / 50.0, n_batches=20, seed=7)
        scaled = net_liability(base.with_fee(c_bar=0.0103, m=0.3, jump_loading=JumpLoading.SCALED))
        assert scaled.value > 4 * scaled.std_error + 0.3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
