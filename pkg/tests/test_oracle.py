"""
Tests for the Euler Oracle.

Tests configuration checks, reproducibility, the basic accounting of
the reference simulator and its agreement with the explicit engine.
"""

import math
import pytest
import sys
from pathlib import Path

import numpy as np

# Add src directory to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from config import config
from exceptions import ParameterError
from model_params import ContractSpec
from oracle import ORACLE_STREAM_BASE, EulerConfig, TruncationScheme, euler_simulate
from pricing import SimConfig, fee_and_payout, net_liability


@pytest.fixture
def sim():
    return SimConfig.default(
        contract=ContractSpec.constant(100.0, 100.0),
        n_paths=300,
        h=0.05,
        n_batches=10,
        seed=31,
    ).with_fee(c_bar=0.01)


class TestEulerConfig:
    """Test oracle configuration."""

    def test_non_positive_step(self, sim):
        """Test h <= 0 is rejected."""
        with pytest.raises(ParameterError):
            EulerConfig(sim=sim, h=0.0)

    def test_path_override(self, sim):
        """Test the oracle may use its own path count."""
        assert EulerConfig(sim=sim, n_paths=50).paths == 50
        assert EulerConfig(sim=sim).paths == sim.n_paths


class TestEulerSimulate:
    """Test oracle runs."""

    def test_accounting(self, sim):
        """Test net = payout - fees and the loss vector length."""
        result = euler_simulate(EulerConfig(sim=sim, h=0.01))
        assert result.net.value == pytest.approx(result.payout.value - result.fees.value, abs=1e-9)
        assert len(result.losses) == sim.n_paths
        assert result.fees.value > 0
        assert 0.0 <= result.negative_fraction <= 1.0

    def test_deterministic(self, sim):
        """Test repeated runs are identical."""
        a = euler_simulate(EulerConfig(sim=sim, h=0.01))
        b = euler_simulate(EulerConfig(sim=sim, h=0.01))
        np.testing.assert_array_equal(a.losses, b.losses)

    def test_thread_count_invariant(self, sim):
        """Test chunked threading does not change the draws."""
        base = sim.replace(chunk_size=100)
        one = euler_simulate(EulerConfig(sim=base.replace(threads=1), h=0.02))
        three = euler_simulate(EulerConfig(sim=base.replace(threads=3), h=0.02))
        np.testing.assert_array_equal(one.losses, three.losses)

    @pytest.mark.parametrize("scheme", list(TruncationScheme))
    def test_schemes_run(self, sim, scheme):
        """Test every truncation fix gives a finite estimate."""
        result = euler_simulate(EulerConfig(sim=sim, h=0.02, scheme=scheme))
        assert math.isfinite(result.net.value)
        assert math.isfinite(result.terminal_account.value)

    def test_streams_clear_of_engine_ids(self):
        """Test oracle stream ids start above every engine particle id."""
        assert ORACLE_STREAM_BASE >= config.simulation.stream_id_limit
        with pytest.raises(ParameterError):
            SimConfig.default(n_paths=config.simulation.stream_id_limit)


class TestAgainstEngine:
    """Test the oracle and the explicit engine estimate the same liability."""

    @pytest.fixture
    def comparable(self, sim):
        return sim.replace(n_paths=4000, n_batches=20, h=0.01)

    @pytest.mark.parametrize("nu", [0.18, 0.1773])
    def test_net_liability_agrees(self, comparable, nu):
        """Test engine and oracle nets agree within four combined standard errors."""
        cfg = comparable.with_market(nu=nu)
        engine = net_liability(cfg)
        oracle = euler_simulate(EulerConfig(sim=cfg, h=1e-3)).net
        combined = math.hypot(engine.std_error, oracle.std_error)
        assert abs(engine.value - oracle.value) <= 4 * combined + 0.1

    def test_fees_and_payout_agree(self, comparable):
        """Test both legs agree separately on the explicit set."""
        engine = fee_and_payout(comparable)
        oracle = euler_simulate(EulerConfig(sim=comparable, h=1e-3))
        for mine, theirs in ((engine.fees, oracle.fees), (engine.payout, oracle.payout)):
            assert abs(mine.value - theirs.value) <= 4 * math.hypot(mine.std_error, theirs.std_error) + 0.1


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
