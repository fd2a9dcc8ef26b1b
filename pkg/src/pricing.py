"""
Pricing for the GMWB Monte Carlo engine.

Runs full simulations (weighted stepping, branching, jumps and the
account and cash-flow recursions), and turns terminal ensembles into
net-liability, fee/payout, fair-fee and consistency estimates.

Two memory modes are supported. The single-pass mode carries every path
quantity through branching. The ancestry-replay mode first simulates
(V, H, L) with branching, then replays jumps and cash flows forward over
the distinct ancestors of the surviving particles.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from branching import Ancestry, Ensemble, branch_step
from config import config
from exceptions import BracketError, ParameterError
from kernel import (
    KernelConfig,
    Particles,
    StepStreams,
    WeightScheme,
    advance,
    chunk_bounds,
    draw_jump_noise,
    draw_state_noise,
    init_particles,
    settle_step,
    weighted_update,
)
from logger import engine_logger, pricing_logger
from model_params import (
    ContractSpec,
    DerivedConstants,
    FeeStructure,
    MarketParamsP,
    MarketParamsQ,
    RiskPremia,
    SdeCoefficients,
    derive_constants,
    derive_p_params,
    sde_coefficients,
    step_constants,
)
from rng import Purpose, StreamFactory

GRID_TOL = 1e-9


class Measure(Enum):
    Q = "Q"
    P = "P"


class MemoryMode(Enum):
    SINGLE_PASS = "single_pass"
    ANCESTRY_REPLAY = "ancestry_replay"


class FeeMode(Enum):
    FAIR = "fair"
    UNDERPRICED = "underpriced"


def time_grid(maturity: float, h: float) -> np.ndarray:
    """Grid t_k = k h up to K = floor(T/h), plus a final fractional step to T."""
    if not h > 0:
        raise ParameterError("Step size must be positive", field_name="h", value=h)
    K = int(math.floor(maturity / h + GRID_TOL))
    if K < 1:
        raise ParameterError("Step size exceeds the contract maturity", field_name="h", value=h)
    times = h * np.arange(K + 1, dtype=np.float64)
    if maturity - K * h > GRID_TOL * h:
        times = np.append(times, maturity)
    else:
        times[-1] = maturity
    return times


@dataclass(frozen=True)
class SimConfig:
    """Everything that determines a simulation run."""
    market: MarketParamsQ
    fee: FeeStructure
    contract: ContractSpec
    premia: RiskPremia = field(default_factory=RiskPremia)
    measure: Measure = Measure.Q
    n_paths: int = config.simulation.n_paths
    h: float = config.simulation.h
    seed: int = config.simulation.seed
    epsilon: float = config.simulation.epsilon
    q1: float = config.simulation.q1
    q2: float = config.simulation.q2
    branching: bool = True
    sub_steps: int = config.simulation.sub_steps
    weights: WeightScheme = WeightScheme(config.simulation.weight_scheme)
    memory_mode: MemoryMode = MemoryMode.SINGLE_PASS
    pooled: bool = False
    n_batches: int = config.simulation.n_batches
    threads: int = config.simulation.threads
    record_ancestry: bool = False
    chunk_size: int = config.simulation.chunk_size

    def __post_init__(self):
        if not 2 <= self.n_paths < config.simulation.stream_id_limit:
            raise ParameterError(
                f"n_paths must lie in [2, {config.simulation.stream_id_limit})",
                field_name="n_paths",
                value=self.n_paths
            )
        if not self.epsilon < self.market.v0:
            raise ParameterError("epsilon must be below v0", field_name="epsilon", value=self.epsilon)
        if not 1 <= self.n_batches <= self.n_paths:
            raise ParameterError("n_batches must lie in [1, n_paths]", field_name="n_batches", value=self.n_batches)
        if self.threads < 1:
            raise ParameterError("threads must be at least 1", field_name="threads", value=self.threads)
        if self.seed < 0:
            raise ParameterError("seed must be non-negative", field_name="seed", value=self.seed)
        time_grid(self.contract.maturity, self.h)

    @classmethod
    def default(cls, **overrides) -> "SimConfig":
        """Base-case market, fee and contract with optional overrides."""
        base = config.base_case
        market = MarketParamsQ(
            nu=base.nu, rho_rev=base.rho_rev, kappa=base.kappa, v0=base.v0, rho=base.rho,
            lam=base.lam, delta=base.delta, chi=base.chi, r=base.r,
        )
        fields_ = {
            "market": market,
            "fee": FeeStructure(q=base.q, c_bar=base.c_bar, m=base.m),
            "contract": ContractSpec.constant(base.f0, base.withdrawal_rate),
        }
        fields_.update(overrides)
        return cls(**fields_)

    def replace(self, **changes) -> "SimConfig":
        return replace(self, **changes)

    def with_fee(self, **changes) -> "SimConfig":
        return replace(self, fee=replace(self.fee, **changes))

    def with_market(self, **changes) -> "SimConfig":
        return replace(self, market=replace(self.market, **changes))

    @property
    def derived(self) -> DerivedConstants:
        return derive_constants(self.market, self.fee)

    @property
    def p_params(self) -> Optional[MarketParamsP]:
        if self.measure is Measure.Q:
            return None
        return derive_p_params(self.market, self.premia, self.derived)

    @property
    def sde(self) -> SdeCoefficients:
        return sde_coefficients(self.market, self.derived, self.p_params)

    @property
    def times(self) -> np.ndarray:
        return time_grid(self.contract.maturity, self.h)


@dataclass(frozen=True)
class Estimate:
    """Monte Carlo estimate with batch-means standard error."""
    value: float
    std_error: float
    n_effective: float
    n_batches: int

    def within(self, other: float, n_sigma: float = 4.0) -> bool:
        return abs(self.value - other) <= n_sigma * self.std_error


@dataclass
class SimulationResult:
    """Terminal ensemble of a run."""
    particles: Particles
    n0: int
    times: np.ndarray
    weighted: bool
    measure: Measure
    ancestry: Optional[Ancestry] = None
    elapsed_ms: float = 0.0

    @property
    def weights(self) -> np.ndarray:
        return self.particles.l

    @property
    def losses(self) -> np.ndarray:
        return self.particles.w_acc - self.particles.c_acc


@dataclass(frozen=True)
class FeePayout:
    fees: Estimate
    payout: Estimate
    net: Estimate


@dataclass(frozen=True)
class FairFeeResult:
    m: float
    c_bar: float
    std_error: float
    net: Estimate
    iterations: int
    target: float = 0.0


@dataclass(frozen=True)
class ConsistencyResult:
    residual: Estimate
    net: Estimate
    annuity: float


def batch_estimate(
    values: np.ndarray,
    weights: np.ndarray,
    roots: np.ndarray,
    n0: int,
    n_batches: int
) -> Estimate:
    """(1/N0)·Σ x·L with batches formed by root id modulo the batch count."""
    x = values * weights
    value = float(np.sum(x)) / n0
    batch = roots % n_batches
    sums = np.bincount(batch, weights=x, minlength=n_batches)
    sizes = np.bincount(np.arange(n0) % n_batches, minlength=n_batches)
    means = sums / sizes
    std_error = float(np.std(means, ddof=1) / math.sqrt(n_batches)) if n_batches > 1 else 0.0
    w_sum = float(np.sum(weights))
    w_sq = float(np.sum(weights * weights))
    n_eff = w_sum * w_sum / w_sq if w_sq > 0 else 0.0
    return Estimate(value=value, std_error=std_error, n_effective=n_eff, n_batches=n_batches)


class _StepRunner:
    """Applies a per-chunk function over particle blocks, optionally in threads."""

    def __init__(self, threads: int, chunk_size: int):
        self.chunk_size = chunk_size
        self.executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None

    def map(self, count: int, fn: Callable[[int, int], Particles]) -> Particles:
        bounds = chunk_bounds(count, self.chunk_size)
        if self.executor is None or len(bounds) == 1:
            parts = [fn(lo, hi) for lo, hi in bounds]
        else:
            parts = list(self.executor.map(lambda b: fn(*b), bounds))
        return Particles.concat(parts)

    def close(self) -> None:
        if self.executor is not None:
            self.executor.shutdown(wait=True)


class Simulator:
    """
    Runs one simulation for a SimConfig.

    Random draws for a step are taken here, on the calling thread and in
    particle order, before any chunked evaluation, so results do not
    depend on the thread count.
    """

    def __init__(self, sim_config: SimConfig):
        self.config = sim_config
        self.derived = sim_config.derived
        self.sde = sim_config.sde
        self.times = sim_config.times
        self.rates = sim_config.contract.rates(self.times)
        self.do_branch = sim_config.branching and self.sde.weighted
        self.factory = StreamFactory(sim_config.seed)
        self._kernel_cache: Dict[float, KernelConfig] = {}

        base_step = step_constants(self.sde.rho_rev, self.sde.kappa, sim_config.h)
        self.base_kernel = KernelConfig(
            sde=self.sde,
            derived=self.derived,
            fee=sim_config.fee,
            step=base_step,
            epsilon=sim_config.epsilon,
            sub_steps=sim_config.sub_steps,
            weights=sim_config.weights,
        )

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    def kernel_for(self, k: int) -> KernelConfig:
        dt = self.times[k] - self.times[k - 1]
        if abs(dt - self.config.h) <= GRID_TOL * self.config.h:
            return self.base_kernel
        if dt not in self._kernel_cache:
            self._kernel_cache[dt] = self.base_kernel.with_step(dt)
        return self._kernel_cache[dt]

    def _pool_sizes(self) -> Optional[dict]:
        if not self.config.pooled:
            return None
        cfg = self.config
        headroom = 1.0 if not self.do_branch else config.simulation.pool_headroom
        path_steps = cfg.n_paths * self.n_steps
        expected_jumps = self.sde.lam * cfg.contract.maturity * cfg.n_paths
        return {
            Purpose.OU: int(math.ceil(headroom * path_steps * cfg.sub_steps * self.sde.n)),
            Purpose.STOCH_INTEGRAL: int(math.ceil(headroom * path_steps)),
            Purpose.JUMP_SIZE: int(math.ceil(headroom * (expected_jumps + 10 * math.sqrt(expected_jumps + 1)))) + 1,
        }

    def _streams(self) -> StepStreams:
        return StepStreams.from_factory(self.factory, self._pool_sizes())

    def run(self) -> SimulationResult:
        cfg = self.config
        start_time = time.perf_counter()
        engine_logger.simulation(
            "Simulation started",
            paths=cfg.n_paths,
            steps=self.n_steps,
            measure=cfg.measure.value,
            weighted=self.sde.weighted,
            branching=self.do_branch,
            mode=cfg.memory_mode.value,
            seed=cfg.seed,
        )

        runner = _StepRunner(cfg.threads, cfg.chunk_size)
        try:
            if cfg.memory_mode is MemoryMode.ANCESTRY_REPLAY:
                particles, ancestry = self._run_replay(runner)
            else:
                particles, ancestry = self._run_single_pass(runner)
        finally:
            runner.close()

        elapsed_ms = (time.perf_counter() - start_time) * 1000
        engine_logger.performance(
            "simulate",
            elapsed_ms,
            final_particles=len(particles),
            steps=self.n_steps,
        )
        return SimulationResult(
            particles=particles,
            n0=cfg.n_paths,
            times=self.times,
            weighted=self.sde.weighted,
            measure=cfg.measure,
            ancestry=ancestry,
            elapsed_ms=elapsed_ms,
        )

    def _new_ensemble(self, record: bool) -> Ensemble:
        cfg = self.config
        particles = init_particles(cfg.market.v0, self.sde.n, cfg.n_paths, cfg.contract.f0)
        return Ensemble(
            particles=particles,
            q1=cfg.q1,
            q2=cfg.q2,
            next_id=cfg.n_paths,
            ancestry=Ancestry() if record else None,
        )

    def _branch(self, ensemble: Ensemble, k: int, uniform_stream, permutation_stream):
        ensemble.step = k
        if not self.do_branch:
            return ensemble, None
        before = ensemble.size
        ensemble, parents = branch_step(ensemble, uniform_stream, permutation_stream)
        engine_logger.debug("Branching pass", step=k, before=before, after=ensemble.size)
        return ensemble, parents

    def _log_progress(self, k: int) -> None:
        every = max(self.n_steps // 10, 1)
        if k % every == 0:
            engine_logger.debug("Simulation progress", step=k, of=self.n_steps)

    def _run_single_pass(self, runner: _StepRunner) -> Tuple[Particles, Optional[Ancestry]]:
        cfg = self.config
        streams = self._streams()
        uniform_stream = self.factory.stream(Purpose.BRANCH_UNIFORM)
        permutation_stream = self.factory.stream(Purpose.PERMUTATION)
        ensemble = self._new_ensemble(cfg.record_ancestry)
        f0 = cfg.contract.f0

        for k in range(1, self.n_steps + 1):
            kcfg = self.kernel_for(k)
            t_prev, t_new = self.times[k - 1], self.times[k]
            w_prev, w_new = self.rates[k - 1], self.rates[k]
            particles = ensemble.particles
            count = len(particles)

            state_noise = draw_state_noise(count, kcfg, streams)
            jump_noise = draw_jump_noise(count, self.sde.lam, kcfg.h, streams)

            def step_block(lo: int, hi: int) -> Particles:
                return advance(
                    particles.slice(lo, hi),
                    state_noise.rows(lo, hi),
                    jump_noise.rows(lo, hi),
                    kcfg, f0, t_prev, t_new, w_prev, w_new,
                )

            ensemble.particles = runner.map(count, step_block)
            ensemble, _ = self._branch(ensemble, k, uniform_stream, permutation_stream)
            self._log_progress(k)

        return ensemble.particles, ensemble.ancestry

    def _run_replay(self, runner: _StepRunner) -> Tuple[Particles, Optional[Ancestry]]:
        cfg = self.config
        streams = self._streams()
        uniform_stream = self.factory.stream(Purpose.BRANCH_UNIFORM)
        permutation_stream = self.factory.stream(Purpose.PERMUTATION)
        ensemble = self._new_ensemble(True)
        initial = ensemble.particles
        f0 = cfg.contract.f0

        # First pass: (Y, V, H, L) with branching, recording pre-branch V and H.
        v_pre: List[np.ndarray] = []
        h_pre: List[np.ndarray] = []
        parents: List[np.ndarray] = []
        for k in range(1, self.n_steps + 1):
            kcfg = self.kernel_for(k)
            particles = ensemble.particles
            count = len(particles)
            state_noise = draw_state_noise(count, kcfg, streams)
            t_prev = self.times[k - 1]

            def move_block(lo: int, hi: int) -> Particles:
                return weighted_update(particles.slice(lo, hi), kcfg, state_noise.rows(lo, hi), t_prev)

            moved = runner.map(count, move_block)
            v_pre.append(moved.v)
            h_pre.append(moved.h_val)
            ensemble.particles = moved
            ensemble, parent_index = self._branch(ensemble, k, uniform_stream, permutation_stream)
            if parent_index is None:
                parent_index = np.arange(count, dtype=np.int64)
                ensemble.ancestry.record(parent_index)
            parents.append(parent_index)
            self._log_progress(k)

        # Distinct pre-branch nodes each surviving particle descends from.
        K = self.n_steps
        needed: List[np.ndarray] = [None] * (K + 1)
        needed[K] = np.unique(parents[K - 1])
        for k in range(K, 1, -1):
            needed[k - 1] = np.unique(parents[k - 2][needed[k]])
        needed[0] = needed[1]
        engine_logger.debug(
            "Ancestry replay",
            distinct_nodes=int(sum(len(n) for n in needed[1:])),
            final_particles=ensemble.size,
        )

        # Second pass: jumps, account and cash flows over the distinct nodes.
        nodes = initial.take(needed[0])
        for k in range(1, K + 1):
            kcfg = self.kernel_for(k)
            t_prev, t_new = self.times[k - 1], self.times[k]
            w_prev, w_new = self.rates[k - 1], self.rates[k]
            if k == 1:
                prev = nodes
            else:
                pred = parents[k - 2][needed[k]]
                prev = nodes.take(np.searchsorted(needed[k - 1], pred))
            moved = prev.replace(v=v_pre[k - 1][needed[k]], h_val=h_pre[k - 1][needed[k]])
            count = len(prev)
            jump_noise = draw_jump_noise(count, self.sde.lam, kcfg.h, streams)

            def settle_block(lo: int, hi: int) -> Particles:
                return settle_step(
                    prev.slice(lo, hi), moved.slice(lo, hi), jump_noise.rows(lo, hi),
                    kcfg, f0, t_prev, t_new, w_prev, w_new,
                )

            nodes = runner.map(count, settle_block)

        final_nodes = nodes.take(np.searchsorted(needed[K], parents[K - 1]))
        particles = ensemble.particles.replace(
            g=final_nodes.g,
            r_acc=final_nodes.r_acc,
            f=final_nodes.f,
            absorbed=final_nodes.absorbed,
            tau0=final_nodes.tau0,
            c_acc=final_nodes.c_acc,
            w_acc=final_nodes.w_acc,
            q_acc=final_nodes.q_acc,
        )
        return particles, ensemble.ancestry


def simulate(sim_config: SimConfig) -> SimulationResult:
    return Simulator(sim_config).run()


def _require_q(sim_config: SimConfig, operation: str) -> None:
    if sim_config.measure is not Measure.Q:
        raise ParameterError(
            f"{operation} is a risk-neutral quantity; run it under Q",
            field_name="measure",
            value=sim_config.measure.value
        )


def _estimate(result: SimulationResult, values: np.ndarray, n_batches: int) -> Estimate:
    return batch_estimate(values, result.weights, result.particles.roots, result.n0, n_batches)


def fee_payout_from(result: SimulationResult, n_batches: int) -> FeePayout:
    p = result.particles
    return FeePayout(
        fees=_estimate(result, p.c_acc, n_batches),
        payout=_estimate(result, p.w_acc, n_batches),
        net=_estimate(result, p.w_acc - p.c_acc, n_batches),
    )


def net_liability(sim_config: SimConfig) -> Estimate:
    """Π̂ = (1/N0) Σ (W_T − C_T) L_T."""
    _require_q(sim_config, "net_liability")
    result = simulate(sim_config)
    estimate = _estimate(result, result.losses, sim_config.n_batches)
    pricing_logger.info(
        "Net liability",
        c_bar=sim_config.fee.c_bar,
        m=sim_config.fee.m,
        value=f"{estimate.value:.6f}",
        std_error=f"{estimate.std_error:.6f}",
    )
    return estimate


def fee_and_payout(sim_config: SimConfig) -> FeePayout:
    _require_q(sim_config, "fee_and_payout")
    return fee_payout_from(simulate(sim_config), sim_config.n_batches)


def fair_base_fee(
    m: float,
    sim_config: SimConfig,
    tol: float = config.fair_fee.tol,
    bracket: Tuple[float, float] = config.fair_fee.bracket,
    target: float = 0.0,
    max_iter: int = config.fair_fee.max_iter
) -> FairFeeResult:
    """
    Base fee c̄ solving Π̂(c̄, m) = target by bisection.

    Every evaluation reuses the configured seed, so Π̂ is a monotone
    function of c̄ across iterations.
    """
    _require_q(sim_config, "fair_base_fee")
    base = sim_config.with_fee(m=m)
    lo, hi = bracket
    if not hi > lo:
        raise ParameterError("Fee bracket must satisfy lo < hi", field_name="bracket", value=bracket)

    start_time = time.perf_counter()
    def evaluate(c_bar: float) -> Estimate:
        return net_liability(base.with_fee(c_bar=c_bar))

    est_lo, est_hi = evaluate(lo), evaluate(hi)
    if not (est_lo.value - target > 0 > est_hi.value - target):
        raise BracketError(lo, hi, est_lo.value, est_hi.value, target)

    mid, est_mid = lo, est_lo
    iterations = 0
    for iterations in range(1, max_iter + 1):
        mid = 0.5 * (lo + hi)
        est_mid = evaluate(mid)
        gap = est_mid.value - target
        pricing_logger.debug("Bisection", iteration=iterations, c_bar=mid, gap=gap)
        if abs(gap) < est_mid.std_error:
            break
        if gap > 0:
            lo, est_lo = mid, est_mid
        else:
            hi, est_hi = mid, est_mid
        if hi - lo < tol:
            break

    slope = (est_lo.value - est_hi.value) / (hi - lo) if hi > lo else 0.0
    std_error = est_mid.std_error / slope if slope > 0 else float("nan")

    pricing_logger.performance(
        "fair_base_fee",
        (time.perf_counter() - start_time) * 1000,
        m=m,
        c_bar=f"{mid:.8f}",
        iterations=iterations,
    )
    return FairFeeResult(
        m=m, c_bar=mid, std_error=std_error, net=est_mid, iterations=iterations, target=target
    )


def grid_annuity(times: np.ndarray, rates: np.ndarray, r: float) -> float:
    """Trapezoid of e^{-rt} w_t on the simulation grid."""
    discounted = np.exp(-r * times) * rates
    return float(np.sum(0.5 * np.diff(times) * (discounted[:-1] + discounted[1:])))


def fair_fee_consistency(sim_config: SimConfig) -> ConsistencyResult:
    """
    Residual of the optional-stopping form of the fair-fee identity,
    F0 − [annuity + E e^{-rT}F_T + E ∫ q e^{-rt}F_t dt], from one simulation.
    """
    _require_q(sim_config, "fair_fee_consistency")
    result = simulate(sim_config)
    p = result.particles
    r = sim_config.market.r
    maturity = sim_config.contract.maturity
    annuity = grid_annuity(result.times, sim_config.contract.rates(result.times), r)
    per_path = sim_config.contract.f0 - annuity - math.exp(-r * maturity) * p.f - p.q_acc
    return ConsistencyResult(
        residual=_estimate(result, per_path, sim_config.n_batches),
        net=_estimate(result, result.losses, sim_config.n_batches),
        annuity=annuity,
    )


@dataclass(frozen=True)
class LossSamples:
    """Weighted draws of the discounted future loss Λ0 = W_T − C_T."""
    values: np.ndarray
    weights: np.ndarray
    batch_ids: np.ndarray
    n_batches: int


def loss_samples(sim_config: SimConfig) -> LossSamples:
    """Terminal losses under the real-world dynamics; a Q config is switched to P."""
    if sim_config.measure is not Measure.P:
        sim_config = sim_config.replace(measure=Measure.P)
    result = simulate(sim_config)
    pricing_logger.info(
        "Loss samples",
        samples=len(result.particles),
        eta_s=sim_config.premia.eta_s,
        eta_v=sim_config.premia.eta_v,
        eta_j=sim_config.premia.eta_j,
    )
    return LossSamples(
        values=result.losses,
        weights=result.weights,
        batch_ids=result.particles.roots % sim_config.n_batches,
        n_batches=sim_config.n_batches,
    )
