"""
Euler Oracle for the GMWB Monte Carlo engine.

Independent reference simulator: Euler discretization of the variance
with a choice of truncation fix, log-Euler for the jump-included kernel,
the same account recursion and left-point cash-flow sums. Used only to
cross-check the explicit engine.
"""

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from config import config
from exceptions import ParameterError
from kernel import chunk_bounds
from logger import validation_logger
from pricing import Estimate, SimConfig, batch_estimate, time_grid
from rng import Purpose, StreamFactory

# Engine particle ids stay below this, so oracle stream ids never collide with them.
ORACLE_STREAM_BASE = config.simulation.stream_id_limit


class TruncationScheme(Enum):
    FULL_TRUNCATION = "full_truncation"
    REFLECTION = "reflection"
    ABSORPTION = "absorption"


@dataclass(frozen=True)
class EulerConfig:
    """Oracle run: the engine's inputs plus the Euler step and truncation tag."""
    sim: SimConfig
    h: float = config.validation.oracle_h
    scheme: TruncationScheme = TruncationScheme.FULL_TRUNCATION
    n_paths: Optional[int] = None

    def __post_init__(self):
        if not self.h > 0:
            raise ParameterError("Euler step must be positive", field_name="h", value=self.h)
        if self.n_paths is not None and self.n_paths < 2:
            raise ParameterError("n_paths must be at least 2", field_name="n_paths", value=self.n_paths)

    @property
    def paths(self) -> int:
        return self.n_paths if self.n_paths is not None else self.sim.n_paths


@dataclass
class EulerResult:
    """Oracle estimates of the engine's functionals."""
    net: Estimate
    fees: Estimate
    payout: Estimate
    terminal_account: Estimate
    negative_fraction: float
    losses: np.ndarray = field(repr=False)
    n_paths: int = 0
    h: float = 0.0


@dataclass
class _ChunkOutput:
    c_acc: np.ndarray
    w_acc: np.ndarray
    f_end: np.ndarray
    negatives: int


def _simulate_chunk(
    euler: EulerConfig,
    count: int,
    chunk_index: int,
    times: np.ndarray,
    rates: np.ndarray
) -> _ChunkOutput:
    sim = euler.sim
    sde = sim.sde
    derived = sim.derived
    factory = StreamFactory(sim.seed)
    stream_id = ORACLE_STREAM_BASE + chunk_index
    variance_stream = factory.stream(Purpose.OU, stream_id)
    index_stream = factory.stream(Purpose.STOCH_INTEGRAL, stream_id)
    count_stream = factory.stream(Purpose.JUMP_COUNT, stream_id)
    size_stream = factory.stream(Purpose.JUMP_SIZE, stream_id)

    f0 = sim.contract.f0
    r = sde.r
    rho_bar = math.sqrt(1.0 - sde.rho ** 2)
    jump_mean = math.log1p(sde.delta) - 0.5 * sde.chi ** 2

    v = np.full(count, sim.market.v0)
    log_g = np.zeros(count)
    r_acc = np.zeros(count)
    f = np.full(count, f0)
    absorbed = np.zeros(count, dtype=bool)
    c_acc = np.zeros(count)
    w_acc = np.zeros(count)
    negatives = 0

    for k in range(1, len(times)):
        t_prev = times[k - 1]
        dt = times[k] - t_prev
        disc = math.exp(-r * t_prev)
        w_prev = rates[k - 1]

        if euler.scheme is TruncationScheme.FULL_TRUNCATION:
            v_eff = np.maximum(v, 0.0)
        else:
            v_eff = v

        rider = (derived.alpha0 - sim.fee.q) + derived.alpha * v_eff
        c_acc += np.where(absorbed, 0.0, disc * rider * f * dt)
        w_acc += np.where(absorbed, disc * w_prev * dt, 0.0)

        z_v = variance_stream.normals(count)
        z_s = sde.rho * z_v + rho_bar * index_stream.normals(count)
        sqrt_v = np.sqrt(v_eff * dt)

        v_raw = v + (sde.nu - sde.rho_rev * v_eff) * dt + sde.kappa * sqrt_v * z_v
        negatives += int(np.count_nonzero(v_raw < 0))
        if euler.scheme is TruncationScheme.REFLECTION:
            v = np.abs(v_raw)
        elif euler.scheme is TruncationScheme.ABSORPTION:
            v = np.maximum(v_raw, 0.0)
        else:
            v = v_raw

        g_prev = np.exp(log_g)
        log_g = log_g + (sde.mu - sde.alpha * v_eff - 0.5 * v_eff) * dt + sqrt_v * z_s
        if sde.lam > 0:
            n_jumps = count_stream.poisson(sde.lam * dt, count)
            total = int(n_jumps.sum())
            if total:
                sizes = jump_mean + sde.chi * size_stream.normals(total)
                owner = np.repeat(np.arange(count), n_jumps)
                log_g = log_g + np.bincount(owner, weights=sizes, minlength=count)

        live = ~absorbed
        r_acc = np.where(live, r_acc + w_prev / g_prev * dt, r_acc)
        remaining = f0 - r_acc
        newly = live & (remaining <= 0)
        absorbed = absorbed | newly
        f = np.where(absorbed, 0.0, np.exp(log_g) * np.maximum(remaining, 0.0))

    return _ChunkOutput(c_acc=c_acc, w_acc=w_acc, f_end=f, negatives=negatives)


def euler_simulate(euler: EulerConfig) -> EulerResult:
    """Run the oracle and return estimates comparable to the pricing module's."""
    sim = euler.sim
    n_paths = euler.paths
    times = time_grid(sim.contract.maturity, euler.h)
    rates = sim.contract.rates(times)
    bounds = chunk_bounds(n_paths, sim.chunk_size)

    start_time = time.perf_counter()
    validation_logger.info(
        "Euler oracle started",
        paths=n_paths,
        steps=len(times) - 1,
        scheme=euler.scheme.value,
        measure=sim.measure.value,
    )

    def run(item) -> _ChunkOutput:
        index, (lo, hi) = item
        return _simulate_chunk(euler, hi - lo, index, times, rates)

    if sim.threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=sim.threads) as executor:
            outputs: List[_ChunkOutput] = list(executor.map(run, enumerate(bounds)))
    else:
        outputs = [run(item) for item in enumerate(bounds)]

    c_acc = np.concatenate([o.c_acc for o in outputs])
    w_acc = np.concatenate([o.w_acc for o in outputs])
    f_end = np.concatenate([o.f_end for o in outputs])
    negatives = sum(o.negatives for o in outputs)

    ones = np.ones(n_paths)
    roots = np.arange(n_paths)

    def estimate(values: np.ndarray) -> Estimate:
        return batch_estimate(values, ones, roots, n_paths, sim.n_batches)

    losses = w_acc - c_acc
    discount_T = math.exp(-sim.sde.r * sim.contract.maturity)

    result = EulerResult(
        net=estimate(losses),
        fees=estimate(c_acc),
        payout=estimate(w_acc),
        terminal_account=estimate(discount_T * f_end),
        negative_fraction=negatives / (n_paths * (len(times) - 1)),
        losses=losses,
        n_paths=n_paths,
        h=euler.h,
    )
    validation_logger.performance(
        "euler_simulate",
        (time.perf_counter() - start_time) * 1000,
        net=f"{result.net.value:.6f}",
        negative_fraction=f"{result.negative_fraction:.6f}",
    )
    return result
