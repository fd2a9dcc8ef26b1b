"""
Risk Measures for the GMWB Monte Carlo engine.

Weighted VaR and CTE of the real-world loss distribution, batch-means
summaries and the V0 / multiplier sensitivity sweeps.
"""

import time
from dataclasses import dataclass
from typing import Dict, Iterable, Mapping, Optional

import numpy as np
import pandas as pd

from config import config
from exceptions import DegenerateTailError, EmptyDistributionError, EngineError, ParameterError
from logger import risk_logger
from pricing import (
    FeeMode,
    LossSamples,
    Measure,
    SimConfig,
    fair_base_fee,
    loss_samples,
    net_liability,
)

QUANTILE_TOL = 1e-12


@dataclass(frozen=True)
class LossDistribution:
    """Weighted empirical law of the loss, stored sorted by value."""
    values: np.ndarray
    weights: np.ndarray
    batch_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        if values.shape != weights.shape:
            raise ParameterError("values and weights must have the same length", field_name="weights")
        if np.any(weights <= 0):
            raise ParameterError("weights must be positive", field_name="weights")
        order = np.argsort(values, kind="stable")
        object.__setattr__(self, "values", values[order])
        object.__setattr__(self, "weights", weights[order])
        if self.batch_ids is not None:
            object.__setattr__(self, "batch_ids", np.asarray(self.batch_ids)[order])

    @classmethod
    def from_samples(cls, samples: LossSamples) -> "LossDistribution":
        return cls(samples.values, samples.weights, samples.batch_ids)

    @classmethod
    def unweighted(cls, values) -> "LossDistribution":
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones_like(values))

    def __len__(self) -> int:
        return len(self.values)

    def batch(self, b: int) -> "LossDistribution":
        mask = self.batch_ids == b
        return LossDistribution(self.values[mask], self.weights[mask])


def _check(dist: LossDistribution, zeta: Optional[float] = None) -> None:
    if len(dist) == 0:
        raise EmptyDistributionError()
    if zeta is not None and not 0 < zeta < 1:
        raise ParameterError("zeta must lie in (0, 1)", field_name="zeta", value=zeta)


def var(dist: LossDistribution, zeta: float = config.risk.zeta) -> float:
    """Smallest sample y with weighted CDF(y) >= zeta."""
    _check(dist, zeta)
    cumulative = np.cumsum(dist.weights)
    threshold = zeta * cumulative[-1] * (1 - QUANTILE_TOL)
    idx = int(np.searchsorted(cumulative, threshold, side="left"))
    return float(dist.values[min(idx, len(dist) - 1)])


def cte(dist: LossDistribution, zeta: float = config.risk.zeta) -> float:
    """Weighted mean of the samples strictly above VaR."""
    level = var(dist, zeta)
    tail = dist.values > level
    if not np.any(tail):
        raise DegenerateTailError(zeta, level)
    return float(np.average(dist.values[tail], weights=dist.weights[tail]))


def weighted_mean(dist: LossDistribution) -> float:
    _check(dist)
    return float(np.average(dist.values, weights=dist.weights))


def weighted_variance(dist: LossDistribution) -> float:
    mean = weighted_mean(dist)
    return float(np.average((dist.values - mean) ** 2, weights=dist.weights))


@dataclass(frozen=True)
class LossSummary:
    """Mean, variance, VaR and CTE of the loss with batch standard errors."""
    mean: float
    mean_se: float
    variance: float
    variance_se: float
    var: float
    cte: float
    cte_se: float
    zeta: float
    n_samples: int

    def to_record(self) -> Dict[str, float]:
        return {
            "mean": self.mean,
            "mean_se": self.mean_se,
            "variance": self.variance,
            "variance_se": self.variance_se,
            "var": self.var,
            "cte": self.cte,
            "cte_se": self.cte_se,
            "zeta": self.zeta,
            "n_samples": self.n_samples,
        }


def _batch_se(stats: Iterable[float]) -> float:
    stats = np.array([s for s in stats if np.isfinite(s)])
    if len(stats) < 2:
        return float("nan")
    return float(np.std(stats, ddof=1) / np.sqrt(len(stats)))


def _safe(fn, dist: LossDistribution, *args) -> float:
    try:
        return fn(dist, *args)
    except EngineError:
        return float("nan")


def summary(dist: LossDistribution, zeta: float = config.risk.zeta) -> LossSummary:
    _check(dist, zeta)
    mean_se = variance_se = cte_se = 0.0
    if dist.batch_ids is not None:
        batches = [dist.batch(b) for b in np.unique(dist.batch_ids)]
        batches = [b for b in batches if len(b) > 1]
        mean_se = _batch_se(weighted_mean(b) for b in batches)
        variance_se = _batch_se(weighted_variance(b) for b in batches)
        cte_se = _batch_se(_safe(cte, b, zeta) for b in batches)

    result = LossSummary(
        mean=weighted_mean(dist),
        mean_se=mean_se,
        variance=weighted_variance(dist),
        variance_se=variance_se,
        var=var(dist, zeta),
        cte=cte(dist, zeta),
        cte_se=cte_se,
        zeta=zeta,
        n_samples=len(dist),
    )
    risk_logger.info(
        "Loss summary",
        mean=f"{result.mean:.4f}",
        variance=f"{result.variance:.4f}",
        cte=f"{result.cte:.4f}",
        samples=result.n_samples,
    )
    return result


def loss_distribution(sim_config: SimConfig) -> LossDistribution:
    return LossDistribution.from_samples(loss_samples(sim_config))


def _base_fee_for(
    m: float,
    base: SimConfig,
    fee_mode: FeeMode,
    fair_fees: Optional[Mapping[float, float]]
) -> float:
    if fair_fees is not None and m in fair_fees:
        return float(fair_fees[m])
    target = 0.0 if fee_mode is FeeMode.FAIR else 1.0
    q_config = base.replace(measure=Measure.Q)
    return fair_base_fee(m, q_config, target=target).c_bar


def sensitivity_sweep(
    base: SimConfig,
    v0_grid: Iterable[float],
    m_grid: Iterable[float],
    fee_mode: FeeMode = FeeMode.FAIR,
    fair_fees: Optional[Mapping[float, float]] = None,
    zeta: float = config.risk.zeta
) -> pd.DataFrame:
    """
    One row per (V0, m) cell.

    The base fee for each multiplier is solved once at the base V0 (or taken
    from `fair_fees`) and then held fixed across the V0 grid. Under Q each
    row holds the net liability; under P it holds the loss summary.
    """
    v0_grid = [float(v) for v in v0_grid]
    m_grid = [float(m) for m in m_grid]
    if not v0_grid or not m_grid:
        raise ParameterError("Sweep grids must be nonempty", field_name="grid")

    start_time = time.perf_counter()
    rows = []
    for m in m_grid:
        c_bar = _base_fee_for(m, base, fee_mode, fair_fees)
        for v0 in v0_grid:
            cell = base.with_market(v0=v0).with_fee(c_bar=c_bar, m=m)
            row = {"v0": v0, "m": m, "c_bar": c_bar, "fee_mode": fee_mode.value}
            if base.measure is Measure.Q:
                estimate = net_liability(cell)
                row.update(net_liability=estimate.value, std_error=estimate.std_error)
            else:
                row.update(summary(loss_distribution(cell), zeta).to_record())
            rows.append(row)
            risk_logger.debug("Sweep cell", v0=v0, m=m, c_bar=c_bar)

    risk_logger.performance(
        "sensitivity_sweep",
        (time.perf_counter() - start_time) * 1000,
        cells=len(rows),
        measure=base.measure.value,
    )
    return pd.DataFrame(rows)
