"""
Model Parameters for the GMWB Monte Carlo engine.

Static market, fee and contract inputs plus every closed-form constant
the kernel and pricing layers consume: jump compensator, VIX² affine
coefficients, fee rates, exact OU step coefficients and the constants
of the explicit weak solution.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from exceptions import MeasureChangeError, ParameterError, ScheduleError

TAU_BAR = 30.0 / 365.0
REL_TOL = 1e-12


def _require(condition: bool, message: str, field_name: str, value) -> None:
    if not condition:
        raise ParameterError(message, field_name=field_name, value=value)


@dataclass(frozen=True)
class MarketParamsQ:
    """Risk-neutral SVJ parameters."""
    nu: float
    rho_rev: float
    kappa: float
    v0: float
    rho: float
    lam: float
    delta: float
    chi: float
    r: float

    def __post_init__(self):
        _require(self.nu > 0, "nu must be positive", "nu", self.nu)
        _require(self.rho_rev > 0, "rho_rev must be positive", "rho_rev", self.rho_rev)
        _require(self.kappa > 0, "kappa must be positive", "kappa", self.kappa)
        _require(self.v0 > 0, "v0 must be positive", "v0", self.v0)
        _require(-1.0 <= self.rho <= 1.0, "rho must lie in [-1, 1]", "rho", self.rho)
        _require(self.lam >= 0, "lambda must be non-negative", "lambda", self.lam)
        _require(self.delta > -1, "delta must exceed -1", "delta", self.delta)
        _require(self.chi >= 0, "chi must be non-negative", "chi", self.chi)
        _require(self.r >= 0, "r must be non-negative", "r", self.r)


@dataclass(frozen=True)
class RiskPremia:
    """Equity, volatility and jump risk premia."""
    eta_s: float = 0.0
    eta_v: float = 0.0
    eta_j: float = 0.0

    def __post_init__(self):
        _require(self.eta_s >= 0, "eta_s must be non-negative", "eta_s", self.eta_s)

    @property
    def is_zero(self) -> bool:
        return self.eta_s == 0 and self.eta_v == 0 and self.eta_j == 0


@dataclass(frozen=True)
class MarketParamsP:
    """Real-world parameters obtained from the risk premia."""
    nu: float
    rho_rev: float
    kappa: float
    v0: float
    rho: float
    lam: float
    delta: float
    chi: float
    r: float
    mu_bar: float
    alpha: float

    def __post_init__(self):
        if not self.rho_rev > 0:
            raise MeasureChangeError("rho_rev* must be positive", "rho_rev", self.rho_rev)
        if not self.lam >= 0:
            raise MeasureChangeError("lambda* must be non-negative", "lambda", self.lam)
        if not self.delta > -1:
            raise MeasureChangeError("delta* must exceed -1", "delta", self.delta)


class JumpLoading(Enum):
    """How the 2φ jump part of VIX² enters the constant fee rate α₀."""
    FULL = "full"      # α₀ = q + c̄ + m·(A − 2φ) + 2φ
    SCALED = "scaled"  # α₀ = q + c̄ + m·A


@dataclass(frozen=True)
class FeeStructure:
    """Management fee q, base rider fee c_bar, VIX multiplier m and jump loading."""
    q: float
    c_bar: float
    m: float = 0.0
    jump_loading: JumpLoading = JumpLoading.FULL

    def __post_init__(self):
        _require(self.q >= 0, "q must be non-negative", "q", self.q)
        _require(self.c_bar >= 0, "c_bar must be non-negative", "c_bar", self.c_bar)
        _require(self.m >= 0, "m must be non-negative", "m", self.m)
        if not isinstance(self.jump_loading, JumpLoading):
            try:
                object.__setattr__(self, "jump_loading", JumpLoading(self.jump_loading))
            except ValueError:
                raise ParameterError(
                    "jump_loading must be 'full' or 'scaled'",
                    field_name="jump_loading",
                    value=self.jump_loading
                )


@dataclass(frozen=True)
class WithdrawalSegment:
    """Constant withdrawal rate on [from_year, to_year)."""
    from_year: float
    to_year: float
    rate: float

    def __post_init__(self):
        if not self.to_year > self.from_year:
            raise ScheduleError(
                "Segment must have to_year > from_year",
                value=(self.from_year, self.to_year)
            )
        if not self.rate >= 0:
            raise ScheduleError("Withdrawal rate must be non-negative", value=self.rate)


WITHDRAWAL_PRESETS = {
    "constant": (7.0,),
    "deferred": (0.0,) * 5 + (10.0,) * 10,
    "increasing": (5, 5, 6, 6, 6, 7, 7, 7, 8, 8, 8, 9, 9, 9),
    "decreasing": (9, 9, 9, 8, 8, 8, 7, 7, 7, 6, 6, 6, 5, 5),
}


@dataclass(frozen=True)
class ContractSpec:
    """
    GMWB contract: premium f0 and a piecewise-constant withdrawal schedule.

    Segments must be contiguous from year 0. The maturity is the first time
    cumulative withdrawals reach f0; later parts of the schedule are ignored.
    """
    f0: float
    segments: Tuple[WithdrawalSegment, ...]
    maturity: float = field(init=False)

    def __post_init__(self):
        _require(self.f0 > 0, "f0 must be positive", "f0", self.f0)
        segments = tuple(self.segments)
        if not segments:
            raise ScheduleError("Withdrawal schedule is empty")
        if segments[0].from_year != 0:
            raise ScheduleError("Schedule must start at year 0", value=segments[0].from_year)
        for prev, nxt in zip(segments, segments[1:]):
            if not math.isclose(prev.to_year, nxt.from_year, rel_tol=REL_TOL, abs_tol=REL_TOL):
                raise ScheduleError(
                    "Schedule segments must be contiguous",
                    value=(prev.to_year, nxt.from_year)
                )
        object.__setattr__(self, "segments", segments)
        object.__setattr__(self, "maturity", self._exhaustion_time())

    def _exhaustion_time(self) -> float:
        cumulative = 0.0
        for seg in self.segments:
            amount = seg.rate * (seg.to_year - seg.from_year)
            if seg.rate > 0 and cumulative + amount >= self.f0 * (1 - REL_TOL):
                return seg.from_year + (self.f0 - cumulative) / seg.rate
            cumulative += amount
        raise ScheduleError(
            "Withdrawal schedule does not exhaust the premium",
            value={"f0": self.f0, "total": cumulative}
        )

    @classmethod
    def constant(cls, f0: float, rate: float) -> "ContractSpec":
        if not rate > 0:
            raise ScheduleError("Constant withdrawal rate must be positive", value=rate)
        return cls(f0=f0, segments=(WithdrawalSegment(0.0, f0 / rate, rate),))

    @classmethod
    def yearly(cls, f0: float, rates: Sequence[float]) -> "ContractSpec":
        return cls(
            f0=f0,
            segments=tuple(
                WithdrawalSegment(float(k), float(k + 1), float(w))
                for k, w in enumerate(rates)
            )
        )

    def rates(self, times) -> np.ndarray:
        """
        Withdrawal rates at the given times.

        Right-continuous inside (0, T); the left limit is used at T and the
        rate is zero beyond T.
        """
        times = np.asarray(times, dtype=np.float64)
        edges = np.array(
            [seg.from_year for seg in self.segments] + [self.segments[-1].to_year]
        )
        seg_rates = np.array([seg.rate for seg in self.segments])
        idx = np.searchsorted(edges, times, side="right") - 1
        at_end = times >= self.maturity * (1 - REL_TOL)
        idx_end = np.searchsorted(edges, self.maturity, side="left") - 1
        idx = np.where(at_end, idx_end, idx)
        idx = np.clip(idx, 0, len(seg_rates) - 1)
        out = seg_rates[idx]
        return np.where(times > self.maturity * (1 + REL_TOL), 0.0, out)

    def rate_at(self, t: float) -> float:
        return float(self.rates(np.array([t]))[0])

    def annuity_value(self, r: float) -> float:
        """Present value of the withdrawal stream, ∫₀^T e^{-rt} w_t dt."""
        total = 0.0
        for seg in self.segments:
            lo = seg.from_year
            hi = min(seg.to_year, self.maturity)
            if hi <= lo:
                break
            if r == 0:
                total += seg.rate * (hi - lo)
            else:
                total += seg.rate * (math.exp(-r * lo) - math.exp(-r * hi)) / r
        return total


def withdrawal_preset(name: str, f0: float = 100.0) -> ContractSpec:
    """Named withdrawal schedules, scaled to the premium f0."""
    if name not in WITHDRAWAL_PRESETS:
        raise ScheduleError(
            f"Unknown withdrawal preset '{name}'",
            field_name="preset",
            value=name
        )
    scale = f0 / 100.0
    rates = WITHDRAWAL_PRESETS[name]
    if name == "constant":
        return ContractSpec.constant(f0, rates[0] * scale)
    return ContractSpec.yearly(f0, [w * scale for w in rates])


@dataclass(frozen=True)
class DerivedConstants:
    """Closed-form constants precomputed once per run."""
    phi: float
    tau_bar: float
    A: float
    B: float
    alpha0: float
    alpha: float
    mu: float
    n: int
    nu_kappa: float
    mu_kappa: float
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float


@dataclass(frozen=True)
class StepConstants:
    """Exact one-step OU coefficients."""
    psi: float
    sigma: float
    h: float


@dataclass(frozen=True)
class SdeCoefficients:
    """
    Measure-specific coefficients driving the kernel.

    Under Q these come straight from the market and derived constants;
    under P the starred reversion speed, jump intensity and drift terms
    replace their risk-neutral counterparts.
    """
    nu: float
    rho_rev: float
    kappa: float
    v0: float
    rho: float
    lam: float
    delta: float
    chi: float
    r: float
    mu: float
    alpha: float
    n: int
    nu_kappa: float
    mu_kappa: float
    a: float
    b: float
    c: float
    d: float
    e: float
    f: float

    @property
    def weighted(self) -> bool:
        return self.e != 0.0


def jump_compensator(lam: float, delta: float, chi: float) -> float:
    """φ = λ(δ − ln(1+δ) + χ²/2)."""
    if not delta > -1:
        raise ParameterError("delta must exceed -1", field_name="delta", value=delta)
    if lam < 0:
        raise ParameterError("lambda must be non-negative", field_name="lambda", value=lam)
    return lam * (delta - math.log1p(delta) + 0.5 * chi * chi)


def _closest_explicit(nu: float, kappa: float) -> Tuple[int, float]:
    n = max(int(math.floor(4.0 * nu / (kappa * kappa) + 0.5)), 1)
    return n, n * kappa * kappa / 4.0


def condition_c(market) -> bool:
    """True iff ν equals nκ²/4 for the closest integer n ≥ 1."""
    _, nu_kappa = _closest_explicit(market.nu, market.kappa)
    return math.isclose(market.nu, nu_kappa, rel_tol=REL_TOL, abs_tol=0.0)


def _explicit_terms(nu: float, kappa: float, exact: bool) -> Tuple[int, float, float, float]:
    n, nu_kappa = _closest_explicit(nu, kappa)
    if exact:
        return n, nu, 0.0, 0.0
    e = (nu - nu_kappa) / (kappa * kappa)
    f = e * (kappa * kappa - nu - nu_kappa) / 2.0
    return n, nu_kappa, e, f


def derive_constants(market: MarketParamsQ, fee: FeeStructure) -> DerivedConstants:
    phi = jump_compensator(market.lam, market.delta, market.chi)
    x = market.rho_rev * TAU_BAR
    B = -math.expm1(-x) / x
    A = market.nu * (x + math.expm1(-x)) / (market.rho_rev ** 2 * TAU_BAR) + 2.0 * phi
    alpha = fee.m * B
    if fee.jump_loading is JumpLoading.SCALED:
        alpha0 = fee.q + fee.c_bar + fee.m * A
    else:
        alpha0 = fee.q + fee.c_bar + fee.m * (A - 2.0 * phi) + 2.0 * phi
    mu = market.r - market.delta * market.lam - alpha0

    exact = condition_c(market)
    n, nu_kappa, e, f = _explicit_terms(market.nu, market.kappa, exact)
    mu_kappa = mu + market.rho / market.kappa * (nu_kappa - market.nu)

    return DerivedConstants(
        phi=phi,
        tau_bar=TAU_BAR,
        A=A,
        B=B,
        alpha0=alpha0,
        alpha=alpha,
        mu=mu,
        n=n,
        nu_kappa=nu_kappa,
        mu_kappa=mu_kappa,
        a=math.sqrt(1.0 - market.rho ** 2),
        b=mu - market.nu * market.rho / market.kappa,
        c=market.rho * market.rho_rev / market.kappa - 0.5 - alpha,
        d=market.rho / market.kappa,
        e=e,
        f=f,
    )


def derive_p_params(
    market: MarketParamsQ,
    premia: RiskPremia,
    derived: DerivedConstants
) -> MarketParamsP:
    """Real-world parameters with δ* = δ."""
    rho_rev_star = market.rho_rev - premia.eta_v
    if not rho_rev_star > 0:
        raise MeasureChangeError(
            "eta_v must be below rho_rev so that rho_rev* > 0",
            "eta_v",
            premia.eta_v
        )

    delta_star = market.delta
    phi_star = derived.phi - premia.eta_j
    if phi_star < 0:
        raise MeasureChangeError("eta_j exceeds the jump compensator phi", "eta_j", premia.eta_j)

    if premia.eta_j == 0:
        lam_star = market.lam
    else:
        denom = delta_star - math.log1p(delta_star) + 0.5 * market.chi ** 2
        if denom == 0:
            if phi_star != 0:
                raise MeasureChangeError(
                    "Jump-size law is degenerate; lambda* is undefined",
                    "eta_j",
                    premia.eta_j
                )
            lam_star = 0.0
        else:
            lam_star = phi_star / denom

    return MarketParamsP(
        nu=market.nu,
        rho_rev=rho_rev_star,
        kappa=market.kappa,
        v0=market.v0,
        rho=market.rho,
        lam=lam_star,
        delta=delta_star,
        chi=market.chi,
        r=market.r,
        mu_bar=market.r - delta_star * lam_star - derived.alpha0,
        alpha=derived.alpha - premia.eta_s,
    )


def vix_squared(derived: DerivedConstants, v):
    return derived.A + derived.B * v


def fee_rates(derived: DerivedConstants, fee: FeeStructure, v):
    """Total fee rate γ and rider rate c = γ − q."""
    gamma = derived.alpha0 + derived.alpha * v
    return gamma, gamma - fee.q


def step_constants(rho_rev: float, kappa: float, h: float) -> StepConstants:
    if not h > 0:
        raise ParameterError("Step size must be positive", field_name="h", value=h)
    psi = math.exp(-0.5 * rho_rev * h)
    sigma = kappa * math.sqrt(-math.expm1(-rho_rev * h) / (4.0 * rho_rev))
    return StepConstants(psi=psi, sigma=sigma, h=h)


def sde_coefficients(
    market: MarketParamsQ,
    derived: DerivedConstants,
    p_params: Optional[MarketParamsP] = None
) -> SdeCoefficients:
    """Kernel coefficients under Q, or under P when p_params is given."""
    if p_params is None:
        return SdeCoefficients(
            nu=market.nu, rho_rev=market.rho_rev, kappa=market.kappa, v0=market.v0,
            rho=market.rho, lam=market.lam, delta=market.delta, chi=market.chi,
            r=market.r, mu=derived.mu, alpha=derived.alpha, n=derived.n,
            nu_kappa=derived.nu_kappa, mu_kappa=derived.mu_kappa,
            a=derived.a, b=derived.b, c=derived.c, d=derived.d,
            e=derived.e, f=derived.f,
        )

    p = p_params
    mu = p.mu_bar
    return SdeCoefficients(
        nu=p.nu, rho_rev=p.rho_rev, kappa=p.kappa, v0=p.v0,
        rho=p.rho, lam=p.lam, delta=p.delta, chi=p.chi,
        r=p.r, mu=mu, alpha=p.alpha, n=derived.n,
        nu_kappa=derived.nu_kappa,
        mu_kappa=mu + p.rho / p.kappa * (derived.nu_kappa - p.nu),
        a=derived.a,
        b=mu - p.nu * p.rho / p.kappa,
        c=p.rho * p.rho_rev / p.kappa - 0.5 - p.alpha,
        d=derived.d,
        e=derived.e,
        f=derived.f,
    )
