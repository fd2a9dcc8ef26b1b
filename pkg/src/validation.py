"""
Validation Suite for the GMWB Monte Carlo engine.

Statistical property checks behind the `validate` command: unit weights
when the explicit solution is exact, the CIR marginal law of V, the
martingale identities for G and L, unbiasedness of branching and the
agreement with the Euler oracle.
"""

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd
from scipy import stats

from branching import Ensemble, branch_step
from config import ValidationDefaults, config
from kernel import init_particles
from logger import validation_logger
from model_params import ContractSpec, condition_c, derive_constants, step_constants
from oracle import EulerConfig, TruncationScheme, euler_simulate
from pricing import Measure, SimConfig, batch_estimate, net_liability, simulate
from rng import Purpose, StreamFactory


@dataclass
class CheckResult:
    """Outcome of one property check."""
    name: str
    passed: bool
    statistic: float
    expected: float
    tolerance: float
    detail: str = ""
    skipped: bool = False


@dataclass
class ValidationReport:
    """Result of a validation run."""
    is_valid: bool
    checks: List[CheckResult] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    @property
    def failed(self) -> List[str]:
        return [c.name for c in self.checks if not c.passed and not c.skipped]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {
                "check": c.name,
                "passed": c.passed,
                "skipped": c.skipped,
                "statistic": c.statistic,
                "expected": c.expected,
                "tolerance": c.tolerance,
                "detail": c.detail,
            }
            for c in self.checks
        ])


class PropertySuite:
    """
    Runs the property checks on small, short-horizon variants of a base config.

    Every check builds its own config from the base: horizon, step and path
    count come from the validation settings.
    """

    def __init__(
        self,
        base: SimConfig,
        settings: Optional[ValidationDefaults] = None,
        scheme: TruncationScheme = TruncationScheme.FULL_TRUNCATION
    ):
        self.base = base.replace(measure=Measure.Q)
        self.settings = settings or config.validation
        self.scheme = scheme
        self.checks: Dict[str, Callable[[], CheckResult]] = {
            "unit_weights": self.check_unit_weights,
            "cir_marginal": self.check_cir_marginal,
            "martingale_g": self.check_martingale_g,
            "martingale_g_weighted": self.check_martingale_g_weighted,
            "martingale_l": self.check_martingale_l,
            "branching_unbiased": self.check_branching_unbiased,
            "oracle_agreement": self.check_oracle_agreement,
        }

    def _short(self, n_paths: Optional[int] = None, **changes) -> SimConfig:
        s = self.settings
        f0 = self.base.contract.f0
        return self.base.replace(
            contract=ContractSpec.constant(f0, f0 / s.horizon),
            h=s.h,
            n_paths=n_paths or s.n_paths,
            n_batches=min(self.base.n_batches, n_paths or s.n_paths),
            **changes
        )

    def _explicit_market(self):
        """Base market moved onto the closest explicit ν = nκ²/4."""
        derived = derive_constants(self.base.market, self.base.fee)
        return replace(self.base.market, nu=derived.nu_kappa)

    def check_unit_weights(self) -> CheckResult:
        cfg = self._short(market=self._explicit_market())
        result = simulate(cfg)
        deviation = float(np.max(np.abs(result.weights - 1.0)))
        return CheckResult(
            name="unit_weights",
            passed=deviation == 0.0,
            statistic=deviation,
            expected=0.0,
            tolerance=0.0,
            detail=f"nu={cfg.market.nu}, particles={len(result.particles)}",
        )

    def check_cir_marginal(self) -> CheckResult:
        s = self.settings
        market = self._explicit_market()
        cfg = self._short(n_paths=s.cir_paths, market=market)
        result = simulate(cfg)
        sde = cfg.sde
        horizon = cfg.contract.maturity
        exact = step_constants(sde.rho_rev, sde.kappa, horizon)
        scale = exact.sigma ** 2
        law = stats.ncx2(df=sde.n, nc=exact.psi ** 2 * market.v0 / scale, scale=scale)
        ks = stats.kstest(result.particles.v, law.cdf)
        return CheckResult(
            name="cir_marginal",
            passed=bool(ks.pvalue > s.ks_pvalue),
            statistic=float(ks.pvalue),
            expected=s.ks_pvalue,
            tolerance=0.0,
            detail=f"KS statistic={ks.statistic:.6f}, n={sde.n}, t={horizon}",
        )

    def _g_martingale(self, name: str, cfg: SimConfig) -> CheckResult:
        s = self.settings
        result = simulate(cfg)
        p = result.particles
        estimate = batch_estimate(p.g, p.l, p.roots, result.n0, cfg.n_batches)
        expected = math.exp((cfg.market.r - cfg.derived.alpha0) * cfg.contract.maturity)
        return CheckResult(
            name=name,
            passed=estimate.within(expected, s.n_sigma),
            statistic=estimate.value,
            expected=expected,
            tolerance=s.n_sigma * estimate.std_error,
            detail=f"nu={cfg.market.nu}, branching={cfg.branching and cfg.sde.weighted}",
        )

    def check_martingale_g(self) -> CheckResult:
        """E[L_T G_T] = e^{(r − α₀)T} with m = 0 on the explicit set."""
        cfg = self._short(market=self._explicit_market()).with_fee(m=0.0)
        return self._g_martingale("martingale_g", cfg)

    def check_martingale_g_weighted(self) -> CheckResult:
        """Same identity at the weighted ν, with branching."""
        cfg = self._short(branching=True).with_market(nu=self.settings.weighted_nu).with_fee(m=0.0)
        return self._g_martingale("martingale_g_weighted", cfg)

    def check_martingale_l(self) -> CheckResult:
        s = self.settings
        cfg = self._short(branching=False).with_market(nu=s.weighted_nu)
        result = simulate(cfg)
        p = result.particles
        estimate = batch_estimate(np.ones(len(p)), p.l, p.roots, result.n0, cfg.n_batches)
        return CheckResult(
            name="martingale_l",
            passed=estimate.within(1.0, s.n_sigma),
            statistic=estimate.value,
            expected=1.0,
            tolerance=s.n_sigma * estimate.std_error,
            detail=f"nu={s.weighted_nu}, stopped={int(p.eta_hit.sum())}",
        )

    def check_branching_unbiased(self) -> CheckResult:
        s = self.settings
        factory = StreamFactory(self.base.seed)
        setup = factory.stream(Purpose.BRANCH_UNIFORM, particle_id=1)
        count = 200
        particles = init_particles(self.base.market.v0, 2, count, self.base.contract.f0)
        particles = particles.replace(
            v=setup.uniforms(count, 0.01, 0.1),
            l=np.exp(0.8 * setup.generator.standard_normal(count)),
        )
        before = float(np.sum(particles.v * particles.l)) / count

        after = np.empty(s.branching_replications)
        for i in range(s.branching_replications):
            ensemble = Ensemble(particles=particles, q1=self.base.q1, q2=self.base.q2)
            uniforms = factory.stream(Purpose.BRANCH_UNIFORM, particle_id=2, step=i)
            permutation = factory.stream(Purpose.PERMUTATION, particle_id=2, step=i)
            branched, _ = branch_step(ensemble, uniforms, permutation)
            q = branched.particles
            after[i] = float(np.sum(q.v * q.l)) / count

        mean = float(after.mean())
        se = float(after.std(ddof=1) / math.sqrt(len(after)))
        return CheckResult(
            name="branching_unbiased",
            passed=abs(mean - before) <= s.n_sigma * se,
            statistic=mean,
            expected=before,
            tolerance=s.n_sigma * se,
            detail=f"replications={len(after)}",
        )

    def check_oracle_agreement(self) -> CheckResult:
        s = self.settings
        cfg = self._short().with_market(nu=s.weighted_nu)
        engine = net_liability(cfg)
        oracle = euler_simulate(
            EulerConfig(sim=cfg, h=s.oracle_h, scheme=self.scheme, n_paths=s.oracle_paths)
        ).net
        combined = math.hypot(engine.std_error, oracle.std_error)
        return CheckResult(
            name="oracle_agreement",
            passed=abs(engine.value - oracle.value) <= s.n_sigma_pair * combined,
            statistic=engine.value,
            expected=oracle.value,
            tolerance=s.n_sigma_pair * combined,
            detail=f"euler_h={s.oracle_h}, scheme={self.scheme.value}",
        )

    def run(self, names: Optional[List[str]] = None) -> ValidationReport:
        """Run the selected checks (all by default)."""
        names = names or list(self.checks)
        report = ValidationReport(is_valid=True)
        start_time = time.perf_counter()

        for name in names:
            if name not in self.checks:
                report.warnings.append(f"Unknown check '{name}' skipped")
                continue
            if name == "unit_weights" and not condition_c(self.base.market):
                report.warnings.append("Base market is weighted; unit_weights runs at the closest explicit nu")
            check = self.checks[name]()
            report.checks.append(check)
            if check.passed:
                validation_logger.info("Check passed", check=name, statistic=check.statistic)
            else:
                validation_logger.warning(
                    "Check failed",
                    check=name,
                    statistic=check.statistic,
                    expected=check.expected,
                    tolerance=check.tolerance,
                )
                report.errors.append(f"{name}: {check.statistic} vs {check.expected} (tol {check.tolerance})")

        report.is_valid = not report.failed
        validation_logger.performance(
            "validation",
            (time.perf_counter() - start_time) * 1000,
            checks=len(report.checks),
            failed=len(report.failed),
        )
        return report


def run_validation(base: SimConfig, names: Optional[List[str]] = None) -> ValidationReport:
    """Convenience function for running the property suite."""
    return PropertySuite(base).run(names)
