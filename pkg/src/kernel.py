"""
Kernel for the GMWB Monte Carlo engine.

One-step propagation of the explicit weak solution on a structure of
arrays: exact OU transitions for the variance components, the
conditionally Gaussian update of H, the likelihood weight L with its
low-variance stopping time, the jump overlay producing G and the account
and cash-flow recursions.

All step functions are pure: particles in, new particles out.
"""

from dataclasses import dataclass, field, fields, replace
from enum import Enum
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from config import config
from exceptions import ParameterError
from model_params import (
    DerivedConstants,
    FeeStructure,
    SdeCoefficients,
    StepConstants,
    step_constants,
)
from rng import Purpose, RandomStream, StreamFactory


@dataclass(frozen=True)
class Particle:
    """State of a single simulated path."""
    y: Tuple[float, ...]
    v: float
    h_val: float
    l: float
    eta_hit: bool
    eta_time: float
    g: float
    r_acc: float
    f: float
    absorbed: bool
    tau0: float
    c_acc: float
    w_acc: float
    q_acc: float
    id: int
    root: int


@dataclass
class Particles:
    """Ensemble state, one row per particle."""
    y: np.ndarray
    v: np.ndarray
    h_val: np.ndarray
    l: np.ndarray
    eta_hit: np.ndarray
    eta_time: np.ndarray
    g: np.ndarray
    r_acc: np.ndarray
    f: np.ndarray
    absorbed: np.ndarray
    tau0: np.ndarray
    c_acc: np.ndarray
    w_acc: np.ndarray
    q_acc: np.ndarray
    ids: np.ndarray
    roots: np.ndarray

    def __len__(self) -> int:
        return len(self.v)

    def _arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def take(self, index) -> "Particles":
        return Particles(**{name: arr[index] for name, arr in self._arrays().items()})

    def slice(self, lo: int, hi: int) -> "Particles":
        return self.take(slice(lo, hi))

    def replace(self, **changes) -> "Particles":
        return replace(self, **changes)

    @staticmethod
    def concat(parts: Sequence["Particles"]) -> "Particles":
        if len(parts) == 1:
            return parts[0]
        names = [f.name for f in fields(Particles)]
        return Particles(**{
            name: np.concatenate([getattr(p, name) for p in parts]) for name in names
        })

    def particle(self, i: int) -> Particle:
        return Particle(
            y=tuple(float(x) for x in self.y[i]),
            v=float(self.v[i]),
            h_val=float(self.h_val[i]),
            l=float(self.l[i]),
            eta_hit=bool(self.eta_hit[i]),
            eta_time=float(self.eta_time[i]),
            g=float(self.g[i]),
            r_acc=float(self.r_acc[i]),
            f=float(self.f[i]),
            absorbed=bool(self.absorbed[i]),
            tau0=float(self.tau0[i]),
            c_acc=float(self.c_acc[i]),
            w_acc=float(self.w_acc[i]),
            q_acc=float(self.q_acc[i]),
            id=int(self.ids[i]),
            root=int(self.roots[i]),
        )

    @classmethod
    def from_particles(cls, items: Iterable[Particle]) -> "Particles":
        items = list(items)
        return cls(
            y=np.array([p.y for p in items], dtype=np.float64),
            v=np.array([p.v for p in items]),
            h_val=np.array([p.h_val for p in items]),
            l=np.array([p.l for p in items]),
            eta_hit=np.array([p.eta_hit for p in items], dtype=bool),
            eta_time=np.array([p.eta_time for p in items]),
            g=np.array([p.g for p in items]),
            r_acc=np.array([p.r_acc for p in items]),
            f=np.array([p.f for p in items]),
            absorbed=np.array([p.absorbed for p in items], dtype=bool),
            tau0=np.array([p.tau0 for p in items]),
            c_acc=np.array([p.c_acc for p in items]),
            w_acc=np.array([p.w_acc for p in items]),
            q_acc=np.array([p.q_acc for p in items]),
            ids=np.array([p.id for p in items], dtype=np.int64),
            roots=np.array([p.root for p in items], dtype=np.int64),
        )


def init_particle(v0: float, n: int, id: int, f0: float = config.base_case.f0) -> Particle:
    """Equal split of V0 over n OU components."""
    if not v0 > 0:
        raise ParameterError("v0 must be positive", field_name="v0", value=v0)
    if n < 1:
        raise ParameterError("n must be at least 1", field_name="n", value=n)
    y0 = float(np.sqrt(v0 / n))
    return Particle(
        y=(y0,) * n, v=float(v0), h_val=1.0, l=1.0, eta_hit=False, eta_time=np.nan,
        g=1.0, r_acc=0.0, f=float(f0), absorbed=False, tau0=np.nan,
        c_acc=0.0, w_acc=0.0, q_acc=0.0, id=int(id), root=int(id),
    )


def init_particles(v0: float, n: int, count: int, f0: float, first_id: int = 0) -> Particles:
    if count < 1:
        raise ParameterError("Particle count must be at least 1", field_name="count", value=count)
    if not v0 > 0:
        raise ParameterError("v0 must be positive", field_name="v0", value=v0)
    ids = np.arange(first_id, first_id + count, dtype=np.int64)
    zeros = np.zeros(count)
    return Particles(
        y=np.full((count, n), np.sqrt(v0 / n)),
        v=np.full(count, float(v0)),
        h_val=np.ones(count),
        l=np.ones(count),
        eta_hit=np.zeros(count, dtype=bool),
        eta_time=np.full(count, np.nan),
        g=np.ones(count),
        r_acc=zeros.copy(),
        f=np.full(count, float(f0)),
        absorbed=np.zeros(count, dtype=bool),
        tau0=np.full(count, np.nan),
        c_acc=zeros.copy(),
        w_acc=zeros.copy(),
        q_acc=zeros.copy(),
        ids=ids,
        roots=ids.copy(),
    )


class WeightScheme(Enum):
    """How L is accumulated when ν is off the explicit set."""
    TRANSITION = "transition"  # ratio of exact transition densities, E[L] = 1 on any grid
    PATHWISE = "pathwise"      # discretised exponential of the continuous-time weight


@dataclass(frozen=True)
class KernelConfig:
    """Everything one step needs besides the particles and the noise."""
    sde: SdeCoefficients
    derived: DerivedConstants
    fee: FeeStructure
    step: StepConstants
    epsilon: float = config.simulation.epsilon
    sub_steps: int = 1
    weights: WeightScheme = WeightScheme(config.simulation.weight_scheme)
    sub: StepConstants = field(init=False)

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ParameterError("epsilon must lie in (0, 1)", field_name="epsilon", value=self.epsilon)
        if not self.epsilon < self.sde.v0:
            raise ParameterError("epsilon must be below v0", field_name="epsilon", value=self.epsilon)
        if int(self.sub_steps) != self.sub_steps or self.sub_steps < 1:
            raise ParameterError("sub_steps must be an integer >= 1", field_name="sub_steps", value=self.sub_steps)
        sub = self.step if self.sub_steps == 1 else step_constants(
            self.sde.rho_rev, self.sde.kappa, self.step.h / self.sub_steps
        )
        object.__setattr__(self, "sub", sub)

    @property
    def h(self) -> float:
        return self.step.h

    def with_step(self, h: float) -> "KernelConfig":
        return replace(self, step=step_constants(self.sde.rho_rev, self.sde.kappa, h))


@dataclass(frozen=True)
class StepStreams:
    """The four Gaussian/Poisson streams the kernel consumes."""
    ou: RandomStream
    integral: RandomStream
    jump_count: RandomStream
    jump_size: RandomStream

    @classmethod
    def from_factory(
        cls,
        factory: StreamFactory,
        pool_sizes: Optional[dict] = None,
        particle_id: int = 0
    ) -> "StepStreams":
        pool_sizes = pool_sizes or {}
        return cls(
            ou=factory.stream(Purpose.OU, particle_id, pool_size=pool_sizes.get(Purpose.OU)),
            integral=factory.stream(
                Purpose.STOCH_INTEGRAL, particle_id, pool_size=pool_sizes.get(Purpose.STOCH_INTEGRAL)
            ),
            jump_count=factory.stream(Purpose.JUMP_COUNT, particle_id),
            jump_size=factory.stream(
                Purpose.JUMP_SIZE, particle_id, pool_size=pool_sizes.get(Purpose.JUMP_SIZE)
            ),
        )


@dataclass(frozen=True)
class StateNoise:
    """Draws for the variance and H update of one step."""
    z_ou: np.ndarray   # (sub_steps, N, n)
    z_int: np.ndarray  # (N,)

    def rows(self, lo: int, hi: int) -> "StateNoise":
        return StateNoise(self.z_ou[:, lo:hi, :], self.z_int[lo:hi])


@dataclass(frozen=True)
class JumpNoise:
    """Poisson counts per particle and the flat vector of jump-size normals."""
    counts: np.ndarray
    z_jump: np.ndarray

    def rows(self, lo: int, hi: int) -> "JumpNoise":
        offsets = np.concatenate(([0], np.cumsum(self.counts)))
        return JumpNoise(self.counts[lo:hi], self.z_jump[offsets[lo]:offsets[hi]])


def draw_state_noise(count: int, cfg: KernelConfig, streams: StepStreams) -> StateNoise:
    z_ou = streams.ou.normals((cfg.sub_steps, count, cfg.sde.n))
    z_int = streams.integral.normals(count)
    return StateNoise(z_ou, z_int)


def draw_jump_noise(count: int, lam: float, h: float, streams: StepStreams) -> JumpNoise:
    if lam == 0:
        return JumpNoise(np.zeros(count, dtype=np.int64), np.empty(0))
    counts = streams.jump_count.poisson(lam * h, count).astype(np.int64)
    total = int(counts.sum())
    z_jump = streams.jump_size.normals(total) if total else np.empty(0)
    return JumpNoise(counts, z_jump)


def _squared_norm(y: np.ndarray) -> np.ndarray:
    return np.sum(y * y, axis=1)


def transition_log_ratio(
    v_prev: np.ndarray,
    v_new: np.ndarray,
    sde: SdeCoefficients,
    step: StepConstants
) -> np.ndarray:
    """
    Log ratio of the CIR transition density at ν to the one at ν_κ = nκ²/4.

    Both laws are V_prev → c·χ'²(df, λ) with c = σ_h² and λ = ψ_h² V_prev / c;
    they differ only in the degrees of freedom 4ν/κ² against n.
    """
    scale = step.sigma ** 2
    lam = step.psi ** 2 * v_prev / scale
    x = v_new / scale
    df = 4.0 * sde.nu / (sde.kappa * sde.kappa)
    z = np.sqrt(lam * x)
    return (
        0.25 * (df - sde.n) * np.log(x / lam)
        + np.log(special.ive(0.5 * df - 1.0, z))
        - np.log(special.ive(0.5 * sde.n - 1.0, z))
    )


def pathwise_log_ratio(
    v_prev: np.ndarray,
    v_new: np.ndarray,
    sde: SdeCoefficients,
    step: StepConstants
) -> np.ndarray:
    """e(ln V_new/V_prev + ϱh) + f∫1/V with the integral by trapezoid."""
    int_inv = 0.5 * step.h * (1.0 / v_prev + 1.0 / v_new)
    return sde.e * (np.log(v_new / v_prev) + sde.rho_rev * step.h) + sde.f * int_inv


def _accumulate_weight(
    particles: Particles,
    v_path: List[np.ndarray],
    cfg: KernelConfig,
    t_prev: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Multiply L by one ratio per sub-step and stop it at the first sub-grid
    time where V <= epsilon. A sub-step only sees V up to its own end point.
    """
    log_ratio = transition_log_ratio if cfg.weights is WeightScheme.TRANSITION else pathwise_log_ratio
    l = particles.l.copy()
    eta_time = particles.eta_time.copy()
    active = ~particles.eta_hit
    for j in range(1, len(v_path)):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v_a, v_b = v_path[j - 1][idx], v_path[j][idx]
        l[idx] *= np.exp(log_ratio(v_a, v_b, cfg.sde, cfg.sub))
        hit = idx[v_b <= cfg.epsilon]
        eta_time[hit] = t_prev + j * cfg.sub.h
        active[hit] = False
    return l, ~active, eta_time


def weighted_update(
    particles: Particles,
    cfg: KernelConfig,
    noise: StateNoise,
    t_prev: float
) -> Particles:
    """Advance Y, V, H and L by one step given the step's normals."""
    sde = cfg.sde
    sub = cfg.sub
    h = cfg.h
    hs = h / cfg.sub_steps

    y = particles.y
    v_path = [particles.v]
    for j in range(cfg.sub_steps):
        y = sub.psi * y + sub.sigma * noise.z_ou[j]
        v_path.append(_squared_norm(y))
    v_prev = particles.v
    v_new = v_path[-1]
    path = np.stack(v_path)

    int_v = hs * (0.5 * (path[0] + path[-1]) + path[1:-1].sum(axis=0))
    h_new = particles.h_val * np.exp(
        sde.a * np.sqrt(int_v) * noise.z_int
        + sde.b * h
        + sde.c * int_v
        + sde.d * (v_new - v_prev)
    )

    l_new = particles.l
    eta_hit = particles.eta_hit
    eta_time = particles.eta_time
    if sde.weighted:
        l_new, eta_hit, eta_time = _accumulate_weight(particles, v_path, cfg, t_prev)

    return particles.replace(
        y=y, v=v_new, h_val=h_new, l=l_new, eta_hit=eta_hit, eta_time=eta_time
    )


def weighted_step(
    particles: Particles,
    cfg: KernelConfig,
    streams: StepStreams,
    t_prev: float = 0.0
) -> Particles:
    return weighted_update(particles, cfg, draw_state_noise(len(particles), cfg, streams), t_prev)


def apply_jumps(
    g_prev: np.ndarray,
    h_prev: np.ndarray,
    h_new: np.ndarray,
    noise: JumpNoise,
    delta: float,
    chi: float
) -> np.ndarray:
    """G grows like H times the product of the step's lognormal jump factors."""
    g_new = g_prev * (h_new / h_prev)
    if noise.z_jump.size == 0:
        return g_new
    sizes = (np.log1p(delta) - 0.5 * chi * chi) + chi * noise.z_jump
    owner = np.repeat(np.arange(len(g_prev)), noise.counts)
    log_factor = np.bincount(owner, weights=sizes, minlength=len(g_prev))
    return g_new * np.exp(log_factor)


def jump_overlay(
    g_prev: np.ndarray,
    h_prev: np.ndarray,
    h_new: np.ndarray,
    lam: float,
    delta: float,
    chi: float,
    h: float,
    streams: StepStreams
) -> np.ndarray:
    noise = draw_jump_noise(len(g_prev), lam, h, streams)
    return apply_jumps(g_prev, h_prev, h_new, noise, delta, chi)


def account_step(
    particles: Particles,
    g_prev: np.ndarray,
    w_prev: float,
    w_new: float,
    f0: float,
    h: float,
    t_new: float
) -> Particles:
    """
    Withdrawal accumulator and account value F = G·max(f0 − R, 0).

    `particles` carries the new G; absorption flags and R are still those
    at the start of the step. The absorption time is placed where f0 − R
    crosses zero by linear interpolation inside the step.
    """
    live = ~particles.absorbed
    r_acc = np.where(
        live,
        particles.r_acc + 0.5 * h * (w_prev / g_prev + w_new / particles.g),
        particles.r_acc
    )
    remaining_prev = f0 - particles.r_acc
    remaining = f0 - r_acc
    newly = live & (remaining <= 0)
    drop = remaining_prev - remaining
    theta = np.divide(remaining_prev, drop, out=np.ones_like(drop), where=newly & (drop > 0))
    theta = np.clip(theta, 0.0, 1.0)
    f = np.where(live & ~newly, particles.g * np.maximum(remaining, 0.0), 0.0)
    return particles.replace(
        r_acc=r_acc,
        f=f,
        absorbed=particles.absorbed | newly,
        tau0=np.where(newly, t_new - (1.0 - theta) * h, particles.tau0),
    )


def cashflow_step(
    prev: Particles,
    new: Particles,
    derived: DerivedConstants,
    fee: FeeStructure,
    r: float,
    w_prev: float,
    w_new: float,
    t_prev: float,
    t_new: float
) -> Particles:
    """
    Trapezoid accrual of discounted rider fees, management fees and payouts.

    On a step where the account is absorbed, fees accrue on [t_prev, τ0]
    with F falling to zero at τ0 and payouts start at τ0.
    """
    h = t_new - t_prev
    disc_prev = np.exp(-r * t_prev)
    disc_new = np.exp(-r * t_new)
    live = ~prev.absorbed
    newly = live & new.absorbed
    theta = np.where(newly, (new.tau0 - t_prev) / h, 1.0)

    rider_prev = (derived.alpha0 - fee.q) + derived.alpha * prev.v
    rider_new = (derived.alpha0 - fee.q) + derived.alpha * new.v
    fee_inc = 0.5 * theta * h * (disc_prev * rider_prev * prev.f + disc_new * rider_new * new.f)
    mgmt_inc = 0.5 * theta * h * fee.q * (disc_prev * prev.f + disc_new * new.f)
    pay_inc = 0.5 * h * (disc_prev * w_prev + disc_new * w_new)

    t_abs = t_prev + theta * h
    w_abs = w_prev + theta * (w_new - w_prev)
    pay_tail = 0.5 * (1.0 - theta) * h * (np.exp(-r * t_abs) * w_abs + disc_new * w_new)

    return new.replace(
        c_acc=prev.c_acc + np.where(live, fee_inc, 0.0),
        q_acc=prev.q_acc + np.where(live, mgmt_inc, 0.0),
        w_acc=prev.w_acc + np.where(live, np.where(newly, pay_tail, 0.0), pay_inc),
    )


def settle_step(
    prev: Particles,
    moved: Particles,
    noise: JumpNoise,
    cfg: KernelConfig,
    f0: float,
    t_prev: float,
    t_new: float,
    w_prev: float,
    w_new: float
) -> Particles:
    """Jumps, account recursion and cash flows after V and H have moved."""
    g_new = apply_jumps(prev.g, prev.h_val, moved.h_val, noise, cfg.sde.delta, cfg.sde.chi)
    moved = account_step(moved.replace(g=g_new), prev.g, w_prev, w_new, f0, cfg.h, t_new)
    return cashflow_step(
        prev, moved, cfg.derived, cfg.fee, cfg.sde.r, w_prev, w_new, t_prev, t_new
    )


def advance(
    particles: Particles,
    state_noise: StateNoise,
    jump_noise: JumpNoise,
    cfg: KernelConfig,
    f0: float,
    t_prev: float,
    t_new: float,
    w_prev: float,
    w_new: float
) -> Particles:
    """Full step for a block of particles; safe to run on disjoint chunks in parallel."""
    moved = weighted_update(particles, cfg, state_noise, t_prev)
    return settle_step(particles, moved, jump_noise, cfg, f0, t_prev, t_new, w_prev, w_new)


def chunk_bounds(count: int, chunk_size: int) -> List[Tuple[int, int]]:
    chunk_size = max(int(chunk_size), 1)
    return [(lo, min(lo + chunk_size, count)) for lo in range(0, count, chunk_size)]
