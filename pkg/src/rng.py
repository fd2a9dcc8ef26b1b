"""
Random Streams for the GMWB Monte Carlo engine.

Keyed, reproducible numpy generators (one per purpose) and optional
pregenerated standard-normal pools that reproduce the streaming draws
bit for bit.
"""

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from exceptions import ParameterError, PoolExhaustedError, SimulationResourceError


class Purpose(IntEnum):
    """What a stream's draws are used for."""
    OU = 0
    STOCH_INTEGRAL = 1
    JUMP_COUNT = 2
    JUMP_SIZE = 3
    BRANCH_UNIFORM = 4
    PERMUTATION = 5


GAUSSIAN_PURPOSES = (Purpose.OU, Purpose.STOCH_INTEGRAL, Purpose.JUMP_SIZE)


@dataclass(frozen=True)
class StreamKey:
    """Identity of a random stream; equal keys give identical sequences."""
    master_seed: int
    purpose: Purpose
    particle_id: int = 0
    step: int = 0

    def __post_init__(self):
        for name in ("master_seed", "particle_id", "step"):
            value = getattr(self, name)
            if value < 0:
                raise ParameterError(f"{name} must be non-negative", field_name=name, value=value)

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            [int(self.master_seed), int(self.particle_id), int(self.purpose), int(self.step)]
        )


@dataclass
class NormalPool:
    """Contiguous block of standard-normal draws read front to back."""
    values: np.ndarray
    cursor: int = 0

    @property
    def remaining(self) -> int:
        return len(self.values) - self.cursor

    def normals(self, size: int) -> np.ndarray:
        if size > self.remaining:
            raise PoolExhaustedError(requested=size, remaining=self.remaining)
        out = self.values[self.cursor:self.cursor + size]
        self.cursor += size
        return out


class RandomStream:
    """Single-owner stream built from a StreamKey."""

    def __init__(self, key: StreamKey):
        self.key = key
        self.generator = np.random.Generator(np.random.PCG64(key.seed_sequence()))
        self.pool: Optional[NormalPool] = None

    def attach_pool(self, pool: NormalPool) -> None:
        self.pool = pool

    def normals(self, size) -> np.ndarray:
        if self.pool is not None:
            count = int(np.prod(size))
            return self.pool.normals(count).reshape(size)
        return self.generator.standard_normal(size)

    def uniforms(self, size=None, lo: float = 0.0, hi: float = 1.0):
        return self.generator.uniform(lo, hi, size)

    def poisson(self, mean, size=None):
        return self.generator.poisson(mean, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)


def draw_normal(stream: RandomStream) -> float:
    return float(stream.normals(1)[0])


def draw_uniform(stream: RandomStream, lo: float = 0.0, hi: float = 1.0) -> float:
    return float(stream.uniforms(lo=lo, hi=hi))


def draw_poisson(stream: RandomStream, mean: float) -> int:
    if mean < 0:
        raise ParameterError("Poisson mean must be non-negative", field_name="mean", value=mean)
    return int(stream.poisson(mean))


def random_permutation(stream: RandomStream, n: int) -> np.ndarray:
    if n < 1:
        raise ParameterError("Permutation length must be at least 1", field_name="n", value=n)
    return stream.permutation(n)


def pregenerate_pool(stream: RandomStream, count: int) -> NormalPool:
    """
    Draw `count` standard normals from the stream's generator up front.

    A stream whose generator fed a pool and then reads through the pool
    yields exactly the sequence it would have produced on demand.
    """
    if count <= 0:
        raise ParameterError("Pool size must be positive", field_name="count", value=count)
    try:
        values = stream.generator.standard_normal(int(count))
    except MemoryError as e:
        raise SimulationResourceError(
            f"Cannot allocate a normal pool of {count} draws",
            original_error=str(e)
        )
    return NormalPool(values=values)


class StreamFactory:
    """Creates keyed streams for one run. Stateless, so safe to share."""

    def __init__(self, master_seed: int):
        if master_seed < 0:
            raise ParameterError("Seed must be non-negative", field_name="seed", value=master_seed)
        self.master_seed = int(master_seed)

    def key(self, purpose: Purpose, particle_id: int = 0, step: int = 0) -> StreamKey:
        return StreamKey(self.master_seed, Purpose(purpose), particle_id, step)

    def stream(
        self,
        purpose: Purpose,
        particle_id: int = 0,
        step: int = 0,
        pool_size: Optional[int] = None
    ) -> RandomStream:
        stream = RandomStream(self.key(purpose, particle_id, step))
        if pool_size is not None:
            stream.attach_pool(pregenerate_pool(stream, pool_size))
        return stream
