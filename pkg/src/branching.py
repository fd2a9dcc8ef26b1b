"""
Branching for the GMWB Monte Carlo engine.

Effective particle branching: particles whose likelihood weight sits in
an adaptive band around the mean weight are kept as they are; the others
are residually resampled with stratified, permuted uniforms and their
offspring restart at the mean weight. Parent links are kept per step so
that full lineages can be recovered.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from exceptions import EnsembleExtinctionError, ParameterError
from kernel import Particles
from rng import RandomStream

BAND_TOL = 1e-12


@dataclass
class Ancestry:
    """Per-step parent indices; parents[k-1][j] is the index at step k-1 of particle j at step k."""
    parents: List[np.ndarray] = field(default_factory=list)

    def record(self, parent_index: np.ndarray) -> None:
        self.parents.append(np.asarray(parent_index, dtype=np.int64))

    @property
    def steps(self) -> int:
        return len(self.parents)

    def matrix(self) -> np.ndarray:
        """N_K x K matrix; column k-1 holds each final particle's ancestor index at step k."""
        if not self.parents:
            return np.empty((0, 0), dtype=np.int64)
        n_final = len(self.parents[-1])
        out = np.empty((n_final, self.steps), dtype=np.int64)
        current = np.arange(n_final, dtype=np.int64)
        for k in range(self.steps, 0, -1):
            out[:, k - 1] = current
            current = self.parents[k - 1][current]
        return out

    def lineage(self, j: int) -> np.ndarray:
        """Ancestor indices of final particle j at steps 0..K."""
        path = [int(j)]
        for parent in reversed(self.parents):
            path.append(int(parent[path[-1]]))
        return np.array(path[::-1], dtype=np.int64)


@dataclass
class Ensemble:
    """Particle collection plus the step clock and branching controls."""
    particles: Particles
    step: int = 0
    q1: float = 1.0
    q2: float = 1.0
    next_id: int = 0
    ancestry: Optional[Ancestry] = None

    def __post_init__(self):
        if len(self.particles) < 1:
            raise ParameterError("Ensemble must hold at least one particle", field_name="N", value=0)
        if not (self.q1 > 0 and self.q2 > 0):
            raise ParameterError("q1 and q2 must be positive", field_name="q1,q2", value=(self.q1, self.q2))
        if self.next_id == 0:
            self.next_id = int(self.particles.ids.max()) + 1

    @property
    def size(self) -> int:
        return len(self.particles)

    @property
    def weights(self) -> np.ndarray:
        return self.particles.l


def branch_band(weights: np.ndarray, q1: float = 1.0, q2: float = 1.0) -> Tuple[float, float]:
    """Mean weight A and band ratio r >= 1."""
    weights = np.asarray(weights, dtype=np.float64)
    log_w = np.log(weights)
    spread = max(float(np.mean(log_w * log_w) - np.mean(log_w) ** 2), 0.0)
    return float(np.mean(weights)), float(np.exp(q1 * spread ** (q2 / 2.0)))


def offspring_counts(ratios: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    base = np.floor(ratios)
    return (base + (uniforms <= ratios - base)).astype(np.int64)


def stratified_uniforms(
    count: int,
    uniform_stream: RandomStream,
    permutation_stream: RandomStream
) -> np.ndarray:
    """One uniform per stratum [(m-1)/count, m/count], handed out in random order."""
    strata = (np.arange(count) + uniform_stream.uniforms(count)) / count
    return strata[permutation_stream.permutation(count)]


def branch_step(
    ensemble: Ensemble,
    uniform_stream: RandomStream,
    permutation_stream: Optional[RandomStream] = None
) -> Tuple[Ensemble, np.ndarray]:
    """
    One branching pass.

    Returns the new ensemble and, for each of its particles, the index of
    its parent in the input ensemble.
    """
    permutation_stream = permutation_stream or uniform_stream
    particles = ensemble.particles
    weights = particles.l
    A, r = branch_band(weights, ensemble.q1, ensemble.q2)

    in_band = (weights >= A / r * (1 - BAND_TOL)) & (weights <= A * r * (1 + BAND_TOL))
    kept = np.flatnonzero(in_band)
    out = np.flatnonzero(~in_band)

    if out.size == 0:
        parents = np.arange(len(particles), dtype=np.int64)
        result = Ensemble(
            particles=particles, step=ensemble.step, q1=ensemble.q1, q2=ensemble.q2,
            next_id=ensemble.next_id, ancestry=ensemble.ancestry,
        )
        if result.ancestry is not None:
            result.ancestry.record(parents)
        return result, parents

    uniforms = stratified_uniforms(out.size, uniform_stream, permutation_stream)
    counts = offspring_counts(weights[out] / A, uniforms)
    children = np.repeat(out, counts)

    n_children = children.size
    if kept.size + n_children == 0:
        raise EnsembleExtinctionError(ensemble.step)

    parents = np.concatenate((kept, children))
    new_particles = particles.take(parents)
    new_ids = np.arange(ensemble.next_id, ensemble.next_id + n_children, dtype=np.int64)
    ids = new_particles.ids.copy()
    ids[kept.size:] = new_ids
    l = new_particles.l.copy()
    l[kept.size:] = A
    new_particles = new_particles.replace(ids=ids, l=l)

    if ensemble.ancestry is not None:
        ensemble.ancestry.record(parents)

    return Ensemble(
        particles=new_particles,
        step=ensemble.step,
        q1=ensemble.q1,
        q2=ensemble.q2,
        next_id=ensemble.next_id + n_children,
        ancestry=ensemble.ancestry,
    ), parents
