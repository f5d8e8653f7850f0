"""Sampling from Born densities and pre-training measures.

Finite spaces are sampled exactly (inverse CDF), which is the setting the
convergence results assume.  Boxes use a random-walk Metropolis walker
ensemble; one batch is one snapshot of the ensemble.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .model import BoxSpace, FiniteWeights, Lebesgue, TargetInduced
from .parallel import map_chunks

DEFAULT_BURN_IN = 500
DEFAULT_THINNING = 10


class SamplerError(ValueError):
    pass


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator for the named stream ``(seed, *stream)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class BornDensity:
    """Explicit ``p(x) = psi(x)^2 / sum_y psi(y)^2`` on a finite space."""

    weights: np.ndarray

    @classmethod
    def from_values(cls, psi) -> "BornDensity":
        psi = np.asarray(psi, dtype=float)
        q = psi * psi
        total = q.sum()
        if not total > 0:
            raise SamplerError("psi vanishes everywhere; Born density undefined")
        return cls(q / total)

    @classmethod
    def from_ansatz(cls, ansatz, theta) -> "BornDensity":
        return cls.from_values(ansatz.value(theta, ansatz.space.points))


@dataclass
class SampleBatch:
    points: np.ndarray
    psi: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    local_energy: Optional[np.ndarray] = None
    stream_id: tuple = ()

    @property
    def n(self) -> int:
        return len(self.points)


def _categorical(weights, n: int, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf = cdf / cdf[-1]
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return np.minimum(idx, len(weights) - 1)


def sample_exact_finite(density, n: int, rng: np.random.Generator) -> SampleBatch:
    """``n`` i.i.d. draws from an explicit finite density."""
    if isinstance(density, BornDensity):
        w = density.weights
    else:
        w = BornDensity.from_values(density).weights
    return SampleBatch(_categorical(w, n, rng))


@dataclass(frozen=True)
class WalkerChain:
    positions: np.ndarray
    step_size: float
    accepted: int = 0
    proposed: int = 0
    values: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.step_size > 0:
            raise SamplerError("step size must be positive")

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]


def _evaluate(value_fn, x):
    return map_chunks(lambda s: value_fn(x[s]), x.shape[0])


def metropolis_step(chain: WalkerChain, value_fn: Callable, box: BoxSpace,
                    rng: np.random.Generator) -> WalkerChain:
    """One random-walk Metropolis update of every walker targeting ``|f|^2``.

    ``value_fn`` maps ``(n, D)`` points to ``f`` values.  Proposals outside
    the box are rejected.
    """
    x = chain.positions
    cur = chain.values if chain.values is not None else _evaluate(value_fn, x)
    if np.any(cur == 0):
        raise SamplerError("a walker sits where the wave function vanishes")
    prop = x + chain.step_size * rng.standard_normal(x.shape)
    u = rng.random(x.shape[0])
    inside = box.contains(prop)
    new = np.zeros_like(cur)
    if np.any(inside):
        new[inside] = _evaluate(value_fn, prop[inside])
    ratio = (new / cur) ** 2
    accept = inside & (u < ratio)
    positions = np.where(accept[:, None], prop, x)
    values = np.where(accept, new, cur)
    return replace(chain, positions=positions, values=values,
                   accepted=chain.accepted + int(accept.sum()),
                   proposed=chain.proposed + x.shape[0])


def sample_mcmc(chain: WalkerChain, value_fn, box, rng, burn_in: int = DEFAULT_BURN_IN,
                thinning: int = DEFAULT_THINNING):
    """Advance ``burn_in + thinning`` steps and emit the walker ensemble.

    Returns ``(batch, chain)``; the batch has one point per walker.
    """
    if burn_in < 0 or thinning < 1:
        raise SamplerError("need burn_in >= 0 and thinning >= 1")
    chain = replace(chain, values=None)
    for _ in range(burn_in + thinning):
        chain = metropolis_step(chain, value_fn, box, rng)
    return SampleBatch(chain.positions.copy(), psi=chain.values.copy()), chain


def tune_step_size(chain: WalkerChain, value_fn, box, rng, target: float = 0.5,
                   rounds: int = 12, steps_per_round: int = 10) -> WalkerChain:
    """Doubling/halving bracket then log-bisection towards ``target`` acceptance."""
    lo, hi = 0.0, math.inf
    step = chain.step_size
    for _ in range(rounds):
        trial = replace(chain, step_size=step, accepted=0, proposed=0, values=None)
        for _ in range(steps_per_round):
            trial = metropolis_step(trial, value_fn, box, rng)
        chain = replace(trial, accepted=0, proposed=0)
        if trial.acceptance_rate > target:
            lo = step
            step = step * 2 if hi == math.inf else math.sqrt(step * hi)
        else:
            hi = step
            step = step / 2 if lo == 0.0 else math.sqrt(lo * step)
    return replace(chain, step_size=step, accepted=0, proposed=0, values=None)


def initial_walkers(box: BoxSpace, n: int, rng, value_fn=None, spread: float = 1.0) -> np.ndarray:
    """Gaussian cloud around the box centre, clipped to the box, avoiding zeros of ``value_fn``."""
    lo, hi = np.array(box.lower), np.array(box.upper)
    centre = (lo + hi) / 2
    x = np.clip(centre + spread * rng.standard_normal((n, box.dim)), lo, hi)
    if value_fn is not None:
        for _ in range(100):
            bad = value_fn(x) == 0
            if not np.any(bad):
                break
            x[bad] = np.clip(centre + spread * rng.standard_normal((int(bad.sum()), box.dim)), lo, hi)
        else:
            raise SamplerError("could not place walkers where the target is nonzero")
    return x


class MetropolisSampler:
    """Persistent walker ensemble for a training loop.

    The first :meth:`draw` runs ``burn_in`` steps; later draws advance
    ``thinning`` steps.  ``value_fn`` may change between draws (the
    parameters move), so walker values are recomputed on every draw.
    """

    def __init__(self, box: BoxSpace, n_walkers: int, rng, step_size: Optional[float] = None,
                 burn_in: int = DEFAULT_BURN_IN, thinning: int = DEFAULT_THINNING,
                 init_spread: float = 1.0):
        self.box = box
        self.rng = rng
        self.burn_in = burn_in
        self.thinning = thinning
        self._auto_step = step_size is None
        self.chain = WalkerChain(initial_walkers(box, n_walkers, rng, spread=init_spread),
                                 1.0 if step_size is None else float(step_size))
        self._started = False

    def draw(self, value_fn) -> SampleBatch:
        if not self._started:
            if self._auto_step:
                self.chain = tune_step_size(self.chain, value_fn, self.box, self.rng)
            batch, self.chain = sample_mcmc(self.chain, value_fn, self.box, self.rng,
                                            self.burn_in, self.thinning)
            self._started = True
            return batch
        batch, self.chain = sample_mcmc(self.chain, value_fn, self.box, self.rng, 0, self.thinning)
        return batch

    @property
    def acceptance_rate(self) -> float:
        return self.chain.acceptance_rate


def autocorrelation(series, lag: int) -> float:
    """Lag-``lag`` sample autocorrelation (Pearson correlation of the series with its shift)."""
    x = np.asarray(series, dtype=float)
    if not 0 < lag < x.size - 1:
        raise SamplerError("lag must satisfy 0 < lag < len(series) - 1")
    a, b = x[:-lag], x[lag:]
    da, db = a - a.mean(), b - b.mean()
    denom = math.sqrt(float(np.dot(da, da)) * float(np.dot(db, db)))
    if denom == 0:
        raise SamplerError("autocorrelation undefined for a zero-variance series")
    return float(np.dot(da, db) / denom)


class RhoSampler:
    """Repeated draws of ``n`` points from a pre-training measure."""

    def __init__(self, measure, n: int, rng, burn_in: int = DEFAULT_BURN_IN,
                 thinning: int = DEFAULT_THINNING):
        self.measure = measure
        self.n = n
        self.rng = rng
        self._mcmc = None
        if isinstance(measure, TargetInduced):
            phi = measure.phi
            x0 = initial_walkers(measure.box, n, rng, phi)
            self._mcmc = MetropolisSampler(measure.box, n, rng, None, burn_in, thinning)
            self._mcmc.chain = replace(self._mcmc.chain, positions=x0)
        elif not isinstance(measure, (FiniteWeights, Lebesgue)):
            raise SamplerError(f"unknown measure {type(measure).__name__}")

    @property
    def acceptance_rate(self) -> Optional[float]:
        """Metropolis acceptance rate for target-induced measures, else ``None``."""
        return None if self._mcmc is None else self._mcmc.acceptance_rate

    def draw(self, n: Optional[int] = None) -> SampleBatch:
        n = self.n if n is None else n
        m = self.measure
        if isinstance(m, FiniteWeights):
            return SampleBatch(_categorical(m.weights, n, self.rng))
        if isinstance(m, Lebesgue):
            lo, hi = np.array(m.box.lower), np.array(m.box.upper)
            return SampleBatch(lo + (hi - lo) * self.rng.random((n, m.box.dim)))
        if n != self.n:
            raise SamplerError("target-induced sampler has a fixed walker count")
        return self._mcmc.draw(m.phi)


def sample_rho(measure, n: int, rng, burn_in: int = DEFAULT_BURN_IN,
               thinning: int = DEFAULT_THINNING) -> SampleBatch:
    """One-shot ``n`` draws from ``measure``."""
    if isinstance(measure, TargetInduced):
        probe = measure.phi(initial_walkers(measure.box, 64, make_rng(0)))
        if not np.any(probe != 0):
            raise SamplerError("target vanishes; induced measure undefined")
    return RhoSampler(measure, n, rng, burn_in, thinning).draw()
