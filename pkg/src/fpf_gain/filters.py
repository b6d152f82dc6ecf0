"""Time-stepping simulators: truth, FPF, linear FPF (EnKF) and SIR.

All simulators work on the model

    dX = a(X) dt + sigma_b dB,      dZ = h(X) dt + sigma_w dW

discretized with Euler-Maruyama. Inside the filters the observation is
rescaled to unit noise (``h / sigma_w``, ``dZ / sigma_w``).

Random numbers come from counter-based sub-streams of the scenario seed:
one stream for the truth, one per particle for the prior draw, one per
particle per filter for process noise and one per filter for resampling.
Adding particles therefore never perturbs the streams of existing ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .diffusion_map import Ensemble
from .errors import (
    DegenerateWeightsError,
    FpfGainError,
    GainSolverError,
    InvalidInputError,
    InvalidParameterError,
)

STREAM_TRUTH = 0
STREAM_PRIOR = 1
STREAM_PARTICLE = 2
STREAM_RESAMPLE = 3

FILTER_IDS = {"fpf-dm": 0, "fpf-const": 1, "sir": 2, "enkf": 3}


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, key)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=tuple(key))))


def zero_drift(x):
    return np.zeros_like(x)


@dataclass(frozen=True)
class ScenarioConfig:
    """A filtering problem on a uniform time grid.

    Attributes:
        drift: vectorized ``a``, (N, d) -> (N, d).
        h: vectorized observation function, (N, d) -> (N,).
        sigma_w: observation noise standard deviation.
        dt: time step.
        steps: number of steps.
        seed: master seed.
        prior_sampler: ``(rng, n) -> (n, d)`` draw from the prior.
        d: state dimension.
        sigma_b: process noise standard deviation; 0 switches it off.
        prior_density: optional analytic prior for oracle computations.
    """

    drift: Callable
    h: Callable
    sigma_w: float
    dt: float
    steps: int
    seed: int
    prior_sampler: Callable
    d: int = 1
    sigma_b: float = 1.0
    prior_density: object = None

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidParameterError(f"dt must be positive, got {self.dt!r}")
        if not self.sigma_w > 0:
            raise InvalidParameterError(f"sigma_w must be positive, got {self.sigma_w!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidParameterError(f"steps must be a positive integer, got {self.steps!r}")
        if self.sigma_b < 0:
            raise InvalidParameterError(f"sigma_b must be non-negative, got {self.sigma_b!r}")

    @property
    def process_noise_on(self) -> bool:
        return self.sigma_b > 0

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps)

    def h_values(self, x) -> np.ndarray:
        return np.asarray(self.h(np.asarray(x)), dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class ObservationPath:
    """Observation increments ``dZ_k`` over ``[t_k, t_k + dt]``."""

    times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        if np.shape(self.times) != np.shape(self.increments):
            raise InvalidInputError("times and increments must have equal length")

    def __len__(self):
        return len(self.increments)

    @property
    def Z(self) -> np.ndarray:
        """Cumulative observation ``Z_{t_k}`` for k = 0..steps."""
        return np.concatenate([[0.0], np.cumsum(self.increments)])


@dataclass(frozen=True, eq=False)
class TruthPath:
    states: np.ndarray
    observations: ObservationPath


def simulate_truth(config: ScenarioConfig, zero_noise: bool = False) -> TruthPath:
    """Euler-Maruyama hidden state and observation increments.

    ``zero_noise`` replaces every Brownian increment by zero (test hook);
    the initial state is still drawn from the prior.
    """
    rng = substream(config.seed, STREAM_TRUTH)
    x = np.asarray(config.prior_sampler(rng, 1), dtype=float).reshape(config.d)
    sq = math.sqrt(config.dt)
    dB = config.sigma_b * sq * rng.standard_normal((config.steps, config.d))
    dW = config.sigma_w * sq * rng.standard_normal(config.steps)
    if zero_noise:
        dB[:] = 0.0
        dW[:] = 0.0
    states = np.empty((config.steps + 1, config.d))
    dZ = np.empty(config.steps)
    states[0] = x
    for k in range(config.steps):
        xk = states[k][None, :]
        dZ[k] = config.h_values(xk)[0] * config.dt + dW[k]
        states[k + 1] = states[k] + np.asarray(config.drift(xk)).reshape(config.d) * config.dt + dB[k]
    return TruthPath(states, ObservationPath(config.times, dZ))


def initial_particles(config: ScenarioConfig, n: int) -> np.ndarray:
    """Prior draws, one sub-stream per particle, shared by all filters."""
    return np.vstack([
        np.asarray(config.prior_sampler(substream(config.seed, STREAM_PRIOR, i), 1), dtype=float).reshape(1, config.d)
        for i in range(n)
    ])


def particle_noise(config: ScenarioConfig, filter_name: str, n: int) -> np.ndarray:
    """Standard normal process-noise draws, shape (steps, n, d)."""
    fid = FILTER_IDS[filter_name]
    draws = [substream(config.seed, STREAM_PARTICLE, fid, i).standard_normal((config.steps, config.d)) for i in range(n)]
    return np.stack(draws, axis=1)


def _propagate(x, config, noise):
    out = x + np.asarray(config.drift(x), dtype=float) * config.dt
    if noise is not None and config.sigma_b > 0:
        out = out + config.sigma_b * math.sqrt(config.dt) * noise
    return out


def fpf_step(ensemble, dZ: float, config: ScenarioConfig, gain_method, noise=None) -> Ensemble:
    """One explicit Euler step of the feedback particle filter.

    ``X^i += a(X^i) dt + sigma_b dB^i + K^i (dZ~ - (h~(X^i) + mean h~) dt / 2)``
    with gains from ``gain_method(ensemble, h~ values)`` on the pre-update
    ensemble. ``noise`` holds (N, d) standard normals; ``None`` means none.
    """
    ens = ensemble if isinstance(ensemble, Ensemble) else Ensemble(ensemble)
    x = ens.positions
    h = config.h_values(x) / config.sigma_w
    gains = gain_method(ens, h).gains
    innovation = dZ / config.sigma_w - 0.5 * (h + h.mean()) * config.dt
    return Ensemble(_propagate(x, config, noise) + gains * innovation[:, None])


def linear_fpf_step(ensemble, dZ: float, A, H, config: ScenarioConfig, noise=None, ddof: int = 1) -> Ensemble:
    """Linear-Gaussian FPF (square-root EnKF) step with gain ``Sigma H^T``.

    ``Sigma`` is the empirical covariance with ``1/(N - ddof)``
    normalization. The drift is ``A x``; ``config.drift`` is ignored.
    """
    ens = ensemble if isinstance(ensemble, Ensemble) else Ensemble(ensemble)
    x = ens.positions
    A = np.atleast_2d(np.asarray(A, dtype=float))
    Ht = np.asarray(H, dtype=float).reshape(ens.d) / config.sigma_w
    m = x.mean(axis=0)
    centered = x - m
    cov = centered.T @ centered / (ens.n - ddof)
    K = cov @ Ht
    innovation = dZ / config.sigma_w - 0.5 * (x @ Ht + m @ Ht) * config.dt
    out = x + x @ A.T * config.dt
    if noise is not None and config.sigma_b > 0:
        out = out + config.sigma_b * math.sqrt(config.dt) * noise
    return Ensemble(out + K[None, :] * innovation[:, None])


@dataclass(frozen=True, eq=False)
class WeightedEnsemble:
    """Particles with normalized importance weights."""

    positions: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        w = np.array(self.weights, dtype=float)
        if w.shape != (x.shape[0],):
            raise InvalidInputError("one weight per particle required")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise InvalidInputError("weights must be non-negative and sum to 1")
        object.__setattr__(self, "positions", x)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, positions):
        positions = np.asarray(positions, dtype=float)
        n = positions.shape[0]
        return cls(positions, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def ess(self) -> float:
        return effective_sample_size(self.weights)

    def mean(self, f) -> float:
        return float(self.weights @ np.asarray(f(self.positions), dtype=float).reshape(-1))


def effective_sample_size(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def systematic_resample(weights, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn by systematic resampling."""
    w = np.asarray(weights, dtype=float)
    n = w.size
    positions = (rng.random() + np.arange(n)) / n
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, positions, side="right")


def sir_step(w_ens: WeightedEnsemble, dZ: float, config: ScenarioConfig, noise=None,
             rng: np.random.Generator | None = None, threshold: float = 0.5) -> WeightedEnsemble:
    """Sequential importance resampling step.

    Weights are multiplied by ``exp((h dZ - h^2 dt / 2) / sigma_w^2)`` at the
    current positions (the increment ``dZ_k`` is generated by ``X_k``),
    systematic resampling runs when ESS < ``threshold * N``, and the
    particles are then propagated.
    """
    x = w_ens.positions
    h = config.h_values(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = np.log(w_ens.weights) + (h * dZ - 0.5 * h * h * config.dt) / config.sigma_w**2
    total = logsumexp(logw)
    if not np.isfinite(total):
        raise DegenerateWeightsError("all importance weights underflowed")
    w = np.exp(logw - total)
    w /= w.sum()
    if effective_sample_size(w) < threshold * w.size:
        if rng is None:
            raise InvalidParameterError("resampling requires an rng")
        x = x[systematic_resample(w, rng)]
        w = np.full(w.size, 1.0 / w.size)
    return WeightedEnsemble(_propagate(x, config, noise), w)


@dataclass(eq=False)
class FilterRun:
    """Per-step statistic (length steps + 1) and the final particles."""

    method: str
    statistic: np.ndarray
    final_positions: np.ndarray
    final_weights: np.ndarray | None = None


def run_fpf(config: ScenarioConfig, observations: ObservationPath, initial, gain_method,
            statistic: Callable, filter_name: str, noise=None) -> FilterRun:
    """Run the FPF over ``observations`` recording ``mean statistic(X_t)``."""
    x = np.asarray(initial, dtype=float)
    n = x.shape[0]
    if noise is None:
        noise = particle_noise(config, filter_name, n)
    if hasattr(gain_method, "reset"):
        gain_method.reset()
    ens = Ensemble(x)
    stat = np.empty(len(observations) + 1)
    stat[0] = np.mean(statistic(ens.positions))
    for k, dZ in enumerate(observations.increments):
        try:
            ens = fpf_step(ens, dZ, config, gain_method, noise[k])
        except FpfGainError as exc:
            raise GainSolverError(k, exc) from exc
        stat[k + 1] = np.mean(statistic(ens.positions))
    return FilterRun(filter_name, stat, ens.positions)


def run_linear_fpf(config: ScenarioConfig, observations: ObservationPath, initial, A, H,
                   statistic: Callable, ddof: int = 1, noise=None) -> FilterRun:
    x = np.asarray(initial, dtype=float)
    if noise is None:
        noise = particle_noise(config, "enkf", x.shape[0])
    ens = Ensemble(x)
    stat = np.empty(len(observations) + 1)
    stat[0] = np.mean(statistic(ens.positions))
    for k, dZ in enumerate(observations.increments):
        ens = linear_fpf_step(ens, dZ, A, H, config, noise[k], ddof=ddof)
        stat[k + 1] = np.mean(statistic(ens.positions))
    return FilterRun("enkf", stat, ens.positions)


def run_sir(config: ScenarioConfig, observations: ObservationPath, initial, statistic: Callable,
            noise=None, threshold: float = 0.5) -> FilterRun:
    x = np.asarray(initial, dtype=float)
    if noise is None:
        noise = particle_noise(config, "sir", x.shape[0])
    rng = substream(config.seed, STREAM_RESAMPLE, FILTER_IDS["sir"])
    w_ens = WeightedEnsemble.uniform(x)
    stat = np.empty(len(observations) + 1)
    stat[0] = w_ens.mean(statistic)
    for k, dZ in enumerate(observations.increments):
        w_ens = sir_step(w_ens, dZ, config, noise[k], rng, threshold)
        stat[k + 1] = w_ens.mean(statistic)
    return FilterRun("sir", stat, w_ens.positions, w_ens.weights)
