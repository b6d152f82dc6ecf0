"""Monte Carlo studies: gain-error sweeps, filtering error, runtime scaling.

Every repetition draws its randomness from a sub-seed derived from the
master seed and the repetition's key, so results do not depend on the
number of worker threads or on completion order.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import filters
from .errors import FpfGainError, InvalidParameterError
from .gain import (
    DEFAULT_TOL,
    FILTER_ITERATIONS,
    METHOD_CONSTANT,
    METHOD_DIFFUSION_MAP,
    METHOD_EXACT,
    SWEEP_ITERATIONS,
    ConstantGain,
    DiffusionMapGain,
    constant_gain,
    diffusion_map_gain,
)
from .oracles import (
    BenesParams,
    Density1D,
    benes_psi_path,
    exact_benes_posterior,
    exact_gain_linear_mixture,
    psi_negative_part,
    sample_bimodal_vector,
    static_posterior_moment,
)

log = logging.getLogger(__name__)

FILTER_METHODS = ("fpf-dm", "fpf-const", "sir")


def sub_seed(seed: int, *key: int) -> int:
    """Deterministic 32-bit seed for ``(seed, key)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


def _map(fn, items, threads: int):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# gain-approximation error


@dataclass(frozen=True)
class SweepSpec:
    """Grid for a gain-error sweep on the bimodal vector example."""

    epsilons: tuple
    Ns: tuple = (200,)
    dims: tuple = (1,)
    M: int = 100
    sigma_sq: float = 0.2
    seed: int = 0
    iterations: int = SWEEP_ITERATIONS
    tol: float = DEFAULT_TOL
    methods: tuple = (METHOD_DIFFUSION_MAP, METHOD_CONSTANT)

    def __post_init__(self):
        for name in ("epsilons", "Ns", "dims", "methods"):
            value = tuple(getattr(self, name))
            if not value:
                raise InvalidParameterError(f"{name} must be non-empty")
            object.__setattr__(self, name, value)
        if self.M < 1:
            raise InvalidParameterError(f"M must be >= 1, got {self.M}")
        if any(not e > 0 for e in self.epsilons):
            raise InvalidParameterError("epsilons must be positive")
        if any(n < 2 for n in self.Ns) or any(d < 1 for d in self.dims):
            raise InvalidParameterError("Ns must be >= 2 and dims >= 1")


@dataclass(frozen=True)
class MseRecord:
    epsilon: float
    N: int
    d: int
    method: str
    mse: float
    wall_time: float
    failures: int = 0


def gain_mse(K, K_exact) -> float:
    """Particle-averaged squared gain error ``(1/N) sum_i |K^i - K_exact^i|^2``."""
    diff = np.asarray(K, dtype=float) - np.asarray(K_exact, dtype=float)
    return float(np.mean(np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)))


def _sweep_repetition(spec: SweepSpec, N: int, d: int, m: int):
    ens = sample_bimodal_vector(N, d, spec.sigma_sq, rng_seed=sub_seed(spec.seed, N, d, m))
    x = ens.positions
    h = x[:, 0]
    exact = np.zeros_like(x)
    exact[:, 0] = exact_gain_linear_mixture(Density1D.bimodal(spec.sigma_sq), h)
    out = {}
    if METHOD_CONSTANT in spec.methods:
        t0 = time.perf_counter()
        k = constant_gain(ens, h)
        out[METHOD_CONSTANT] = (gain_mse(np.broadcast_to(k, x.shape), exact), time.perf_counter() - t0)
    if METHOD_EXACT in spec.methods:
        out[METHOD_EXACT] = (gain_mse(exact, exact), 0.0)
    if METHOD_DIFFUSION_MAP in spec.methods:
        for eps in spec.epsilons:
            t0 = time.perf_counter()
            try:
                field, _ = diffusion_map_gain(ens, h, eps, L=spec.iterations, tol=spec.tol)
                err = gain_mse(field.gains, exact)
            except FpfGainError as exc:
                log.warning("cell eps=%g N=%d d=%d m=%d failed: %s", eps, N, d, m, exc)
                err = math.nan
            out[(METHOD_DIFFUSION_MAP, eps)] = (err, time.perf_counter() - t0)
    return out


def _aggregate(values):
    errs = np.array([v[0] for v in values])
    ok = np.isfinite(errs)
    mse = float(np.mean(errs[ok])) if ok.any() else math.nan
    return mse, float(np.mean([v[1] for v in values])), int((~ok).sum())


def gain_mse_sweep(spec: SweepSpec, threads: int = 1) -> list[MseRecord]:
    """Monte Carlo gain error over the ``(epsilon, N, d)`` grid.

    Each repetition samples one ensemble and evaluates every method on it.
    Constant-gain (and exact-oracle) records do not depend on epsilon and
    are repeated on every epsilon row so each row can be plotted directly.
    Records are sorted by ``(N, d, epsilon, method)``.
    """
    records = []
    for N in spec.Ns:
        for d in spec.dims:
            reps = _map(lambda m: _sweep_repetition(spec, N, d, m), range(spec.M), threads)
            fixed = {}
            for method in (METHOD_CONSTANT, METHOD_EXACT):
                if method in spec.methods:
                    fixed[method] = _aggregate([r[method] for r in reps])
            for eps in sorted(spec.epsilons):
                rows = dict(fixed)
                if METHOD_DIFFUSION_MAP in spec.methods:
                    rows[METHOD_DIFFUSION_MAP] = _aggregate([r[(METHOD_DIFFUSION_MAP, eps)] for r in reps])
                for method in sorted(rows):
                    mse, wall, failures = rows[method]
                    records.append(MseRecord(float(eps), int(N), int(d), method, mse, wall, failures))
            log.info("sweep N=%d d=%d done", N, d)
    return records


# filtering error


@dataclass(frozen=True)
class FilterSettings:
    """Particle count and diffusion-map options shared by the filtering studies.

    ``epsilon=None`` selects the bandwidth with the median rule, either once
    (first non-degenerate ensemble) or, with ``reselect``, on every step.
    """

    N: int = 200
    epsilon: float | None = 0.1
    iterations: int = FILTER_ITERATIONS
    tol: float = DEFAULT_TOL
    warm_start: bool = False
    reselect: bool = False
    sir_threshold: float = 0.5


@dataclass(eq=False)
class FilteringResult:
    """Per-method mse time series, each of length steps + 1."""

    times: np.ndarray
    mse: dict
    M: int

    def time_average(self, method: str) -> float:
        return float(np.mean(self.mse[method]))


def static_scenario(sigma_w=0.1, dt=0.001, steps=500, seed=0) -> filters.ScenarioConfig:
    """``dX = 0``, ``dZ = |X| dt + sigma_w dW`` with ``X_0 ~ N(0, 1)``."""
    return filters.ScenarioConfig(
        drift=filters.zero_drift,
        h=lambda x: np.abs(x[:, 0]),
        sigma_w=sigma_w,
        dt=dt,
        steps=steps,
        seed=seed,
        prior_sampler=lambda rng, n: rng.standard_normal((n, 1)),
        d=1,
        sigma_b=0.0,
        prior_density=Density1D.gaussian(0.0, 1.0),
    )


def benes_scenario(params: BenesParams, dt=0.01, T=10.0, seed=0) -> filters.ScenarioConfig:
    steps = int(round(T / dt))
    return filters.ScenarioConfig(
        drift=params.drift,
        h=lambda x: params.observation(x[:, 0]),
        sigma_w=1.0,
        dt=dt,
        steps=steps,
        seed=seed,
        prior_sampler=lambda rng, n: np.full((n, 1), params.x0),
        d=1,
        sigma_b=params.sigma_B,
    )


def static_reference(config: filters.ScenarioConfig, truth: filters.TruthPath, psi) -> np.ndarray:
    """``int psi p*_t`` at every grid time, by quadrature."""
    Z = truth.observations.Z
    t = config.dt * np.arange(config.steps + 1)
    return np.array([
        static_posterior_moment(config.prior_density, config.sigma_w, float(z), float(tk), psi)
        for z, tk in zip(Z, t)
    ])


def benes_reference(params: BenesParams, config: filters.ScenarioConfig, truth: filters.TruthPath) -> np.ndarray:
    """Analytic Benes posterior mean at every grid time (``x0`` at t = 0)."""
    obs = truth.observations
    psi = benes_psi_path(params, obs.times, obs.increments, config.dt)
    ends = obs.times + config.dt
    means = [exact_benes_posterior(params, float(t), float(p)).mean() for t, p in zip(ends, psi)]
    return np.concatenate([[params.x0], means])


def _run_method(method, config, truth, initial, psi, settings: FilterSettings):
    stat = lambda x: np.asarray(psi(x[:, 0]), dtype=float)  # noqa: E731
    if method == "fpf-dm":
        gain = DiffusionMapGain(settings.epsilon, settings.iterations, settings.tol,
                                warm_start=settings.warm_start, reselect=settings.reselect)
        return filters.run_fpf(config, truth.observations, initial, gain, stat, method)
    if method == "fpf-const":
        return filters.run_fpf(config, truth.observations, initial, ConstantGain(), stat, method)
    if method == "sir":
        return filters.run_sir(config, truth.observations, initial, stat, threshold=settings.sir_threshold)
    raise InvalidParameterError(f"unknown filter method {method!r}")


def filtering_mse_run(config: filters.ScenarioConfig, methods, M: int, psi, reference,
                      settings: FilterSettings = FilterSettings(), threads: int = 1) -> FilteringResult:
    """Monte Carlo filtering error against an oracle posterior moment.

    ``reference(config, truth)`` returns the exact ``E[psi(X_t) | Z_t]`` on
    the time grid. Repetition ``m`` runs on ``config`` reseeded with
    ``sub_seed(config.seed, m)``; all methods share the truth path and the
    initial particles of that repetition.
    """
    methods = tuple(methods)
    if M < 1:
        raise InvalidParameterError(f"M must be >= 1, got {M}")
    for method in methods:
        if method not in FILTER_METHODS:
            raise InvalidParameterError(f"unknown filter method {method!r}")

    def one(m):
        cfg = dataclasses.replace(config, seed=sub_seed(config.seed, m))
        truth = filters.simulate_truth(cfg)
        ref = np.asarray(reference(cfg, truth), dtype=float)
        initial = filters.initial_particles(cfg, settings.N)
        out = {}
        for method in methods:
            run = _run_method(method, cfg, truth, initial, psi, settings)
            out[method] = (run.statistic - ref) ** 2
        return out

    reps = _map(one, range(M), threads)
    mse = {method: np.mean([r[method] for r in reps], axis=0) for method in methods}
    return FilteringResult(config.dt * np.arange(config.steps + 1), mse, M)


def static_filtering_run(M: int = 100, methods=FILTER_METHODS, settings: FilterSettings = FilterSettings(),
                         sigma_w=0.1, dt=0.001, steps=500, seed=0, psi=psi_negative_part,
                         threads: int = 1) -> FilteringResult:
    config = static_scenario(sigma_w, dt, steps, seed)
    return filtering_mse_run(config, methods, M, psi, lambda c, tr: static_reference(c, tr, psi),
                             settings, threads)


def benes_run(params: BenesParams = BenesParams(), M: int = 100, methods=FILTER_METHODS,
              settings: FilterSettings | None = None, dt=0.01, T=10.0, seed=0,
              threads: int = 1) -> FilteringResult:
    """Filtering error for ``psi(x) = x`` against the analytic Benes mean."""
    if settings is None:
        settings = FilterSettings(epsilon=None, warm_start=True, reselect=True)
    config = benes_scenario(params, dt, T, seed)
    return filtering_mse_run(config, methods, M, lambda x: x,
                             lambda c, tr: benes_reference(params, c, tr), settings, threads)


# runtime


@dataclass(frozen=True)
class BenchRecord:
    N: int
    method: str
    seconds: float


def loglog_slope(Ns, seconds) -> float:
    """Least-squares slope of ``log(seconds)`` against ``log(N)``."""
    return float(np.polyfit(np.log(np.asarray(Ns, dtype=float)), np.log(np.asarray(seconds, dtype=float)), 1)[0])


def _median_call_time(fn, repeats: int, min_sample: float = 1e-3) -> float:
    """Median seconds per call of ``fn`` over ``repeats`` timed batches.

    One untimed warm-up call precedes timing. Fast calls are batched so each
    sample spans at least ``min_sample`` seconds, which keeps timer resolution
    and scheduler jitter out of microsecond-scale measurements.
    """
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    batch = max(1, math.ceil(min_sample / max(first, 1e-9)))
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(batch):
            fn()
        samples.append((time.perf_counter() - t0) / batch)
    return float(np.median(samples))


def runtime_bench(Ns, d: int = 1, repeats: int = 5, iterations: int = FILTER_ITERATIONS, seed: int = 0,
                  sigma_sq: float = 0.2) -> tuple[list[BenchRecord], dict]:
    """Median wall-clock time of one gain evaluation per ``(N, method)``.

    The diffusion-map timing covers operator assembly plus exactly
    ``iterations`` fixed-point sweeps (no early exit) at the median-rule
    bandwidth. Each method is timed in its own loop after a warm-up call.
    Returns the records and the log-log slope per method.
    """
    Ns = [int(n) for n in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise InvalidParameterError("Ns must be strictly increasing")
    if int(repeats) != repeats or repeats < 1:
        raise InvalidParameterError(f"repeats must be >= 1, got {repeats!r}")
    from .gain import median_bandwidth

    records = []
    for N in Ns:
        ens = sample_bimodal_vector(N, d, sigma_sq, rng_seed=sub_seed(seed, N))
        h = ens.positions[:, 0]
        eps = median_bandwidth(ens)
        calls = {
            METHOD_CONSTANT: lambda: constant_gain(ens, h),
            METHOD_DIFFUSION_MAP: lambda: diffusion_map_gain(ens, h, eps, L=iterations, tol=0.0),
        }
        for method in sorted(calls):
            records.append(BenchRecord(N, method, _median_call_time(calls[method], int(repeats))))
    slopes = {}
    for method in (METHOD_CONSTANT, METHOD_DIFFUSION_MAP):
        rows = [r for r in records if r.method == method]
        slopes[method] = loglog_slope([r.N for r in rows], [r.seconds for r in rows])
    return records, slopes
