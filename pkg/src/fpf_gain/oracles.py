"""Analytic reference solutions.

Includes the exact scalar gain, Gaussian diffusion-map formulas with the
Hermite spectrum, the posterior of the static ``h(x) = |x|`` example and
the Benes filter.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy import integrate, special, stats

from .diffusion_map import Ensemble
from .errors import InvalidInputError, InvalidParameterError, QuadratureError

QUAD_ABS_TOL = 1e-10
QUAD_REL_TOL = 1e-12
#: Quadrature domains extend this many standard deviations past the means.
TRUNCATION_SIGMAS = 10.0


@dataclass(frozen=True)
class Density1D:
    """Scalar Gaussian mixture; a single Gaussian is a one-component mixture."""

    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w = tuple(float(v) for v in np.atleast_1d(self.weights))
        m = tuple(float(v) for v in np.atleast_1d(self.means))
        s = tuple(float(v) for v in np.atleast_1d(self.variances))
        if not (len(w) == len(m) == len(s)) or not w:
            raise InvalidParameterError("weights, means and variances must have equal non-zero length")
        if any(v <= 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            raise InvalidParameterError(f"weights must be positive and sum to 1, got {w}")
        if any(not v > 0 for v in s):
            raise InvalidParameterError(f"variances must be positive, got {s}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", s)

    @classmethod
    def gaussian(cls, mean=0.0, variance=1.0):
        return cls((1.0,), (mean,), (variance,))

    @classmethod
    def bimodal(cls, sigma_sq=0.2, separation=1.0):
        """Equal mixture of N(-separation, sigma_sq) and N(+separation, sigma_sq)."""
        return cls((0.5, 0.5), (-separation, separation), (sigma_sq, sigma_sq))

    @property
    def kind(self) -> str:
        return "gaussian" if len(self.weights) == 1 else "gaussian_mixture"

    @property
    def _arrays(self):
        return np.array(self.weights), np.array(self.means), np.sqrt(np.array(self.variances))

    def _log_terms(self, x: float):
        return [math.log(w) - 0.5 * (x - m) ** 2 / v - 0.5 * math.log(2 * math.pi * v)
                for w, m, v in zip(self.weights, self.means, self.variances)]

    def pdf(self, x):
        if isinstance(x, float):
            return sum(math.exp(t) for t in self._log_terms(x))
        w, m, s = self._arrays
        x = np.asarray(x, dtype=float)
        return np.sum(w * stats.norm.pdf(x[..., None], m, s), axis=-1)

    def logpdf(self, x):
        if isinstance(x, float):
            terms = self._log_terms(x)
            top = max(terms)
            return top + math.log(sum(math.exp(t - top) for t in terms))
        w, m, s = self._arrays
        x = np.asarray(x, dtype=float)
        return special.logsumexp(np.log(w) + stats.norm.logpdf(x[..., None], m, s), axis=-1)

    def cdf(self, x):
        w, m, s = self._arrays
        x = np.asarray(x, dtype=float)
        return np.sum(w * stats.norm.cdf(x[..., None], m, s), axis=-1)

    def sf(self, x):
        w, m, s = self._arrays
        x = np.asarray(x, dtype=float)
        return np.sum(w * stats.norm.sf(x[..., None], m, s), axis=-1)

    def mean(self) -> float:
        return float(np.dot(self.weights, self.means))

    def variance(self) -> float:
        w, m, s = self._arrays
        mu = self.mean()
        return float(np.sum(w * (s**2 + (m - mu) ** 2)))

    def median(self) -> float:
        from scipy.optimize import brentq

        lo, hi = self.support()
        return float(brentq(lambda z: self.cdf(z) - 0.5, lo, hi, xtol=1e-14))

    def support(self) -> tuple[float, float]:
        """Truncated integration domain ``[min m - 10 s, max m + 10 s]``."""
        smax = math.sqrt(max(self.variances))
        return min(self.means) - TRUNCATION_SIGMAS * smax, max(self.means) + TRUNCATION_SIGMAS * smax

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        w, m, s = self._arrays
        comp = rng.choice(len(w), size=n, p=w) if len(w) > 1 else np.zeros(n, dtype=int)
        return m[comp] + s[comp] * rng.standard_normal(n)


def _quad(f, a, b, points=None, what="integral", epsabs=QUAD_ABS_TOL):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            pts = None
            if points is not None:
                pts = sorted({float(p) for p in points if a < p < b}) or None
            value, abserr = integrate.quad(f, a, b, points=pts, epsabs=epsabs,
                                           epsrel=QUAD_REL_TOL, limit=500)
        except integrate.IntegrationWarning as exc:
            raise QuadratureError(f"{what} did not converge on [{a}, {b}]: {exc}",
                                  {"interval": (a, b), "what": what}) from exc
    if not np.isfinite(value):
        raise QuadratureError(f"{what} is not finite",
                              {"interval": (a, b), "value": value, "abserr": abserr, "what": what})
    return value


def _scalar_fn(h):
    return lambda z: float(np.asarray(h(z), dtype=float))


def density_mean(rho: Density1D, f, epsabs=QUAD_ABS_TOL) -> float:
    """``int f rho`` over the truncated domain."""
    f = _scalar_fn(f)
    lo, hi = rho.support()
    return _quad(lambda z: rho.pdf(z) * f(z), lo, hi, points=rho.means, what="density mean", epsabs=epsabs)


def exact_gain_1d(rho: Density1D, h, x) -> float | np.ndarray:
    """Exact scalar gain ``K(x) = -(1/rho(x)) int_{-inf}^x rho (h - h_hat)``.

    Computed by adaptive quadrature. For ``x`` above the median the
    equivalent upper-tail form ``+(1/rho(x)) int_x^inf`` is used to avoid
    cancellation. Accepts a scalar or an array of points.
    """
    hf = _scalar_fn(h)
    # h_hat errors are amplified by the Mills ratio in the tails
    h_hat = density_mean(rho, hf, epsabs=1e-3 * QUAD_ABS_TOL)
    lo, hi = rho.support()
    med = rho.median()

    def integrand(z):
        return rho.pdf(z) * (hf(z) - h_hat)

    def one(xv):
        xv = float(xv)
        if not np.isfinite(xv):
            raise InvalidInputError("x must be finite")
        px = float(rho.pdf(xv))
        if px <= 0.0:
            raise QuadratureError(f"density underflows at x={xv}", {"x": xv})
        if xv <= med:
            tail = _quad(integrand, min(lo, xv - 1.0), xv, points=rho.means, what="lower tail",
                         epsabs=QUAD_ABS_TOL * px)
            return -tail / px
        tail = _quad(integrand, xv, max(hi, xv + 1.0), points=rho.means, what="upper tail",
                     epsabs=QUAD_ABS_TOL * px)
        return tail / px

    if np.ndim(x) == 0:
        return one(x)
    return np.array([one(v) for v in np.asarray(x, dtype=float).ravel()]).reshape(np.shape(x))


def exact_gain_linear_mixture(rho: Density1D, x) -> np.ndarray:
    """Closed-form exact gain for a Gaussian mixture and ``h(x) = x``.

    Uses ``int_{-inf}^x z N(z; m, s^2) dz = m Phi(u) - s^2 N(x; m, s^2)``
    with ``u = (x - m)/s``, switching to the upper-tail form above the mean.
    Vectorized; this is the fast path for gain-error sweeps.
    """
    x = np.asarray(x, dtype=float)
    w, m, s = rho._arrays
    h_hat = rho.mean()
    xe = x[..., None]
    dens = stats.norm.pdf(xe, m, s)
    lower = np.sum(w * ((m - h_hat) * stats.norm.cdf(xe, m, s) - s**2 * dens), axis=-1)
    upper = np.sum(w * ((m - h_hat) * stats.norm.sf(xe, m, s) + s**2 * dens), axis=-1)
    integral = np.where(x <= h_hat, lower, -upper)
    return -integral / rho.pdf(x)


def hermite(n: int, x):
    """Probabilists' Hermite polynomial via ``H_{k+1} = x H_k - k H_{k-1}``."""
    if int(n) != n or n < 0:
        raise InvalidParameterError(f"Hermite order must be a non-negative integer, got {n!r}")
    x = np.asarray(x, dtype=float)
    prev, cur = np.ones_like(x), x.copy()
    if n == 0:
        return prev if prev.ndim else float(prev)
    for k in range(1, int(n)):
        prev, cur = cur, x * cur - k * prev
    return cur if cur.ndim else float(cur)


class GaussianDmapParams(NamedTuple):
    delta: np.ndarray
    sigma_eps_sq: np.ndarray
    op_norm: float


def _sorted_variances(sigma_sq) -> np.ndarray:
    s = np.atleast_1d(np.asarray(sigma_sq, dtype=float))
    if s.ndim != 1 or np.any(~(s > 0)):
        raise InvalidParameterError("variances must be a positive vector")
    if np.any(np.diff(s) > 0):
        raise InvalidParameterError("variances must be sorted in descending order")
    return s


def gaussian_dmap_params(sigma_sq, epsilon: float) -> GaussianDmapParams:
    """Diffusion-map constants for ``rho = N(0, diag(sigma_sq))``.

    Returns the contraction ``delta_j``, the invariant variances
    ``sigma_eps_j^2`` and the operator norm ``1 - delta_1``.
    """
    s = _sorted_variances(sigma_sq)
    eps = float(epsilon)
    if not eps > 0:
        raise InvalidParameterError(f"epsilon must be positive, got {epsilon!r}")
    delta = eps * (s + 4 * eps) / (s * s + 3 * s * eps + 4 * eps * eps)
    sigma_eps_sq = 2 * eps * (1 - delta) / (delta * (2 - delta))
    return GaussianDmapParams(delta, sigma_eps_sq, float(1 - delta[0]))


def gaussian_dmap_apply_linear(sigma_sq, epsilon: float, x) -> np.ndarray:
    """Analytic action of the Gaussian diffusion map on coordinates: ``(1 - delta_j) x_j``."""
    delta = gaussian_dmap_params(sigma_sq, epsilon).delta
    return (1 - delta) * np.asarray(x, dtype=float)


def gaussian_dmap_eigenpair(sigma_sq, epsilon: float, orders):
    """Eigenvalue and eigenfunction of the Gaussian diffusion map.

    ``orders`` is a multi-index ``(n_1, ..., n_d)``; the eigenvalue is
    ``prod (1 - delta_j)^{n_j}`` and the eigenfunction
    ``prod hermite(n_j, x_j / sigma_eps_j)``, returned as a callable on
    (M, d) arrays.
    """
    p = gaussian_dmap_params(sigma_sq, epsilon)
    orders = np.atleast_1d(np.asarray(orders, dtype=int))
    if orders.shape != p.delta.shape:
        raise InvalidParameterError("one Hermite order per dimension required")
    lam = float(np.prod((1 - p.delta) ** orders))
    scale = np.sqrt(p.sigma_eps_sq)

    def eigenfunction(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        out = np.ones(x.shape[0])
        for j, n in enumerate(orders):
            out = out * hermite(int(n), x[:, j] / scale[j])
        return out

    return lam, eigenfunction


# static example: dX = 0, dZ = |X| dt + sigma_w dW


def _static_log_unnormalized(p0: Density1D, sigma_w: float, Z_t: float, t: float):
    s2 = sigma_w**2

    def logp(x):
        hx = abs(x) if isinstance(x, float) else np.abs(x)
        return p0.logpdf(x) + (hx * Z_t - 0.5 * t * hx * hx) / s2

    return logp


def _static_domain(p0: Density1D, sigma_w: float, Z_t: float, t: float):
    lo, hi = p0.support()
    prec = 1.0 / max(p0.variances) + t / sigma_w**2
    peak = max(Z_t, 0.0) / sigma_w**2 / prec
    half = max(abs(lo), abs(hi), peak + TRUNCATION_SIGMAS / math.sqrt(prec))
    points = [0.0, -peak, peak, *p0.means]
    return -half, half, points


@lru_cache(maxsize=65536)
def _static_normalizer(p0: Density1D, sigma_w: float, Z_t: float, t: float):
    logp = _static_log_unnormalized(p0, sigma_w, Z_t, t)
    lo, hi, points = _static_domain(p0, sigma_w, Z_t, t)
    grid = np.concatenate([np.linspace(lo, hi, 401), points])
    shift = float(np.max(logp(grid)))
    mass = _quad(lambda z: math.exp(logp(z) - shift), lo, hi, points=points, what="posterior mass")
    return shift + math.log(mass), (lo, hi, tuple(points))


def _check_static(sigma_w, t):
    if not sigma_w > 0:
        raise InvalidParameterError(f"sigma_w must be positive, got {sigma_w!r}")
    if not t >= 0:
        raise InvalidParameterError(f"t must be non-negative, got {t!r}")


def static_example_posterior(p0: Density1D, sigma_w: float, Z_t: float, t: float, x):
    """Normalized posterior density of the static ``h(x) = |x|`` problem.

    ``p*_t(x) ~ p0(x) exp((|x| Z_t - t x^2 / 2) / sigma_w^2)``, normalized
    by quadrature.
    """
    _check_static(sigma_w, t)
    log_z, _ = _static_normalizer(p0, float(sigma_w), float(Z_t), float(t))
    logp = _static_log_unnormalized(p0, sigma_w, Z_t, t)
    return np.exp(logp(np.asarray(x, dtype=float)) - log_z)


def static_posterior_moment(p0: Density1D, sigma_w: float, Z_t: float, t: float, psi) -> float:
    """``int psi p*_t`` by quadrature."""
    _check_static(sigma_w, t)
    log_z, (lo, hi, points) = _static_normalizer(p0, float(sigma_w), float(Z_t), float(t))
    logp = _static_log_unnormalized(p0, sigma_w, Z_t, t)
    f = _scalar_fn(psi)
    return _quad(lambda z: f(z) * math.exp(logp(z) - log_z), lo, hi, points=points,
                 what="posterior moment")


def psi_negative_part(x):
    """Test function ``x 1{x <= 0}``."""
    x = np.asarray(x, dtype=float)
    return np.where(x <= 0.0, x, 0.0)


# Benes filter


@dataclass(frozen=True)
class BenesParams:
    """dX = mu sigma_B tanh(mu X / sigma_B) dt + sigma_B dB, dZ = (h1 X + h1 h2) dt + dW."""

    mu: float = 0.5
    sigma_B: float = 0.8
    h1: float = 0.4
    h2: float = 0.0
    x0: float = 1.0

    def __post_init__(self):
        if not self.sigma_B > 0:
            raise InvalidParameterError(f"sigma_B must be positive, got {self.sigma_B!r}")
        if self.h1 == 0:
            raise InvalidParameterError("h1 must be non-zero")

    def drift(self, x):
        return self.mu * self.sigma_B * np.tanh(self.mu / self.sigma_B * np.asarray(x))

    def observation(self, x):
        return self.h1 * np.asarray(x) + self.h1 * self.h2


@dataclass(frozen=True)
class BenesPosterior:
    """Mixture ``w N(a - b, s2) + (1 - w) N(a + b, s2)``."""

    a_t: float
    b_t: float
    sigma_t_sq: float
    w_t: float

    def mean(self) -> float:
        return self.a_t + self.b_t * (1.0 - 2.0 * self.w_t)

    def pdf(self, x):
        s = math.sqrt(self.sigma_t_sq)
        return (self.w_t * stats.norm.pdf(x, self.a_t - self.b_t, s)
                + (1 - self.w_t) * stats.norm.pdf(x, self.a_t + self.b_t, s))


def exact_benes_posterior(params: BenesParams, t: float, psi_t: float, literal_weight: bool = False) -> BenesPosterior:
    """Closed-form Benes posterior given ``Psi_t`` from :func:`benes_psi`.

    The posterior is the Kalman-Bucy Gaussian ``N(a_t, s_t^2)`` of the
    driftless model tilted by ``cosh(mu x / sigma_B)``, so the weight of the
    ``a - b`` component is ``1 / (1 + exp(2 mu a_t / sigma_B))``, i.e.
    exponent ``(2 a b h1 / sigma_B) coth(h1 sigma_B t)``. ``literal_weight``
    drops the ``h1`` factor from that exponent; the two agree only for
    ``h1 = 1``.
    """
    if not t > 0:
        raise InvalidParameterError(f"t must be positive, got {t!r}")
    c = params.h1 * params.sigma_B * t
    th = math.tanh(c)
    a = params.sigma_B * psi_t * th + (params.h2 + params.x0) / math.cosh(c) - params.h2
    b = params.mu / params.h1 * th
    s2 = params.sigma_B / params.h1 * th
    scale = 1.0 if literal_weight else params.h1
    w = float(special.expit(-(2 * a * b * scale / params.sigma_B) / th))
    return BenesPosterior(a, b, s2, w)


def benes_psi(params: BenesParams, t: float, increments) -> float:
    """Left-point sum ``sum_k sinh(c t_k) / sinh(c t) dZ_k`` with ``c = h1 sigma_B``."""
    inc = np.asarray(list(increments), dtype=float)
    if inc.size == 0:
        raise InvalidInputError("increment sequence is empty")
    inc = inc.reshape(-1, 2)
    c = params.h1 * params.sigma_B
    return float(np.sum(np.sinh(c * inc[:, 0]) * inc[:, 1]) / math.sinh(c * t))


def benes_psi_path(params: BenesParams, times, dZ, dt: float | None = None) -> np.ndarray:
    """``Psi`` at ``times[k] + dt`` for every k, from increments on a uniform grid.

    ``times`` are the left endpoints of the increments ``dZ``; the returned
    value k uses increments 0..k and the horizon ``times[k] + dt``. ``dt``
    defaults to the grid spacing and is required for a single increment.
    """
    times = np.asarray(times, dtype=float)
    dZ = np.asarray(dZ, dtype=float)
    if times.size == 0 or times.shape != dZ.shape:
        raise InvalidInputError("times and dZ must be non-empty and of equal length")
    if dt is None:
        if times.size < 2:
            raise InvalidInputError("dt is required for a single increment")
        dt = times[1] - times[0]
    c = params.h1 * params.sigma_B
    return np.cumsum(np.sinh(c * times) * dZ) / np.sinh(c * (times + dt))


def sample_bimodal_vector(n: int, d: int, sigma_sq: float = 0.2, rng_seed=None) -> Ensemble:
    """Sample ``rho_b(x_1) prod rho_g(x_m)``.

    The first coordinate follows ``0.5 N(-1, s2) + 0.5 N(1, s2)``, the
    others ``N(0, s2)``.
    """
    if n < 2 or d < 1:
        raise InvalidParameterError(f"need n >= 2 and d >= 1, got n={n}, d={d}")
    rng = np.random.default_rng(rng_seed)
    s = math.sqrt(sigma_sq)
    x = s * rng.standard_normal((n, d))
    x[:, 0] += np.where(rng.random(n) < 0.5, -1.0, 1.0)
    return Ensemble(x)
