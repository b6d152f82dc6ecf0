"""Gain function approximation for the feedback particle filter.

Functions ``h`` passed to this module are vectorized: they map an (M, d)
array of points to an (M,) array of values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .diffusion_map import DiffusionMapOperator, Ensemble, _as_ensemble, build_operator
from .errors import DegenerateEnsembleError, InvalidInputError, InvalidParameterError

#: Iteration count used for gain-approximation sweeps.
SWEEP_ITERATIONS = 1000
#: Iteration count used inside filters.
FILTER_ITERATIONS = 100
#: Early-exit threshold on the infinity-norm residual.
DEFAULT_TOL = 1e-10

METHOD_DIFFUSION_MAP = "diffusion-map"
METHOD_CONSTANT = "constant"
METHOD_EXACT = "exact-oracle"
GAIN_METHODS = (METHOD_DIFFUSION_MAP, METHOD_CONSTANT, METHOD_EXACT)


@dataclass(frozen=True, eq=False)
class PoissonSolution:
    """Fixed-point solution ``phi`` with zero stationary mean."""

    phi: np.ndarray
    epsilon: float
    iterations_run: int
    residual: float


@dataclass(frozen=True, eq=False)
class GainField:
    """Per-particle gain vectors, shape (N, d)."""

    gains: np.ndarray
    method: str

    def __post_init__(self):
        gains = np.asarray(self.gains, dtype=float)
        if gains.ndim != 2:
            raise InvalidInputError(f"gains must be (N, d), got shape {gains.shape}")
        if not np.all(np.isfinite(gains)):
            raise InvalidInputError("gain field contains non-finite entries")
        if self.method not in GAIN_METHODS:
            raise InvalidParameterError(f"unknown gain method {self.method!r}")
        object.__setattr__(self, "gains", gains)


def _h_vector(h_values, n: int) -> np.ndarray:
    h = np.asarray(h_values, dtype=float)
    if h.shape != (n,):
        raise InvalidInputError(f"h_values must have length {n}, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise InvalidInputError("h_values contain non-finite entries")
    return h


def _centered_forcing(op: DiffusionMapOperator, h: np.ndarray) -> np.ndarray:
    if h.min() == h.max():
        return np.zeros_like(h)
    return op.epsilon * (h - op.pi @ h)


def _residual(op, phi, forcing):
    return float(np.max(np.abs(phi - op.T @ phi - forcing)))


def solve_fixed_point(
    op: DiffusionMapOperator,
    h_values,
    L: int = SWEEP_ITERATIONS,
    phi_init=None,
    tol: float = DEFAULT_TOL,
) -> PoissonSolution:
    """Iterate ``phi <- T phi + eps (h - pi(h))`` up to ``L`` times.

    The iterate is re-centered to zero pi-mean after every step. Iteration
    stops early once the infinity-norm residual drops below ``tol``; pass
    ``tol=0`` to always run ``L`` iterations.
    """
    if int(L) != L or L < 1:
        raise InvalidParameterError(f"iteration count L must be >= 1, got {L!r}")
    h = _h_vector(h_values, op.n)
    forcing = _centered_forcing(op, h)
    if phi_init is None:
        phi = np.zeros(op.n)
    else:
        phi = np.array(phi_init, dtype=float)
        if phi.shape != (op.n,) or not np.all(np.isfinite(phi)):
            raise InvalidInputError("phi_init must be a finite vector of length N")
        phi -= op.pi @ phi

    T, pi = op.T, op.pi
    iterations = 0
    Tphi = T @ phi
    # r_{n+1} = T r_n, so the infinity-norm residual never increases.
    residual = float(np.max(np.abs(phi - Tphi - forcing)))
    while iterations < L and residual >= tol:
        phi = Tphi + forcing
        phi -= pi @ phi
        iterations += 1
        Tphi = T @ phi
        residual = float(np.max(np.abs(phi - Tphi - forcing)))
    phi.setflags(write=False)
    return PoissonSolution(phi=phi, epsilon=op.epsilon, iterations_run=iterations, residual=residual)


def gain_at_particles(
    op: DiffusionMapOperator, solution: PoissonSolution, h_values, ensemble
) -> GainField:
    """Evaluate the diffusion-map gain at every particle.

    ``K^i = sum_j s_ij X^j`` with ``s_ij = T_ij (r_j - (T r)_i) / (2 eps)``
    and ``r = phi + eps h``.
    """
    ens = _as_ensemble(ensemble)
    if ens.n != op.n or solution.phi.shape != (op.n,):
        raise InvalidInputError("operator, solution and ensemble sizes disagree")
    h = _h_vector(h_values, op.n)
    eps = op.epsilon
    r = solution.phi + eps * h
    # s is unchanged by shifting r; shifting makes constant r give exact zeros
    r = r - r[0]
    Tr = op.T @ r
    s = np.subtract(r[None, :], Tr[:, None])
    s *= op.T
    s /= 2.0 * eps
    return GainField(gains=s @ ens.positions, method=METHOD_DIFFUSION_MAP)


def _point(x, d: int) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (d,):
        raise InvalidInputError(f"point must have {d} coordinates, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("point has non-finite coordinates")
    return x


def _interpolation_weights(x: np.ndarray, op: DiffusionMapOperator, ens: Ensemble) -> np.ndarray:
    """Row of the out-of-sample Markov kernel at ``x``.

    ``k(x, X^j) / sum_l k(x, X^l)``; the factor ``sqrt(sum_l g(x, X^l))``
    cancels in the ratio, leaving ``g(x, X^j) / sqrt(sum_l g_jl)``
    normalized. Computed in log space so far-away points do not underflow.
    """
    diff = ens.positions - x[None, :]
    logw = -np.einsum("ij,ij->i", diff, diff) / (4.0 * op.epsilon) - 0.5 * np.log(op.g_row_sums)
    return np.exp(logw - logsumexp(logw))


def _scalar_h(h, x: np.ndarray) -> float:
    return float(np.asarray(h(x[None, :]), dtype=float).reshape(-1)[0])


def evaluate_phi_at(x, op: DiffusionMapOperator, solution: PoissonSolution, h, ensemble) -> float:
    """Out-of-sample extension of the fixed-point solution.

    ``phi(x) = sum_j w_j(x) Phi_j + eps (h(x) - pi(h))``; at a particle it
    reproduces ``Phi_i`` when ``Phi`` solves the fixed point exactly.
    """
    ens = _as_ensemble(ensemble)
    x = _point(x, ens.d)
    h_values = _h_vector(h(ens.positions), ens.n)
    w = _interpolation_weights(x, op, ens)
    pi_h = h_values[0] if h_values.min() == h_values.max() else op.pi @ h_values
    return float(w @ solution.phi + op.epsilon * (_scalar_h(h, x) - pi_h))


def smoothed_potential_at(x, op: DiffusionMapOperator, solution: PoissonSolution, h, ensemble) -> float:
    """Kernel-smoothed potential ``sum_j w_j(x) (Phi_j + eps h_j) - eps pi(h)``.

    This is the function whose gradient :func:`gain_at_point` returns.
    """
    ens = _as_ensemble(ensemble)
    x = _point(x, ens.d)
    h_values = _h_vector(h(ens.positions), ens.n)
    w = _interpolation_weights(x, op, ens)
    return float(w @ (solution.phi + op.epsilon * h_values) - op.epsilon * (op.pi @ h_values))


def gain_at_point(x, op: DiffusionMapOperator, solution: PoissonSolution, h, ensemble, grad_h=None) -> np.ndarray:
    """Analytic gain at an arbitrary point ``x``.

    By default this is the gradient of :func:`smoothed_potential_at`, which
    at ``x = X^i`` equals row ``i`` of :func:`gain_at_particles`.

    If ``grad_h`` (a vectorized gradient of ``h``) is given, the gradient
    of :func:`evaluate_phi_at` is returned instead:
    ``grad[sum_j w_j Phi_j] + eps grad_h(x)``.
    """
    ens = _as_ensemble(ensemble)
    x = _point(x, ens.d)
    w = _interpolation_weights(x, op, ens)
    eps = op.epsilon
    if grad_h is None:
        h_values = _h_vector(h(ens.positions), ens.n)
        r = solution.phi + eps * h_values
    else:
        r = np.asarray(solution.phi, dtype=float)
    r = r - r[0]
    # grad w_j = w_j ((X^j - x) - sum_l w_l (X^l - x)) / (2 eps)
    coeff = w * (r - w @ r)
    grad = coeff @ ens.positions / (2.0 * eps)
    if grad_h is not None:
        grad = grad + eps * np.asarray(grad_h(x[None, :]), dtype=float).reshape(ens.d)
    return grad


def constant_gain(ensemble, h_values) -> np.ndarray:
    """Constant gain ``(1/N) sum_i (h(X^i) - mean h) X^i``."""
    ens = _as_ensemble(ensemble)
    h = _h_vector(h_values, ens.n)
    return (h - h.mean()) @ ens.positions / ens.n


def median_bandwidth(ensemble) -> float:
    """Median heuristic ``eps = 4 med^2 / log N`` over pairwise distances.

    Raises:
        DegenerateEnsembleError: if the median pairwise distance is zero.
    """
    ens = _as_ensemble(ensemble)
    med = float(np.median(pdist(ens.positions)))
    if med == 0.0:
        raise DegenerateEnsembleError("median pairwise distance is zero")
    return 4.0 * med * med / np.log(ens.n)


def diffusion_map_gain(
    ensemble,
    h_values,
    epsilon: float,
    L: int = SWEEP_ITERATIONS,
    phi_init=None,
    tol: float = DEFAULT_TOL,
) -> tuple[GainField, PoissonSolution]:
    """Build the operator, solve the fixed point and evaluate the gain."""
    ens = _as_ensemble(ensemble)
    op = build_operator(ens, epsilon)
    sol = solve_fixed_point(op, h_values, L=L, phi_init=phi_init, tol=tol)
    return gain_at_particles(op, sol, h_values, ens), sol


class DiffusionMapGain:
    """Stateful diffusion-map gain for use inside a filter.

    Args:
        epsilon: bandwidth; ``None`` selects it with :func:`median_bandwidth`.
        iterations: fixed-point iteration budget per call.
        tol: early-exit residual threshold.
        warm_start: start each solve from the previous call's ``phi``.
        reselect: with ``epsilon=None``, re-apply the median rule on every
            call instead of fixing the first value.
    """

    method = METHOD_DIFFUSION_MAP

    def __init__(self, epsilon=None, iterations=FILTER_ITERATIONS, tol=DEFAULT_TOL, warm_start=True, reselect=False):
        if epsilon is not None:
            epsilon = float(epsilon)
            if not epsilon > 0.0:
                raise InvalidParameterError(f"epsilon must be positive, got {epsilon!r}")
        self.epsilon = epsilon
        self.iterations = int(iterations)
        self.tol = tol
        self.warm_start = warm_start
        self.reselect = reselect
        self.reset()

    def reset(self):
        self.phi_prev = None
        self._current_epsilon = self.epsilon
        self.last_solution = None

    def _bandwidth(self, ens):
        if self.epsilon is not None:
            return self.epsilon
        if self._current_epsilon is None or self.reselect:
            self._current_epsilon = median_bandwidth(ens)
        return self._current_epsilon

    def __call__(self, ensemble, h_values) -> GainField:
        ens = _as_ensemble(ensemble)
        if np.all(ens.positions == ens.positions[0]):
            # identical particles: every kernel gain sum_j s_ij X^j is zero
            return GainField(np.zeros((ens.n, ens.d)), self.method)
        try:
            eps = self._bandwidth(ens)
        except DegenerateEnsembleError:
            return GainField(np.zeros((ens.n, ens.d)), self.method)
        phi_init = self.phi_prev if self.warm_start else None
        if phi_init is not None and phi_init.shape != (ens.n,):
            phi_init = None
        field, sol = diffusion_map_gain(ens, h_values, eps, L=self.iterations, phi_init=phi_init, tol=self.tol)
        self.phi_prev = sol.phi
        self.last_solution = sol
        return field


class ConstantGain:
    """Constant-gain approximation broadcast to every particle."""

    method = METHOD_CONSTANT

    def reset(self):
        pass

    def __call__(self, ensemble, h_values) -> GainField:
        ens = _as_ensemble(ensemble)
        k = constant_gain(ens, h_values)
        return GainField(np.broadcast_to(k, (ens.n, ens.d)).copy(), self.method)
