"""Empirical diffusion-map Markov operator built from a particle ensemble.

The construction follows the usual density-normalized diffusion map:

    g_ij = exp(-|X^i - X^j|^2 / (4 eps))
    k_ij = g_ij / (sqrt(sum_l g_il) * sqrt(sum_l g_jl))
    d_i  = sum_j k_ij,    T_ij = k_ij / d_i,    pi_i = d_i / sum_j d_j

``T`` is row-stochastic and reversible with respect to ``pi``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEnsembleError, InvalidInputError, InvalidParameterError

#: Kernel entries below this value are flushed to zero.
UNDERFLOW_FLOOR = 1e-300


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Ensemble:
    """N particle positions in d dimensions.

    ``positions`` may be given as a 1-D array, which is read as N scalar
    particles. The stored array is a read-only (N, d) float copy.
    """

    positions: np.ndarray

    def __post_init__(self):
        x = np.array(self.positions, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise InvalidInputError(f"positions must be (N, d), got shape {x.shape}")
        if x.shape[0] < 2:
            raise InvalidInputError(f"need at least 2 particles, got {x.shape[0]}")
        if x.shape[1] < 1:
            raise InvalidInputError("positions must have at least one coordinate")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("positions contain non-finite values")
        object.__setattr__(self, "positions", _frozen(x))

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def __len__(self) -> int:
        return self.n


def _as_ensemble(ensemble) -> Ensemble:
    return ensemble if isinstance(ensemble, Ensemble) else Ensemble(ensemble)


def _check_epsilon(epsilon) -> float:
    eps = float(epsilon)
    if not np.isfinite(eps) or eps <= 0.0:
        raise InvalidParameterError(f"epsilon must be positive and finite, got {epsilon!r}")
    return eps


def squared_distances(x: np.ndarray, y: np.ndarray | None = None) -> np.ndarray:
    """Exact squared Euclidean distances between rows of ``x`` and ``y``.

    Accumulates coordinate by coordinate instead of using the
    ``|x|^2 + |y|^2 - 2 x.y`` expansion, which loses precision for close
    points and breaks exact symmetry.
    """
    y = x if y is None else y
    out = np.empty((x.shape[0], y.shape[0]))
    # in-place passes keep the number of n-by-n temporaries at one
    np.subtract(x[:, 0, None], y[None, :, 0], out=out)
    np.multiply(out, out, out=out)
    if x.shape[1] > 1:
        diff = np.empty_like(out)
        for m in range(1, x.shape[1]):
            np.subtract(x[:, m, None], y[None, :, m], out=diff)
            np.multiply(diff, diff, out=diff)
            out += diff
    return out


def gaussian_kernel_matrix(ensemble, epsilon: float) -> np.ndarray:
    """Gaussian kernel ``g_ij = exp(-|X^i - X^j|^2 / (4 eps))``.

    Entries below :data:`UNDERFLOW_FLOOR` are set to zero; the diagonal is
    exactly one.
    """
    ens = _as_ensemble(ensemble)
    eps = _check_epsilon(epsilon)
    g = squared_distances(ens.positions)
    g *= -1.0 / (4.0 * eps)
    np.exp(g, out=g)
    g[g < UNDERFLOW_FLOOR] = 0.0
    np.fill_diagonal(g, 1.0)
    return g


@dataclass(frozen=True, eq=False)
class DiffusionMapOperator:
    """Immutable diffusion-map Markov matrix and its stationary distribution.

    Attributes:
        epsilon: kernel bandwidth.
        g: Gaussian kernel matrix.
        k: density-normalized symmetric kernel.
        row_sums: ``d_i = sum_j k_ij``.
        T: row-stochastic Markov matrix ``k_ij / d_i``.
        pi: stationary distribution ``d_i / sum_j d_j``.
        g_row_sums: ``sum_l g_il``, reused for out-of-sample evaluation.
    """

    epsilon: float
    g: np.ndarray
    k: np.ndarray
    row_sums: np.ndarray
    T: np.ndarray
    pi: np.ndarray
    g_row_sums: np.ndarray

    @property
    def n(self) -> int:
        return self.T.shape[0]

    def apply(self, v) -> np.ndarray:
        return apply(self, v)

    def pi_mean(self, v) -> float:
        return pi_mean(self, v)


def build_operator(ensemble, epsilon: float) -> DiffusionMapOperator:
    """Assemble the diffusion-map Markov matrix for ``ensemble``.

    Raises:
        InvalidParameterError: if ``epsilon`` is not positive.
        DegenerateEnsembleError: if a kernel row sums to zero.
    """
    ens = _as_ensemble(ensemble)
    eps = _check_epsilon(epsilon)
    g = gaussian_kernel_matrix(ens, eps)
    g_row_sums = g.sum(axis=1)
    if not np.all(g_row_sums > 0.0):
        raise DegenerateEnsembleError("kernel matrix has a zero row sum")
    q = np.sqrt(g_row_sums)
    # np.outer(q, q) is exactly symmetric, so k is too.
    k = np.outer(q, q)
    np.divide(g, k, out=k)
    row_sums = k.sum(axis=1)
    if not np.all(row_sums > 0.0):
        raise DegenerateEnsembleError("normalized kernel has a zero row sum")
    T = np.divide(k, row_sums[:, None])
    pi = row_sums / row_sums.sum()
    return DiffusionMapOperator(
        epsilon=eps,
        g=_frozen(g),
        k=_frozen(k),
        row_sums=_frozen(row_sums),
        T=_frozen(T),
        pi=_frozen(pi),
        g_row_sums=_frozen(g_row_sums),
    )


def _check_vector(op: DiffusionMapOperator, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (op.n,):
        raise InvalidInputError(f"expected vector of length {op.n}, got shape {v.shape}")
    return v


def apply(op: DiffusionMapOperator, v) -> np.ndarray:
    """Return ``T @ v``."""
    return op.T @ _check_vector(op, v)


def pi_mean(op: DiffusionMapOperator, v) -> float:
    """Return the stationary average ``sum_i pi_i v_i``."""
    return float(op.pi @ _check_vector(op, v))
