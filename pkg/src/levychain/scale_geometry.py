"""Chain structure, multi-scale matrices and the time-ordered resolvent.

The state ``x in R^N`` is split into levels ``x_1, ..., x_n`` of sizes
``d_1 >= d_2 >= ... >= d_n``. The chain matrix ``A_t`` has zero blocks
below the subdiagonal and full-rank subdiagonal blocks, so noise entering
level 1 propagates down the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import integrate, linalg

from .errors import ConfigurationError, NumericalError

__all__ = [
    "ChainShape",
    "ChainMatrix",
    "ScaleMatrices",
    "scale_matrix",
    "resolvent",
    "resolvent_family",
    "resolvent_scaling_factor",
    "fit_resolvent_block_constant",
    "embedding",
]


@dataclass(frozen=True)
class ChainShape:
    """Level sizes ``(d_1, ..., d_n)`` of the chain."""

    dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not dims:
            raise ConfigurationError("dims must contain at least one level")
        if any(d < 1 for d in dims):
            raise ConfigurationError("every level size d_i must be >= 1")
        if any(b > a for a, b in zip(dims, dims[1:])):
            raise ConfigurationError("level sizes must be non-increasing: d_i <= d_{i-1}")
        object.__setattr__(self, "dims", dims)

    @property
    def n(self):
        return len(self.dims)

    @property
    def d(self):
        return self.dims[0]

    @property
    def N(self):
        return sum(self.dims)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def block(self, i):
        """Slice of level ``i`` (1-based)."""
        o = self.offsets
        return slice(int(o[i - 1]), int(o[i]))

    def level_of(self):
        """Level index (1-based) of every coordinate."""
        return np.repeat(np.arange(1, self.n + 1), self.dims)


def embedding(shape):
    """The ``N x d`` matrix ``B = (I_d, 0, ..., 0)^T``."""
    B = np.zeros((shape.N, shape.d))
    B[: shape.d, : shape.d] = np.eye(shape.d)
    return B


@dataclass(frozen=True)
class ChainMatrix:
    """Time-dependent chain matrix ``t -> A_t`` with verified structure.

    Parameters
    ----------
    shape : ChainShape
    func : callable
        ``func(t)`` returns an ``(N, N)`` array.
    bound : float
        Declared sup-norm bound over ``[0, horizon]``.
    kappa : float
        Floor for the smallest singular value of each subdiagonal block.
    horizon : float
        Right end ``T`` of the time interval.
    check_grid : int
        Number of time points where the structure is verified.
    constant : ndarray, optional
        Set when ``A`` does not depend on time; enables closed forms.
    """

    shape: ChainShape
    func: Callable
    bound: float
    kappa: float = 1e-6
    horizon: float = 1.0
    check_grid: int = 33
    constant: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        self.verify()

    @classmethod
    def from_constant(cls, shape, A, kappa=1e-6, horizon=1.0):
        A = np.array(A, dtype=float)
        A.setflags(write=False)
        bound = float(np.max(np.abs(A))) if A.size else 0.0
        return cls(shape, lambda t, _A=A: _A, bound, kappa, horizon, 2, A)

    @classmethod
    def subdiagonal_identity(cls, shape, kappa=1e-6, horizon=1.0):
        """Constant matrix with blocks ``[A]_{i,i-1} = (I_{d_i}, 0)`` and zeros elsewhere."""
        A = np.zeros((shape.N, shape.N))
        for i in range(2, shape.n + 1):
            r, c = shape.block(i), shape.block(i - 1)
            A[r, c.start : c.start + shape.dims[i - 1]] = np.eye(shape.dims[i - 1])
        return cls.from_constant(shape, A, kappa, horizon)

    @property
    def is_constant(self):
        return self.constant is not None

    def __call__(self, t):
        """Evaluate ``A_t``; array ``t`` gives a stacked ``(..., N, N)`` result."""
        if self.is_constant:
            if np.ndim(t) == 0:
                return self.constant
            return np.broadcast_to(self.constant, np.shape(t) + self.constant.shape)
        if np.ndim(t) == 0:
            return np.asarray(self.func(float(t)), dtype=float)
        t = np.asarray(t, dtype=float)
        return np.stack([np.asarray(self.func(float(u)), dtype=float) for u in t.ravel()]).reshape(
            t.shape + (self.shape.N, self.shape.N)
        )

    def verify(self):
        """Check zero blocks, subdiagonal rank and the declared bound on a grid."""
        sh = self.shape
        for t in np.linspace(0.0, self.horizon, max(self.check_grid, 2)):
            A = np.asarray(self.func(float(t)), dtype=float)
            if A.shape != (sh.N, sh.N):
                raise ConfigurationError(f"A_t must have shape ({sh.N}, {sh.N}), got {A.shape} at t={t}")
            if not np.all(np.isfinite(A)):
                raise ConfigurationError(f"A_t is not finite at t={t}")
            if np.max(np.abs(A), initial=0.0) > self.bound * (1 + 1e-12):
                raise ConfigurationError(f"A_t exceeds its declared bound {self.bound} at t={t}")
            for i in range(1, sh.n + 1):
                for j in range(1, i - 1):
                    if np.any(A[sh.block(i), sh.block(j)] != 0):
                        raise ConfigurationError(f"block [A_t]_({i},{j}) must vanish (j < i-1) at t={t}")
                if i >= 2:
                    sv = np.linalg.svd(A[sh.block(i), sh.block(i - 1)], compute_uv=False)
                    if len(sv) < sh.dims[i - 1] or sv[sh.dims[i - 1] - 1] < self.kappa:
                        raise ConfigurationError(
                            f"subdiagonal block [A_t]_({i},{i - 1}) is not of rank d_{i}={sh.dims[i - 1]} "
                            f"with singular values >= kappa={self.kappa} at t={t}"
                        )


@dataclass(frozen=True)
class ScaleMatrices:
    """Diagonals of ``M_t = diag(t^{i-1} I_{d_i})`` and ``T_t = t^{1/alpha} M_t``.

    Attributes
    ----------
    m, T : ndarray of shape (N,)
        Diagonal entries of ``M_t`` and ``T_t``.
    det_T : float
        Closed form ``t^{sum_i d_i (1 + alpha (i-1)) / alpha}``.
    """

    alpha: float
    t: float
    m: np.ndarray
    T: np.ndarray
    det_T: float

    @property
    def M_matrix(self):
        return np.diag(self.m)

    @property
    def T_matrix(self):
        return np.diag(self.T)

    @property
    def m_inv(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.m

    @property
    def T_inv(self):
        with np.errstate(divide="ignore"):
            return 1.0 / self.T

    @property
    def det_M(self):
        return float(np.prod(self.m))

    def T_inv_apply(self, x):
        """``T_t^{-1} x`` for ``x`` of shape (..., N)."""
        return np.asarray(x) * self.T_inv


def det_T_exponent(shape, alpha):
    """Exponent ``sum_i d_i (1 + alpha (i-1)) / alpha`` of ``det T_t``."""
    return sum(d * (1.0 + alpha * (i - 1)) / alpha for i, d in enumerate(shape.dims, start=1))


def scale_matrix(shape, alpha, t):
    """Evaluate the multi-scale matrices at time ``t >= 0``.

    Parameters
    ----------
    shape : ChainShape
    alpha : float
        Positive index (only the arithmetic is used here).
    t : float
    """
    if t < 0:
        raise ConfigurationError("scale matrices are defined for t >= 0")
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    powers = shape.level_of() - 1.0
    m = float(t) ** powers
    T = float(t) ** (1.0 / alpha) * m
    det_T = float(t) ** det_T_exponent(shape, alpha)
    m.setflags(write=False)
    T.setflags(write=False)
    return ScaleMatrices(float(alpha), float(t), m, T, det_T)


def _check_step(sol, what):
    if sol.status != 0:
        raise NumericalError(f"{what}: ODE solver failed ({sol.message})")


def resolvent(matrix, t, s, tol=1e-10):
    """Resolvent ``R_{s,t}`` solving ``d/ds R_{s,t} = A_s R_{s,t}``, ``R_{t,t} = I``.

    Constant matrices use the matrix exponential. Otherwise an adaptive
    Runge-Kutta 4(5) pair runs with absolute and relative tolerance
    ``tol / 10``. Both time orders are accepted (``s < t`` propagates
    backward).
    """
    N = matrix.shape.N
    if s == t:
        return np.eye(N)
    if matrix.is_constant:
        return linalg.expm((s - t) * matrix.constant)

    def rhs(u, y):
        return (matrix(u) @ y.reshape(N, N)).ravel()

    sol = integrate.solve_ivp(rhs, (t, s), np.eye(N).ravel(), method="RK45", rtol=tol / 10, atol=tol / 10)
    _check_step(sol, "resolvent")
    return sol.y[:, -1].reshape(N, N)


def resolvent_family(matrix, s, us, tol=1e-10):
    """``R_{s,u}`` for every ``u`` in ``us`` (all on one side of ``s``).

    Solves ``d/du R_{s,u} = -R_{s,u} A_u`` from ``u = s``.

    Returns
    -------
    ndarray of shape (len(us), N, N)
    """
    us = np.asarray(us, dtype=float)
    N = matrix.shape.N
    if matrix.is_constant:
        A = matrix.constant
        return np.stack([linalg.expm((s - u) * A) for u in us])
    order = np.argsort(np.abs(us - s))
    targets = us[order]
    out = np.empty((len(us), N, N))
    nz = targets != s
    out[order[~nz]] = np.eye(N)
    if np.any(nz):
        end = targets[nz][-1]

        def rhs(u, y):
            return (-(y.reshape(N, N) @ matrix(u))).ravel()

        sol = integrate.solve_ivp(rhs, (s, end), np.eye(N).ravel(), method="RK45", rtol=tol / 10, atol=tol / 10,
                                  t_eval=targets[nz])
        _check_step(sol, "resolvent_family")
        out[order[nz]] = sol.y.T.reshape(-1, N, N)
    return out


def resolvent_scaling_factor(matrix, t, s, v, tol=1e-10):
    """``T_{s-t}^{-1} R_{t+v(s-t), s} T_{s-t}`` for ``v`` in ``[0, 1]``.

    The scalar factor ``(s-t)^{1/alpha}`` cancels in the conjugation, so
    only ``M_{s-t}`` enters and no ``alpha`` is needed.
    """
    if not 0.0 <= v <= 1.0:
        raise ConfigurationError("v must lie in [0, 1]")
    if not s > t:
        raise ConfigurationError("resolvent_scaling_factor requires t < s")
    h = s - t
    u = t + v * h
    R = resolvent(matrix, s, u, tol)
    m = h ** (matrix.shape.level_of() - 1.0)
    return R * m[None, :] / m[:, None]


def fit_resolvent_block_constant(matrix, t, s, n_grid=17, tol=1e-10):
    """Smallest ``C`` with ``|(R_{t,u})_{ij}| <= C (1_{j>=i} + (s-t)^{i-j} 1_{i>j})`` on a ``u`` grid."""
    sh = matrix.shape
    lev = sh.level_of()
    h = s - t
    gap = lev[:, None] - lev[None, :]
    scale = np.where(gap > 0, h ** np.maximum(gap, 0), 1.0)
    C = 0.0
    for u in np.linspace(t, s, n_grid):
        R = resolvent(matrix, u, t, tol)
        C = max(C, float(np.max(np.abs(R) / scale)))
    return C
