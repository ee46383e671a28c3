"""Deterministic flows of the chain drift and the lemmas built on them.

Flows solve ``d/dt theta = G(t, theta) = A_t theta + F(t, theta)``. With a
Holder drift the solution need not be unique; the fixed-step RK4 scheme
below (fixed evaluation order, ``sgn(0) = 0``) picks one solution
deterministically, which is the flow version used everywhere else.

All solvers accept batches: ``xi`` of shape ``(B, N)`` and start/end times
of shape ``(B,)``. Integration runs on a common grid in normalized time
``v in [0, 1]`` with ``u = t0 + v (t1 - t0)``, so a batch costs one loop.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate, interpolate

from .errors import ConfigurationError, DivergenceError, NumericalError
from .scale_geometry import ChainShape, resolvent, scale_matrix

__all__ = [
    "DriftSpec",
    "zero_drift",
    "peano_drift",
    "term_drift",
    "FlowSolution",
    "solve_flow",
    "frozen_shift",
    "mollification_radii",
    "MollifiedDrift",
    "mollify_drift",
    "flow_jacobian_det",
    "approximate_lipschitz_diagnostic",
    "bilip_sweep",
    "identification_defects",
    "mollified_flow_gap",
    "control_error_ratio",
]

STATE_BOUND = 1e12


# ---------------------------------------------------------------------------
# Drift specification


@dataclass(frozen=True)
class DriftSpec:
    """Nonlinear drift ``F`` of the chain.

    Parameters
    ----------
    shape : ChainShape
    func : callable
        ``func(t, x)`` with ``x`` of shape ``(..., N)`` and ``t`` a scalar or
        an array broadcastable to ``x.shape[:-1]``; returns ``(..., N)``.
    holder : tuple of float
        Holder exponent ``beta^j`` in the variables of level ``j``.
    bound : float
        ``K`` with ``|F_i(t, 0)| <= K``.
    depends : ndarray of bool, shape (n, n), optional
        ``depends[i-1, j-1]`` states that ``F_i`` uses level ``j``. Defaults
        to the full upper triangle. Must be upper triangular.
    jacobian : callable, optional
        ``jacobian(t, x)`` returning ``(..., N, N)``.
    name : str
    """

    shape: ChainShape
    func: Callable
    holder: tuple
    bound: float = np.inf
    depends: Optional[np.ndarray] = None
    jacobian: Optional[Callable] = None
    name: str = "custom"

    def __post_init__(self):
        n = self.shape.n
        h = tuple(float(b) for b in self.holder)
        if len(h) != n:
            raise ConfigurationError(f"holder must list one exponent per level ({n})")
        if any(not 0.0 < b <= 1.0 for b in h):
            raise ConfigurationError("Holder exponents must lie in (0, 1]")
        object.__setattr__(self, "holder", h)
        dep = np.triu(np.ones((n, n), dtype=bool)) if self.depends is None else np.asarray(self.depends, bool)
        if dep.shape != (n, n):
            raise ConfigurationError("depends must be an (n, n) boolean matrix")
        if np.any(np.tril(dep, -1)):
            raise ConfigurationError("F_i may depend only on levels j >= i")
        dep.setflags(write=False)
        object.__setattr__(self, "depends", dep)

    def __call__(self, t, x):
        return np.asarray(self.func(t, np.asarray(x, dtype=float)), dtype=float)

    def check_dependency(self, rng=None, n_probe=16, step=1e-3, floor=1e-12):
        """Probe that ``F_i`` ignores the levels ``j < i`` and undeclared ones."""
        rng = np.random.default_rng(0) if rng is None else rng
        sh = self.shape
        x = rng.standard_normal((n_probe, sh.N))
        t = rng.random(n_probe)
        base = self(t, x)
        for j in range(1, sh.n + 1):
            xp = x.copy()
            xp[:, sh.block(j)] += step * rng.standard_normal((n_probe, sh.dims[j - 1]))
            diff = np.abs(self(t, xp) - base)
            for i in range(1, sh.n + 1):
                if not self.depends[i - 1, j - 1] and diff[:, sh.block(i)].max() > floor:
                    raise ConfigurationError(
                        f"drift level {i} responds to level {j}, which it must not depend on"
                    )

    def check_wellposed(self, alpha):
        """Raise unless ``beta^j > (1 + alpha (j-2)) / (1 + alpha (j-1))`` for ``j >= 2``."""
        for j in range(2, self.shape.n + 1):
            thr = (1.0 + alpha * (j - 2)) / (1.0 + alpha * (j - 1))
            if not self.holder[j - 1] > thr:
                raise ConfigurationError(
                    f"level {j}: Holder exponent {self.holder[j - 1]} is not above the threshold {thr:.6g}"
                )


def zero_drift(shape):
    """``F = 0``."""
    n = shape.n
    return DriftSpec(shape, lambda t, x: np.zeros(np.shape(x)), (1.0,) * n, 0.0,
                     np.zeros((n, n), bool), lambda t, x: np.zeros(np.shape(x) + (shape.N,)), "zero")


def _spow(x, beta):
    return np.sign(x) * np.abs(x) ** beta


def term_drift(shape, terms, name="terms"):
    """Drift built from scalar terms added to single coordinates.

    Each term is a mapping with keys

    ``kind``
        ``"power"`` for ``amplitude * sgn(x) |x|^beta`` or ``"sine"`` for
        ``amplitude * sin(frequency * x)``.
    ``level``, ``component``
        Target coordinate (1-based level, 0-based index inside the level).
    ``var_level``, ``var_component``
        Source coordinate; ``var_level >= level``.
    ``beta``, ``amplitude``, ``frequency``
        Term parameters.
    """
    n = shape.n
    holder = np.ones(n)
    depends = np.zeros((n, n), bool)
    parsed = []
    for term in terms:
        kind = term.get("kind", "power")
        lvl, var = int(term["level"]), int(term["var_level"])
        if not 1 <= lvl <= var <= n:
            raise ConfigurationError(f"drift term must satisfy 1 <= level <= var_level <= n, got {lvl}, {var}")
        tgt = shape.block(lvl).start + int(term.get("component", 0))
        src = shape.block(var).start + int(term.get("var_component", 0))
        amp = float(term.get("amplitude", 1.0))
        if kind == "power":
            beta = float(term["beta"])
            if not 0.0 < beta <= 1.0:
                raise ConfigurationError("power term: beta must lie in (0, 1]")
            holder[var - 1] = min(holder[var - 1], beta)
            parsed.append(("power", tgt, src, amp, beta))
        elif kind == "sine":
            parsed.append(("sine", tgt, src, amp, float(term.get("frequency", 1.0))))
        else:
            raise ConfigurationError(f"unknown drift term kind {kind!r}")
        depends[lvl - 1, var - 1] = True

    def func(t, x):
        out = np.zeros(np.shape(x))
        for kind, tgt, src, amp, par in parsed:
            xs = x[..., src]
            out[..., tgt] += amp * (_spow(xs, par) if kind == "power" else np.sin(par * xs))
        return out

    def jac(t, x):
        out = np.zeros(np.shape(x) + (shape.N,))
        for kind, tgt, src, amp, par in parsed:
            xs = x[..., src]
            if kind == "power":
                with np.errstate(divide="ignore"):
                    out[..., tgt, src] += amp * par * np.abs(xs) ** (par - 1.0)
            else:
                out[..., tgt, src] += amp * par * np.cos(par * xs)
        return out

    return DriftSpec(shape, func, tuple(holder), 0.0, depends, jac, name)


def peano_drift(shape, i, j, beta, amplitude=1.0):
    """Counter-example drift ``e_i sgn(x_j)|x_j|^beta`` (first coordinate of each level)."""
    return term_drift(shape, [dict(kind="power", level=i, var_level=j, beta=beta, amplitude=amplitude)],
                      name=f"peano(i={i},j={j},beta={beta})")


# ---------------------------------------------------------------------------
# Batched RK4 in normalized time


def _as_batch(t0, t1, y0):
    y0 = np.asarray(y0, dtype=float)
    single = y0.ndim == 1
    y0 = np.atleast_2d(y0)
    B = y0.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=float), (B,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=float), (B,)).copy()
    return t0, t1, y0, single


def _rk4(rhs, t0, t1, y0, n_steps, record=False):
    """Classical RK4 from ``t0`` to ``t1`` (arrays of shape (B,)) in ``n_steps`` equal steps."""
    h = (t1 - t0) / n_steps
    y = y0.copy()
    hh = h[:, None]
    path = [y.copy()] if record else None
    slopes = [] if record else None
    for k in range(n_steps):
        u = t0 + k * h
        k1 = rhs(u, y)
        k2 = rhs(u + 0.5 * h, y + 0.5 * hh * k1)
        k3 = rhs(u + 0.5 * h, y + 0.5 * hh * k2)
        k4 = rhs(u + h, y + hh * k3)
        y = y + hh / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.abs(y) < STATE_BOUND):
            bad = int(np.argmax(~np.all(np.abs(y) < STATE_BOUND, axis=1)))
            raise DivergenceError(f"flow left the state bound {STATE_BOUND:g}", path_id=bad)
        if record:
            slopes.append(k1)
            path.append(y.copy())
    if record:
        slopes.append(rhs(t1, y))
        return y, np.stack(path, axis=1), np.stack(slopes, axis=1)
    return y


def _drift_rhs(drift, matrix):
    def rhs(u, y):
        return np.einsum("bij,bj->bi", matrix(u), y) if not matrix.is_constant else y @ matrix.constant.T

    def full(u, y):
        return rhs(u, y) + drift(u, y)

    return full


def _converge(run, n0, tol, max_steps):
    """Double the step count until two runs agree within ``tol``."""
    n = n0
    prev = run(n)
    while True:
        cur = run(2 * n)
        err = float(np.max(np.abs(_key(cur) - _key(prev))))
        n *= 2
        if err <= tol or 2 * n > max_steps:
            return cur, err, n
        prev = cur


def _key(res):
    return res[0] if isinstance(res, tuple) else res


@dataclass
class FlowSolution:
    """A computed flow ``u -> theta_{u,tau}(xi)``.

    Attributes
    ----------
    times : ndarray of shape (B, K+1)
        Grid from ``tau`` to the target time per batch member.
    values : ndarray of shape (B, K+1, N)
    slopes : ndarray of shape (B, K+1, N)
        ``G`` at the grid points, used for Hermite interpolation.
    direction : {"forward", "backward"}
    n_steps : int
    error_estimate : float
        Difference between the last two step-count refinements.
    method : str
    """

    times: np.ndarray
    values: np.ndarray
    slopes: np.ndarray
    direction: str
    n_steps: int
    error_estimate: float
    method: str = "rk4"
    single: bool = False

    @property
    def end(self):
        e = self.values[:, -1]
        return e[0] if self.single else e

    def at(self, u):
        """Cubic Hermite interpolation at times ``u`` (shape (B,) or scalar)."""
        B = self.values.shape[0]
        u = np.broadcast_to(np.asarray(u, dtype=float), (B,))
        out = np.empty((B, self.values.shape[2]))
        for b in range(B):
            tt = self.times[b]
            if tt[0] == tt[-1]:
                out[b] = self.values[b, 0]
                continue
            order = np.argsort(tt)
            sp = interpolate.CubicHermiteSpline(tt[order], self.values[b, order], self.slopes[b, order])
            out[b] = sp(u[b])
        return out[0] if self.single else out


def solve_flow(drift, matrix, tau, xi, t_end, tol=1e-8, n_steps=None, method="rk4", max_steps=2**15):
    """Flow ``theta_{t_end, tau}(xi)`` with the recorded trajectory.

    Parameters
    ----------
    drift : DriftSpec or MollifiedDrift
    matrix : ChainMatrix
    tau, t_end : float or ndarray of shape (B,)
    xi : ndarray of shape (N,) or (B, N)
    tol : float
        Target for the step-doubling error estimate (``rk4``) or the
        solver tolerance (``adaptive``).
    n_steps : int, optional
        Fixed RK4 step count; disables step doubling.
    method : {"rk4", "adaptive"}
        ``adaptive`` is an independent selection (RK45 with dense output),
        used as a second flow in the approximate Lipschitz diagnostic.
    """
    t0, t1, y0, single = _as_batch(tau, t_end, xi)
    direction = "forward" if np.all(t1 >= t0) else "backward"
    rhs = _drift_rhs(drift, matrix)
    if method == "adaptive":
        vals = []
        for b in range(len(t0)):
            if t0[b] == t1[b]:
                vals.append(y0[b])
                continue
            f = lambda u, y: rhs(np.array([u]), y[None])[0]  # noqa: E731
            sol = integrate.solve_ivp(f, (t0[b], t1[b]), y0[b], method="RK45", rtol=tol, atol=tol)
            if sol.status != 0:
                raise NumericalError(f"adaptive flow failed: {sol.message}")
            vals.append(sol.y[:, -1])
        end = np.stack(vals)
        times = np.stack([t0, t1], axis=1)
        path = np.stack([y0, end], axis=1)
        return FlowSolution(times, path, np.stack([rhs(t0, y0), rhs(t1, end)], axis=1), direction, 0, tol,
                            "adaptive", single)
    if method != "rk4":
        raise ConfigurationError(f"unknown flow method {method!r}")
    run = lambda n: _rk4(rhs, t0, t1, y0, n, record=True)  # noqa: E731
    if n_steps is not None:
        res, err, n = run(int(n_steps)), np.nan, int(n_steps)
    else:
        res, err, n = _converge(run, 16, tol, max_steps)
    _, path, slopes = res
    grid = np.linspace(0.0, 1.0, n + 1)
    times = t0[:, None] + grid[None, :] * (t1 - t0)[:, None]
    times[:, 0] = t0
    times[:, -1] = t1
    path[:, 0] = y0
    return FlowSolution(times, path, slopes, direction, n, err, "rk4", single)


# ---------------------------------------------------------------------------
# Frozen shift


def _forward_joint(drift, matrix, t, s, theta_t, x, n):
    """RK4 for ``(theta, m)`` from ``t`` to ``s``: ``m' = A m + F(theta)``."""
    N = matrix.shape.N
    A = _linear(matrix)

    def rhs(u, y):
        th, m = y[:, :N], y[:, N:]
        Fv = drift(u, th)
        return np.concatenate([A(u, th) + Fv, A(u, m) + Fv], axis=1)

    y = _rk4(rhs, t, s, np.concatenate([theta_t, x], axis=1), n)
    return y[:, N:]


def _backward_joint(drift, matrix, s, t, theta_s, n):
    """RK4 for ``(theta, R_{s,.}, K)`` from ``s`` back to ``t``.

    ``d/du R_{s,u} = -R_{s,u} A_u`` and ``d/du K = -R_{s,u} F(u, theta_u)``,
    so that ``m_{s,t}(x) = R_{s,t} x + K(t)``.
    """
    N = matrix.shape.N
    B = theta_s.shape[0]

    def rhs(u, y):
        th = y[:, :N]
        R = y[:, N : N + N * N].reshape(B, N, N)
        Au = matrix(u) if not matrix.is_constant else matrix.constant
        Fv = drift(u, th)
        if matrix.is_constant:
            dth = th @ Au.T + Fv
            dR = -(R @ Au)
        else:
            dth = np.einsum("bij,bj->bi", Au, th) + Fv
            dR = -np.einsum("bij,bjk->bik", R, Au)
        dK = -np.einsum("bij,bj->bi", R, Fv)
        return np.concatenate([dth, dR.reshape(B, -1), dK], axis=1)

    y0 = np.concatenate([theta_s, np.tile(np.eye(N).ravel(), (B, 1)), np.zeros((B, N))], axis=1)
    y = _rk4(rhs, s, t, y0, n)
    return y[:, N : N + N * N].reshape(B, N, N), y[:, N + N * N :]


def _linear(matrix):
    if matrix.is_constant:
        A = matrix.constant
        return lambda u, v: v @ A.T
    return lambda u, v: np.einsum("bij,bj->bi", matrix(u), v)


def frozen_shift(drift, matrix, tau, xi, t, s, x, tol=1e-8, n_steps=None, max_steps=2**15, return_error=False):
    """Frozen shift ``m_{s,t}^{tau,xi}(x) = R_{s,t} x + int_t^s R_{s,u} F(u, theta_{u,tau}(xi)) du``.

    The shift is integrated jointly with the flow, so the flow values used
    inside the integral are exactly the RK4 stages of the selected flow.
    Batched over the leading axis of ``xi``/``x`` and the time arrays.
    """
    xi_arr = np.atleast_2d(np.asarray(xi, dtype=float))
    x_arr = np.atleast_2d(np.asarray(x, dtype=float))
    B = max(xi_arr.shape[0], x_arr.shape[0], np.size(t), np.size(s), np.size(tau))
    single = np.ndim(x) == 1 and np.ndim(xi) == 1 and all(np.ndim(v) == 0 for v in (t, s, tau))
    xi_arr = np.broadcast_to(xi_arr, (B, xi_arr.shape[1])).copy()
    x_arr = np.broadcast_to(x_arr, (B, x_arr.shape[1])).copy()
    t = np.broadcast_to(np.asarray(t, float), (B,)).copy()
    s = np.broadcast_to(np.asarray(s, float), (B,)).copy()
    tau = np.broadcast_to(np.asarray(tau, float), (B,)).copy()
    if np.any(t > s):
        raise ConfigurationError("frozen_shift requires t <= s")

    def run(n):
        out = np.empty_like(x_arr)
        fwd = tau <= t
        bwd = tau >= s
        mid = ~(fwd | bwd)
        if np.any(fwd):
            th_t = _rk4(_drift_rhs(drift, matrix), tau[fwd], t[fwd], xi_arr[fwd], n)
            out[fwd] = _forward_joint(drift, matrix, t[fwd], s[fwd], th_t, x_arr[fwd], n)
        if np.any(bwd):
            th_s = _rk4(_drift_rhs(drift, matrix), tau[bwd], s[bwd], xi_arr[bwd], n)
            R, K = _backward_joint(drift, matrix, s[bwd], t[bwd], th_s, n)
            out[bwd] = np.einsum("bij,bj->bi", R, x_arr[bwd]) + K
        if np.any(mid):
            R, K = _backward_joint(drift, matrix, tau[mid], t[mid], xi_arr[mid], n)
            y1 = np.einsum("bij,bj->bi", R, x_arr[mid]) + K
            out[mid] = _forward_joint(drift, matrix, tau[mid], s[mid], xi_arr[mid], y1, n)
        return out

    if n_steps is not None:
        m, err = run(int(n_steps)), np.nan
    else:
        m, err, _ = _converge(run, 16, tol, max_steps)
    m = m[0] if single else m
    return (m, err) if return_error else m


# ---------------------------------------------------------------------------
# Mollification


def mollification_radii(shape, alpha, holder, s_minus_t, schedule="flow-lemma", C_bar=10.0, C_1=100.0):
    """Radii ``delta_{ij}`` (rows: drift level ``i``, columns: variable level ``j``).

    ``flow-lemma``: ``delta_ij = h^{(1 + alpha (i-2)) / (alpha beta^j)}`` for
    ``2 <= i <= j``; level 1 is left unsmoothed.
    ``determinant-lemma``: ``delta_ij = C_bar h^{(1 + alpha (j-2)) / (alpha beta^j)}``
    for ``2 <= i <= j`` and ``delta_1j = C_1``.
    """
    n = shape.n
    h = float(s_minus_t)
    if not h > 0:
        raise ConfigurationError("s - t must be positive")
    R = np.zeros((n, n))
    for i in range(2, n + 1):
        for j in range(i, n + 1):
            b = holder[j - 1]
            if schedule == "flow-lemma":
                R[i - 1, j - 1] = h ** ((1.0 + alpha * (i - 2)) / (alpha * b))
            elif schedule == "determinant-lemma":
                R[i - 1, j - 1] = C_bar * h ** ((1.0 + alpha * (j - 2)) / (alpha * b))
            else:
                raise ConfigurationError(f"unknown mollification schedule {schedule!r}")
    if schedule == "determinant-lemma":
        R[0, :] = C_1
    upper = np.triu(np.ones((n, n), bool))
    upper[0, :] = schedule == "determinant-lemma"
    if np.any(R[upper] < 1e-280):
        raise NumericalError("mollification radius underflows; reduce the time gap range")
    return R


def _kernel_nodes(n_nodes, cut=6.0, panels=8):
    x, w = np.polynomial.legendre.leggauss(n_nodes // panels)
    edges = np.linspace(-cut, cut, panels + 1)
    nodes = np.concatenate([0.5 * (b - a) * x + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    weights = np.concatenate([0.5 * (b - a) * w for a, b in zip(edges[:-1], edges[1:])])
    weights = weights * np.exp(-0.5 * nodes**2)
    return nodes, weights / weights.sum()


@dataclass(frozen=True)
class MollifiedDrift:
    """Multi-scale Gaussian mollification of a drift.

    Level ``i`` is averaged as ``E F_i(t, x - delta_i . omega)`` with
    independent standard Gaussians (truncated at 6) on each coordinate of
    every level ``j`` it depends on, scaled by ``delta_ij``. The expectation
    is a tensor Gauss-Legendre rule.
    """

    base: DriftSpec
    radii: np.ndarray
    schedule: str
    n_nodes: int = 96

    @property
    def shape(self):
        return self.base.shape

    def _rules(self, i):
        """Offsets ``(Q, N)`` and weights for drift level ``i`` (1-based)."""
        sh = self.shape
        nodes, w = _kernel_nodes(self.n_nodes)
        cols, scales = [], []
        for j in range(i, sh.n + 1):
            r = self.radii[i - 1, j - 1]
            if self.base.depends[i - 1, j - 1] and r > 0:
                for c in range(sh.block(j).start, sh.block(j).stop):
                    cols.append(c)
                    scales.append(r)
        if not cols:
            return None
        grids = np.meshgrid(*([nodes] * len(cols)), indexing="ij")
        wgrid = np.ones_like(grids[0])
        for g in np.meshgrid(*([w] * len(cols)), indexing="ij"):
            wgrid = wgrid * g
        off = np.zeros((grids[0].size, sh.N))
        omega = np.zeros((grids[0].size, sh.N))
        for k, (c, r) in enumerate(zip(cols, scales)):
            off[:, c] = -r * grids[k].ravel()
            # d/dx E f(x - r w) = -E[f(x - r w) w] / r
            omega[:, c] = -grids[k].ravel() / r
        return off, wgrid.ravel(), omega

    def _cache(self):
        c = self.__dict__.get("_rule_cache")
        if c is None:
            c = {i: self._rules(i) for i in range(1, self.shape.n + 1)}
            object.__setattr__(self, "_rule_cache", c)
        return c

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        sh = self.shape
        out = np.empty(x.shape)
        base = None
        for i in range(1, sh.n + 1):
            rule = self._cache()[i]
            blk = sh.block(i)
            if rule is None:
                if base is None:
                    base = self.base(t, x)
                out[..., blk] = base[..., blk]
                continue
            off, w, _ = rule
            pts = x[..., None, :] + off
            tt = np.asarray(t, dtype=float)[..., None] if np.ndim(t) else t
            vals = self.base(tt, pts)[..., blk]
            out[..., blk] = np.einsum("...qk,q->...k", vals, w)
        return out

    def jacobian(self, t, x, fd_step=1e-6):
        """``D_x F^delta`` by the Gaussian integration-by-parts identity.

        Variables left unsmoothed fall back to the base Jacobian, or to
        central differences when none is supplied.
        """
        x = np.asarray(x, dtype=float)
        sh = self.shape
        J = np.zeros(x.shape + (sh.N,))
        lev = sh.level_of()
        for i in range(1, sh.n + 1):
            rule = self._cache()[i]
            blk = sh.block(i)
            smoothed = np.zeros(sh.N, bool)
            if rule is not None:
                off, w, omega = rule
                smoothed = np.any(omega != 0, axis=0)
                pts = x[..., None, :] + off
                tt = np.asarray(t, dtype=float)[..., None] if np.ndim(t) else t
                vals = self.base(tt, pts)[..., blk]
                J[..., blk, :] = np.einsum("...qk,q,qc->...kc", vals, w, omega)
            rest = np.array([self.base.depends[i - 1, lev[c] - 1] and not smoothed[c] for c in range(sh.N)])
            if np.any(rest):
                if self.base.jacobian is not None:
                    Jb = self.base.jacobian(t, x)
                    J[..., blk, rest] = Jb[..., blk, :][..., rest]
                else:
                    for c in np.flatnonzero(rest):
                        e = np.zeros(sh.N)
                        e[c] = fd_step * (1.0 + np.abs(x[..., c]).max())
                        J[..., blk, c] = (self(t, x + e)[..., blk] - self(t, x - e)[..., blk]) / (2 * e[c])
        return J


def mollify_drift(drift, alpha, s_minus_t, schedule="flow-lemma", C_bar=10.0, C_1=100.0, n_nodes=96):
    """Mollify ``drift`` with the radii of the given schedule at gap ``s - t``."""
    R = mollification_radii(drift.shape, alpha, drift.holder, s_minus_t, schedule, C_bar, C_1)
    R.setflags(write=False)
    return MollifiedDrift(drift, R, schedule, n_nodes)


# ---------------------------------------------------------------------------
# Jacobian of the mollified flow


def flow_jacobian_det(mdrift, matrix, t, s, y, n_steps=None, tol=1e-8, max_steps=2**13):
    """Determinant of ``D_y theta^delta_{t,s}(y)`` from the variational equation.

    Integrates ``(theta, J, l)`` backward from ``s`` to ``t`` with
    ``J' = (A + D F^delta) J``, ``J_s = I`` and ``l' = tr(A + D F^delta)``.

    Returns
    -------
    det : ndarray of shape (B,) or float
        ``det J_{t,s}``.
    liouville : ndarray of shape (B,) or float
        ``exp(-int_t^s tr(A + D F^delta))``, the Liouville oracle.
    """
    if mdrift.schedule != "determinant-lemma":
        raise ConfigurationError("flow_jacobian_det expects the determinant-lemma schedule")
    s_b, t_b, y0, single = _as_batch(s, t, y)
    N = matrix.shape.N
    B = y0.shape[0]
    lin = _linear(matrix)

    def rhs(u, z):
        th = z[:, :N]
        J = z[:, N : N + N * N].reshape(B, N, N)
        Au = np.broadcast_to(matrix.constant, (B, N, N)) if matrix.is_constant else matrix(u)
        Mt = Au + mdrift.jacobian(u, th)
        dth = lin(u, th) + mdrift(u, th)
        dJ = np.einsum("bij,bjk->bik", Mt, J)
        dl = np.trace(Mt, axis1=1, axis2=2)
        return np.concatenate([dth, dJ.reshape(B, -1), dl[:, None]], axis=1)

    z0 = np.concatenate([y0, np.tile(np.eye(N).ravel(), (B, 1)), np.zeros((B, 1))], axis=1)
    run = lambda n: _rk4(rhs, s_b, t_b, z0, n)  # noqa: E731
    if n_steps is not None:
        z = run(int(n_steps))
    else:
        z, _, _ = _converge(run, 16, tol, max_steps)
    det = np.linalg.det(z[:, N : N + N * N].reshape(B, N, N))
    liou = np.exp(z[:, -1])
    return (det[0], liou[0]) if single else (det, liou)


# ---------------------------------------------------------------------------
# Diagnostics


def _point_hash(x):
    return hashlib.sha1(np.ascontiguousarray(np.asarray(x, dtype="<f8")).tobytes()).hexdigest()[:12]


def approximate_lipschitz_diagnostic(drift, matrix, alpha, t, s, x, y, tol=1e-8):
    """Both sides of the approximate Lipschitz comparison of two flows.

    Returns
    -------
    dict
        ``lhs = |T^{-1}_{s-t}(x - theta_{t,s}(y))|`` (RK4 backward flow) and
        ``rhs = |T^{-1}_{s-t}(theta_check_{s,t}(x) - y)|`` (adaptive forward
        flow, an independent selection). Batched inputs give arrays.
    """
    if not np.all(np.asarray(t) < np.asarray(s)):
        raise ConfigurationError("approximate_lipschitz_diagnostic requires t < s")
    back = solve_flow(drift, matrix, s, y, t, tol=tol).end
    fwd = solve_flow(drift, matrix, t, x, s, tol=tol, method="adaptive").end
    h = np.asarray(s, float) - np.asarray(t, float)
    lev = matrix.shape.level_of() - 1.0
    Tinv = 1.0 / (np.asarray(h)[..., None] ** (1.0 / alpha + lev))
    lhs = np.linalg.norm((np.asarray(x) - back) * Tinv, axis=-1)
    rhs = np.linalg.norm((fwd - np.asarray(y)) * Tinv, axis=-1)
    return {"lhs": lhs, "rhs": rhs}


def fit_bilip_constants(lhs, rhs):
    """Smallest ``C >= 1`` with ``lhs <= C (rhs + 1)`` and then ``C' >= 0`` with ``rhs / C - C' <= lhs``."""
    lhs, rhs = np.asarray(lhs), np.asarray(rhs)
    C = max(1.0, float(np.max(lhs / (rhs + 1.0))))
    Cp = max(0.0, float(np.max(rhs / C - lhs)))
    return C, Cp


def bilip_sweep(drift, matrix, alpha, gaps, n_pairs, rng, t0=0.0, scale=1.0, tol=1e-8):
    """Approximate Lipschitz diagnostic over random pairs for each time gap.

    Returns
    -------
    rows : list of dict
        One row per pair: ``t, s, x_hash, y_hash, lhs, rhs, C, C_prime, pass``.
    fitted : dict
        Gap to ``(C, C')``.
    """
    N = matrix.shape.N
    rows, fitted = [], {}
    for h in gaps:
        x = scale * rng.standard_normal((n_pairs, N))
        y = scale * rng.standard_normal((n_pairs, N))
        t = np.full(n_pairs, t0)
        s = t + h
        rep = approximate_lipschitz_diagnostic(drift, matrix, alpha, t, s, x, y, tol)
        C, Cp = fit_bilip_constants(rep["lhs"], rep["rhs"])
        fitted[h] = (C, Cp)
        for k in range(n_pairs):
            ok = rep["rhs"][k] / C - Cp <= rep["lhs"][k] * (1 + 1e-12) + 1e-12 and rep["lhs"][k] <= C * (
                rep["rhs"][k] + 1.0
            ) * (1 + 1e-12)
            rows.append(dict(t=float(t[k]), s=float(s[k]), x_hash=_point_hash(x[k]), y_hash=_point_hash(y[k]),
                             lhs=float(rep["lhs"][k]), rhs=float(rep["rhs"][k]), C=C, C_prime=Cp, passed=bool(ok)))
    return rows, fitted


def identification_defects(drift, matrix, t, s, x, y, tol=1e-8):
    """Defects of the two identification identities.

    Returns
    -------
    dict with arrays
        ``forward``: ``|m^{t,x}_{s,t}(x) - theta_{s,t}(x)|``;
        ``backward``: ``|y - m^{s,y}_{s,t}(x) - R_{s,t}(theta_{t,s}(y) - x)|``;
        ``literal``: ``|y - m^{s,y}_{s,t}(x) - (theta_{t,s}(y) - x)|``, which
        matches the corrected form only when ``A = 0``;
        ``tolerance``: the combined solver error estimate.
    """
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    t = np.atleast_1d(np.asarray(t, float))
    s = np.atleast_1d(np.asarray(s, float))
    fl_fwd = solve_flow(drift, matrix, t, x, s, tol=tol)
    m1, e1 = frozen_shift(drift, matrix, t, x, t, s, x, tol=tol, return_error=True)
    fl_bwd = solve_flow(drift, matrix, s, y, t, tol=tol)
    m2, e2 = frozen_shift(drift, matrix, s, y, t, s, x, tol=tol, return_error=True)
    R = np.stack([resolvent(matrix, tb, sb) for tb, sb in zip(t, s)])
    th_back = fl_bwd.end
    d_fwd = np.linalg.norm(m1 - fl_fwd.end, axis=1)
    corr = np.einsum("bij,bj->bi", R, th_back - x)
    d_bwd = np.linalg.norm(y - m2 - corr, axis=1)
    d_lit = np.linalg.norm(y - m2 - (th_back - x), axis=1)
    tolerance = max(tol, fl_fwd.error_estimate, fl_bwd.error_estimate, e1, e2)
    return {"forward": d_fwd, "backward": d_bwd, "literal": d_lit, "tolerance": tolerance}


def mollified_flow_gap(drift, matrix, alpha, t, s, y, C_bar=10.0, C_1=100.0, tol=1e-8, n_nodes=96):
    """``|T^{-1}_{s-t}(theta_{t,s}(y) - theta^delta_{t,s}(y))|`` with the flow-lemma radii."""
    h = float(s - t)
    md = mollify_drift(drift, alpha, h, "flow-lemma", C_bar, C_1, n_nodes)
    a = solve_flow(drift, matrix, s, y, t, tol=tol).end
    b = solve_flow(md, matrix, s, y, t, tol=tol).end
    sc = scale_matrix(drift.shape, alpha, h)
    return np.linalg.norm((a - b) * sc.T_inv, axis=-1)


def control_error_ratio(drift, matrix, alpha, t, s, x, y, tol=1e-8):
    """``|T^{-1}(theta_{s,t}(x) - m^{s,y}_{s,t}(x))| / (1 + |T^{-1}(theta_{s,t}(x) - y)|)``."""
    h = np.asarray(s, float) - np.asarray(t, float)
    th = solve_flow(drift, matrix, t, x, s, tol=tol).end
    m = frozen_shift(drift, matrix, s, y, t, s, x, tol=tol)
    lev = matrix.shape.level_of() - 1.0
    Tinv = 1.0 / (np.asarray(h)[..., None] ** (1.0 / alpha + lev))
    num = np.linalg.norm((th - m) * Tinv, axis=-1)
    den = 1.0 + np.linalg.norm((th - np.asarray(y)) * Tinv, axis=-1)
    return num / den
