"""Density of the frozen proxy by Fourier inversion of its Levy symbol.

The proxy started at ``x`` at time ``t`` is Gaussian-free and infinitely
divisible at time ``s``:

    X_s = m(x) + int_t^s R_{s,u} B sigma_u dZ_u.

All inversions run in the normalized frame ``w = T_h^{-1}(y - m)`` with
``h = s - t``, where the law of ``w`` has log-characteristic function

    psi(eta) = h int_0^1 Phi(h^{-1/alpha} P_v^T eta) dv,
    P_v = M_h^{-1} R_{s,t+vh} B sigma_{t+vh}.

For stable noise and constant coefficients ``psi`` does not depend on
``h``, which is the anisotropic self-similarity checked by
:func:`verify_scaling`.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import fft as sfft

from .errors import ConfigurationError, NumericalError
from .flows import frozen_shift, solve_flow, zero_drift
from .levy_noise import BaseSymbol
from .scale_geometry import embedding, resolvent, resolvent_family, scale_matrix

__all__ = [
    "diffusion_callback",
    "FrozenSymbolContext",
    "frozen_symbol",
    "fit_symbol_coercivity",
    "InversionGrid",
    "GridPlan",
    "DensityGrid",
    "plan_grid",
    "invert_density_grid",
    "invert_density",
    "marginal_density",
    "verify_scaling",
    "derivative_bound_check",
    "write_density_csv",
]


def diffusion_callback(sigma, d):
    """Normalize ``sigma`` to a callable ``(u, x) -> (B, d, d)``.

    ``None`` means the identity; an array is a constant matrix; a callable
    receives a time and a batch of states ``(B, N)`` and returns ``(d, d)``
    or ``(B, d, d)``.
    """
    if sigma is None:
        sigma = np.eye(d)
    if not callable(sigma):
        S = np.asarray(sigma, dtype=float).reshape(d, d) if np.ndim(sigma) else np.eye(d) * float(sigma)

        def const(u, x, _S=S):
            return np.broadcast_to(_S, (np.shape(x)[0], d, d))

        const.constant = S
        return const

    def wrapped(u, x, _f=sigma):
        out = np.asarray(_f(u, x), dtype=float)
        if out.ndim == 2:
            out = np.broadcast_to(out, (np.shape(x)[0], d, d))
        return out

    wrapped.constant = None
    return wrapped


def _fit_ellipticity(S):
    """Smallest ``eta`` with ``eta^{-1}|v|^2 <= S v.v <= eta |v|^2`` over a stack ``S``."""
    sym = 0.5 * (S + np.swapaxes(S, -1, -2))
    ev = np.linalg.eigvalsh(sym)
    lo = float(ev.min())
    if not lo > 0:
        raise ConfigurationError("sigma is not uniformly elliptic: sigma v.v <= 0 for some v")
    hi = float(np.linalg.norm(S, ord=2, axis=(-2, -1)).max())
    return max(1.0 / lo, hi)


class FrozenSymbolContext:
    """Immutable data of the proxy frozen along ``u -> theta_{u,tau}(xi)``.

    Parameters
    ----------
    noise : LevyNoiseSpec
    shape : ChainShape
    matrix : ChainMatrix
    t, s : float
        Start and end times, ``t < s``.
    drift : DriftSpec, optional
        Defaults to the zero drift.
    sigma : None, array or callable
        See :func:`diffusion_callback`.
    eta : float, optional
        Declared ellipticity constant; checked against the sampled value.
    tau, xi : freezing pair
        Default ``(t, 0)``.
    n_v : int
        Gauss-Legendre nodes in ``v``.
    tol : float
        Tolerance of the flow and frozen-shift solvers.
    base_symbol : BaseSymbol, optional
        Shared evaluator; built from ``noise`` when omitted.
    """

    def __init__(self, noise, shape, matrix, t, s, drift=None, sigma=None, eta=None, tau=None, xi=None,
                 n_v=64, tol=1e-8, base_symbol=None):
        if not s > t:
            raise ConfigurationError("the proxy density needs s > t")
        if noise.dimension != shape.d:
            raise ConfigurationError("noise dimension must equal d_1")
        self.noise, self.shape, self.matrix = noise, shape, matrix
        self.t, self.s, self.h = float(t), float(s), float(s - t)
        self.alpha = noise.alpha
        self.drift = drift if drift is not None else zero_drift(shape)
        self.tau = self.t if tau is None else float(tau)
        self.xi = np.zeros(shape.N) if xi is None else np.asarray(xi, dtype=float)
        self.tol = tol
        self.base = base_symbol if base_symbol is not None else BaseSymbol(noise)
        x, w = np.polynomial.legendre.leggauss(n_v)
        self.v_nodes, self.v_weights = 0.5 * (x + 1.0), 0.5 * w
        us = self.t + self.v_nodes * self.h
        self.u_nodes = us
        sig = diffusion_callback(sigma, shape.d)
        self.sigma_callback = sig
        if sig.constant is not None:
            S = np.broadcast_to(sig.constant, (n_v, shape.d, shape.d))
            self.theta_nodes = None
        else:
            flow = solve_flow(self.drift, matrix, np.full(n_v, self.tau), np.tile(self.xi, (n_v, 1)), us, tol=tol)
            self.theta_nodes = flow.end
            S = np.stack([sig(u, th[None])[0] for u, th in zip(us, self.theta_nodes)])
        self.sigma_nodes = np.array(S)
        self.eta = _fit_ellipticity(self.sigma_nodes)
        if eta is not None:
            if self.eta > eta * (1 + 1e-12):
                raise ConfigurationError(f"sigma violates the declared ellipticity eta={eta} (sampled {self.eta:.6g})")
            self.eta = float(eta)
        sm = scale_matrix(shape, self.alpha, self.h)
        self.scales = sm
        R = resolvent_family(matrix, self.s, us)
        RB = R @ embedding(shape)
        self.P = sm.m_inv[None, :, None] * np.einsum("vnd,vde->vne", RB, self.sigma_nodes)
        self.R_st = resolvent(matrix, self.t, self.s)
        dirs, wts = noise.spectral.quadrature()
        self._dirs, self._dir_w = np.asarray(dirs), np.asarray(wts)
        self._tails = None

    # -- symbols -----------------------------------------------------------

    def symbol(self, z):
        """``Phi_S(z) = int_0^1 Phi(P_v^T z) dv`` for ``z`` of shape (..., N)."""
        z = np.asarray(z, dtype=float)
        p = np.einsum("vnd,...n->...vd", self.P, z)
        return self.base(p) @ self.v_weights

    def exponent(self, eta, chunk=1 << 16):
        """Normalized-frame log-characteristic function ``psi(eta)``, shape (..., N)."""
        eta = np.asarray(eta, dtype=float)
        flat = eta.reshape(-1, eta.shape[-1])
        c = self.h ** (-1.0 / self.alpha)
        out = np.empty(flat.shape[0])
        for a in range(0, flat.shape[0], chunk):
            out[a : a + chunk] = self.h * self.symbol(c * flat[a : a + chunk])
        return out.reshape(eta.shape[:-1])

    def shift(self, x):
        """Frozen shift ``m^{tau,xi}_{s,t}(x)``."""
        return frozen_shift(self.drift, self.matrix, self.tau, self.xi, self.t, self.s, x, tol=self.tol)

    # -- Levy measure of the normalized law ---------------------------------

    def _tail_tables(self):
        if self._tails is None:
            if self.noise.q_family.is_radial and self.noise.spectral.is_isotropic:
                self._tails = [_TailTable(self.noise, self._dirs[0])] * len(self._dirs)
            else:
                self._tails = [_TailTable(self.noise, s) for s in self._dirs]
        return self._tails

    def rays(self, components=None):
        """Jump rays of the normalized law: directions ``q``, weights and tail tables.

        The normalized Levy measure is ``sum_rays weight * Q(r s) r^{-1-alpha} dr``
        pushed forward by ``r -> r q``.
        """
        c = self.h ** (-1.0 / self.alpha)
        q = c * np.einsum("vnd,kd->vkn", self.P, self._dirs)
        w = self.h * self.v_weights[:, None] * self._dir_w[None, :]
        tails = self._tail_tables()
        idx = np.broadcast_to(np.arange(len(self._dirs))[None, :], w.shape)
        q = q.reshape(-1, q.shape[-1])
        if components is not None:
            q = q[:, list(components)]
        return q, w.ravel(), [tails[i] for i in idx.ravel()]


class _TailTable:
    """``T(r) = int_r^inf Q(rho s) rho^{-1-alpha} d rho`` along a unit vector ``s``."""

    def __init__(self, noise, s, lo=1e-8, hi=1e10, n_seg=720, n_gl=12):
        self.alpha = a = noise.alpha
        self.stable = noise.is_stable
        if self.stable:
            return
        edges = np.geomspace(lo, hi, n_seg + 1)
        x, w = np.polynomial.legendre.leggauss(n_gl)
        la, lb = np.log(edges[:-1]), np.log(edges[1:])
        lr = 0.5 * (la + lb)[:, None] + 0.5 * (lb - la)[:, None] * x[None, :]
        r = np.exp(lr)
        q = noise.q_along(r.ravel(), np.asarray(s, float)).reshape(r.shape)
        seg = (0.5 * (lb - la)[:, None] * w[None, :] * q * r ** (-a)).sum(axis=1)
        end = noise.q_along(np.array([hi]), np.asarray(s, float))[0] * hi ** (-a) / a
        tail = np.concatenate([np.cumsum(seg[::-1])[::-1] + end, [end]])
        self._lr = np.log(edges)
        self._lt = np.log(np.maximum(tail, 1e-300))
        self._lo, self._hi, self._end = lo, hi, end

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        a = self.alpha
        with np.errstate(divide="ignore"):
            if self.stable:
                return np.where(r > 0, np.maximum(r, 1e-300) ** (-a) / a, np.inf)
            lr = np.log(np.clip(r, self._lo, None))
            out = np.exp(np.interp(lr, self._lr, self._lt))
        out = np.where(r > self._hi, self._end * (r / self._hi) ** (-a), out)
        return np.where(r > 0, out, np.inf)


def frozen_symbol(ctx, z):
    """``Phi_S(z)`` of a :class:`FrozenSymbolContext` (nonpositive)."""
    return ctx.symbol(z)


def fit_symbol_coercivity(ctx, z_grid):
    """Largest ``C`` with ``Phi_S(z) <= C (1 - |z|^alpha)`` on ``z_grid`` (..., N).

    Points with ``|z| <= 1`` are implied by nonpositivity. A positive
    return value certifies the inequality shape on the grid.
    """
    z = np.asarray(z_grid, dtype=float).reshape(-1, ctx.shape.N)
    vals = ctx.symbol(z)
    if np.any(vals > 1e-12 * (1 + np.abs(vals).max())):
        raise NumericalError("frozen symbol is positive somewhere on the grid")
    nrm = np.linalg.norm(z, axis=1) ** ctx.alpha
    big = nrm > 1.0 + 1e-9
    if not np.any(big):
        return np.inf
    return float(np.min(-vals[big] / (nrm[big] - 1.0)))


# ---------------------------------------------------------------------------
# Grids


@dataclass(frozen=True)
class InversionGrid:
    """Inversion configuration in the normalized frame.

    Parameters
    ----------
    half_width : float, optional
        Half-side ``W`` of the window ``|w|_inf <= W``; default 200, 40, 12
        for ``N = 1, 2, 3``.
    pad : float
        Period of the FFT grid in units of ``2 W``.
    decay_floor : float
        Largest ``|phi|`` allowed on the boundary of the frequency box.
    tolerance : float
        Largest accepted mass defect.
    max_points : int
        Cap on the total number of frequency nodes.
    """

    half_width: Optional[float] = None
    pad: float = 2.0
    decay_floor: float = 1e-12
    tolerance: float = 1e-4
    max_points: int = 1 << 22

    def width(self, dim):
        if self.half_width is not None:
            return float(self.half_width)
        return {1: 200.0, 2: 40.0, 3: 12.0}.get(dim, 8.0)


@dataclass(frozen=True)
class GridPlan:
    """Frequency box ``|eta|_inf <= Z`` sampled with spacing ``d_eta`` at ``L`` nodes per axis."""

    dim: int
    L: int
    d_eta: float
    Z: float
    half_width: float

    @property
    def period(self):
        return 2 * np.pi / self.d_eta

    @property
    def eta_axis(self):
        return (np.arange(self.L) - self.L // 2) * self.d_eta

    @property
    def w_axis(self):
        return (np.arange(self.L) - self.L // 2) * (self.period / self.L)


def _cube_boundary(dim, Z, n=48):
    if dim == 1:
        return np.array([[Z], [-Z]])
    g = np.linspace(-Z, Z, n)
    pts = []
    for ax in range(dim):
        for sgn in (-1.0, 1.0):
            if dim == 2:
                p = np.zeros((n, 2))
                p[:, ax] = sgn * Z
                p[:, 1 - ax] = g
            else:
                others = [k for k in range(3) if k != ax]
                aa, bb = np.meshgrid(g[::4], g[::4], indexing="ij")
                p = np.zeros((aa.size, 3))
                p[:, ax] = sgn * Z
                p[:, others[0]] = aa.ravel()
                p[:, others[1]] = bb.ravel()
            pts.append(p)
    return np.vstack(pts)


def plan_grid(exponent, dim, grid=InversionGrid()):
    """Choose the frequency box from the decay of ``exp(psi)`` and the spacing from the window."""
    Z = 1.0
    while np.max(exponent(_cube_boundary(dim, Z))) > np.log(grid.decay_floor):
        Z *= 1.2
        if Z > 1e6:
            raise NumericalError("characteristic function does not decay to the floor on any feasible box")
    W = grid.width(dim)
    d_eta = 2 * np.pi / (grid.pad * 2 * W)
    L = sfft.next_fast_len(int(np.ceil(2 * Z / d_eta)) + 2)
    L += L % 2
    if L**dim > grid.max_points:
        raise NumericalError(f"inversion grid needs {L}^{dim} nodes, above max_points={grid.max_points}")
    return GridPlan(dim, L, d_eta, Z, W)


def _grid_points(plan):
    axes = [plan.eta_axis] * plan.dim
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _fourier(values, plan):
    """``(d_eta / 2 pi)^k sum_eta values(eta) exp(-i eta . w)`` on the ``w`` grid."""
    out = sfft.fftshift(sfft.fftn(sfft.ifftshift(values)))
    return out * (plan.d_eta / (2 * np.pi)) ** plan.dim


# ---------------------------------------------------------------------------
# Levy-measure accounting of the window


def _axis_intervals(qa, W, P, r_max):
    """r-intervals where ``r qa`` wraps into ``[-W, W]`` modulo ``P`` (``qa > 0``)."""
    kmax = int(np.floor((r_max * qa + W) / P)) + 1
    k = np.arange(0, kmax + 1)
    lo = np.maximum((k * P - W) / qa, 0.0)
    hi = (k * P + W) / qa
    return lo, hi


def _intersect(a_lo, a_hi, b_lo, b_hi):
    i0 = np.searchsorted(b_hi, a_lo, side="right")
    i1 = np.searchsorted(b_lo, a_hi, side="left")
    cnt = np.maximum(i1 - i0, 0)
    ai = np.repeat(np.arange(len(a_lo)), cnt)
    bi = np.concatenate([np.arange(a, b) for a, b in zip(i0, i1)]) if cnt.sum() else np.zeros(0, int)
    lo = np.maximum(a_lo[ai], b_lo[bi])
    hi = np.minimum(a_hi[ai], b_hi[bi])
    keep = hi > lo
    return lo[keep], hi[keep]


def window_levy_masses(q, weights, tails, W, P, depth=1e-7):
    """Levy mass outside the window and mass folded back into it by periodization.

    Returns
    -------
    tail : float
        ``nu(|w|_inf > W)``.
    alias : float
        ``nu`` of the periodic images of the window (excluding the window).
    """
    tail = alias = 0.0
    for qv, wt, T in zip(np.abs(q), weights, tails):
        m = qv.max()
        if m == 0:
            continue
        r_exit = W / m
        t_exit = float(T(r_exit))
        tail += wt * t_exit
        r_max = r_exit * depth ** (-1.0 / T.alpha)
        active = qv > 0
        lo, hi = np.array([0.0]), np.array([np.inf])
        for qa in qv[active]:
            blo, bhi = _axis_intervals(qa, W, P, r_max)
            lo, hi = _intersect(lo, hi, blo, bhi)
        keep = lo < r_max
        lo, hi = np.maximum(lo[keep], r_exit), np.minimum(hi[keep], r_max)
        good = hi > lo
        folded = float(np.sum(T(lo[good]) - T(hi[good])))
        rest = float(T(r_max)) * (2 * W / P) ** int(active.sum())
        alias += wt * (folded + rest)
    return tail, alias


# ---------------------------------------------------------------------------
# Inversion


@dataclass
class DensityGrid:
    """Inverted proxy density on a tensor grid.

    Attributes
    ----------
    w_axes : list of ndarray
        Normalized-frame axes.
    profile : ndarray
        Clipped normalized density ``g(w) = det T_h p(m + T_h w)``.
    shift : ndarray
        ``m`` (restricted to the inverted components).
    T : ndarray
        Diagonal of ``T_h`` on the inverted components.
    noise_floor : float
        Total absolute mass of the clipped negative values.
    mass_window, tail_mass, alias_mass, mass_defect : float
        Riemann mass over the window, Levy-measure tail outside it, mass
        folded in by periodization, and ``|window - alias + tail - 1|``.
    clipped : ndarray of bool
    """

    w_axes: list
    profile: np.ndarray
    shift: np.ndarray
    T: np.ndarray
    noise_floor: float
    mass_window: float
    tail_mass: float
    alias_mass: float
    mass_defect: float
    clipped: np.ndarray
    plan: GridPlan = field(repr=False)

    @property
    def y_axes(self):
        return [m + t * w for m, t, w in zip(self.shift, self.T, self.w_axes)]

    @property
    def density(self):
        return self.profile / float(np.prod(self.T))

    @property
    def dw(self):
        return self.plan.period / self.plan.L

    def window_mask(self):
        masks = [np.abs(w) <= self.plan.half_width for w in self.w_axes]
        return np.ix_(*[np.nonzero(m)[0] for m in masks])

    def evaluate(self, y):
        """Cubic-spline interpolation of a one-dimensional density at ``y``."""
        if len(self.w_axes) != 1:
            raise ConfigurationError("evaluate is defined for one-dimensional grids")
        from scipy.interpolate import CubicSpline

        w = (np.asarray(y, dtype=float) - self.shift[0]) / self.T[0]
        return CubicSpline(self.w_axes[0], self.profile)(w) / self.T[0]

    def cdf(self, y):
        """Marginal CDF of a one-dimensional grid at points ``y`` (NaN outside the window)."""
        if len(self.w_axes) != 1:
            raise ConfigurationError("cdf is defined for one-dimensional grids")
        from scipy.interpolate import CubicSpline

        w = (np.asarray(y, dtype=float) - self.shift[0]) / self.T[0]
        ax = self.w_axes[0]
        inside = np.abs(ax) <= self.plan.half_width
        wa = ax[inside]
        anti = CubicSpline(ax, self.profile).antiderivative()
        c = 0.5 * self.tail_mass + anti(w) - anti(wa[0])
        return np.where((w >= wa[0]) & (w <= wa[-1]), c, np.nan)

    def cell_probabilities(self, edges):
        """Probabilities of the tensor cells spanned by per-axis ``y`` edges.

        Integrates the tensor cubic-spline interpolant of the density axis by
        axis. Edges must lie inside the window. Returns ``(inner, outside)``
        where ``outside = 1 - inner.sum()``.
        """
        if len(edges) != len(self.w_axes):
            raise ConfigurationError("one edge array per inverted axis is required")
        from scipy.interpolate import CubicSpline

        vals = self.profile
        for ax, (e, m, t, w) in enumerate(zip(edges, self.shift, self.T, self.w_axes)):
            we = (np.asarray(e, dtype=float) - m) / t
            if np.any(np.abs(we) > self.plan.half_width):
                raise ConfigurationError("cell edges must lie inside the inversion window")
            anti = CubicSpline(w, vals, axis=ax).antiderivative()
            vals = np.diff(anti(we), axis=ax)
        return vals, 1.0 - float(vals.sum())


def _invert(exponent, dim, rays, plan, grid, shift, T, weight_fn=None):
    eta = _grid_points(plan)
    psi = exponent(eta.reshape(-1, dim)).reshape(eta.shape[:-1])
    phi = np.exp(psi)
    vals = _fourier(phi, plan).real
    neg = vals < 0
    dw = plan.period / plan.L
    floor = float(-vals[neg].sum() * dw**dim) + 0.0
    prof = np.where(neg, 0.0, vals)
    w = plan.w_axis
    inside = np.abs(w) <= plan.half_width
    sel = prof[np.ix_(*[inside] * dim)]
    mass = float(sel.sum() * dw**dim)
    q, wts, tails = rays
    tail, alias = window_levy_masses(q, wts, tails, plan.half_width, plan.period)
    tail_p = 1.0 - np.exp(-tail)
    defect = abs(mass - alias + tail_p - 1.0)
    return DensityGrid([w] * dim, prof, np.asarray(shift, float), np.asarray(T, float), floor, mass, tail_p,
                       alias, defect, neg, plan)


def invert_density_grid(ctx, x, grid=InversionGrid(), plan=None, check=True):
    """Invert the full ``N``-dimensional proxy density on a tensor grid.

    Raises
    ------
    NumericalError
        When the mass defect exceeds ``grid.tolerance``.
    """
    N = ctx.shape.N
    if N > 3:
        raise ConfigurationError("full inversion is restricted to N <= 3; use marginal_density")
    if plan is None:
        plan = plan_grid(ctx.exponent, N, grid)
    res = _invert(ctx.exponent, N, ctx.rays(), plan, grid, ctx.shift(x), ctx.scales.T)
    if check and res.mass_defect > grid.tolerance:
        raise NumericalError(f"inversion mass defect {res.mass_defect:.3e} exceeds {grid.tolerance:g}",
                             residual=res.mass_defect)
    return res


def marginal_density(ctx, x, component, grid=InversionGrid(), plan=None, check=True):
    """One-dimensional inversion of the law of coordinate ``component`` (0-based)."""
    N = ctx.shape.N
    e = np.zeros(N)
    e[component] = 1.0

    def expo(eta):
        eta = np.asarray(eta, dtype=float)
        return ctx.exponent(eta[..., :1] * e)

    if plan is None:
        plan = plan_grid(expo, 1, grid)
    m = ctx.shift(x)
    res = _invert(expo, 1, ctx.rays([component]), plan, grid, m[component : component + 1],
                  ctx.scales.T[component : component + 1])
    if check and res.mass_defect > grid.tolerance:
        raise NumericalError(f"marginal inversion mass defect {res.mass_defect:.3e} exceeds {grid.tolerance:g}",
                             residual=res.mass_defect)
    return res


def invert_density(ctx, x, y, grid=InversionGrid(), plan=None, chunk=256):
    """Proxy density ``p(t, s, x, y)`` at points ``y`` (shape (N,) or (K, N)).

    Evaluated by direct trapezoidal summation over the planned frequency
    grid; values below zero are clipped.
    """
    N = ctx.shape.N
    if N > 3:
        raise ConfigurationError("pointwise inversion is restricted to N <= 3")
    if plan is None:
        plan = plan_grid(ctx.exponent, N, grid)
    yy = np.atleast_2d(np.asarray(y, dtype=float))
    w = (yy - ctx.shift(x)[None, :]) * ctx.scales.T_inv[None, :]
    eta = _grid_points(plan).reshape(-1, N)
    phi = np.exp(ctx.exponent(eta))
    keep = phi > 1e-300
    eta, phi = eta[keep], phi[keep]
    out = np.empty(len(w))
    for a in range(0, len(w), chunk):
        out[a : a + chunk] = np.cos(w[a : a + chunk] @ eta.T) @ phi
    out *= (plan.d_eta / (2 * np.pi)) ** N / ctx.scales.det_T
    out = np.maximum(out, 0.0)
    return out[0] if np.ndim(y) == 1 else out


# ---------------------------------------------------------------------------
# Scaling and smoothing reports


def verify_scaling(contexts, x, grid=InversionGrid(), flag_rel=0.05, band_width=0.5, components=None):
    """Collapse of ``det T_h p(m + T_h u)`` across a family of contexts.

    Parameters
    ----------
    contexts : sequence of FrozenSymbolContext
        Typically the same model at different gaps ``s - t``; the first
        one is the reference.
    components : sequence of int, optional
        Restrict to the marginal of one coordinate (1-D collapse).

    Returns
    -------
    dict
        ``gaps``, ``max_deviation`` (absolute, in profile units),
        ``relative_by_band`` (max relative deviation per ``|u|_inf`` band),
        ``divergence_radius`` (first band radius with relative deviation
        above ``flag_rel``, or ``None``) and ``profiles``.
    """
    ref = contexts[0]
    if components is None:
        invert = lambda c, p: invert_density_grid(c, x, grid, plan=p, check=False)  # noqa: E731
        plan = plan_grid(ref.exponent, ref.shape.N, grid)
    else:
        comp = components[0]
        invert = lambda c, p: marginal_density(c, x, comp, grid, plan=p, check=False)  # noqa: E731
        plan = invert(ref, None).plan
    profs = [invert(c, plan) for c in contexts]
    g0 = profs[0].profile
    dim = g0.ndim
    w = profs[0].w_axes[0]
    inside = np.abs(w) <= plan.half_width
    sl = np.ix_(*[inside] * dim)
    dev = max(float(np.max(np.abs(p.profile[sl] - g0[sl]))) for p in profs[1:]) if len(profs) > 1 else 0.0
    grids = np.meshgrid(*[w[inside]] * dim, indexing="ij")
    radius = np.max(np.abs(np.stack(grids)), axis=0)
    peak = g0.max()
    n_bands = int(np.ceil(plan.half_width / band_width))
    edges = np.arange(n_bands + 1) * band_width
    rel = np.zeros(n_bands)
    for p in profs[1:]:
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.abs(p.profile[sl] - g0[sl]) / g0[sl]
        r = np.where(g0[sl] > 1e-9 * peak, r, 0.0)
        band = np.clip(np.searchsorted(edges, radius, side="right") - 1, 0, n_bands - 1)
        rel = np.maximum(rel, _band_max(band.ravel(), r.ravel(), n_bands))
    flagged = np.nonzero(rel > flag_rel)[0]
    return {
        "gaps": [c.h for c in contexts],
        "max_deviation": dev,
        "band_edges": edges,
        "relative_by_band": rel,
        "divergence_radius": float(edges[flagged[0]]) if len(flagged) else None,
        "profiles": profs,
    }


def _band_max(band, vals, n):
    out = np.zeros(n)
    np.maximum.at(out, band, vals)
    return out


def derivative_bound_check(contexts, k, component, slope_tol=0.05):
    """Fitted exponent of ``det T_h max_y |D^k_{x_i} p|`` against ``h``.

    The derivative in ``x_i`` enters through the shift ``m = R_{s,t} x + ...``,
    so it is the inverse transform of ``(i c . eta)^k phi(eta)`` with
    ``c = T_h^{-1} R_{s,t} e_i``.

    Parameters
    ----------
    contexts : sequence of FrozenSymbolContext
        Same model at different gaps.
    k : int
        Derivative order in ``{0, 1, 2}``.
    component : int
        Chain level ``i`` (1-based); the first coordinate of that level is used.

    Returns
    -------
    dict with ``gaps``, ``values``, ``slope``, ``expected``, ``passed``.
    """
    if k not in (0, 1, 2):
        raise ConfigurationError("derivative order must be 0, 1 or 2")
    ref = contexts[0]
    sh = ref.shape
    col = sh.block(component).start
    N = sh.N
    grid = InversionGrid(half_width={1: 40.0, 2: 20.0}.get(N, 8.0), pad=1.0)
    vals = []
    for ctx in contexts:
        plan = plan_grid(ctx.exponent, N, grid)
        eta = _grid_points(plan)
        phi = np.exp(ctx.exponent(eta.reshape(-1, N)).reshape(eta.shape[:-1]))
        c = ctx.R_st[:, col] * ctx.scales.T_inv
        factor = (1j * (eta @ c)) ** k
        out = _fourier(factor * phi, plan)
        vals.append(float(np.max(np.abs(out))))
    gaps = np.array([c.h for c in contexts])
    slope = float(np.polyfit(np.log(gaps), np.log(vals), 1)[0])
    alpha = ref.alpha
    expected = -k * (1 + alpha * (component - 1)) / alpha
    return {"gaps": gaps, "values": np.array(vals), "slope": slope, "expected": expected,
            "passed": abs(slope - expected) <= slope_tol}


def write_density_csv(path, dens, stride=1):
    """Write ``y_1..y_k, value, clipped`` rows of a :class:`DensityGrid`."""
    axes = [a[::stride] for a in dens.y_axes]
    vals = dens.density[tuple(slice(None, None, stride) for _ in axes)]
    clip = dens.clipped[tuple(slice(None, None, stride) for _ in axes)]
    mesh = np.meshgrid(*axes, indexing="ij")
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"y_{i + 1}" for i in range(len(axes))] + ["value", "clipped"])
        for idx in np.ndindex(vals.shape):
            wr.writerow([repr(float(m[idx])) for m in mesh] + [repr(float(vals[idx])), int(clip[idx])])
