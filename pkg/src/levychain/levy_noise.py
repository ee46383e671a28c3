"""Symmetric alpha-stable and stable-like Levy noises.

The Levy measure is written in polar form

    nu(A) = int_S int_0^inf 1_A(r s) Q(r s) mu(ds) dr / r^{1+alpha},

with ``mu`` a symmetric spectral measure on the unit sphere and ``Q`` a
bounded density. The symbol is

    Phi(xi) = int (cos(xi . z) - 1) Q(z) nu_alpha(dz) <= 0.

Conventions
-----------
A spectral measure is stored as a list of half-sphere nodes ``s_k`` with
weights ``w_k``; the measure itself is ``sum_k (w_k / 2)(delta_{s_k} +
delta_{-s_k})``. Integrals of even functions are then ``sum_k w_k g(s_k)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import warnings

import numpy as np
from scipy import integrate, interpolate, special

from .errors import ConfigurationError, NumericalError, QSupViolation

__all__ = [
    "stable_radial_constant",
    "sphere_abs_moment",
    "SpectralMeasure",
    "StableQ",
    "TruncatedQ",
    "LayeredQ",
    "TemperedQ",
    "RelativisticQ",
    "LampertiQ",
    "LevyNoiseSpec",
    "q_density",
    "sample_stable_increment",
    "sample_standard_stable",
    "sample_q_modulated_increment",
    "large_jump_arrivals",
    "small_jump_covariance",
    "radial_symbol",
    "levy_symbol",
    "BaseSymbol",
    "hill_estimator",
]


def stable_radial_constant(alpha):
    r"""Return :math:`K_\alpha = \int_0^\infty (1-\cos r) r^{-1-\alpha} dr`.

    Equals ``Gamma(1 - alpha) cos(pi alpha / 2) / alpha``; the removable
    singularity at ``alpha = 1`` is filled with ``pi / 2``.
    """
    alpha = float(alpha)
    if not 0.0 < alpha < 2.0:
        raise ConfigurationError(f"alpha must lie in (0, 2), got {alpha}")
    if abs(alpha - 1.0) < 1e-12:
        return np.pi / 2.0
    return special.gamma(1.0 - alpha) * np.cos(np.pi * alpha / 2.0) / alpha


def sphere_abs_moment(alpha, d):
    """Return ``E|s_1|^alpha`` for ``s`` uniform on the unit sphere of R^d."""
    return np.exp(
        special.gammaln((alpha + 1.0) / 2.0)
        + special.gammaln(d / 2.0)
        - 0.5 * np.log(np.pi)
        - special.gammaln((alpha + d) / 2.0)
    )


# ---------------------------------------------------------------------------
# Spectral measures


@dataclass(frozen=True)
class SpectralMeasure:
    """Symmetric finite measure on the unit sphere.

    Parameters
    ----------
    kind : {"isotropic", "cylindrical", "atoms"}
        Descriptor of the measure.
    dimension : int
        Ambient dimension ``d``.
    mass : float
        Total mass ``mu(S^{d-1})``.
    directions : ndarray of shape (k, d), optional
        Atom directions (unit vectors); ``None`` for the isotropic case.
    weights : ndarray of shape (k,), optional
        Atom weights, each split evenly between ``s`` and ``-s``.
    """

    kind: str
    dimension: int
    mass: float
    directions: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    @classmethod
    def isotropic(cls, dimension, mass):
        if mass <= 0:
            raise ConfigurationError("isotropic spectral mass must be positive")
        return cls("isotropic", int(dimension), float(mass))

    @classmethod
    def atoms(cls, directions, weights, kind="atoms"):
        dirs = np.atleast_2d(np.asarray(directions, dtype=float))
        w = np.atleast_1d(np.asarray(weights, dtype=float))
        if dirs.shape[0] != w.shape[0]:
            raise ConfigurationError("atoms: directions and weights differ in length")
        if np.any(w <= 0):
            raise ConfigurationError("atoms: weights must be positive")
        norms = np.linalg.norm(dirs, axis=1)
        if np.any(norms == 0):
            raise ConfigurationError("atoms: zero direction")
        dirs = dirs / norms[:, None]
        dirs.setflags(write=False)
        w.setflags(write=False)
        return cls(kind, dirs.shape[1], float(w.sum()), dirs, w)

    @classmethod
    def cylindrical(cls, dimension, weight):
        return cls.atoms(np.eye(dimension), np.full(dimension, float(weight)), kind="cylindrical")

    @property
    def is_isotropic(self):
        return self.kind == "isotropic"

    def projected_moment(self, xi, alpha):
        """Return ``int |xi . s|^alpha mu(ds)`` for ``xi`` of shape (..., d)."""
        xi = np.asarray(xi, dtype=float)
        if self.is_isotropic:
            nrm = np.abs(xi[..., 0]) if self.dimension == 1 else np.linalg.norm(xi, axis=-1)
            return self.mass * sphere_abs_moment(alpha, self.dimension) * nrm**alpha
        proj = np.abs(xi @ self.directions.T)
        return (proj**alpha) @ self.weights

    def quadrature(self, n_nodes=32):
        """Half-sphere nodes and weights integrating even functions against mu."""
        if not self.is_isotropic:
            return np.array(self.directions), np.array(self.weights)
        d = self.dimension
        if d == 1:
            return np.ones((1, 1)), np.array([self.mass])
        x, w = np.polynomial.legendre.leggauss(n_nodes)
        if d == 2:
            theta = 0.5 * np.pi * (x + 1.0)
            dirs = np.stack([np.cos(theta), np.sin(theta)], axis=1)
            return dirs, self.mass * w / 2.0
        if d == 3:
            u = 0.5 * (x + 1.0)
            phi = np.pi * (x + 1.0)
            uu, pp = np.meshgrid(u, phi, indexing="ij")
            st = np.sqrt(1.0 - uu**2)
            dirs = np.stack([st * np.cos(pp), st * np.sin(pp), uu], axis=-1).reshape(-1, 3)
            ww = np.outer(w / 2.0, w / 2.0).ravel()
            return dirs, self.mass * ww
        raise ConfigurationError("angular quadrature is implemented for d <= 3")

    def sample_directions(self, rng, size):
        """Draw ``size`` unit vectors from ``mu / mass``."""
        d = self.dimension
        if self.is_isotropic:
            g = rng.standard_normal((size, d))
            return g / np.linalg.norm(g, axis=1, keepdims=True)
        idx = rng.choice(len(self.weights), size=size, p=self.weights / self.mass)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        return self.directions[idx] * sign[:, None]

    def nondegeneracy(self, alpha, n_probe=64):
        """Return ``(min, max)`` of ``int |xi . s|^alpha mu(ds)`` over probe unit vectors."""
        d = self.dimension
        if d == 1:
            probes = np.ones((1, 1))
        elif d == 2:
            th = np.linspace(0.0, np.pi, n_probe, endpoint=False)
            probes = np.stack([np.cos(th), np.sin(th)], axis=1)
        else:
            g = np.random.default_rng(0).standard_normal((n_probe * d, d))
            probes = np.vstack([np.eye(d), g / np.linalg.norm(g, axis=1, keepdims=True)])
        vals = self.projected_moment(probes, alpha)
        return float(vals.min()), float(vals.max())


# ---------------------------------------------------------------------------
# Q families


def _norm_and_dir(z):
    z = np.asarray(z, dtype=float)
    r = np.linalg.norm(z, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = z / r[..., None]
    return r, s


@dataclass(frozen=True)
class StableQ:
    """``Q = 1``: the pure stable family."""

    name = "stable"
    is_radial = True

    def validate(self, alpha, d):
        pass

    def radial(self, r, s, alpha, d):
        return np.ones(np.shape(r))

    def sup(self, alpha, d):
        return 1.0

    def breakpoints(self):
        return ()


@dataclass(frozen=True)
class TruncatedQ:
    """``Q = 1{|z| <= r0}``."""

    r0: float
    name = "truncated"
    is_radial = True

    def validate(self, alpha, d):
        if not self.r0 > 0:
            raise ConfigurationError(f"truncated: r0 must be positive, got {self.r0}")

    def radial(self, r, s, alpha, d):
        return (np.asarray(r) <= self.r0).astype(float)

    def sup(self, alpha, d):
        return 1.0

    def breakpoints(self):
        return (self.r0,)


@dataclass(frozen=True)
class LayeredQ:
    """``Q = 1{|z| <= r0} + 1{|z| > r0} |z|^{alpha - beta}`` with ``beta > alpha``."""

    beta: float
    r0: float
    name = "layered"
    is_radial = True

    def validate(self, alpha, d):
        if not self.r0 > 0:
            raise ConfigurationError(f"layered: r0 must be positive, got {self.r0}")
        if not self.beta > alpha:
            raise ConfigurationError(f"layered: beta must exceed alpha={alpha}, got {self.beta}")

    def radial(self, r, s, alpha, d):
        r = np.asarray(r, dtype=float)
        with np.errstate(divide="ignore"):
            outer = np.where(r > 0, r, 1.0) ** (alpha - self.beta)
        return np.where(r <= self.r0, 1.0, outer)

    def sup(self, alpha, d):
        return max(1.0, self.r0 ** (alpha - self.beta))

    def breakpoints(self):
        return (self.r0,)


@dataclass(frozen=True)
class TemperedQ:
    """``Q = exp(-rate |z|)``, one instance of the completely monotone class."""

    rate: float
    name = "tempered"
    is_radial = True

    def validate(self, alpha, d):
        if not self.rate > 0:
            raise ConfigurationError(f"tempered: rate must be positive, got {self.rate}")

    def radial(self, r, s, alpha, d):
        return np.exp(-self.rate * np.asarray(r, dtype=float))

    def sup(self, alpha, d):
        return 1.0

    def breakpoints(self):
        return ()


@dataclass(frozen=True)
class RelativisticQ:
    """``Q = (1 + |z|)^{(d + alpha - 1)/2} exp(-|z|)``."""

    name = "relativistic"
    is_radial = True

    def validate(self, alpha, d):
        pass

    def radial(self, r, s, alpha, d):
        r = np.asarray(r, dtype=float)
        return (1.0 + r) ** ((d + alpha - 1.0) / 2.0) * np.exp(-r)

    def sup(self, alpha, d):
        a = (d + alpha - 1.0) / 2.0
        if a <= 1.0:
            return 1.0
        return float(a**a * np.exp(-(a - 1.0)))

    def breakpoints(self):
        return ()


@dataclass(frozen=True)
class LampertiQ:
    """``Q = exp(|z| f(z/|z|)) (|z| / (e^{|z|} - 1))^{1 + alpha}``.

    Parameters
    ----------
    f : float, callable or tuple
        Even function on the sphere with ``sup f < 1 + alpha``. A float is a
        constant; a callable maps unit vectors of shape (..., d) to values; a
        pair ``(angles, values)`` tabulates ``f`` on the circle (d = 2) and is
        interpolated linearly and periodically.
    """

    f: Union[float, Callable, tuple] = 0.0
    name = "lamperti"

    @property
    def is_radial(self):
        return not (callable(self.f) or isinstance(self.f, tuple))

    def f_values(self, s):
        s = np.asarray(s, dtype=float)
        if isinstance(self.f, tuple):
            angles, values = (np.asarray(a, dtype=float) for a in self.f)
            theta = np.arctan2(s[..., 1], s[..., 0])
            return np.interp(theta, angles, values, period=2.0 * np.pi)
        if callable(self.f):
            return np.asarray(self.f(s), dtype=float)
        return np.full(s.shape[:-1], float(self.f))

    def _probe(self, d):
        if d == 1:
            return np.array([[1.0], [-1.0]])
        g = np.random.default_rng(1).standard_normal((512, d))
        return g / np.linalg.norm(g, axis=1, keepdims=True)

    def validate(self, alpha, d):
        probes = self._probe(d)
        vals = self.f_values(probes)
        if not np.all(np.isfinite(vals)):
            raise ConfigurationError("lamperti: f must be finite")
        if vals.max() >= 1.0 + alpha:
            raise ConfigurationError(f"lamperti: sup f must be < 1 + alpha = {1 + alpha}, got {vals.max()}")
        if np.max(np.abs(vals - self.f_values(-probes))) > 1e-12:
            raise ConfigurationError("lamperti: f must be even on the sphere")

    @staticmethod
    def _profile(r, fv, alpha):
        r = np.asarray(r, dtype=float)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            ratio = np.where(r > 0, r / np.expm1(np.where(r > 0, r, 1.0)), 1.0)
            out = np.exp(r * fv + (1.0 + alpha) * np.log(ratio))
        return np.where(np.isfinite(out), out, 0.0)

    def radial(self, r, s, alpha, d):
        return self._profile(r, self.f_values(s), alpha)

    def sup(self, alpha, d):
        fmax = float(self.f_values(self._probe(d)).max())
        r = np.concatenate([[0.0], np.logspace(-6, 3, 4000)])
        return float(1.01 * np.max(self._profile(r, fmax, alpha)))

    def breakpoints(self):
        return ()


_FAMILIES = {
    "stable": StableQ,
    "truncated": TruncatedQ,
    "layered": LayeredQ,
    "tempered": TemperedQ,
    "relativistic": RelativisticQ,
    "lamperti": LampertiQ,
}


def make_q_family(name, **params):
    """Build a Q family from its name and parameters."""
    try:
        cls = _FAMILIES[name]
    except KeyError:
        raise ConfigurationError(f"unknown Q family {name!r}; expected one of {sorted(_FAMILIES)}") from None
    try:
        return cls(**params)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


# ---------------------------------------------------------------------------
# Noise specification


@dataclass(frozen=True)
class LevyNoiseSpec:
    """Full description of the driving noise.

    Parameters
    ----------
    alpha : float
        Stability index in (1, 2).
    dimension : int
        Dimension ``d`` of the noise.
    spectral : str or SpectralMeasure
        ``"isotropic"`` or ``"cylindrical"`` for the normalized measures
        (symbol ``-|xi|^alpha`` and ``-sum |xi_i|^alpha`` for Q = 1), or an
        explicit :class:`SpectralMeasure`.
    q_family : object
        One of the Q family instances.
    q_sup : float, optional
        Upper bound for ``Q``; defaults to the family's own bound.
    spectral_mass : float, optional
        Overrides the isotropic mass.
    inversion_only : bool
        Allows ``alpha = 1`` for density-inversion tests; such specs refuse
        to be sampled.
    """

    alpha: float
    dimension: int = 1
    spectral: Union[str, SpectralMeasure] = "isotropic"
    q_family: object = field(default_factory=StableQ)
    q_sup: Optional[float] = None
    spectral_mass: Optional[float] = None
    inversion_only: bool = False

    def __post_init__(self):
        a = float(self.alpha)
        if self.inversion_only:
            if not 1.0 <= a < 2.0:
                raise ConfigurationError(f"alpha must lie in [1, 2) for inversion-only specs, got {a}")
        elif not 1.0 < a < 2.0:
            raise ConfigurationError(f"alpha must lie strictly in (1, 2), got {a}")
        object.__setattr__(self, "alpha", a)
        d = int(self.dimension)
        if d < 1:
            raise ConfigurationError("dimension must be a positive integer")
        object.__setattr__(self, "dimension", d)
        K = stable_radial_constant(a)
        mu = self.spectral
        if isinstance(mu, str):
            if mu == "isotropic":
                mass = self.spectral_mass if self.spectral_mass is not None else 1.0 / (K * sphere_abs_moment(a, d))
                mu = SpectralMeasure.isotropic(d, mass)
            elif mu == "cylindrical":
                mu = SpectralMeasure.cylindrical(d, 1.0 / K)
            else:
                raise ConfigurationError(f"unknown spectral descriptor {mu!r}")
        elif not isinstance(mu, SpectralMeasure):
            raise ConfigurationError("spectral must be a descriptor string or a SpectralMeasure")
        if mu.dimension != d:
            raise ConfigurationError("spectral measure dimension differs from noise dimension")
        object.__setattr__(self, "spectral", mu)
        lo, hi = mu.nondegeneracy(a)
        if not lo > 1e-12 * hi:
            raise ConfigurationError("spectral measure is degenerate: min over unit xi of int |xi.s|^alpha mu(ds) is 0")
        self.q_family.validate(a, d)
        default_sup = self.q_family.sup(a, d)
        if self.q_sup is None:
            object.__setattr__(self, "q_sup", default_sup)
        elif not self.q_sup > 0:
            raise ConfigurationError("q_sup must be positive")
        self._check_q_bounds()

    def _check_q_bounds(self):
        d = self.dimension
        r0 = getattr(self.q_family, "r0", 1.0)
        probes = np.vstack([np.eye(d), -np.eye(d)])
        r = np.linspace(r0 * 1e-3, r0, 64)
        q = self.q(r[:, None, None] * probes[None, :, :])
        if not q.min() > 0:
            raise ConfigurationError(f"Q must be bounded below by a positive constant on B(0, {r0})")
        rr = np.logspace(-4, 3, 400)
        if self.q(rr[:, None, None] * probes[None]).max() > self.q_sup * (1 + 1e-12):
            raise ConfigurationError("q_sup is smaller than Q on the probe grid")

    @property
    def stable_constant(self):
        """``K_alpha``."""
        return stable_radial_constant(self.alpha)

    @property
    def is_stable(self):
        return isinstance(self.q_family, StableQ)

    def q(self, z):
        """Vectorized ``Q(z)`` for ``z`` of shape (..., d)."""
        r, s = _norm_and_dir(z)
        return self.q_family.radial(r, s, self.alpha, self.dimension)

    def q_along(self, r, s):
        """``Q(r s)`` for radii ``r`` along a fixed unit vector ``s``."""
        return self.q_family.radial(r, np.broadcast_to(s, np.shape(r) + (len(s),)), self.alpha, self.dimension)

    def stable_scale(self):
        """``c`` such that the Q = 1 symbol is ``-c |xi|^alpha`` (isotropic or d = 1)."""
        mu = self.spectral
        if self.dimension == 1:
            return self.stable_constant * mu.mass
        if mu.is_isotropic:
            return self.stable_constant * mu.mass * sphere_abs_moment(self.alpha, self.dimension)
        raise ConfigurationError("a scalar stable scale exists only for isotropic or one-dimensional noise")


def q_density(spec, z):
    """Return ``Q(z)`` for a single point or an array of points (..., d)."""
    z = np.asarray(z, dtype=float)
    if z.ndim == 0:
        z = z[None]
    if np.any(np.linalg.norm(z, axis=-1) == 0):
        raise ConfigurationError("q_density is defined for z != 0")
    return spec.q(z)


# ---------------------------------------------------------------------------
# Sampling


def _require_sampleable(spec):
    if spec.inversion_only:
        raise ConfigurationError("this noise spec is flagged inversion-only and cannot be sampled")


def sample_standard_stable(alpha, rng, size):
    """Chambers-Mallows-Stuck draws with characteristic function ``exp(-|u|^alpha)``."""
    u = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size)
    w = rng.standard_exponential(size)
    return (
        np.sin(alpha * u)
        / np.cos(u) ** (1.0 / alpha)
        * (np.cos((1.0 - alpha) * u) / w) ** ((1.0 - alpha) / alpha)
    )


def _positive_stable(a, rng, size):
    """Kanter draws with Laplace transform ``exp(-lambda^a)``, ``0 < a < 1``."""
    v = rng.uniform(0.0, np.pi, size)
    w = rng.standard_exponential(size)
    return np.sin(a * v) / np.sin(v) ** (1.0 / a) * (np.sin((1.0 - a) * v) / w) ** ((1.0 - a) / a)


def sample_stable_increment(alpha, dt, spectral, rng, size=None):
    """Sample increments of the symmetric alpha-stable process with Q = 1.

    Parameters
    ----------
    alpha : float
        Stability index.
    dt : float
        Time increment, positive.
    spectral : SpectralMeasure
        Spectral measure (see :class:`LevyNoiseSpec` for normalized ones).
    rng : numpy.random.Generator
    size : int, optional
        Number of independent increments. ``None`` returns a single point.

    Returns
    -------
    ndarray of shape (d,) or (size, d)
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    if not 0.0 < alpha < 2.0:
        raise ConfigurationError("alpha must lie in (0, 2)")
    n = 1 if size is None else int(size)
    d = spectral.dimension
    K = stable_radial_constant(alpha)
    tscale = dt ** (1.0 / alpha)
    if spectral.is_isotropic:
        c = K * spectral.mass * sphere_abs_moment(alpha, d)
        if d == 1:
            out = (c ** (1.0 / alpha) * tscale) * sample_standard_stable(alpha, rng, n)[:, None]
        else:
            a = _positive_stable(alpha / 2.0, rng, n)
            g = rng.standard_normal((n, d)) * np.sqrt(2.0) * c ** (1.0 / alpha)
            out = tscale * np.sqrt(a)[:, None] * g
    else:
        k = len(spectral.weights)
        coef = (K * spectral.weights) ** (1.0 / alpha)
        s = sample_standard_stable(alpha, rng, (n, k))
        out = tscale * (s * coef) @ spectral.directions
    return out[0] if size is None else out


def large_jump_arrivals(spec, dt, cutoff, rng, size):
    """Accepted jumps with radius above ``cutoff`` over ``size`` independent windows.

    Returns
    -------
    owner : ndarray of int
        Window index of each accepted jump.
    times : ndarray
        Arrival times in ``[0, dt)``, sorted within each owner.
    jumps : ndarray of shape (m, d)
        Jump vectors.
    """
    _require_sampleable(spec)
    if not cutoff > 0:
        raise ConfigurationError("small_jump_cutoff must be positive")
    alpha = spec.alpha
    lam = spec.q_sup * spec.spectral.mass * cutoff ** (-alpha) / alpha
    counts = rng.poisson(lam * dt, size)
    total = int(counts.sum())
    owner = np.repeat(np.arange(size), counts)
    times = rng.uniform(0.0, dt, total)
    radii = cutoff * rng.random(total) ** (-1.0 / alpha)
    dirs = spec.spectral.sample_directions(rng, total)
    jumps = radii[:, None] * dirs
    q = spec.q_family.radial(radii, dirs, alpha, spec.dimension)
    bad = q > spec.q_sup * (1.0 + 1e-12)
    if np.any(bad):
        worst = float(q[bad].max())
        raise QSupViolation(f"Q={worst} exceeds q_sup={spec.q_sup} at a proposed jump", residual=worst - spec.q_sup)
    keep = rng.random(total) * spec.q_sup < q
    owner, times, jumps = owner[keep], times[keep], jumps[keep]
    order = np.lexsort((times, owner))
    return owner[order], times[order], jumps[order]


def small_jump_covariance(spec, cutoff, n_nodes=32):
    r"""Covariance ``int_{|z| <= cutoff} z z^T Q(z) nu_alpha(dz)`` per unit time."""
    alpha, d = spec.alpha, spec.dimension
    mu = spec.spectral
    if mu.is_isotropic and spec.q_family.is_radial:
        e = np.ones(d) / np.sqrt(d)
        rad = _quad_checked(lambda r: r ** (1.0 - alpha) * spec.q_along(np.atleast_1d(r), e)[0], 0.0, cutoff,
                            spec.q_family.breakpoints())
        return mu.mass * rad / d * np.eye(d)
    dirs, w = mu.quadrature(n_nodes)
    cov = np.zeros((d, d))
    for s, wk in zip(dirs, w):
        rad = _quad_checked(lambda r: r ** (1.0 - alpha) * spec.q_along(np.atleast_1d(r), s)[0], 0.0, cutoff,
                            spec.q_family.breakpoints())
        cov += wk * rad * np.outer(s, s)
    return cov


def sample_q_modulated_increment(spec, dt, small_jump_cutoff, rng, size=None, small_jump_policy="drop"):
    """Sample increments of the Levy process with measure ``Q nu_alpha``.

    Jumps above the cutoff are compound Poisson, proposed from the stable
    jump law and accepted with probability ``Q / q_sup``. Jumps below the
    cutoff are dropped (bias ``O(cutoff^{2 - alpha})``) or replaced by a
    moment-matched Gaussian.

    Parameters
    ----------
    spec : LevyNoiseSpec
    dt, small_jump_cutoff : float
        Positive.
    rng : numpy.random.Generator
    size : int, optional
    small_jump_policy : {"drop", "gaussian"}

    Returns
    -------
    ndarray of shape (d,) or (size, d)
    """
    if not dt > 0:
        raise ConfigurationError("dt must be positive")
    n = 1 if size is None else int(size)
    owner, _, jumps = large_jump_arrivals(spec, dt, small_jump_cutoff, rng, n)
    out = np.zeros((n, spec.dimension))
    np.add.at(out, owner, jumps)
    out += small_jump_part(spec, dt, small_jump_cutoff, rng, n, small_jump_policy)
    return out[0] if size is None else out


def small_jump_part(spec, dt, cutoff, rng, n, policy, _cache={}):
    """Small-jump component of ``n`` increments under the given policy."""
    if policy == "drop":
        return np.zeros((n, spec.dimension))
    if policy != "gaussian":
        raise ConfigurationError(f"unknown small-jump policy {policy!r}")
    key = (id(spec), spec, float(cutoff))
    if key not in _cache:
        _cache[key] = np.linalg.cholesky(small_jump_covariance(spec, cutoff) + 1e-300 * np.eye(spec.dimension))
    return np.sqrt(dt) * rng.standard_normal((n, spec.dimension)) @ _cache[key].T


# ---------------------------------------------------------------------------
# Symbol


def _quad(func, a, b, points=(), **kw):
    pts = sorted(p for p in points if a < p < b)
    if pts and not np.isfinite(b) and kw.get("weight") is None:
        # quad ignores points on infinite ranges: split at the last one
        v1, e1 = _quad(func, a, pts[-1], pts[:-1], **kw)
        v2, e2 = _quad(func, pts[-1], b, (), **kw)
        return v1 + v2, e1 + e2
    if pts and np.isfinite(b):
        kw["points"] = pts
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if kw.get("weight") == "cos" and not np.isfinite(b):
            kw.setdefault("epsabs", 1e-15)
            return integrate.quad(func, a, b, limlst=200, **kw)
        kw.setdefault("epsabs", 1e-15)
        return integrate.quad(func, a, b, limit=400, epsrel=1e-12, **kw)


def _quad_checked(func, a, b, points=(), tol=1e-9, **kw):
    val, err = _quad(func, a, b, points, **kw)
    if not err <= tol * max(1.0, abs(val)):
        raise NumericalError(f"radial quadrature did not converge (error estimate {err:.3e})", residual=err)
    return val


def radial_symbol(spec, a, direction=None, rtol=1e-8):
    r"""Radial symbol ``Psi_s(a) = int_0^inf (cos(a r) - 1) Q(r s) r^{-1-alpha} dr``.

    The integral is split at ``pi / |a|``: the near part carries the
    integrable ``r^{1-alpha}`` endpoint behaviour, the far oscillatory part
    is a Fourier integral (QAWF) and the far non-oscillatory part a plain
    tail integral. The summed error estimates must stay below
    ``max(rtol * |Psi|, 1e-14)``, otherwise a :class:`NumericalError` carries the residual.
    """
    alpha = spec.alpha
    s = np.ones(spec.dimension) / np.sqrt(spec.dimension) if direction is None else np.asarray(direction, float)
    a = abs(float(a))
    if a == 0.0:
        return 0.0
    qf = lambda r: float(spec.q_along(np.atleast_1d(r), s)[0])  # noqa: E731
    g = lambda r: qf(r) * r ** (-1.0 - alpha)  # noqa: E731
    bps = spec.q_family.breakpoints()
    # radius beyond which Q vanishes (compactly supported families)
    support = np.inf
    if bps and qf(max(bps) * (1 + 1e-9)) == 0 and qf(10 * max(bps)) == 0:
        support = max(bps)
    rc = min(np.pi / a, support)
    # -2 sin^2(ar/2) avoids the cancellation in cos(ar) - 1 near r = 0
    # geometric breakpoints expose the unit scale of Q when rc is large
    near_pts = tuple(bps) + tuple(rc * 10.0 ** -np.arange(1, 9))
    total, err = _quad(lambda r: -2.0 * np.sin(0.5 * a * r) ** 2 * g(r), 0.0, rc, near_pts)
    # far part: split at breakpoints so the Fourier weight sees smooth pieces
    edges = [rc] + [p for p in sorted(bps) if p > rc]
    pieces = [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:])]
    if support == np.inf:
        pieces.append((edges[-1], np.inf))
    for lo, hi in pieces:
        v1, e1 = _quad(g, lo, hi, (), weight="cos", wvar=a, epsabs=1e-12 * abs(total))
        v2, e2 = _quad(g, lo, hi, tuple(lo * 10.0 ** np.arange(1, 9)) if hi == np.inf else ())
        total += v1 - v2
        err += e1 + e2
    # absolute floor: finite-variance families make |Psi| ~ a^2 tiny near a = 0
    if not err <= max(rtol * abs(total), 1e-14):
        raise NumericalError(f"radial symbol quadrature residual {err:.3e} exceeds tolerance", residual=err)
    return total


def _isotropic_s1_nodes(d, n_nodes=48):
    """Nodes and weights for ``E g(|s_1|)`` with ``s`` uniform on the sphere."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    if d == 2:
        th = 0.25 * np.pi * (x + 1.0)
        return np.cos(th), w / 2.0
    # |s_1| has density proportional to (1 - u^2)^{(d-3)/2} on [0, 1]
    th = 0.25 * np.pi * (x + 1.0)
    u = np.cos(th)
    dens = np.sin(th) ** (d - 2)
    ww = w * dens
    return u, ww / ww.sum()


def levy_symbol(spec, xi, n_angular=48, rtol=1e-8):
    """Evaluate ``Phi(xi)`` by radial times spherical quadrature.

    Parameters
    ----------
    spec : LevyNoiseSpec
    xi : array_like of shape (d,)
    n_angular : int
        Angular Gauss-Legendre nodes for continuous spectral measures.
    rtol : float
        Relative tolerance for each radial integral.

    Returns
    -------
    float
        The nonpositive symbol value.
    """
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    if xi.shape != (spec.dimension,):
        raise ConfigurationError(f"xi must have shape ({spec.dimension},)")
    nrm = float(np.linalg.norm(xi))
    if nrm == 0.0:
        return 0.0
    mu = spec.spectral
    if mu.is_isotropic and spec.q_family.is_radial:
        e = np.ones(spec.dimension) / np.sqrt(spec.dimension)
        if spec.dimension == 1:
            return mu.mass * radial_symbol(spec, nrm, e, rtol)
        u, w = _isotropic_s1_nodes(spec.dimension, n_angular)
        return mu.mass * float(sum(wk * radial_symbol(spec, nrm * uk, e, rtol) for uk, wk in zip(u, w)))
    dirs, w = mu.quadrature(n_angular)
    return float(sum(wk * radial_symbol(spec, xi @ s, s, rtol) for s, wk in zip(dirs, w)))


class _RadialTable:
    """Power-law-extrapolated cubic table of ``-Psi_s(a)`` in log-log coordinates."""

    def __init__(self, spec, direction, lo=1e-4, hi=1e4, per_decade=16):
        n = int(round(np.log10(hi / lo) * per_decade)) + 1
        a = np.logspace(np.log10(lo), np.log10(hi), n)
        vals = -np.array([radial_symbol(spec, ak, direction) for ak in a])
        if np.any(vals <= 0):
            raise NumericalError("radial symbol is not strictly negative on the table grid")
        self.la, self.lv = np.log(a), np.log(vals)
        self.spline = interpolate.CubicSpline(self.la, self.lv)
        self.slope_lo = (self.lv[1] - self.lv[0]) / (self.la[1] - self.la[0])
        self.slope_hi = (self.lv[-1] - self.lv[-2]) / (self.la[-1] - self.la[-2])

    def __call__(self, a):
        a = np.abs(np.asarray(a, dtype=float))
        out = np.zeros_like(a)
        pos = a > 0
        la = np.log(a[pos])
        lv = self.spline(np.clip(la, self.la[0], self.la[-1]))
        lv = np.where(la < self.la[0], self.lv[0] + self.slope_lo * (la - self.la[0]), lv)
        lv = np.where(la > self.la[-1], self.lv[-1] + self.slope_hi * (la - self.la[-1]), lv)
        out[pos] = -np.exp(lv)
        return out


class BaseSymbol:
    """Fast vectorized evaluator of ``Phi`` for a noise spec.

    The stable family uses the closed form ``-K_alpha int |p.s|^alpha mu(ds)``.
    Other families tabulate the radial symbol on a log grid
    ``a in [1e-4, 1e4]`` (relative accuracy about 1e-6 inside the grid) and
    extrapolate with the end power laws.
    """

    def __init__(self, spec, n_angular=48):
        self.spec = spec
        self.alpha = spec.alpha
        mu = spec.spectral
        self._iso = mu.is_isotropic
        if spec.is_stable:
            self._mode = "stable"
            self._K = spec.stable_constant
            if not self._iso:
                self._dirs, self._w = mu.quadrature()
            return
        if self._iso and spec.q_family.is_radial:
            self._mode = "iso"
            e = np.ones(spec.dimension) / np.sqrt(spec.dimension)
            self._table = _RadialTable(spec, e)
            if spec.dimension == 1:
                self._u, self._uw = np.ones(1), np.ones(1)
            else:
                self._u, self._uw = _isotropic_s1_nodes(spec.dimension, n_angular)
            return
        self._mode = "nodes"
        self._dirs, self._w = mu.quadrature(n_angular)
        if spec.q_family.is_radial:
            t = _RadialTable(spec, self._dirs[0])
            self._tables = [t] * len(self._w)
        else:
            self._tables = [_RadialTable(spec, s) for s in self._dirs]

    def __call__(self, p):
        """Evaluate ``Phi(p)`` for ``p`` of shape (..., d)."""
        p = np.asarray(p, dtype=float)
        mu = self.spec.spectral
        if self._mode == "stable":
            return -self._K * mu.projected_moment(p, self.alpha)
        if self._mode == "iso":
            nrm = np.linalg.norm(p, axis=-1)
            out = np.zeros(nrm.shape)
            for uk, wk in zip(self._u, self._uw):
                out += wk * self._table(nrm * uk)
            return mu.mass * out
        out = np.zeros(p.shape[:-1])
        for s, wk, tab in zip(self._dirs, self._w, self._tables):
            out += wk * tab(p @ s)
        return out


# ---------------------------------------------------------------------------
# Diagnostics


def hill_estimator(samples, k=None):
    """Hill estimate of the tail index of ``|samples|``.

    Parameters
    ----------
    samples : array_like
    k : int, optional
        Number of upper order statistics; defaults to ``floor(sqrt(n))``.
    """
    x = np.abs(np.asarray(samples, dtype=float).ravel())
    n = x.size
    if k is None:
        k = int(np.sqrt(n))
    if not 1 <= k < n:
        raise ConfigurationError("k must satisfy 1 <= k < n")
    top = np.partition(x, n - k - 1)[n - k - 1:]
    top.sort()
    logs = np.log(top)
    return 1.0 / (np.mean(logs[1:]) - logs[0])
