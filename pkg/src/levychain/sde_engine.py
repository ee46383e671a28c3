"""Monte Carlo simulation of the chain SDE and of its frozen proxy.

Paths are simulated in fixed-size blocks. Block ``b`` draws all of its
randomness from ``Philox(SeedSequence([seed, b]))``, so an ensemble is a
function of ``(plan, seed)`` only, whatever the number of workers. Noise
draws never depend on the state, hence the chain and the proxy built from
the same plan are driven by the same noise.
"""

from __future__ import annotations

import csv
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
from scipy import interpolate

from .errors import ConfigurationError, DivergenceError
from .flows import STATE_BOUND, DriftSpec, frozen_shift, solve_flow, zero_drift
from .levy_noise import (
    LevyNoiseSpec,
    large_jump_arrivals,
    sample_q_modulated_increment,
    sample_stable_increment,
    small_jump_part,
)
from .proxy_density import diffusion_callback
from .scale_geometry import ChainMatrix, ChainShape, embedding, resolvent_family

__all__ = [
    "ChainModel",
    "SimulationPlan",
    "PathEnsemble",
    "block_rng",
    "default_workers",
    "simulate_chain",
    "simulate_frozen_proxy",
    "variation_of_constants",
    "iterated_integral",
    "read_binary",
]

WORKERS_ENV = "LEVYCHAIN_WORKERS"
BINARY_MAGIC = b"LVCHENS1"


@dataclass(frozen=True)
class ChainModel:
    """Coefficients of ``dX = (A_t X + F(t, X)) dt + B sigma(t, X-) dZ``.

    Parameters
    ----------
    shape : ChainShape
    matrix : ChainMatrix
    noise : LevyNoiseSpec
    drift : DriftSpec, optional
        Defaults to ``F = 0``.
    sigma : None, float, array or callable
        See :func:`levychain.proxy_density.diffusion_callback`.
    """

    shape: ChainShape
    matrix: ChainMatrix
    noise: LevyNoiseSpec
    drift: Optional[DriftSpec] = None
    sigma: object = None

    def __post_init__(self):
        if self.noise.dimension != self.shape.d:
            raise ConfigurationError("noise dimension must equal d_1")
        if self.matrix.shape != self.shape:
            raise ConfigurationError("matrix shape differs from the chain shape")
        if self.drift is None:
            object.__setattr__(self, "drift", zero_drift(self.shape))
        elif self.drift.shape != self.shape:
            raise ConfigurationError("drift shape differs from the chain shape")


@dataclass(frozen=True)
class SimulationPlan:
    """Everything needed to simulate an ensemble.

    Parameters
    ----------
    model : ChainModel
    x0 : array or callable
        Initial state ``(N,)`` or a sampler ``x0(rng, n) -> (n, N)``.
    t0, T : float
        Start time and horizon, ``T > t0``.
    dt : float
        Step size (maximum step for the jump-adapted policy).
    n_paths : int
    seed : int
        Master seed.
    step_policy : {"fixed", "jump-adapted"}
        ``fixed`` draws exact stable increments (stable noise) or
        ``q``-modulated increments per step; ``jump-adapted`` adds every
        jump above ``cutoff`` as a mandatory grid point.
    cutoff : float
        Small-jump cutoff.
    small_jump_policy : {"gaussian", "drop"}
    record : {"terminal", "grid"} or sequence of float
        Times stored in the ensemble; explicit times become grid points.
    integrands : sequence of callable
        ``f(u, X) -> (B,)``; left-point accumulators of ``int f(u, X_u) du``.
    monitors : sequence of callable
        ``g(u, X) -> (B,) bool``, checked after every grid step; the first
        grid time where each one holds is stored in ``first_hits``.
    antithetic : bool
        Within each block, path ``p + m/2`` uses the negated noise of path ``p``.
    block_size : int
        Paths per RNG block.
    """

    model: ChainModel
    x0: object
    t0: float = 0.0
    T: float = 1.0
    dt: float = 1e-2
    n_paths: int = 1000
    seed: int = 0
    step_policy: str = "fixed"
    cutoff: float = 1.0
    small_jump_policy: str = "gaussian"
    record: Union[str, Sequence[float]] = "terminal"
    integrands: tuple = ()
    monitors: tuple = ()
    antithetic: bool = False
    block_size: int = 4096

    def __post_init__(self):
        if not self.T > self.t0:
            raise ConfigurationError("horizon T must exceed t0")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        if int(self.n_paths) < 1:
            raise ConfigurationError("n_paths must be at least 1")
        if not self.cutoff > 0:
            raise ConfigurationError("cutoff must be positive")
        if self.step_policy not in ("fixed", "jump-adapted"):
            raise ConfigurationError(f"unknown step policy {self.step_policy!r}")
        if self.small_jump_policy not in ("gaussian", "drop"):
            raise ConfigurationError(f"unknown small-jump policy {self.small_jump_policy!r}")
        if self.block_size < 2 or (self.antithetic and self.block_size % 2):
            raise ConfigurationError("block_size must be >= 2 (and even with antithetic pairing)")
        if self.model.noise.inversion_only:
            raise ConfigurationError("inversion-only noise specs cannot be simulated")
        if not callable(self.x0) and np.shape(self.x0) != (self.model.shape.N,):
            raise ConfigurationError(f"x0 must have shape ({self.model.shape.N},)")
        if isinstance(self.record, str) and self.record not in ("terminal", "grid"):
            raise ConfigurationError("record must be 'terminal', 'grid' or a list of times")
        object.__setattr__(self, "integrands", tuple(self.integrands))
        object.__setattr__(self, "monitors", tuple(self.monitors))

    def time_grid(self):
        """Mandatory grid: uniform steps plus explicit record times."""
        n = int(np.ceil((self.T - self.t0) / self.dt - 1e-9))
        grid = self.t0 + np.arange(n + 1) * self.dt
        grid[-1] = self.T
        if not isinstance(self.record, str):
            rec = np.asarray(self.record, dtype=float)
            if np.any(rec < self.t0) or np.any(rec > self.T):
                raise ConfigurationError("record times must lie in [t0, T]")
            grid = np.union1d(grid, rec)
        return grid

    def record_times(self, grid):
        if isinstance(self.record, str):
            return grid if self.record == "grid" else grid[-1:]
        return np.unique(np.asarray(self.record, dtype=float))


@dataclass
class PathEnsemble:
    """Simulated paths.

    Attributes
    ----------
    times : ndarray of shape (K,)
    states : ndarray of shape (n_paths, K, N)
    integrals : ndarray of shape (n_paths, n_integrands)
    first_hits : ndarray of shape (n_paths, n_monitors)
        First grid time each monitor held (``inf`` if never).
    seed : int
    block_size : int
        Path ``p`` used block ``p // block_size`` of the master seed.
    metadata : dict
    """

    times: np.ndarray
    states: np.ndarray
    integrals: np.ndarray
    first_hits: np.ndarray
    seed: int
    block_size: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.states.shape[0]

    @property
    def terminal(self):
        return self.states[:, -1]

    def path_blocks(self):
        """Block index of every path (its RNG substream)."""
        return np.arange(self.n_paths) // self.block_size

    def to_csv(self, path):
        """Rows ``path_id, t, x_1..x_N`` with shortest round-trip floats."""
        N = self.states.shape[2]
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["path_id", "t"] + [f"x_{i + 1}" for i in range(N)])
            for p in range(self.n_paths):
                for k, t in enumerate(self.times):
                    wr.writerow([p, repr(float(t))] + [repr(float(v)) for v in self.states[p, k]])

    def to_binary(self, path):
        """Little-endian dump: magic, ``u64`` n_paths, n_times, N, then f64 times and states."""
        P, K, N = self.states.shape
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<QQQ", P, K, N))
            fh.write(np.ascontiguousarray(self.times, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.states, dtype="<f8").tobytes())


def read_binary(path):
    """Inverse of :meth:`PathEnsemble.to_binary`; returns ``(times, states)``."""
    with open(path, "rb") as fh:
        if fh.read(8) != BINARY_MAGIC:
            raise ConfigurationError("not a levychain ensemble dump")
        P, K, N = struct.unpack("<QQQ", fh.read(24))
        times = np.frombuffer(fh.read(8 * K), dtype="<f8")
        states = np.frombuffer(fh.read(8 * P * K * N), dtype="<f8").reshape(P, K, N)
    return times.copy(), states.copy()


def block_rng(seed, block):
    """Counter-based generator of block ``block`` under master ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(block)])))


def default_workers():
    """Worker count from the environment (``LEVYCHAIN_WORKERS``), default 1."""
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None


# ---------------------------------------------------------------------------
# Noise


class _BlockNoise:
    """State-independent noise of one block, drawn step by step."""

    def __init__(self, plan, rng, n):
        self.plan, self.rng, self.n = plan, rng, n
        self.noise = plan.model.noise
        self.half = n // 2 if plan.antithetic else n

    def _pair(self, z):
        return np.concatenate([z, -z], axis=0) if self.plan.antithetic else z

    def increment(self, dt):
        """Increment over a step of length ``dt`` (fixed policy)."""
        nz = self.noise
        if nz.is_stable:
            z = sample_stable_increment(nz.alpha, dt, nz.spectral, self.rng, self.half)
        else:
            z = sample_q_modulated_increment(nz, dt, self.plan.cutoff, self.rng, self.half,
                                             self.plan.small_jump_policy)
        return self._pair(z)

    def jumps(self, dt):
        """Large jumps in ``[0, dt)``: owner, time offsets, vectors."""
        owner, times, jumps = large_jump_arrivals(self.noise, dt, self.plan.cutoff, self.rng, self.half)
        if self.plan.antithetic:
            owner = np.concatenate([owner, owner + self.half])
            times = np.concatenate([times, times])
            jumps = np.concatenate([jumps, -jumps])
        return owner, times, jumps

    def small(self, lengths):
        """Small-jump parts over sub-steps of the given lengths (one per path)."""
        z = small_jump_part(self.noise, 1.0, self.plan.cutoff, self.rng, self.half, self.plan.small_jump_policy)
        z = self._pair(z)
        return np.sqrt(lengths)[:, None] * z


# ---------------------------------------------------------------------------
# Dynamics


def _linear_part(matrix, u, x):
    if matrix.is_constant:
        return x @ matrix.constant.T
    if np.ndim(u) == 0:
        return x @ matrix(u).T
    return np.einsum("bij,bj->bi", matrix(u), x)


class _ChainDynamics:
    """Coefficients at time ``u`` (scalar or one per row) and states ``x`` (B, N)."""

    def __init__(self, model):
        self.model = model
        self.sig = diffusion_callback(model.sigma, model.shape.d)

    def drift(self, u, x):
        return _linear_part(self.model.matrix, u, x) + self.model.drift(u, x)

    def sigma(self, u, x):
        return self.sig(u, x)


class _ProxyDynamics:
    """Linear dynamics with ``F`` and ``sigma`` frozen along ``u -> theta_{u,tau}(xi)``."""

    def __init__(self, model, theta):
        self.model, self.theta = model, theta
        self.sig = diffusion_callback(model.sigma, model.shape.d)

    def _theta(self, u, n):
        th = np.atleast_2d(self.theta(u))
        return np.broadcast_to(th, (n, th.shape[-1]))

    def drift(self, u, x):
        return _linear_part(self.model.matrix, u, x) + self.model.drift(u, self._theta(u, x.shape[0]))

    def sigma(self, u, x):
        return self.sig(u, self._theta(u, x.shape[0]))


def _flow_interpolant(model, tau, xi, t0, T, tol=1e-9):
    """Cubic Hermite interpolant of ``u -> theta_{u,tau}(xi)`` on ``[t0, T]``."""
    pieces = []
    for end in (t0, T):
        if end != tau:
            sol = solve_flow(model.drift, model.matrix, tau, np.asarray(xi, float), end, tol=tol)
            pieces.append((sol.times[0], sol.values[0], sol.slopes[0]))
    if not pieces:
        return lambda u: np.asarray(xi, float)
    t = np.concatenate([p[0] for p in pieces])
    v = np.concatenate([p[1] for p in pieces])
    s = np.concatenate([p[2] for p in pieces])
    t, idx = np.unique(t, return_index=True)
    spl = interpolate.CubicHermiteSpline(t, v[idx], s[idx])
    return lambda u: spl(u)


def _initial(plan, rng, n):
    if callable(plan.x0):
        x = np.asarray(plan.x0(rng, n), dtype=float)
        if x.shape != (n, plan.model.shape.N):
            raise ConfigurationError("x0 sampler returned the wrong shape")
        return x.copy()
    return np.tile(np.asarray(plan.x0, dtype=float), (n, 1))


def _check_state(x, offset):
    ok = np.all(np.abs(x) < STATE_BOUND, axis=1)
    if not np.all(ok):
        bad = int(np.argmin(ok))
        raise DivergenceError(f"path {offset + bad} left the state bound {STATE_BOUND:g}", path_id=offset + bad)


def _euler(dyn, x, u, h, dz, d, acc, fs):
    for k, f in enumerate(fs):
        acc[:, k] += f(u, x) * h
    noise = np.einsum("bij,bj->bi", dyn.sigma(u, x), dz)
    x = x + dyn.drift(u, x) * h
    x[:, :d] += noise
    return x


def _euler_masked(dyn, x, u, h, dz, d, acc, fs, mask):
    """Euler step on the rows in ``mask`` with per-row times ``u`` and lengths ``h``."""
    if not np.any(mask):
        return x
    rows = np.nonzero(mask)[0]
    xs, us, hs = x[rows], u[rows], h[rows]
    for k, f in enumerate(fs):
        acc[rows, k] += f(us, xs) * hs
    noise = np.einsum("bij,bj->bi", dyn.sigma(us, xs), dz[rows])
    new = xs + dyn.drift(us, xs) * hs[:, None]
    new[:, :d] += noise
    x = x.copy()
    x[rows] = new
    return x


def _run_block(plan, dyn, block, n, offset):
    rng = block_rng(plan.seed, block)
    N, d = plan.model.shape.N, plan.model.shape.d
    x = _initial(plan, rng, n)
    grid = plan.time_grid()
    rec_t = plan.record_times(grid)
    rec_idx = set(np.searchsorted(grid, rec_t).tolist())
    out = np.empty((n, len(rec_t), N))
    acc = np.zeros((n, len(plan.integrands)))
    fs = plan.integrands
    noise = _BlockNoise(plan, rng, n)
    hits = np.full((n, len(plan.monitors)), np.inf)
    r = 0
    if 0 in rec_idx:
        out[:, r] = x
        r += 1
    for k in range(len(grid) - 1):
        u, h = grid[k], grid[k + 1] - grid[k]
        if plan.step_policy == "fixed":
            x = _euler(dyn, x, u, h, noise.increment(h), d, acc, fs)
        else:
            x = _jump_adapted_step(dyn, x, u, h, noise, d, acc, fs)
        _check_state(x, offset)
        for j, g in enumerate(plan.monitors):
            new = np.isinf(hits[:, j]) & np.asarray(g(grid[k + 1], x), bool)
            hits[new, j] = grid[k + 1]
        if k + 1 in rec_idx:
            out[:, r] = x
            r += 1
    return out, acc, hits, rec_t


def _jump_adapted_step(dyn, x, u, h, noise, d, acc, fs):
    n = x.shape[0]
    owner, times, jumps = noise.jumps(h)
    cur = np.full(n, u)
    if len(owner):
        starts = np.searchsorted(owner, np.arange(n))
        rank = np.arange(len(owner)) - starts[owner]
        for r in range(int(rank.max()) + 1):
            sel = rank == r
            who, tj, jv = owner[sel], u + times[sel], jumps[sel]
            mask = np.zeros(n, bool)
            mask[who] = True
            target = cur.copy()
            target[who] = tj
            lengths = target - cur
            dz = noise.small(np.maximum(lengths, 0.0))
            x = _euler_masked(dyn, x, cur, lengths, dz, d, acc, fs, mask)
            cur = target
            x[who, :d] += np.einsum("bij,bj->bi", dyn.sigma(tj, x[who]), jv)
    lengths = u + h - cur
    dz = noise.small(np.maximum(lengths, 0.0))
    return _euler_masked(dyn, x, cur, lengths, dz, d, acc, fs, lengths > 0)


def _simulate(plan, dyn, workers, kind):
    workers = default_workers() if workers is None else max(1, int(workers))
    n, bs = int(plan.n_paths), int(plan.block_size)
    blocks = [(b, min(bs, n - b * bs)) for b in range((n + bs - 1) // bs)]
    if plan.antithetic and any(m % 2 for _, m in blocks):
        raise ConfigurationError("antithetic pairing needs an even number of paths in every block")

    def task(bm):
        b, m = bm
        return _run_block(plan, dyn, b, m, b * bs)

    if workers == 1 or len(blocks) == 1:
        results = [task(bm) for bm in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(task, blocks))
    states = np.concatenate([r[0] for r in results], axis=0)
    acc = np.concatenate([r[1] for r in results], axis=0)
    hits = np.concatenate([r[2] for r in results], axis=0)
    meta = {"kind": kind, "scheme": "euler", "step_policy": plan.step_policy, "dt": plan.dt,
            "cutoff": plan.cutoff, "small_jump_policy": plan.small_jump_policy, "n_blocks": len(blocks)}
    return PathEnsemble(results[0][3], states, acc, hits, int(plan.seed), bs, meta)


def simulate_chain(plan, workers=None):
    """Euler scheme for the full chain with left-point coefficients.

    Parameters
    ----------
    plan : SimulationPlan
    workers : int, optional
        Thread count; defaults to ``LEVYCHAIN_WORKERS`` or 1. Results do not
        depend on it.

    Raises
    ------
    DivergenceError
        When a path leaves the state bound; carries the path id.
    """
    return _simulate(plan, _ChainDynamics(plan.model), workers, "chain")


def simulate_frozen_proxy(plan, freezing, workers=None, tol=1e-9):
    """Euler scheme for the proxy frozen along ``u -> theta_{u,tau}(xi)``.

    Parameters
    ----------
    plan : SimulationPlan
    freezing : tuple ``(tau, xi)``
    """
    tau, xi = freezing
    theta = _flow_interpolant(plan.model, float(tau), xi, plan.t0, plan.T, tol)
    ens = _simulate(plan, _ProxyDynamics(plan.model, theta), workers, "proxy")
    ens.metadata.update(tau=float(tau), xi=[float(v) for v in np.ravel(xi)])
    return ens


def variation_of_constants(plan, freezing, tol=1e-9):
    """Terminal proxy values ``m + sum_k R_{T,u_k} B sigma_{u_k} dZ_k`` on the plan's noise.

    Uses the same block streams as the Euler schemes (fixed policy only),
    so the difference with :func:`simulate_frozen_proxy` is the pathwise
    discretization error.
    """
    if plan.step_policy != "fixed":
        raise ConfigurationError("the variation-of-constants representation uses the fixed policy")
    model = plan.model
    tau, xi = freezing
    theta = _flow_interpolant(model, float(tau), xi, plan.t0, plan.T, tol)
    sig = diffusion_callback(model.sigma, model.shape.d)
    grid = plan.time_grid()
    R = resolvent_family(model.matrix, plan.T, grid[:-1])
    RB = R @ embedding(model.shape)
    S = np.stack([sig(u, theta(u)[None])[0] for u in grid[:-1]])
    kernel = np.einsum("knd,kde->kne", RB, S)
    n, bs = int(plan.n_paths), int(plan.block_size)
    outs = []
    for b in range((n + bs - 1) // bs):
        m = min(bs, n - b * bs)
        rng = block_rng(plan.seed, b)
        x = _initial(plan, rng, m)
        noise = _BlockNoise(plan, rng, m)
        acc = np.zeros_like(x)
        for k in range(len(grid) - 1):
            acc += noise.increment(grid[k + 1] - grid[k]) @ kernel[k].T
        shift = frozen_shift(model.drift, model.matrix, float(tau), np.asarray(xi, float), plan.t0, plan.T, x,
                             tol=tol)
        outs.append(np.atleast_2d(shift) + acc)
    return np.concatenate(outs, axis=0)


def iterated_integral(path, k, times=None, dt=None):
    """``k``-fold left-point iterated integral of a recorded path.

    Parameters
    ----------
    path : ndarray of shape (..., K)
        Values on the grid (time is the last axis).
    k : int
        Number of integrations; ``k = 0`` returns the path.
    times : ndarray of shape (K,), optional
    dt : float, optional
        Uniform spacing when ``times`` is omitted.

    Returns
    -------
    ndarray of shape (..., K) with ``I^k`` at every grid time (zero at the start).
    """
    if int(k) != k or k < 0:
        raise ConfigurationError("k must be a nonnegative integer")
    y = np.asarray(path, dtype=float)
    K = y.shape[-1]
    if times is None:
        if dt is None:
            raise ConfigurationError("give either times or dt")
        steps = np.full(K - 1, float(dt))
    else:
        times = np.asarray(times, dtype=float)
        if times.shape != (K,) or np.any(np.diff(times) <= 0):
            raise ConfigurationError("times must be strictly increasing with one entry per sample")
        steps = np.diff(times)
    for _ in range(int(k)):
        inc = y[..., :-1] * steps
        y = np.concatenate([np.zeros(y.shape[:-1] + (1,)), np.cumsum(inc, axis=-1)], axis=-1)
    return y
