"""End-to-end acceptance criteria.

Each test records one PASS/FAIL line (printed in the terminal summary) and
then asserts it. Runtime budgets are part of each criterion.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from levychain.cli import main
from levychain.experiments import (
    FlowConfig,
    KrylovConfig,
    NoiseCheckConfig,
    PeanoConfig,
    QReductionConfig,
    ScalingConfig,
    flow_lemma_sweep,
    krylov_diagnostic,
    moment_slope,
    noise_check,
    peano_experiment,
    q_reduction_check,
    scaling_experiment,
    threshold,
    threshold_sweep,
)
from levychain.levy_noise import LevyNoiseSpec
from levychain.proxy_density import FrozenSymbolContext, InversionGrid, invert_density_grid, marginal_density
from levychain.scale_geometry import ChainMatrix, ChainShape
from levychain.sde_engine import ChainModel, SimulationPlan, simulate_chain

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class _Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def _finish(acceptance, n, ok, detail, clock, budget):
    in_time = budget is None or clock.elapsed <= budget
    limit = "" if budget is None else f"/{budget:.0f}s"
    acceptance(n, ok and in_time, f"{detail} [{clock.elapsed:.1f}s{limit}]")
    assert ok, detail
    assert in_time, f"runtime {clock.elapsed:.1f}s exceeds {budget}s"


def test_c01_noise_correctness(acceptance):
    parts, ok = [], True
    with _Clock() as clk:
        for alpha in (1.2, 1.5, 1.8):
            rep = noise_check(NoiseCheckConfig(alpha=alpha), seed=0)
            ok &= rep.status == "pass"
            parts.append(f"a={alpha}: max|z|={rep.estimate['max_abs_z']:.2f} hill={rep.estimate['hill']:.3f}")
    _finish(acceptance, 1, ok, "; ".join(parts), clk, 60)


def test_c02_q_reduction(acceptance):
    with _Clock() as clk:
        rep = q_reduction_check(QReductionConfig(alpha=1.5, n_samples=100_000, level=0.01), seed=0)
    _finish(acceptance, 2, rep.status == "pass", f"KS p={rep.estimate['ks_pvalue']:.3f} (>= 0.01)", clk, 60)


def test_c03_iterated_integral_scaling(acceptance):
    alpha, dt = 1.5, 5e-4
    with _Clock() as clk:
        sh = ChainShape((1, 1, 1))
        model = ChainModel(sh, ChainMatrix.subdiagonal_identity(sh, kappa=0.0), LevyNoiseSpec(alpha), None, 1.0)
        rec = np.round(np.geomspace(0.01, 1.0, 11) / dt) * dt
        plan = SimulationPlan(model, np.zeros(3), dt=dt, n_paths=100_000, seed=0, record=rec, block_size=8192)
        ens = simulate_chain(plan)
        parts, ok = [], True
        for i in range(3):
            slope = moment_slope(ens.times, ens.states[:, :, i], p=0.5)
            want = i + 1.0 / alpha
            rel = abs(slope - want) / want
            ok &= rel <= 0.05
            parts.append(f"i={i + 1}: {slope:.4f} vs {want:.4f} ({rel:.1%})")
    _finish(acceptance, 3, ok, "; ".join(parts), clk, 120)


def _quantile_edges(dens, qs):
    y = np.linspace(-50, 50, 400_001)
    c = dens.cdf(y)
    ok = np.isfinite(c)
    return np.interp(qs, c[ok], y[ok])


def test_c04_proxy_density(acceptance):
    alpha, T = 1.5, 1.0
    with _Clock() as clk:
        sh1 = ChainShape((1,))
        z1 = ChainMatrix.from_constant(sh1, np.zeros((1, 1)), kappa=0.0)
        cauchy = invert_density_grid(FrozenSymbolContext(LevyNoiseSpec(1.0, inversion_only=True), sh1, z1, 0.0, 1.0),
                                     np.zeros(1))
        peak_err = abs(float(cauchy.evaluate(0.0)) - 1 / np.pi)

        sh = ChainShape((1, 1))
        A = ChainMatrix.subdiagonal_identity(sh, kappa=0.0)
        x0 = np.array([0.3, -0.2])
        ctx = FrozenSymbolContext(LevyNoiseSpec(alpha), sh, A, 0.0, T)
        margs = [marginal_density(ctx, x0, c) for c in range(2)]
        joint = invert_density_grid(ctx, x0, InversionGrid(half_width=20.0))
        defects = [cauchy.mass_defect] + [m.mass_defect for m in margs] + [joint.mass_defect]

        model = ChainModel(sh, A, LevyNoiseSpec(alpha), None, 1.0)
        term = simulate_chain(SimulationPlan(model, x0, T=T, dt=2e-3, n_paths=100_000, seed=0)).terminal
        n = len(term)
        pvals = []
        # marginals: 20 bins at model quantiles, tails included in the end bins
        for c, dens in enumerate(margs):
            edges = _quantile_edges(dens, np.linspace(0.05, 0.95, 19))
            p = np.diff(np.concatenate([[0.0], dens.cdf(edges), [1.0]]))
            obs = np.bincount(np.searchsorted(edges, term[:, c]), minlength=20)
            pvals.append(stats.chisquare(obs, p * n / p.sum()).pvalue)
        # joint: 5 x 4 cells plus one overflow bin
        e0 = _quantile_edges(margs[0], [0.05, 0.25, 0.45, 0.55, 0.75, 0.95])
        e1 = _quantile_edges(margs[1], [0.05, 0.3, 0.5, 0.7, 0.95])
        inner, outside = joint.cell_probabilities([e0, e1])
        h, _, _ = np.histogram2d(term[:, 0], term[:, 1], bins=[e0, e1])
        obs = np.append(h.ravel(), n - h.sum())
        p = np.append(inner.ravel(), outside)
        pvals.append(stats.chisquare(obs, p * n / p.sum()).pvalue)
    ok = peak_err <= 1e-4 and max(defects) <= 1e-4 and min(pvals) > 0.01
    detail = (f"Cauchy peak err={peak_err:.1e}; max mass defect={max(defects):.1e}; "
              f"chi2 p (x1, x2, joint)={', '.join(f'{v:.3f}' for v in pvals)}")
    _finish(acceptance, 4, ok, detail, clk, 180)


def test_c05_smoothing_exponents(acceptance):
    alpha = 1.5
    with _Clock() as clk:
        rep = scaling_experiment(ScalingConfig(alpha=alpha, n=2, orders=(1, 2), levels=(1, 2), slope_tol=0.05))
    rows = [r for r in rep.rows if r["check"] == "derivative"]
    # independent expected slopes -k(1 + alpha(i-1))/alpha
    want = {(k, i): -k * (1 + alpha * (i - 1)) / alpha for k in (1, 2) for i in (1, 2)}
    devs = [abs(r["slope"] - want[(r["order"], r["level"])]) for r in rows]
    ok = rep.status == "pass" and len(rows) == 4 and max(devs) <= 0.05
    slopes = ", ".join(f"k={r['order']},i={r['level']}:{r['slope']:.4f}" for r in rows)
    _finish(acceptance, 5, ok, f"{slopes}; max dev={max(devs):.1e}", clk, 180)


def test_c06_flow_lemmas(acceptance):
    with _Clock() as clk:
        rep = flow_lemma_sweep(FlowConfig(n_samples=100, gaps=(1, 0.1, 0.01, 0.001)), seed=0)
    e = rep.estimate
    detail = (f"identification={e['identification_max']:.1e} (<= {10 * e['tolerance']:.0e}); "
              f"det floor={', '.join(f'{v:.3f}' for v in e['det_floor'])}; "
              f"gap max={', '.join(f'{v:.3f}' for v in e['flow_gap_max'])}")
    _finish(acceptance, 6, rep.status == "pass", detail, clk, 120)


def test_c07_threshold_arithmetic(acceptance):
    with _Clock() as clk:
        rep = threshold_sweep(np.round(np.linspace(1.1, 2.0, 10), 12), range(2, 7), range(2, 7))
        at2 = threshold(2.0, 2, 2).value
        below = [threshold(2.0 - eps, 2, 2).value for eps in (1e-3, 1e-6, 1e-9)]
    ok = (rep.status == "pass" and abs(at2 - 1 / 3) <= 1e-15 and all(v > 1 / 3 for v in below)
          and abs(below[-1] - 1 / 3) < 1e-9)
    detail = (f"max disagreement={rep.estimate['max_disagreement']:.1e} over {rep.estimate['n']} pairs; "
              f"alpha=2, i=j=2 -> {at2!r}")
    _finish(acceptance, 7, ok, detail, clk, 5)


def test_c08_peano_signature(acceptance):
    with _Clock() as clk:
        rep = peano_experiment(PeanoConfig(alpha=1.5, beta=0.3, i=2, j=2, n_paths=10_000,
                                           starts=(10, 100, 1000, 10000), slack=0.02), seed=0)
    e = rep.estimate
    certs = ", ".join("none" if c is None else f"{c:.3g}" for c in e["certified_rho"])
    detail = (f"status={rep.status}; certified rho per start={certs}; stable={e['rho_stable']}; "
              f"start-uniform rho={e['uniform_rho']}; sign split={e['sign_split']:.4f} ok={e['sign_split_ok']}")
    _finish(acceptance, 8, rep.status == "pass", detail, clk, 300)


def test_c09_krylov(acceptance):
    with _Clock() as clk:
        rep = krylov_diagnostic(KrylovConfig(p=10.0, q=14.0, alpha=1.5, n=2, n_paths=100_000), seed=0)
    e = rep.estimate
    ok = rep.status == "pass" and e["condition_satisfied"]
    detail = (f"condition lhs={e['condition_lhs']:.3f}; fitted C={', '.join(f'{v:.3f}' for v in e['fitted_C'])}; "
              f"finest change={e['finest_change']:.3f}x")
    _finish(acceptance, 9, ok, detail, clk, 300)


_SMALL = {
    "sample": ["sample.n_samples=50000"],
    "simulate": ["simulation.n_paths=300"],
    "density": [],
    "peano": ["peano.n_paths=5000", "peano.dt=0.01", "peano.starts=[10, 1000]"],
    "threshold-sweep": [],
    "krylov": ["krylov.n_paths=5000", "krylov.dt=0.02"],
    "scaling": ["scaling.gaps=[1.0, 0.5]", "scaling.orders=[1]", "scaling.levels=[1]"],
    "flow-diagnostics": ["flow_diagnostics.n_samples=5", "flow_diagnostics.gaps=[1.0, 0.1]",
                         "flow_diagnostics.n_points=3"],
}


def test_c10_determinism(acceptance, tmp_path):
    mismatched = []
    with _Clock() as clk:
        for kind, sets in _SMALL.items():
            digests = []
            for tag, workers in (("a", "1"), ("b", "3"), ("c", "3")):
                out = tmp_path / f"{kind}-{tag}"
                argv = ["run", kind, "--config", str(CONFIGS / f"{kind}.toml"), "--seed", "7",
                        "--out", str(out), "--workers", workers]
                for s in sets:
                    argv += ["--set", s]
                code = main(argv)
                if code == 1:
                    mismatched.append(f"{kind}: error")
                    break
                digests.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
            if len(digests) == 3 and not (digests[0] == digests[1] == digests[2] and digests[0]):
                mismatched.append(kind)
    detail = f"{len(_SMALL)} kinds x (1, 3, 3 workers): " + ("all CSV byte-identical" if not mismatched
                                                           else "differs: " + ", ".join(mismatched))
    _finish(acceptance, 10, not mismatched, detail, clk, None)
