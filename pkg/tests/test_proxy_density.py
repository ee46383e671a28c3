import csv

import numpy as np
import pytest
from scipy import stats

from levychain.errors import ConfigurationError, NumericalError
from levychain.flows import term_drift
from levychain.levy_noise import LevyNoiseSpec, TemperedQ
from levychain.proxy_density import (
    FrozenSymbolContext,
    InversionGrid,
    derivative_bound_check,
    diffusion_callback,
    fit_symbol_coercivity,
    frozen_symbol,
    invert_density,
    invert_density_grid,
    marginal_density,
    plan_grid,
    verify_scaling,
    write_density_csv,
)
from levychain.scale_geometry import ChainMatrix, ChainShape

SH1 = ChainShape((1,))
Z1 = ChainMatrix.from_constant(SH1, np.zeros((1, 1)), kappa=0.0)
SH2 = ChainShape((1, 1))
A2 = ChainMatrix.subdiagonal_identity(SH2, kappa=0.0)


def _ctx1(alpha=1.5, s=1.0, t=0.0, **kw):
    spec = LevyNoiseSpec(alpha, inversion_only=alpha == 1.0)
    return FrozenSymbolContext(spec, SH1, Z1, t, s, **kw)


def test_cauchy_closed_form():
    dens = invert_density_grid(_ctx1(1.0), np.zeros(1))
    assert dens.evaluate(0.0) == pytest.approx(1 / np.pi, abs=1e-5)
    y = np.array([0.5, 2.0, 5.0])
    assert np.allclose(dens.evaluate(y), 1 / (np.pi * (1 + y**2)), atol=1e-5)
    assert dens.mass_defect < 1e-4


def test_one_dimensional_stable_against_scipy():
    h = 0.7
    dens = invert_density_grid(_ctx1(1.5, s=h), np.array([0.3]))
    y = np.array([-1.0, 0.3, 1.2, 4.0])
    ref = stats.levy_stable.pdf(y - 0.3, 1.5, 0.0, scale=h ** (1 / 1.5))
    assert np.allclose(dens.evaluate(y), ref, atol=1e-5)
    assert dens.mass_defect < 1e-6
    # FFT grid runs from -L to L - dw; drop the unpaired end point
    assert np.allclose(dens.profile[1:], dens.profile[1:][::-1], atol=1e-14)


def test_direct_sum_matches_grid():
    ctx = _ctx1(1.5)
    dens = invert_density_grid(ctx, np.zeros(1))
    y = np.array([[0.0], [0.8], [-2.5]])
    assert np.allclose(invert_density(ctx, np.zeros(1), y), dens.evaluate(y[:, 0]), atol=1e-6)


def test_chain_marginals_are_stable():
    # X_1 ~ stable scale h^{1/alpha}; X_2 = int (h - u) dZ_u ~ stable scale (h^{1+alpha}/(1+alpha))^{1/alpha}
    alpha, h = 1.5, 0.5
    ctx = FrozenSymbolContext(LevyNoiseSpec(alpha), SH2, A2, 0.0, h)
    x = np.array([0.2, -0.1])
    m1 = marginal_density(ctx, x, 0)
    m2 = marginal_density(ctx, x, 1)
    y = np.linspace(-1, 1, 5)
    ref1 = stats.levy_stable.pdf(y, alpha, 0.0, loc=x[0], scale=h ** (1 / alpha))
    ref2 = stats.levy_stable.pdf(y, alpha, 0.0, loc=x[1] + h * x[0],
                                 scale=(h ** (1 + alpha) / (1 + alpha)) ** (1 / alpha))
    assert np.allclose(m1.evaluate(y), ref1, rtol=1e-4, atol=1e-6)
    assert np.allclose(m2.evaluate(y), ref2, rtol=1e-4, atol=1e-6)


def test_two_dimensional_normalization_and_cells():
    ctx = FrozenSymbolContext(LevyNoiseSpec(1.5), SH2, A2, 0.0, 1.0)
    dens = invert_density_grid(ctx, np.zeros(2), InversionGrid(half_width=20.0))
    assert dens.mass_defect < 1e-4
    assert dens.noise_floor < 1e-4
    edges = [np.linspace(-3, 3, 7), np.linspace(-2, 2, 5)]
    inner, outside = dens.cell_probabilities(edges)
    assert inner.shape == (6, 4) and np.all(inner >= 0)
    assert 0 < outside < 1
    with pytest.raises(ConfigurationError):
        dens.cell_probabilities([np.linspace(-100, 100, 3), np.linspace(-1, 1, 3)])


def test_chapman_kolmogorov_one_dimensional():
    # proxy frozen along a fixed curve is Markov: p_{0,2} = p_{0,1} * p_{1,2}
    drift = term_drift(SH1, [dict(kind="sine", level=1, var_level=1, amplitude=0.8, frequency=2.0)])
    kw = dict(drift=drift, sigma=0.7, tau=0.0, xi=np.array([0.4]))
    spec = LevyNoiseSpec(1.5)
    c01 = FrozenSymbolContext(spec, SH1, Z1, 0.0, 1.0, **kw)
    c12 = FrozenSymbolContext(spec, SH1, Z1, 1.0, 2.0, **kw)
    c02 = FrozenSymbolContext(spec, SH1, Z1, 0.0, 2.0, **kw)
    x = np.array([0.1])
    d01 = invert_density_grid(c01, x, InversionGrid(half_width=400.0))
    d12 = invert_density_grid(c12, np.zeros(1), InversionGrid(half_width=400.0))
    d02 = invert_density_grid(c02, x)
    y = d01.y_axes[0]
    dy = y[1] - y[0]
    z = np.array([-1.0, 0.0, 1.3, 3.0])
    # A = 0: the (1, 2) shift is translation-equivariant, p_{1,2}(y, z) = p_{1,2}(0, z - y)
    conv = np.array([np.sum(d01.density * d12.evaluate(zk - y)) * dy for zk in z])
    assert np.allclose(conv, d02.evaluate(z), atol=2e-4)


def test_symbol_coercivity_positive():
    z = np.linspace(-30, 30, 241)[:, None]
    for spec in (LevyNoiseSpec(1.5), LevyNoiseSpec(1.5, q_family=TemperedQ(rate=1.0))):
        ctx = FrozenSymbolContext(spec, SH1, Z1, 0.0, 1.0)
        C = fit_symbol_coercivity(ctx, z)
        assert C > 0
        assert np.all(frozen_symbol(ctx, z) <= 0)


def test_mass_defect_raises_with_residual():
    ctx = _ctx1(1.5)
    with pytest.raises(NumericalError) as exc:
        invert_density_grid(ctx, np.zeros(1), InversionGrid(half_width=3.0, tolerance=1e-9))
    assert exc.value.residual > 1e-9


def test_scaling_collapse_stable_and_divergence_tempered():
    hs = (1.0, 0.5, 0.1)
    st = [FrozenSymbolContext(LevyNoiseSpec(1.5), SH2, A2, 0.0, h) for h in hs]
    rep = verify_scaling(st, np.zeros(2), InversionGrid(half_width=20.0), components=[0])
    assert rep["max_deviation"] < 1e-10 and rep["divergence_radius"] is None
    spec = LevyNoiseSpec(1.5, q_family=TemperedQ(rate=1.0))
    tp = [FrozenSymbolContext(spec, SH1, Z1, 0.0, h) for h in (0.01, 1.0)]
    rep = verify_scaling(tp, np.zeros(1), InversionGrid(half_width=20.0))
    assert rep["divergence_radius"] is not None


def test_derivative_slopes_one_dimensional():
    ctxs = [_ctx1(1.5, s=h) for h in (1.0, 0.5, 0.25)]
    for k in (0, 1, 2):
        r = derivative_bound_check(ctxs, k, 1)
        assert r["expected"] == pytest.approx(-k / 1.5)
        assert r["passed"]
    with pytest.raises(ConfigurationError):
        derivative_bound_check(ctxs, 3, 1)


def test_density_csv_round_trip(tmp_path):
    dens = invert_density_grid(_ctx1(1.5), np.zeros(1))
    p = tmp_path / "d.csv"
    write_density_csv(p, dens, stride=7)
    with open(p) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["y_1", "value", "clipped"]
    vals = np.array([float(r[1]) for r in rows[1:]])
    assert np.array_equal(vals, dens.density[::7])


def test_diffusion_callback_and_ellipticity():
    f = diffusion_callback(None, 2)
    assert f(0.0, np.zeros((3, 4))).shape == (3, 2, 2)
    assert np.array_equal(diffusion_callback(2.0, 1).constant, [[2.0]])
    g = diffusion_callback(lambda u, x: np.eye(2) * (1 + u), 2)
    assert g(1.0, np.zeros((2, 4)))[0, 0, 0] == 2.0 and g.constant is None
    with pytest.raises(ConfigurationError):
        FrozenSymbolContext(LevyNoiseSpec(1.5), SH1, Z1, 0.0, 1.0, sigma=-1.0)


def test_context_validation():
    with pytest.raises(ConfigurationError):
        _ctx1(1.5, s=0.0)
    with pytest.raises(ConfigurationError):
        FrozenSymbolContext(LevyNoiseSpec(1.5, dimension=2), SH1, Z1, 0.0, 1.0)


def test_grid_plan_is_deterministic():
    ctx = _ctx1(1.5)
    a = plan_grid(ctx.exponent, 1, InversionGrid())
    b = plan_grid(ctx.exponent, 1, InversionGrid())
    assert (a.L, a.d_eta, a.Z) == (b.L, b.d_eta, b.Z)


def test_cdf_matches_scipy_between_grid_nodes():
    # grid spacing is ~0.3 here; the cdf must not degrade to linear interpolation
    dens = invert_density_grid(_ctx1(1.5), np.array([0.3]))
    y = np.linspace(-5, 5, 41) + 0.013
    ref = stats.levy_stable.cdf(y - 0.3, 1.5, 0.0)
    assert np.allclose(dens.cdf(y), ref, atol=5e-5)
    assert np.isnan(dens.cdf(1e4))


def test_joint_cells_reduce_to_marginal_cells():
    ctx = FrozenSymbolContext(LevyNoiseSpec(1.5), SH2, A2, 0.0, 1.0)
    x = np.array([0.2, -0.1])
    joint = invert_density_grid(ctx, x, InversionGrid(half_width=20.0))
    e0 = np.array([-1.3, 0.1, 0.9, 2.2])
    e1 = np.array([-2.0, -0.45, 0.35, 1.7])
    inner, _ = joint.cell_probabilities([e0, np.array([-19.0, 19.0])])
    assert np.allclose(inner[:, 0], np.diff(marginal_density(ctx, x, 0).cdf(e0)), atol=5e-4)
    inner, _ = joint.cell_probabilities([np.array([-19.0, 19.0]), e1])
    assert np.allclose(inner[0], np.diff(marginal_density(ctx, x, 1).cdf(e1)), atol=5e-4)
