import numpy as np
import pytest
from scipy import integrate, linalg, stats

from levychain.errors import ConfigurationError, DivergenceError
from levychain.flows import (
    DriftSpec,
    bilip_sweep,
    control_error_ratio,
    flow_jacobian_det,
    frozen_shift,
    identification_defects,
    mollification_radii,
    mollified_flow_gap,
    mollify_drift,
    peano_drift,
    solve_flow,
    term_drift,
    zero_drift,
)
from levychain.scale_geometry import ChainMatrix, ChainShape, scale_matrix

SH = ChainShape((1, 1))
A = ChainMatrix.subdiagonal_identity(SH)
A0 = ChainMatrix.from_constant(SH, np.zeros((2, 2)), kappa=0.0)


def test_linear_flow_is_matrix_exponential():
    x = np.array([0.3, -1.2])
    sol = solve_flow(zero_drift(SH), A, 0.2, x, 1.1)
    assert np.allclose(sol.end, linalg.expm(0.9 * A.constant) @ x, atol=1e-12)
    back = solve_flow(zero_drift(SH), A, 1.1, sol.end, 0.2)
    assert np.allclose(back.end, x, atol=1e-12)
    assert sol.direction == "forward" and back.direction == "backward"


def test_flow_interpolation_hits_the_grid():
    x = np.array([0.3, -1.2])
    sol = solve_flow(peano_drift(SH, 2, 2, 0.6), A, 0.0, x, 1.0)
    mid = sol.at(0.37)
    direct = solve_flow(peano_drift(SH, 2, 2, 0.6), A, 0.0, x, 0.37).end
    assert np.allclose(mid, direct, atol=1e-6)


@pytest.mark.parametrize("m", [10.0, 1e3])
def test_peano_flow_closed_form(m):
    beta = 0.4
    F = peano_drift(SH, 2, 2, beta)
    end = solve_flow(F, A0, 0.0, np.array([0.0, 1 / m]), 1.0, tol=1e-10).end
    exact = ((1 - beta) * 1.0 + (1 / m) ** (1 - beta)) ** (1 / (1 - beta))
    assert end[1] == pytest.approx(exact, rel=1e-7)


def test_peano_flow_from_origin_selects_zero():
    end = solve_flow(peano_drift(SH, 2, 2, 0.3), A0, 0.0, np.zeros(2), 1.0).end
    assert np.array_equal(end, np.zeros(2))


def test_batched_flow_matches_single_runs():
    F = peano_drift(SH, 2, 2, 0.6)
    rng = np.random.default_rng(0)
    xs = rng.standard_normal((4, 2))
    ts = rng.uniform(0.5, 1.0, 4)
    batch = solve_flow(F, A, 0.0, xs, ts, tol=1e-10).end
    for k in range(4):
        assert np.allclose(batch[k], solve_flow(F, A, 0.0, xs[k], ts[k], tol=1e-10).end, atol=1e-8)


def test_divergence_error_names_path():
    F = DriftSpec(SH, lambda t, x: 50.0 * x * np.abs(x), (1.0, 1.0))
    xi = np.array([[0.0, 0.0], [1.0, 1.0]])
    with pytest.raises(DivergenceError) as exc:
        solve_flow(F, A, 0.0, xi, 1.0, n_steps=64)
    assert exc.value.path_id == 1


def test_frozen_shift_zero_drift_is_linear():
    x = np.array([0.5, 0.1])
    m = frozen_shift(zero_drift(SH), A, 0.7, np.ones(2), 0.1, 0.6, x)
    assert np.allclose(m, linalg.expm(0.5 * A.constant) @ x, atol=1e-12)


def test_frozen_shift_all_freezing_positions():
    F = peano_drift(SH, 2, 2, 0.6)
    x = np.array([0.2, -0.4])
    xi = np.array([1.0, 0.5])
    for tau in (0.0, 0.4, 1.0):
        m = frozen_shift(F, A, tau, xi, 0.2, 0.8, x, tol=1e-9)
        # Simpson quadrature of R_{s,u} F(u, theta_{u,tau}(xi)) with R_{s,u} = I + (s - u) A
        us = np.linspace(0.2, 0.8, 3201)
        th = solve_flow(F, A, tau, np.tile(xi, (len(us), 1)), us, n_steps=2000).end
        R = np.eye(2) + (0.8 - us)[:, None, None] * A.constant
        g = np.einsum("bij,bj->bi", R, F(us, th))
        ref = (np.eye(2) + 0.6 * A.constant) @ x + integrate.simpson(g, x=us, axis=0)
        assert np.allclose(m, ref, atol=1e-6)


def test_identification_identities():
    F = peano_drift(SH, 2, 2, 0.6)
    rng = np.random.default_rng(1)
    B = 20
    t = rng.uniform(0, 0.5, B)
    s = t + rng.uniform(0.01, 0.5, B)
    x, y = rng.standard_normal((B, 2)), rng.standard_normal((B, 2))
    d = identification_defects(F, A, t, s, x, y, tol=1e-7)
    assert d["forward"].max() <= 10 * 1e-7
    assert d["backward"].max() <= 10 * 1e-7
    # the literal form fails once A is nonzero and holds at A = 0
    assert d["literal"].max() > 1e-2
    d0 = identification_defects(F, A0, t, s, x, y, tol=1e-7)
    assert d0["literal"].max() <= 10 * 1e-7


def test_mollification_radii_schedules():
    sh = ChainShape((1, 1, 1))
    hol = (1.0, 0.5, 0.8)
    R = mollification_radii(sh, 1.5, hol, 0.1, "flow-lemma")
    assert R[0].tolist() == [0, 0, 0]
    assert R[1, 1] == pytest.approx(0.1 ** (1 / (1.5 * 0.5)))
    assert R[1, 2] == pytest.approx(0.1 ** (1 / (1.5 * 0.8)))
    assert R[2, 2] == pytest.approx(0.1 ** ((1 + 1.5) / (1.5 * 0.8)))
    D = mollification_radii(sh, 1.5, hol, 0.1, "determinant-lemma", C_bar=10.0, C_1=100.0)
    assert D[0].tolist() == [100.0, 100.0, 100.0]
    assert D[1, 2] == pytest.approx(10 * 0.1 ** ((1 + 1.5) / (1.5 * 0.8)))
    with pytest.raises(ConfigurationError):
        mollification_radii(sh, 1.5, hol, 0.1, "other")


def test_mollifier_preserves_linear_drift_and_differentiates():
    F = term_drift(SH, [dict(kind="power", level=2, var_level=2, beta=1.0, amplitude=2.0)])
    md = mollify_drift(F, 1.5, 0.5, "flow-lemma")
    x = np.array([[0.3, -0.7], [1.0, 2.0]])
    assert np.allclose(md(0.0, x), F(0.0, x), atol=1e-12)
    G = peano_drift(SH, 2, 2, 0.6)
    mg = mollify_drift(G, 1.5, 0.5, "flow-lemma")
    r, x2, b = mg.radii[1, 1], 0.05, 0.6
    # E[f'(x - r w)] with the kink at w = x/r split out
    f = lambda w: b * abs(x2 - r * w) ** (b - 1) * stats.norm.pdf(w)  # noqa: E731
    ref = integrate.quad(f, -6, x2 / r, limit=200)[0] + integrate.quad(f, x2 / r, 6, limit=200)[0]
    assert mg.jacobian(0.0, np.array([[0.1, x2]]))[0, 1, 1] == pytest.approx(ref, rel=1e-4)


def test_jacobian_determinant_matches_liouville():
    F = peano_drift(SH, 2, 2, 0.6)
    for h in (1.0, 0.01):
        md = mollify_drift(F, 1.5, h, "determinant-lemma")
        y = np.random.default_rng(2).standard_normal((5, 2)) * scale_matrix(SH, 1.5, h).T
        det, liou = flow_jacobian_det(md, A, 0.0, h, y)
        assert np.all(det > 0)
        assert np.allclose(det, liou, rtol=1e-6)
    with pytest.raises(ConfigurationError):
        flow_jacobian_det(mollify_drift(F, 1.5, 0.1, "flow-lemma"), A, 0.0, 0.1, np.zeros(2))


def test_mollified_flow_gap_is_bounded():
    F = peano_drift(SH, 2, 2, 0.6)
    gaps = []
    for h in (1.0, 0.1, 0.01):
        y = np.random.default_rng(3).standard_normal((5, 2)) * scale_matrix(SH, 1.5, h).T
        gaps.append(mollified_flow_gap(F, A, 1.5, 0.0, h, y, tol=1e-7).max())
    assert np.all(np.isfinite(gaps)) and max(gaps) < 1.0


def test_bilipschitz_sweep_rows_pass():
    F = peano_drift(SH, 2, 2, 0.6)
    rows, fitted = bilip_sweep(F, A, 1.5, [1.0, 0.1], 5, np.random.default_rng(4), tol=1e-7)
    assert len(rows) == 10 and all(r["passed"] for r in rows)
    assert all(C >= 1.0 and Cp >= 0.0 for C, Cp in fitted.values())


def test_control_error_ratio_finite():
    F = peano_drift(SH, 2, 2, 0.6)
    rng = np.random.default_rng(5)
    r = control_error_ratio(F, A, 1.5, np.zeros(4), np.full(4, 0.1), rng.standard_normal((4, 2)),
                            rng.standard_normal((4, 2)), tol=1e-7)
    assert np.all(np.isfinite(r)) and np.all(r >= 0)


def test_drift_spec_validation():
    with pytest.raises(ConfigurationError):
        DriftSpec(SH, lambda t, x: x, (1.0, 1.5))
    with pytest.raises(ConfigurationError):
        DriftSpec(SH, lambda t, x: x, (1.0, 1.0), depends=np.ones((2, 2), bool))
    leaky = DriftSpec(SH, lambda t, x: np.stack([0 * x[..., 0], x[..., 0]], -1), (1.0, 1.0),
                      depends=np.array([[True, True], [False, True]]))
    with pytest.raises(ConfigurationError, match="must not depend"):
        leaky.check_dependency()
    with pytest.raises(ConfigurationError, match="threshold"):
        peano_drift(SH, 2, 2, 0.3).check_wellposed(1.5)
    peano_drift(SH, 2, 2, 0.6).check_wellposed(1.5)
