import csv

import numpy as np
import pytest
from scipy import integrate, stats

from levychain.errors import ConfigurationError
from levychain.experiments import (
    ExperimentReport,
    FlowConfig,
    KrylovConfig,
    NoiseCheckConfig,
    PeanoConfig,
    QReductionConfig,
    ScalingConfig,
    condition_C,
    gaussian_bump_norm,
    krylov_diagnostic,
    moment_slope,
    noise_check,
    peano_constants,
    peano_experiment,
    q_reduction_check,
    threshold,
    threshold_sweep,
    wellposedness_validator,
    wilson_interval,
)
from levychain.levy_noise import TemperedQ


def test_threshold_values():
    assert threshold(2.0, 2, 2).value == pytest.approx(1 / 3, abs=1e-15)
    t = threshold(1.5, 3, 5)
    assert t.value == pytest.approx((1 + 1.5) / (1 + 6), abs=1e-15)
    assert t.gamma == pytest.approx(2 + 1 / 1.5) and t.k == 2
    with pytest.raises(ConfigurationError):
        threshold(1.5, 3, 2)
    with pytest.raises(ConfigurationError):
        threshold(2.5, 2, 2)


def test_threshold_sweep_grid():
    rep = threshold_sweep(np.linspace(1.05, 1.95, 10), range(2, 7), range(2, 7))
    assert rep.status == "pass"
    assert rep.estimate["n"] == 10 * 15
    assert rep.estimate["max_disagreement"] <= 1e-12


def test_wellposedness_validator():
    assert wellposedness_validator(1.5, (1.0, 0.6)).status == "pass"
    rep = wellposedness_validator(1.5, (1.0, 0.3, 0.9))
    assert rep.status == "fail"
    assert [r["passed"] for r in rep.rows] == [False, True]


def test_condition_C():
    c = condition_C(1.5, (1, 1), 10.0, 14.0)
    lhs = ((1 - 1.5) / 1.5 * 2 + 1 + 2) / 14 + 1 / 10
    assert c["lhs"] == pytest.approx(lhs) and c["satisfied"]
    assert c["homogeneous_lhs"] == pytest.approx(2 * lhs)
    assert not condition_C(1.5, (1, 1), 2.0, 2.0)["satisfied"]
    assert condition_C(1.5, (2, 1), 10.0, 14.0)["homogeneous_lhs"] is None
    with pytest.raises(ConfigurationError):
        condition_C(1.5, (1,), 1.0, 3.0)


def test_wilson_interval_matches_binomtest():
    lo, hi = wilson_interval(75, 100, 0.99)
    # binomtest's Wilson interval without continuity correction
    ci = stats.binomtest(75, 100).proportion_ci(0.99, method="wilson")
    assert (lo, hi) == pytest.approx((ci.low, ci.high), abs=1e-12)
    assert wilson_interval(0, 0) == (0.0, 1.0)


def test_moment_slope_of_power_law():
    t = np.geomspace(0.01, 1, 20)
    v = np.outer(np.random.default_rng(0).standard_normal(500), t**1.7)
    assert moment_slope(t, v, p=0.5) == pytest.approx(1.7, abs=1e-10)


@pytest.mark.parametrize("k,beta", [(0, 0.3), (1, 0.4), (2, 0.25)])
def test_peano_constants_exact_identity(k, beta):
    pc = peano_constants(k, beta, "exact")
    e, c, t = pc["exponent"], 0.7, 1.3

    def ik(s):
        # k-fold integral of c s^e
        return c * s ** (e + k) / np.prod(e + np.arange(1, k + 1))

    lhs = integrate.quad(lambda s: abs(ik(s)) ** beta, 0, t)[0]
    assert lhs == pytest.approx(pc["C_tilde"] * c**beta * t**e, rel=1e-8)
    # c t^e with c = extremal solves x = int |I^k x|^beta
    assert pc["extremal"] ** (1 - beta) == pytest.approx(pc["C_tilde"], rel=1e-12)
    assert pc["below_extremal"]


def test_peano_constants_shifted_convention():
    pc = peano_constants(2, 0.3, "shifted")
    e = (2 * 0.3 + 1) / 0.7
    assert pc["C_tilde"] == pytest.approx((e * (e + 1)) ** -0.3)
    assert pc["c0"] == pytest.approx(pc["C_tilde"] ** (1 / 0.7) / 2)
    with pytest.raises(ConfigurationError):
        peano_constants(1, 1.2)
    with pytest.raises(ConfigurationError):
        peano_constants(1, 0.3, "other")


def test_gaussian_bump_norm_against_quadrature():
    eps, q, p = 0.3, 3.0, 2.0
    inner = integrate.quad(lambda x: np.exp(-q * x * x / (2 * eps * eps)), -np.inf, np.inf)[0]
    assert gaussian_bump_norm(eps, 1, p, q, 0.0, 2.0) == pytest.approx(2 ** (1 / p) * inner ** (1 / q))
    assert gaussian_bump_norm(eps, 2, p, q, 0.0, 1.0) == pytest.approx(inner ** (2 / q))


def test_peano_margin_rejected():
    thr = threshold(1.5, 2, 2).value
    with pytest.raises(ConfigurationError, match="threshold"):
        peano_experiment(PeanoConfig(beta=thr + 0.01, n_paths=10))
    with pytest.raises(ConfigurationError):
        PeanoConfig(i=3, j=2)


def test_small_peano_runs():
    cfg = PeanoConfig(beta=0.3, n_paths=400, dt=1e-2, starts=(10, 100), rho_grid=(0.01, 0.1, 0.5))
    rep = peano_experiment(cfg, seed=1)
    assert rep.status in ("pass", "fail", "inconclusive")
    assert rep.estimate["below_threshold"]
    assert len([r for r in rep.rows if r["section"] == "tau"]) == 6
    for r in rep.rows[:6]:
        assert r["wilson_lo"] <= r["p_hat"] <= r["wilson_hi"]
    above = peano_experiment(PeanoConfig(beta=0.8, n_paths=200, dt=1e-2, starts=(10,), rho_grid=(0.1,)), seed=1)
    assert above.status == "report"


def test_small_krylov_run_is_deterministic():
    cfg = KrylovConfig(n_paths=2000, dt=0.02, widths=(1.0, 0.5))
    a, b = krylov_diagnostic(cfg, seed=3), krylov_diagnostic(cfg, seed=3)
    assert a.rows == b.rows
    assert a.status in ("pass", "fail")
    assert a.estimate["fitted_C"][1] >= a.estimate["fitted_C"][0]
    bad = krylov_diagnostic(KrylovConfig(p=2.0, q=2.0, n_paths=200, dt=0.05, widths=(1.0, 0.5)))
    assert bad.status == "report"
    with pytest.raises(ConfigurationError):
        KrylovConfig(widths=(1.0,))


def test_small_noise_check():
    rep = noise_check(NoiseCheckConfig(alpha=1.5, n_samples=100_000, block=20_000), seed=0)
    assert rep.status == "pass"
    assert rep.estimate["max_abs_z"] < 3


def test_noise_check_does_not_depend_on_workers():
    cfg = NoiseCheckConfig(alpha=1.3, n_samples=40_000, block=10_000)
    assert noise_check(cfg, seed=2, workers=1).rows == noise_check(cfg, seed=2, workers=3).rows


def test_q_reduction_statuses():
    cfg = QReductionConfig(alpha=1.5, n_samples=20_000)
    assert q_reduction_check(cfg, seed=0).status == "pass"
    assert q_reduction_check(cfg, seed=0, q_family=TemperedQ(rate=1.0)).status == "report"


def test_config_defaults():
    assert ScalingConfig().gaps == (1, 0.5, 0.25, 0.125)
    assert FlowConfig().gaps == (1, 0.1, 0.01, 0.001)


def test_report_csv_and_summary(tmp_path):
    rep = ExperimentReport("x", "claim", "pass", {"a": 0.1, "ok": True, "v": [1.0, 2.0]}, "none",
                           [dict(a=0.1), dict(a=1 / 3, b=None)])
    rep.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows == [["a", "b"], ["0.1", ""], [repr(1 / 3), ""]]
    s = rep.summary()
    assert "estimate.ok: true" in s and "estimate.v: [1.0 2.0]" in s and s.endswith("status: pass\n")
