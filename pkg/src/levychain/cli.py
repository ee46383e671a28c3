"""Command-line entry point: ``levychain run <kind> --config FILE``.

Configurations are TOML files validated against ``schema/config.schema.json``
before any computation. Every run writes ``<kind>.csv`` (plus kind-specific
artifacts) and ``summary.txt`` into the output directory. Exit status is 0 on
pass or report, 2 on fail, 3 on inconclusive and 1 on error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import traceback
from importlib import resources

import jsonschema
import numpy as np

from .errors import ConfigurationError, LevyChainError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["KINDS", "load_schema", "load_config", "validate_config", "apply_override", "run", "main"]

KINDS = ("sample", "simulate", "density", "peano", "threshold-sweep", "krylov", "scaling", "flow-diagnostics")
EXIT = {"pass": 0, "report": 0, "fail": 2, "inconclusive": 3}


# ---------------------------------------------------------------------------
# Configuration


def load_schema():
    """The published configuration schema as a dict."""
    text = resources.files("levychain").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _parse_value(text):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_override(cfg, assignment):
    """Apply ``dotted.key=value`` to ``cfg`` in place; values use TOML syntax."""
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"override {key!r}: {p!r} is not a table")
    node[parts[-1]] = _parse_value(text.strip())


def _path(err):
    loc = ".".join(str(p) for p in err.absolute_path)
    return loc or "<root>"


def validate_config(cfg):
    """Validate against the schema; all violations are reported with key paths."""
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        lines = [f"{_path(e)}: {e.message}" for e in errors]
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(lines))


def load_config(path, kind=None, overrides=()):
    """Read, override and validate a TOML configuration."""
    try:
        with open(path, "rb") as fh:
            cfg = tomllib.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"cannot parse config {path}: {exc}") from None
    for a in overrides:
        apply_override(cfg, a)
    if kind is not None:
        if cfg.get("kind", kind) != kind:
            raise ConfigurationError(f"kind: config declares {cfg['kind']!r} but {kind!r} was requested")
        cfg["kind"] = kind
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# Builders


def _q_family(sec):
    from .levy_noise import make_q_family

    if sec is None:
        return make_q_family("stable")
    params = {k: v for k, v in sec.items() if k != "name"}
    return make_q_family(sec["name"], **params)


def _noise(sec):
    from .levy_noise import LevyNoiseSpec

    return LevyNoiseSpec(sec["alpha"], sec.get("dimension", 1), sec.get("spectral", "isotropic"),
                         _q_family(sec.get("q_family")), sec.get("q_sup"))


def _model(cfg):
    from .flows import term_drift
    from .scale_geometry import ChainMatrix, ChainShape
    from .sde_engine import ChainModel

    m = cfg["model"]
    shape = ChainShape(tuple(m["dims"]))
    kappa = m.get("kappa", 0.0)
    mat = m.get("matrix", "subdiagonal-identity")
    if mat == "subdiagonal-identity":
        matrix = ChainMatrix.subdiagonal_identity(shape, kappa=kappa)
    else:
        A = np.asarray(mat, dtype=float)
        if A.shape != (shape.N, shape.N):
            raise ConfigurationError(f"model.matrix: expected shape ({shape.N}, {shape.N}), got {A.shape}")
        matrix = ChainMatrix.from_constant(shape, A, kappa=kappa)
    drift = term_drift(shape, m["drift"]) if m.get("drift") else None
    sigma = m.get("sigma")
    if isinstance(sigma, list):
        sigma = np.asarray(sigma, dtype=float)
    return ChainModel(shape, matrix, _noise(cfg["noise"]), drift, sigma)


def _fields(sec, keys, tuples=()):
    out = {}
    for k in keys:
        if k in sec:
            out[k] = tuple(sec[k]) if k in tuples else sec[k]
    return out


# ---------------------------------------------------------------------------
# Experiment kinds


def _run_sample(cfg, seed, out, workers):
    from . import experiments as ex

    sec = cfg["sample"]
    if sec.get("method", "stable") == "stable":
        c = ex.NoiseCheckConfig(**_fields(sec, ("alpha", "n_samples", "xi_grid", "hill_k"), ("xi_grid",)))
        return ex.noise_check(c, seed, workers)
    c = ex.QReductionConfig(**_fields(sec, ("alpha", "n_samples", "dt", "cutoff", "small_jump_policy")))
    return ex.q_reduction_check(c, seed, workers, _q_family(sec.get("q_family")))


def _run_simulate(cfg, seed, out, workers):
    from .experiments import REPORT, ExperimentReport
    from .sde_engine import SimulationPlan, simulate_chain, simulate_frozen_proxy

    model = _model(cfg)
    sec = cfg["simulation"]
    x0 = np.asarray(sec.get("x0", np.zeros(model.shape.N)), dtype=float)
    record = sec.get("record", "terminal")
    plan = SimulationPlan(model, x0, seed=seed, record=record if isinstance(record, str) else tuple(record),
                          **_fields(sec, ("t0", "T", "dt", "n_paths", "step_policy", "cutoff",
                                          "small_jump_policy", "antithetic", "block_size")))
    proxy = sec.get("proxy")
    if proxy is None:
        ens = simulate_chain(plan, workers)
    else:
        ens = simulate_frozen_proxy(plan, (proxy["tau"], np.asarray(proxy["xi"], dtype=float)), workers)
    ens.to_csv(os.path.join(out, "ensemble.csv"))
    if sec.get("binary", False):
        ens.to_binary(os.path.join(out, "ensemble.bin"))
    X = ens.terminal
    probs = (0.01, 0.25, 0.5, 0.75, 0.99)
    rows = []
    for c in range(X.shape[1]):
        q = np.quantile(X[:, c], probs)
        rows.append(dict(coordinate=c, mean=float(X[:, c].mean()), std=float(X[:, c].std(ddof=1)),
                         **{f"q{p}": float(v) for p, v in zip(probs, q)}))
    est = {"n_paths": ens.n_paths, "dynamics": "proxy" if proxy else "chain"}
    return ExperimentReport("simulate", "terminal law of the simulated ensemble", REPORT, est,
                            "Monte Carlo; see ensemble.csv", rows)


def _run_density(cfg, seed, out, workers):
    from .experiments import FAIL, PASS, ExperimentReport
    from .proxy_density import (FrozenSymbolContext, InversionGrid, invert_density_grid, marginal_density,
                                write_density_csv)

    model = _model(cfg)
    sec = cfg["density"]
    N = model.shape.N
    ctx = FrozenSymbolContext(model.noise, model.shape, model.matrix, sec.get("t", 0.0), sec["s"], model.drift,
                              model.sigma, tau=sec.get("tau"), xi=sec.get("xi"))
    grid = InversionGrid(**_fields(sec, ("half_width", "pad", "tolerance")))
    x = np.asarray(sec.get("x", np.zeros(N)), dtype=float)
    if x.shape != (N,):
        raise ConfigurationError(f"density.x: expected {N} values")
    if "component" in sec:
        if not sec["component"] < N:
            raise ConfigurationError(f"density.component: must be below {N}")
        dens = marginal_density(ctx, x, sec["component"], grid, check=False)
    else:
        if N > 3:
            raise ConfigurationError("density: joint inversion needs N <= 3; set density.component")
        dens = invert_density_grid(ctx, x, grid, check=False)
    write_density_csv(os.path.join(out, "density.csv"), dens, sec.get("stride", 1))
    row = dict(mass_window=dens.mass_window, tail_mass=dens.tail_mass, alias_mass=dens.alias_mass,
               mass_defect=dens.mass_defect, noise_floor=dens.noise_floor, points=int(dens.profile.size))
    ok = dens.mass_defect <= grid.tolerance
    return ExperimentReport("density", f"inverted density normalizes to 1 within {grid.tolerance}",
                            PASS if ok else FAIL, dict(row), "deterministic quadrature", [row])


def _run_peano(cfg, seed, out, workers):
    from .experiments import PeanoConfig, peano_experiment

    keys = ("i", "j", "beta", "alpha", "n", "n_paths", "horizon", "dt", "starts", "rho_grid", "convention",
            "margin", "level", "slack")
    return peano_experiment(PeanoConfig(**_fields(cfg["peano"], keys, ("starts", "rho_grid"))), seed, workers)


def _run_krylov(cfg, seed, out, workers):
    from .experiments import KrylovConfig, krylov_diagnostic

    keys = ("p", "q", "alpha", "n", "widths", "center", "n_paths", "dt", "horizon", "drift_beta")
    return krylov_diagnostic(KrylovConfig(**_fields(cfg["krylov"], keys, ("widths", "center"))), seed, workers)


def _run_threshold_sweep(cfg, seed, out, workers):
    from .experiments import threshold_sweep

    sec = cfg["threshold_sweep"]
    return threshold_sweep(sec["alphas"], sec.get("i_values", [2]), sec.get("j_values", [2]))


def _run_scaling(cfg, seed, out, workers):
    from .experiments import ScalingConfig, scaling_experiment

    sec = cfg["scaling"]
    keys = ("alpha", "n", "gaps", "orders", "levels", "slope_tol", "collapse_tol", "collapse_half_width")
    fam = _q_family(sec["q_family"]) if "q_family" in sec else None
    return scaling_experiment(ScalingConfig(**_fields(sec, keys, ("gaps", "orders", "levels"))), fam)


def _run_flow(cfg, seed, out, workers):
    from .experiments import FlowConfig, flow_lemma_sweep

    keys = ("alpha", "beta", "i", "j", "n", "n_samples", "tol", "gaps", "n_points")
    return flow_lemma_sweep(FlowConfig(**_fields(cfg["flow_diagnostics"], keys, ("gaps",))), seed)


_RUNNERS = {
    "sample": _run_sample,
    "simulate": _run_simulate,
    "density": _run_density,
    "peano": _run_peano,
    "threshold-sweep": _run_threshold_sweep,
    "krylov": _run_krylov,
    "scaling": _run_scaling,
    "flow-diagnostics": _run_flow,
}


def run(kind, cfg, seed, out, workers=None):
    """Execute a validated configuration and write its artifacts.

    Returns
    -------
    ExperimentReport
    """
    os.makedirs(out, exist_ok=True)
    report = _RUNNERS[kind](cfg, seed, out, workers)
    report.to_csv(os.path.join(out, f"{kind}.csv"))
    head = f"kind: {kind}\nseed: {seed}\nconfig: {json.dumps(cfg, sort_keys=True)}\n"
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(head + report.summary())
    return report


def _module_of(exc):
    mod = "cli"
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("levychain."):
            mod = name.split(".", 1)[1]
        tb = tb.tb_next
    return mod


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _workers(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("workers must be positive")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="levychain", description="Experiments on Levy-driven degenerate chains.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("kind", choices=KINDS)
    r.add_argument("--config", required=True, metavar="PATH", help="TOML configuration")
    r.add_argument("--seed", type=_seed, default=None, metavar="U64", help="master seed (default: config or 0)")
    r.add_argument("--out", default=None, metavar="DIR", help="output directory (default: out/<kind>)")
    r.add_argument("--workers", type=_workers, default=None, metavar="N",
                   help="worker threads (default: config, then LEVYCHAIN_WORKERS, then 1)")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. peano.n_paths=2000")
    s = sub.add_parser("schema", help="print the configuration schema")
    s.set_defaults(kind=None)
    return p


def main(argv=None):
    """Console entry point; returns the exit status."""
    args = build_parser().parse_args(argv)
    if args.command == "schema":
        print(json.dumps(load_schema(), indent=2))
        return 0
    try:
        cfg = load_config(args.config, args.kind, args.set)
        seed = args.seed if args.seed is not None else cfg.get("seed", 0)
        workers = args.workers if args.workers is not None else cfg.get("workers")
        out = args.out or os.path.join("out", args.kind)
        report = run(args.kind, cfg, seed, out, workers)
    except LevyChainError as exc:
        print(f"error [{_module_of(exc)}]: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"error [{_module_of(exc)}]: {type(exc).__name__}: {exc}", file=sys.stderr)
        if os.environ.get("LEVYCHAIN_DEBUG"):
            traceback.print_exc()
        return 1
    print(report.summary(), end="")
    return EXIT.get(report.status, 1)


if __name__ == "__main__":
    sys.exit(main())
