"""Command line interface.

Subcommands: `glss` (one-sample statistic report), `stieltjes` (transform
table), `fp-test` (projection test report), `model <k>` and
`scenario <I|II|III>` (Monte Carlo runs writing CSVs and figures).  All take
--config <json>; runs accept --seed/--out/--threads/--paper-scale/
--no-figures overrides.  Exit codes: 0 success, 1 configuration error,
2 numeric failure (quadrature, degenerate variance, or replication failures
over budget).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .clt import CltModel, GeometryError, MatrixError
from .experiments import (EXPERIMENTS, ExperimentConfig, NumericBudgetError,
                          run_experiment)
from .fptest import HypothesisSpec, VarianceError, fp_test
from .models import (CovMatrix, build_ancillary, build_population,
                     replication_rng, sample_covariance, sample_data,
                     spiked_alternative)
from .outputs import emit_outputs, write_csv
from .stieltjes import (DomainError, QuadratureError, empirical_stieltjes,
                        mp_fixed_point)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as exit code 1, not SystemExit(2)."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="glss", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, run=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="JSON configuration file")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (CSV files, figures)")
        if run:
            p.add_argument("--seed", type=int, default=None)
            p.add_argument("--threads", type=int, default=None)
            p.add_argument("--paper-scale", action="store_true",
                           help="publication sizes instead of desk defaults")
            p.add_argument("--no-figures", action="store_true",
                           help="skip PNG rendering, keep the CSVs")
        return p

    add("glss", "centered spectral statistic for one sampled matrix")
    add("stieltjes", "transform values on a list of z points")
    add("fp-test", "eigenspace projection test report")
    p_model = add("model", "replicated model suite run (writes CSVs)", run=True)
    p_model.add_argument("number", type=int, help="model number 1..8")
    p_scen = add("scenario", "spiked-scenario size/power run (writes CSVs)",
                 run=True)
    p_scen.add_argument("which", choices=("I", "II", "III"))
    return parser


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    try:
        text = path.read_text()
    except OSError as e:
        raise DomainError(f"cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise DomainError(f"config {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise DomainError("config JSON must be an object")
    return data


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise DomainError(f"config key {key!r} is required")
    return cfg[key]


def _pop_from_config(cfg: dict):
    spec = dict(_require(cfg, "population"))
    kind = spec.pop("kind", None)
    if kind is None:
        raise DomainError("population needs a 'kind'")
    n = int(_require(cfg, "n"))
    allowed = {"rho", "ramp_offset", "spikes", "matrix"}
    bad = set(spec) - allowed
    if bad:
        raise DomainError(f"unknown population keys: {sorted(bad)}")
    if "matrix" in spec:
        spec["matrix"] = np.asarray(spec["matrix"], dtype=float)
    return build_population(kind, n, **spec)


def _anc_from_config(cfg: dict, n: int):
    spec = dict(cfg.get("ancillary", {"kind": "identity"}))
    kind = spec.pop("kind", None)
    if kind is None:
        raise DomainError("ancillary needs a 'kind'")
    allowed = {"matrix", "weights", "vectors", "diagonal"}
    bad = set(spec) - allowed
    if bad:
        raise DomainError(f"unknown ancillary keys: {sorted(bad)}")
    for key in spec:
        spec[key] = np.asarray(spec[key], dtype=float)
    return build_ancillary(kind, n, **spec)


def _cmd_glss(args) -> int:
    cfg = _load_config(args.config)
    pop = _pop_from_config(cfg)
    n, N = pop.n, int(_require(cfg, "N"))
    anc = _anc_from_config(cfg, n)
    dist = cfg.get("dist", "gaussian")
    fs = cfg.get("f", "z^2")
    fs = [fs] if isinstance(fs, str) else list(fs)
    seed = int(cfg.get("seed", 0))
    model = CltModel(pop, anc, N, fs, dist=dist,
                     mu_x=cfg.get("mu_x"), upsilon_x=cfg.get("upsilon_x"))
    X = sample_data(dist, n, N, replication_rng(seed, 0, stream=0))
    S = sample_covariance(pop, X)
    rows = []
    for idx, f in enumerate(model.fs):
        rep = model.report(S, idx)
        rows.append([f.name, rep.raw_glss, rep.centering, rep.theta,
                     rep.omega, rep.variance, rep.standardized, rep.mode])
        print(f"f={f.name}  theta={rep.theta:.10g}  omega={rep.omega:.10g}  "
              f"variance={rep.variance:.10g}  "
              f"standardized={rep.standardized:.10g}  mode={rep.mode}")
    if args.out is not None:
        path = write_csv(Path(args.out) / "report.csv",
                         ["f", "raw_glss", "centering", "theta", "omega",
                          "variance", "standardized", "mode"], rows)
        print(f"wrote {path}")
    return EXIT_OK


def _parse_z(cfg: dict) -> np.ndarray:
    pts = _require(cfg, "z")
    out = []
    for item in pts:
        if isinstance(item, (list, tuple)):
            if len(item) != 2:
                raise DomainError("z entries are numbers or [re, im] pairs")
            out.append(complex(float(item[0]), float(item[1])))
        else:
            out.append(complex(float(item), 0.0))
    if not out:
        raise DomainError("need at least one z point")
    return np.asarray(out, dtype=complex)


def _cmd_stieltjes(args) -> int:
    cfg = _load_config(args.config)
    z = _parse_z(cfg)
    rows = []
    if "eigenvalues" in cfg:
        lam = np.asarray(cfg["eigenvalues"], dtype=float).ravel()
        n = int(cfg.get("n", lam.size))
        N = int(_require(cfg, "N"))
        m, mbar = empirical_stieltjes(lam, n, N, z)
        for zk, mk, mbk in zip(z, m, mbar):
            rows.append([zk.real, zk.imag, mk.real, mk.imag, mbk.real, mbk.imag])
    else:
        pop = _pop_from_config(cfg)
        c = float(cfg["c"]) if "c" in cfg else pop.n / float(_require(cfg, "N"))
        H = pop.spectral_measure()
        for zk in z:
            val = mp_fixed_point(zk, c, H)
            rows.append([zk.real, zk.imag, val.m.real, val.m.imag,
                         val.m_under.real, val.m_under.imag])
    print("z_re,z_im,m_re,m_im,mbar_re,mbar_im")
    for row in rows:
        print(",".join(f"{v:.10g}" for v in row))
    if args.out is not None:
        path = write_csv(Path(args.out) / "stieltjes.csv",
                         ["z_re", "z_im", "m_re", "m_im", "mbar_re", "mbar_im"],
                         rows)
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_fp_test(args) -> int:
    cfg = _load_config(args.config)
    r = int(_require(cfg, "r"))
    mu_x = cfg.get("mu_x")
    dist = cfg.get("dist")
    if "data" in cfg:
        M = np.loadtxt(cfg["data"], delimiter=",", ndmin=2)
        data = M
        n = M.shape[0]
        N = int(cfg["N"]) if "N" in cfg else None
    else:
        n = int(_require(cfg, "n"))
        N = int(_require(cfg, "N"))
        seed = int(cfg.get("seed", 0))
        dist = dist or "gaussian"
        spikes = cfg.get("spikes", [9.0, 5.0, 2.0])
        pop = build_population("spiked", n, spikes=spikes)
        phi = float(cfg.get("phi", 0.0))
        if phi > 0.0:
            pop = spiked_alternative(pop, phi * np.pi / 2.0)
        X = sample_data(dist, n, N, replication_rng(seed, 0, stream=0))
        data = CovMatrix.from_matrix(sample_covariance(pop, X), N)
    basis = np.eye(n)[:, :r]
    spec = HypothesisSpec(basis=basis, f=cfg.get("f", "z^2"),
                          alpha=float(cfg.get("alpha", 0.1)),
                          delta=float(cfg.get("delta", 0.1)),
                          tail=cfg.get("tail", "two-sided"))
    report = fp_test(data, spec, N=N, mu_x=mu_x, dist=dist)
    print(f"delta_stat={report.delta_stat:.10g}  mu_hat={report.mu_hat:.10g}  "
          f"rho_hat={report.rho_hat:.10g}")
    print(f"z={report.z_score:.10g}  p={report.p_value:.6g}  "
          f"reject={report.reject}  "
          f"d_hat={tuple(round(float(d), 6) for d in report.d_hat)}")
    if args.out is not None:
        path = write_csv(Path(args.out) / "fp_report.csv",
                         ["delta_stat", "mu_hat", "rho_hat", "z_score",
                          "p_value", "reject", "r_hat"],
                         [[report.delta_stat, report.mu_hat, report.rho_hat,
                           report.z_score, report.p_value, report.reject,
                           report.diagnostics["r_hat"]]])
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_run(args, experiment: str) -> int:
    raw = _load_config(args.config)
    raw["experiment"] = experiment
    if args.out is not None:
        raw["out"] = str(args.out)
    cfg = ExperimentConfig.from_dict(raw)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.threads is not None:
        cfg = cfg.replace(threads=args.threads)
    if args.paper_scale:
        cfg = cfg.replace(paper_scale=True)
    if args.no_figures:
        cfg = cfg.replace(figures=False)
    cfg.validate()

    result = run_experiment(cfg)
    out_dir = Path(cfg.out) if cfg.out else Path("glss_out") / cfg.experiment
    paths = emit_outputs(result, out_dir)
    n, N, M = cfg.effective_scale()
    print(f"{cfg.experiment}: n={n} N={N} M={M} seed={cfg.seed} "
          f"failures={len(result.failures)}")
    for name, mom in result.moments.items():
        print(f"  f={name}  mean={mom.mean_hat:.4f}  var={mom.var_hat:.4f}  "
              f"ks_p={mom.ks_p:.4f}")
    for cell in result.power:
        print(f"  grid={cell.grid:g} phi={cell.phi:g} r={cell.r} f={cell.f}  "
              f"power={cell.power:.4f} (se {cell.mc_se:.4f})")
    for path in paths:
        print(f"wrote {path}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "glss":
            return _cmd_glss(args)
        if args.command == "stieltjes":
            return _cmd_stieltjes(args)
        if args.command == "fp-test":
            return _cmd_fp_test(args)
        if args.command == "model":
            if args.number not in range(1, 9):
                raise DomainError("model number must lie in 1..8")
            return _cmd_run(args, f"model_{args.number}")
        return _cmd_run(args, f"scenario_{args.which}")
    except _UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except NumericBudgetError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (QuadratureError, MatrixError, VarianceError) as e:
        print(f"numeric failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except DomainError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
