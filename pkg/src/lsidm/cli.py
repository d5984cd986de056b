"""Command-line interface: fit, simulate, study, gof."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import traceback
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import (
    cumulative_hazard_curves,
    empirical_bayes_all,
    hazard_ratio_table,
    marker_fit_curve,
    variability_histograms,
)
from .estimation import FitResult, PipelineConfig, fit_pipeline
from .io import load_dataset, write_dataset, write_rows
from .model import ModelSpec, TransitionSpec, TRANSITIONS
from .optim import OptimizerConfig
from .simulation import GeneratorConfig, generate_dataset, scenario_preset
from .study import StudyConfig, replicate_study

log = logging.getLogger("lsidm")

DEFAULTS = {
    "model": {"baseline": "weibull", "associations": [True, True, True, True],
              "n_covariates": {"01": 0, "02": 0, "12": 0}, "n_long_covariates": 0,
              "independent_b_tau": True},
    "pipeline": {"S1": 500, "S2": 1000},
    "optimizer": {},
    "generator": {},
}


def load_config(path: str | None) -> dict:
    """JSON config with sections model, pipeline, optimizer, generator."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        user = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(user) - set(cfg)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        for k, v in user.items():
            cfg[k].update(v)
    return cfg


def _dataclass_from(cls, values: dict):
    names = {f.name for f in fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys {sorted(unknown)}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**conv)


def model_spec(section: dict) -> ModelSpec:
    assoc = tuple(bool(a) for a in section["associations"])
    ncov = section["n_covariates"]
    transitions = {kl: TransitionSpec(section["baseline"], int(ncov.get(kl, 0)), assoc) for kl in TRANSITIONS}
    return ModelSpec(n_long_covariates=int(section["n_long_covariates"]), transitions=transitions,
                     independent_b_tau=bool(section["independent_b_tau"]))


def _apply_overrides(cfg: dict, args) -> dict:
    for key in ("S1", "S2"):
        if getattr(args, key, None) is not None:
            cfg["pipeline"][key] = getattr(args, key)
    return cfg


def _write_manifest(out: Path, command: str, args, cfg: dict):
    text = json.dumps(cfg, sort_keys=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": getattr(args, "seed", None),
        "arguments": {k: v for k, v in vars(args).items() if k != "func"},
        "config": cfg,
        "config_hash": hashlib.sha256(text.encode()).hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _summary_text(fit: FitResult) -> str:
    lines = [f"log-likelihood {fit.loglik:.4f}  converged {fit.converged}  iterations {fit.iterations}  S {fit.S_used}",
             f"criteria {json.dumps(fit.criteria)}", ""]
    lines.append(f"{'parameter':<18}{'estimate':>11}{'SE':>9}")
    se = fit.std_errors if fit.std_errors is not None else [float('nan')] * fit.theta.size
    for n, v, s in zip(fit.names, fit.theta, se):
        lines.append(f"{n:<18}{v:>11.4f}{s:>9.4f}")
    if fit.hessian_pd is False:
        lines.append("Hessian not negative definite at the estimate: standard errors withheld")
    return "\n".join(lines) + "\n"


# -- commands ------------------------------------------------------------------------


def cmd_fit(args, cfg, out: Path):
    spec = model_spec(cfg["model"])
    bundle = load_dataset(args.longitudinal, args.events, spec)
    (out / "ingestion.json").write_text(json.dumps(asdict(bundle.report), indent=2) + "\n")
    pipe = _dataclass_from(PipelineConfig, cfg["pipeline"])
    opt = _dataclass_from(OptimizerConfig, cfg["optimizer"])
    res = fit_pipeline(bundle.subjects, spec, pipe, opt)
    if res.final is None:
        raise RuntimeError(f"step {res.failed_step} failed: {res.error}")
    fit = res.final
    report = fit.to_dict()
    report["failed_step"] = res.failed_step
    report["error"] = res.error
    (out / "fit.json").write_text(json.dumps(report, indent=2) + "\n")
    (out / "summary.txt").write_text(_summary_text(fit))
    if fit.std_errors is not None:
        rows = [(h.name, h.estimate, h.se, h.hr, h.ci_low, h.ci_high, h.p_value) for h in hazard_ratio_table(fit)]
        write_rows(out / "hr_table.csv", ["parameter", "estimate", "se", "hr", "ci_low", "ci_high", "p"], rows)
    return 0 if res.failed_step is None else 1


def cmd_simulate(args, cfg, out: Path):
    preset = scenario_preset(args.scenario)
    gen = replace(_dataclass_from(GeneratorConfig, cfg["generator"]), seed=args.seed)
    data = generate_dataset(preset, gen, args.subjects, replicate=args.replicate)
    write_dataset(data, out / "longitudinal.csv", out / "events.csv", preset.spec.time_scale)
    return 0


def cmd_study(args, cfg, out: Path):
    preset = scenario_preset(args.scenario)
    gen = replace(_dataclass_from(GeneratorConfig, cfg["generator"]), seed=args.seed)
    scfg = StudyConfig(
        args.replicates, args.subjects, args.seed, tuple(args.estimators),
        _dataclass_from(PipelineConfig, cfg["pipeline"]), _dataclass_from(OptimizerConfig, cfg["optimizer"]),
        gen, args.workers,
    )
    ckpt = Path(args.checkpoint) if args.checkpoint else out / "checkpoints"
    report = replicate_study(preset, scfg, ckpt, max_new=args.max_new)
    (out / "study_report.csv").write_text(report.to_csv())
    (out / "study_report.txt").write_text(report.to_text())
    return 0


def cmd_gof(args, cfg, out: Path):
    spec = model_spec(cfg["model"])
    bundle = load_dataset(args.longitudinal, args.events, spec)
    fit = json.loads(Path(args.fit).read_text())
    theta = np.asarray(fit["theta"], dtype=float)
    params = spec.unpack(theta)
    data = bundle.subjects
    eb_full = empirical_bayes_all(data, theta, spec)
    eb_long = empirical_bayes_all(data, theta, spec, longitudinal_only=True)
    write_rows(out / "gof_empirical_bayes.csv",
               ["id"] + [f"b{k}" for k in range(spec.q)] + ["tau_sigma", "tau_kappa", "sigma", "kappa", "converged"],
               [[e.id, *e.b, e.tau_sigma, e.tau_kappa, e.sigma, e.kappa, int(e.converged)] for e in eb_full])
    bins = marker_fit_curve(data, eb_long, params, spec, args.bin_width)
    write_rows(out / "gof_marker.csv", ["age_lo", "age_hi", "n", "observed", "ci_low", "ci_high", "predicted"],
               [[b.lo, b.hi, b.n, b.observed_mean, b.ci_low, b.ci_high, b.predicted_mean] for b in bins])
    ages = np.arange(args.grid_start, args.grid_stop + 1e-9, args.grid_step)
    grid = spec.time_scale.transform(ages)
    curves = cumulative_hazard_curves(data, [e.draw for e in eb_full], params, spec, grid)
    write_rows(out / "gof_hazards.csv", ["age"] + [f"cumhaz_{kl}" for kl in TRANSITIONS],
               [[a] + [curves[kl][k] for kl in TRANSITIONS] for k, a in enumerate(ages)])
    hist = variability_histograms(eb_full, args.bins)
    for key, (edges, counts) in hist.items():
        write_rows(out / f"gof_hist_{key}.csv", ["lo", "hi", "count"],
                   [[edges[k], edges[k + 1], int(c)] for k, c in enumerate(counts)])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lsidm", description="Joint location-scale / illness-death models.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--out", default="lsidm-out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    f = sub.add_parser("fit", help="fit the joint model to CSV data")
    common(f)
    f.add_argument("--longitudinal", required=True)
    f.add_argument("--events", required=True)
    f.add_argument("--S1", type=int)
    f.add_argument("--S2", type=int)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="generate a dataset from a scenario")
    common(s)
    s.add_argument("--scenario", choices=["A", "B", "C"], required=True)
    s.add_argument("--subjects", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--replicate", type=int, default=0)
    s.set_defaults(func=cmd_simulate)

    st = sub.add_parser("study", help="run or resume a simulation study")
    common(st)
    st.add_argument("--scenario", choices=["A", "B", "C"], required=True)
    st.add_argument("--replicates", type=int, required=True)
    st.add_argument("--subjects", type=int, required=True)
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--estimators", nargs="+", default=["interval", "naive"], choices=["interval", "naive"])
    st.add_argument("--workers", type=int, default=1)
    st.add_argument("--checkpoint", help="checkpoint directory (default OUT/checkpoints)")
    st.add_argument("--max-new", type=int, help="fit at most this many new replicates")
    st.add_argument("--S1", type=int)
    st.add_argument("--S2", type=int)
    st.set_defaults(func=cmd_study)

    g = sub.add_parser("gof", help="goodness-of-fit curves and histograms for a fit")
    common(g)
    g.add_argument("--longitudinal", required=True)
    g.add_argument("--events", required=True)
    g.add_argument("--fit", required=True, help="fit.json from the fit command")
    g.add_argument("--bin-width", type=float, default=3.0, help="marker bins, years")
    g.add_argument("--grid-start", type=float, default=65.0)
    g.add_argument("--grid-stop", type=float, default=105.0)
    g.add_argument("--grid-step", type=float, default=1.0)
    g.add_argument("--bins", type=int, default=20)
    g.set_defaults(func=cmd_gof)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        _write_manifest(out, args.command, args, cfg)
        return args.func(args, cfg, out)
    except Exception as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()}
        (out / "error.json").write_text(json.dumps(err, indent=2) + "\n")
        print(f"lsidm {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
