"""Monte Carlo replication harness: generate, fit both estimators, summarize.

Each replicate's fits are written to a checkpoint directory as soon as they
finish, so an interrupted study resumes where it stopped. The report is a
pure function of the checkpoint records.
"""

from __future__ import annotations

import json
import logging
import math
import multiprocessing as mp
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimation import FitResult, PipelineConfig, fit_naive, fit_pipeline
from .optim import OptimizerConfig
from .simulation import GeneratorConfig, ScenarioPreset, generate_dataset

log = logging.getLogger(__name__)

ESTIMATORS = ("interval", "naive")
Z95 = 1.959963984540054


@dataclass
class ReplicateRecord:
    replicate: int
    estimator: str
    theta: list[float] | None
    se: list[float] | None
    converged: bool
    monotone: bool
    loglik: float | None
    iterations: int
    error: str = ""

    @classmethod
    def from_fit(cls, replicate: int, estimator: str, fit: FitResult | None, error: str = ""):
        if fit is None:
            return cls(replicate, estimator, None, None, False, True, None, 0, error)
        trace = np.asarray(fit.trace)
        return cls(
            replicate, estimator, fit.theta.tolist(),
            None if fit.std_errors is None else fit.std_errors.tolist(),
            bool(fit.converged), bool(np.all(np.diff(trace) >= 0)), float(fit.loglik),
            int(fit.iterations), error or ("" if fit.converged else fit.message),
        )

    @property
    def usable(self) -> bool:
        return self.converged and self.theta is not None and self.se is not None


@dataclass
class ParameterSummary:
    name: str
    truth: float
    mean: float
    ese: float
    ase: float
    coverage: float


@dataclass
class EstimatorSummary:
    estimator: str
    n_replicates: int
    n_converged: int
    rows: list[ParameterSummary]
    all_monotone: bool
    notes: list[str] = field(default_factory=list)


@dataclass
class StudyReport:
    scenario: str
    n_subjects: int
    blocks: dict[str, EstimatorSummary]

    def row(self, estimator: str, name: str) -> ParameterSummary:
        for r in self.blocks[estimator].rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def to_csv(self) -> str:
        lines = ["estimator,parameter,theta,theta_hat,ESE,ASE,CR,n_converged,n_replicates"]
        for est, block in self.blocks.items():
            for r in block.rows:
                lines.append(
                    f"{est},{r.name},{_fmt(r.truth)},{_fmt(r.mean)},{_fmt(r.ese)},{_fmt(r.ase)},"
                    f"{_fmt(r.coverage, 1)},{block.n_converged},{block.n_replicates}"
                )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        out = [f"Scenario {self.scenario}, {self.n_subjects} subjects per sample"]
        for est, block in self.blocks.items():
            out.append("")
            out.append(f"{est} estimator: {block.n_converged}/{block.n_replicates} samples converged")
            out.append(f"{'parameter':<18}{'theta':>9}{'theta_hat':>11}{'ESE':>9}{'ASE':>9}{'CR':>7}")
            for r in block.rows:
                out.append(
                    f"{r.name:<18}{_fmt(r.truth):>9}{_fmt(r.mean):>11}{_fmt(r.ese):>9}"
                    f"{_fmt(r.ase):>9}{_fmt(r.coverage, 1):>7}"
                )
            out += [f"note: {n}" for n in block.notes]
        return "\n".join(out) + "\n"


def _fmt(x: float, digits: int = 3) -> str:
    return "NA" if x is None or not math.isfinite(x) else f"{x:.{digits}f}"


def summarize(records: Sequence[ReplicateRecord], names: Sequence[str], truth, estimator: str) -> EstimatorSummary:
    """Bias/ESE/ASE/coverage over the converged replicates of one estimator."""
    recs = [r for r in records if r.estimator == estimator]
    ok = [r for r in recs if r.usable]
    truth = np.asarray(truth, dtype=float)
    notes = []
    p = len(names)
    if ok:
        th = np.array([r.theta for r in ok])
        se = np.array([r.se for r in ok])
        mean = th.mean(axis=0)
        ese = th.std(axis=0, ddof=1) if len(ok) > 1 else np.full(p, np.nan)
        ase = se.mean(axis=0)
        cover = 100.0 * np.mean(np.abs(th - truth) <= Z95 * se, axis=0)
        if len(ok) == 1:
            notes.append("ESE undefined with a single converged replicate")
    else:
        mean = ese = ase = cover = np.full(p, np.nan)
        notes.append("no converged replicate")
    rows = [ParameterSummary(n, float(truth[k]), float(mean[k]), float(ese[k]), float(ase[k]), float(cover[k]))
            for k, n in enumerate(names)]
    failed = [r.replicate for r in recs if not r.usable]
    if failed:
        notes.append(f"excluded replicates: {sorted(failed)}")
    return EstimatorSummary(estimator, len(recs), len(ok), rows, all(r.monotone for r in recs), notes)


# -- running ------------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    n_replicates: int
    n_subjects: int
    seed: int = 0
    estimators: tuple[str, ...] = ESTIMATORS
    pipeline: PipelineConfig = PipelineConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    generator: GeneratorConfig | None = None  # seed taken from ``seed`` when None
    workers: int = 1

    def __post_init__(self):
        if self.n_replicates < 1 or self.n_subjects < 1:
            raise ValueError("need at least one replicate and one subject")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators {sorted(unknown)}")


def _checkpoint_path(directory: Path, replicate: int) -> Path:
    return directory / f"replicate_{replicate:05d}.json"


def run_replicate(preset: ScenarioPreset, cfg: StudyConfig, replicate: int) -> list[ReplicateRecord]:
    gen = cfg.generator or GeneratorConfig(seed=cfg.seed)
    data = generate_dataset(preset, gen, cfg.n_subjects, replicate=replicate)
    spec = preset.spec
    out = []
    naive_start = None
    if "interval" in cfg.estimators:
        res = fit_pipeline(data, spec, cfg.pipeline, cfg.optimizer)
        out.append(ReplicateRecord.from_fit(replicate, "interval", res.final if res.failed_step is None else None,
                                            res.error))
        if "naive" in res.steps:
            naive_start = res.steps["naive"].theta
    if "naive" in cfg.estimators:
        try:
            fit = fit_naive(data, spec, cfg.pipeline, cfg.optimizer, start=naive_start)
            out.append(ReplicateRecord.from_fit(replicate, "naive", fit))
        except Exception as exc:  # a failed replicate is recorded, never fatal
            out.append(ReplicateRecord.from_fit(replicate, "naive", None, str(exc)))
    return out


def _job(args):
    preset, cfg, replicate, directory = args
    try:
        records = run_replicate(preset, cfg, replicate)
    except Exception as exc:
        log.warning("replicate %d failed: %s", replicate, exc)
        records = [ReplicateRecord.from_fit(replicate, e, None, str(exc)) for e in cfg.estimators]
    if directory is not None:
        path = _checkpoint_path(Path(directory), replicate)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps([r.__dict__ for r in records]))
        tmp.replace(path)
    return replicate, records


def load_checkpoints(directory: Path | str) -> dict[int, list[ReplicateRecord]]:
    out = {}
    for path in sorted(Path(directory).glob("replicate_*.json")):
        recs = [ReplicateRecord(**d) for d in json.loads(path.read_text())]
        out[recs[0].replicate] = recs
    return out


def replicate_study(preset: ScenarioPreset, cfg: StudyConfig, checkpoint_dir: Path | str | None = None,
                    max_new: int | None = None) -> StudyReport:
    """Run (or resume) a simulation study and summarize it.

    ``max_new`` bounds the number of replicates fitted in this call; the
    report then covers whatever the checkpoint directory holds.
    """
    done: dict[int, list[ReplicateRecord]] = {}
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        done = {k: v for k, v in load_checkpoints(checkpoint_dir).items() if k < cfg.n_replicates}
    todo = [r for r in range(cfg.n_replicates) if r not in done]
    if max_new is not None:
        todo = todo[:max_new]
    jobs = [(preset, cfg, r, None if checkpoint_dir is None else str(checkpoint_dir)) for r in todo]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(cfg.workers, mp_context=mp.get_context("spawn")) as pool:
            for rep, recs in pool.map(_job, jobs):
                done[rep] = recs
    else:
        for job in jobs:
            rep, recs = _job(job)
            done[rep] = recs
    return build_report(preset, cfg.n_subjects, [r for k in sorted(done) for r in done[k]], cfg.estimators)


def build_report(preset: ScenarioPreset, n_subjects: int, records: Sequence[ReplicateRecord],
                 estimators: Sequence[str] = ESTIMATORS) -> StudyReport:
    spec = preset.spec
    names = spec.param_names()
    truth = spec.pack(preset.params)
    return StudyReport(preset.name, n_subjects, {e: summarize(records, names, truth, e) for e in estimators})
