"""CSV ingestion and serialization of datasets, plus report writers."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .model import TRANSITIONS, EventRecord, ModelSpec, SubjectData, TimeScale

LONG_COLUMNS = ("id", "age", "visit", "rep", "value")
EVENT_COLUMNS = ("id", "entry_age", "last_healthy_age", "diagnosis_age", "dem", "terminal_age", "death")


@dataclass
class IngestionReport:
    rows_read: int = 0
    rows_dropped: int = 0
    reasons: list[tuple[str, str]] = field(default_factory=list)  # (where, why)

    def drop(self, where: str, why: str, rows: int = 1):
        self.rows_dropped += rows
        self.reasons.append((where, why))


@dataclass
class DatasetBundle:
    subjects: list[SubjectData]
    report: IngestionReport


@dataclass
class LongitudinalRow:
    id: str
    time: float
    visit: int
    rep: int
    value: float
    covariates: tuple[float, ...]


def parse_longitudinal(path, time_scale: TimeScale = TimeScale(), report: IngestionReport | None = None):
    """Rows of the longitudinal CSV with ages mapped to model time.

    Malformed rows are dropped and recorded; a repeated (id, visit, rep) key
    is an error.
    """
    report = report if report is not None else IngestionReport()
    rows, seen = [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if tuple(header[:5]) != LONG_COLUMNS:
            raise ValueError(f"{path}: header must start with {','.join(LONG_COLUMNS)}")
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            report.rows_read += 1
            where = f"{Path(path).name}:{line}"
            if len(rec) != len(header):
                report.drop(where, f"expected {len(header)} fields, got {len(rec)}")
                continue
            try:
                age, value = float(rec[1]), float(rec[4])
                visit, rep = int(rec[2]), int(rec[3])
                cov = tuple(float(c) for c in rec[5:])
            except ValueError as exc:
                report.drop(where, f"unparseable field ({exc})")
                continue
            if not all(math.isfinite(x) for x in (age, value, *cov)):
                report.drop(where, "non-finite value")
                continue
            key = (rec[0], visit, rep)
            if key in seen:
                raise ValueError(f"{where}: duplicate measurement {key}")
            seen.add(key)
            rows.append(LongitudinalRow(rec[0], float(time_scale.transform(age)), visit, rep, value, cov))
    return rows


def _flag(text: str, name: str) -> bool:
    if text not in ("0", "1"):
        raise ValueError(f"{name} must be 0 or 1, got {text!r}")
    return text == "1"


def parse_events(path, time_scale: TimeScale = TimeScale()) -> dict[str, EventRecord]:
    """Event records keyed by id; any invalid record is an error naming the id.

    Extra columns named ``w01_*``, ``w02_*`` or ``w12_*`` are covariates of
    that transition; other extra columns enter all three transitions.
    """
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if tuple(header[:7]) != EVENT_COLUMNS:
            raise ValueError(f"{path}: header must start with {','.join(EVENT_COLUMNS)}")
        extra = header[7:]
        for line, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            sid = rec[0]
            try:
                if len(rec) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(rec)}")
                dem, death = _flag(rec[4], "dem"), _flag(rec[6], "death")
                if (rec[3].strip() == "") == dem:
                    raise ValueError("diagnosis_age must be given exactly when dem = 1")
                tr = time_scale.transform
                diag = float(tr(float(rec[3]))) if dem else None
                w = {kl: [] for kl in TRANSITIONS}
                for name, text in zip(extra, rec[7:]):
                    targets = [name[1:3]] if name[:1] == "w" and name[1:3] in TRANSITIONS and name[3:4] == "_" else TRANSITIONS
                    for kl in targets:
                        w[kl].append(float(text))
                if sid in out:
                    raise ValueError("duplicate event record")
                out[sid] = EventRecord(
                    float(tr(float(rec[1]))), float(tr(float(rec[2]))), diag, dem,
                    float(tr(float(rec[5]))), death, {kl: np.asarray(v) for kl, v in w.items()},
                )
            except ValueError as exc:
                raise ValueError(f"{Path(path).name}:{line}: subject {sid}: {exc}") from None
    return out


def build_dataset(rows: Sequence[LongitudinalRow], events: dict[str, EventRecord], spec: ModelSpec,
                  report: IngestionReport | None = None) -> DatasetBundle:
    report = report if report is not None else IngestionReport()
    by_subject: dict[str, dict[int, list[LongitudinalRow]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        by_subject[r.id][r.visit].append(r)
    for sid in sorted(set(by_subject) - set(events), key=str):
        n = sum(len(v) for v in by_subject[sid].values())
        report.drop(f"subject {sid}", "no event record", n)
    subjects = []
    for sid, ev in events.items():
        visits = by_subject.get(sid, {})
        blocks, cov = [], np.zeros(0)
        try:
            for _, group in sorted(visits.items(), key=lambda kv: kv[1][0].time):
                group = sorted(group, key=lambda r: r.rep)
                if len({r.time for r in group}) != 1:
                    raise ValueError("measurements of one visit carry different ages")
                cov = np.asarray(group[0].covariates, dtype=float)
                if cov.size != spec.n_long_covariates:
                    raise ValueError(f"{cov.size} marker covariates, model expects {spec.n_long_covariates}")
                blocks.append(spec.make_visit(group[0].time, [r.value for r in group], cov))
            subjects.append(SubjectData(sid, tuple(blocks), ev, cov))
        except ValueError as exc:
            report.drop(f"subject {sid}", str(exc), sum(len(v) for v in visits.values()))
    return DatasetBundle(subjects, report)


def load_dataset(long_path, events_path, spec: ModelSpec) -> DatasetBundle:
    report = IngestionReport()
    rows = parse_longitudinal(long_path, spec.time_scale, report)
    return build_dataset(rows, parse_events(events_path, spec.time_scale), spec, report)


# -- writing ---------------------------------------------------------------------


def age_text(t: float, time_scale: TimeScale) -> str:
    """Shortest age string that maps back to exactly ``t`` when possible."""
    a = float(time_scale.inverse(t))
    candidates = [a]
    lo = hi = a
    for _ in range(4):
        lo, hi = np.nextafter(lo, -np.inf), np.nextafter(hi, np.inf)
        candidates += [float(lo), float(hi)]
    for c in candidates:
        if float(time_scale.transform(float(repr(c)))) == t:
            return repr(c)
    return repr(a)


def write_dataset(dataset: Iterable[SubjectData], long_path, events_path, time_scale: TimeScale = TimeScale()):
    dataset = list(dataset)
    n_x = max([s.long_covariates.size for s in dataset] + [0])
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(LONG_COLUMNS) + [f"x{k + 1}" for k in range(n_x)])
        for s in dataset:
            cov = [repr(float(x)) for x in s.long_covariates]
            for j, v in enumerate(s.visits, start=1):
                age = age_text(v.time, time_scale)
                for l, y in enumerate(np.asarray(v.measurements), start=1):
                    w.writerow([s.id, age, j, l, repr(float(y))] + cov)
    n_w = {kl: max([s.event.covariate_row(kl).size for s in dataset] + [0]) for kl in TRANSITIONS}
    with open(events_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(EVENT_COLUMNS) + [f"w{kl}_{k + 1}" for kl in TRANSITIONS for k in range(n_w[kl])])
        for s in dataset:
            ev = s.event
            row = [
                s.id, age_text(ev.entry, time_scale), age_text(ev.last_healthy, time_scale),
                "" if ev.diagnosis is None else age_text(ev.diagnosis, time_scale),
                int(ev.dem), age_text(ev.terminal, time_scale), int(ev.death),
            ]
            row += [repr(float(x)) for kl in TRANSITIONS for x in ev.covariate_row(kl)]
            w.writerow(row)


def datasets_equal(a: Sequence[SubjectData], b: Sequence[SubjectData]) -> bool:
    if len(a) != len(b):
        return False
    for s, t in zip(a, b):
        if s.id != t.id or len(s.visits) != len(t.visits):
            return False
        for v, u in zip(s.visits, t.visits):
            if v.time != u.time or not np.array_equal(v.measurements, u.measurements):
                return False
        e, f = s.event, t.event
        if (e.entry, e.last_healthy, e.diagnosis, e.dem, e.terminal, e.death) != (
            f.entry, f.last_healthy, f.diagnosis, f.dem, f.terminal, f.death
        ):
            return False
        if any(not np.array_equal(e.covariate_row(kl), f.covariate_row(kl)) for kl in TRANSITIONS):
            return False
        if not np.array_equal(s.long_covariates, t.long_covariates):
            return False
    return True


def write_rows(path, header: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return "NA" if not math.isfinite(x) else f"{float(x):.6g}"
    return x
