"""Metrics on tracked factor states and their CSV exports."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import FactorState
from .snapshots import ValidationError
from .trackers import TrackResult


class UndefinedMetricError(ValueError):
    pass


def relative_error(est: FactorState, ref: FactorState) -> float:
    """(|dU| + |dV| + |dO|) / (|U_ref| + |V_ref| + |O_ref|), Frobenius norms."""
    pairs = ((est.u, ref.u), (est.v, ref.v), (est.o, ref.o))
    for a, b in pairs:
        if a.shape != b.shape:
            raise ValidationError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = sum(float(np.linalg.norm(b)) for _, b in pairs)
    if denom == 0.0:
        raise UndefinedMetricError("reference state is all zero")
    return sum(float(np.linalg.norm(a - b)) for a, b in pairs) / denom


def hard_assign(u: np.ndarray) -> np.ndarray:
    """Row-wise argmax; np.argmax already returns the lowest index among ties."""
    u = np.asarray(u, dtype=float)
    if u.ndim != 2:
        raise ValidationError("u must be a matrix")
    return np.argmax(u, axis=1)


def flag_anomalies(o: np.ndarray, eps: float = 1e-3) -> frozenset:
    """Nodes whose outlier row has an entry above eps."""
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    o = np.asarray(o, dtype=float)
    if o.size == 0:
        return frozenset()
    return frozenset(int(i) for i in np.nonzero(o.max(axis=1) > eps)[0])


def overlap_profile(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if (u < 0).any():
        raise ValidationError("affiliations must be nonnegative")
    sums = u.sum(axis=1, keepdims=True)
    out = np.zeros_like(u)
    nz = sums[:, 0] > 0
    out[nz] = u[nz] / sums[nz]
    return out


def precision_recall(flagged, truth) -> tuple[float, float]:
    """Set precision and recall; an empty denominator counts as 1."""
    flagged, truth = set(flagged), set(truth)
    hit = len(flagged & truth)
    precision = hit / len(flagged) if flagged else 1.0
    recall = hit / len(truth) if truth else 1.0
    return precision, recall


def compare_tracks(tracks: dict, ref: TrackResult) -> dict:
    """Per-interval relative error of each named track against ``ref``.

    Returns {"t": [...], name: [...], ...}, one column per track.
    """
    table = {"t": list(range(len(ref)))}
    for name, tr in tracks.items():
        if len(tr) != len(ref):
            raise ValidationError(f"track {name!r} has {len(tr)} intervals, reference has {len(ref)}")
        table[name] = [relative_error(s, r) for s, r in zip(tr.states, ref.states)]
    return table


@dataclass
class EvalReport:
    relative_errors: list | None
    hard_labels: list
    anomaly_sets: list
    overlap_profiles: list
    precision: list | None = None
    recall: list | None = None

    def __post_init__(self):
        t = len(self.hard_labels)
        for name in ("anomaly_sets", "overlap_profiles"):
            if len(getattr(self, name)) != t:
                raise ValidationError(f"{name} length differs from hard_labels")
        if self.relative_errors is not None and len(self.relative_errors) != t:
            raise ValidationError("relative_errors length differs from hard_labels")


def evaluate_track(track: TrackResult, ref: TrackResult | None = None, truth_rows=None,
                   eps: float = 1e-3) -> EvalReport:
    rel = None
    if ref is not None:
        rel = [relative_error(s, r) for s, r in zip(track.states, ref.states)]
    flags = [flag_anomalies(s.o, eps) for s in track.states]
    prec = rec = None
    if truth_rows is not None:
        pr = [precision_recall(f, truth_rows) for f in flags]
        prec, rec = [p for p, _ in pr], [r for _, r in pr]
    return EvalReport(rel, [hard_assign(s.u) for s in track.states], flags,
                      [overlap_profile(s.u) for s in track.states], prec, rec)


# --------------------------------------------------------------------------- CSV

def _writer(path):
    f = open(path, "w", newline="", encoding="utf-8")
    return f, csv.writer(f, lineterminator="\n")


def write_relerr_csv(table: dict, path) -> None:
    names = [k for k in table if k != "t"]
    f, w = _writer(path)
    with f:
        w.writerow(["t", *names])
        for i, t in enumerate(table["t"]):
            w.writerow([t, *(repr(float(table[n][i])) for n in names)])


def write_labels_csv(labels: np.ndarray, path) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["node", "community"])
        for i, lab in enumerate(labels):
            w.writerow([i, int(lab)])


def write_overlap_csv(profile: np.ndarray, path) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["node", *(f"c{k}" for k in range(profile.shape[1]))])
        for i, row in enumerate(profile):
            w.writerow([i, *(repr(float(x)) for x in row)])


def write_anomalies_csv(anomaly_sets, path) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["t", "node"])
        for t, nodes in enumerate(anomaly_sets):
            for i in sorted(nodes):
                w.writerow([t, i])


def write_precision_recall_csv(report: EvalReport, path) -> None:
    f, w = _writer(path)
    with f:
        w.writerow(["t", "precision", "recall", "flagged"])
        for t, (p, r, s) in enumerate(zip(report.precision, report.recall, report.anomaly_sets)):
            w.writerow([t, repr(p), repr(r), len(s)])


def export_report(report: EvalReport, out_dir, intervals=None) -> list[Path]:
    """Write labels_t<k>.csv and overlap_t<k>.csv for the chosen intervals (all by
    default), plus anomalies.csv and, when available, precision_recall.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ks = range(len(report.hard_labels)) if intervals is None else intervals
    written = []
    for k in ks:
        p = out / f"labels_t{k}.csv"
        write_labels_csv(report.hard_labels[k], p)
        q = out / f"overlap_t{k}.csv"
        write_overlap_csv(report.overlap_profiles[k], q)
        written += [p, q]
    p = out / "anomalies.csv"
    write_anomalies_csv(report.anomaly_sets, p)
    written.append(p)
    if report.precision is not None:
        p = out / "precision_recall.csv"
        write_precision_recall_csv(report, p)
        written.append(p)
    return written
