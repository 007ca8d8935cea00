"""Aggregate trial curves into summary tables, plot-data files and figures.

For ``report(in_dir, "out/summary.csv")`` the outputs are::

    out/summary.csv               one row per (child env, series)
    out/summary_curves.csv        every trial curve row, unchanged (CURVE_HEADER)
    out/summary_plot_<env>.csv    series,env_steps,mean,std per child env
    out/summary_frozen.png        k=4 row above k=2 row, one column per child env
    out/summary_finetuned.png
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .harness import CURVE_HEADER, MODE_WORDS, RECORD, SCRATCH, TrialRecord, _atomic_write_text, read_record

BASELINE = "baseline"
THRESHOLD_FRACTION = 0.9
SUMMARY_HEADER = [
    "child_env", "series", "parent_env", "k", "mode", "n_runs",
    "final_mean", "final_std", "threshold", "steps_to_threshold",
]
PLOT_HEADER = ["series", "env_steps", "mean", "std"]


class ReportError(Exception):
    pass


def series_name(record: TrialRecord) -> str:
    """``baseline`` for parents, else the ``child{k}-{frozen|finetuned}-{parent env}`` stem."""
    if record.mode == SCRATCH:
        return BASELINE
    return f"child{record.k}-{MODE_WORDS[record.mode]}-{record.parent_env}"


@dataclass
class SeriesGroup:
    child_env: str
    series: str
    records: list[TrialRecord]

    @property
    def first(self) -> TrialRecord:
        return self.records[0]

    def final_values(self) -> np.ndarray:
        return np.array([r.curve[-1].eval_return_mean for r in self.records])

    def curve(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Mean and population std across runs at the evaluation steps every run shares."""
        common = set.intersection(*({row.env_steps for row in r.curve} for r in self.records))
        steps = np.array(sorted(common), dtype=np.int64)
        values = np.array([
            [row.eval_return_mean for row in r.curve if row.env_steps in common] for r in self.records
        ])
        return steps, values.mean(axis=0), values.std(axis=0)


def load_records(in_dir) -> list[TrialRecord]:
    records = []
    for path in sorted(Path(in_dir).rglob(RECORD)):
        rec = read_record(path.parent)
        if rec is not None and rec.status == "completed" and rec.curve:
            records.append(rec)
    return records


def group_records(records: list[TrialRecord]) -> dict[str, list[SeriesGroup]]:
    buckets: dict[tuple[str, str], list[TrialRecord]] = defaultdict(list)
    for rec in records:
        buckets[(rec.child_env, series_name(rec))].append(rec)
    by_env: dict[str, list[SeriesGroup]] = defaultdict(list)
    for (env, series), recs in sorted(buckets.items()):
        by_env[env].append(SeriesGroup(env, series, sorted(recs, key=lambda r: r.run)))
    for groups in by_env.values():
        groups.sort(key=lambda g: (g.series != BASELINE, g.series))
    return dict(by_env)


def steps_to_threshold(steps, mean, threshold) -> int | None:
    """First evaluation step whose mean reaches ``threshold``; None if it never does."""
    if threshold is None:
        return None
    hits = np.nonzero(np.asarray(mean) >= threshold)[0]
    return int(steps[hits[0]]) if hits.size else None


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _blank(x):
    return "" if x is None else x


def report(in_dir, out_path, figures: bool = True) -> dict:
    """Write the summary table, raw curve dump, per-env plot data and (optionally) figures.

    Returns a dict of written paths keyed by kind.
    """
    records = load_records(in_dir)
    if not records:
        raise ReportError(f"no completed trials under {in_dir}")
    out_path = Path(out_path)
    stem = out_path.with_suffix("")
    groups = group_records(records)

    summary_rows = []
    plot_paths = {}
    for env, env_groups in groups.items():
        baseline = next((g for g in env_groups if g.series == BASELINE), None)
        threshold = THRESHOLD_FRACTION * float(baseline.final_values().mean()) if baseline else None
        plot_rows = []
        for g in env_groups:
            steps, mean, std = g.curve()
            finals = g.final_values()
            k = None if g.first.mode == SCRATCH else g.first.k
            summary_rows.append([
                env, g.series, g.first.parent_env, _blank(k), g.first.mode, len(g.records),
                float(finals.mean()), float(finals.std()), _blank(threshold),
                _blank(steps_to_threshold(steps, mean, threshold)),
            ])
            plot_rows.extend([g.series, int(s), float(m), float(d)] for s, m, d in zip(steps, mean, std))
        plot_paths[env] = Path(f"{stem}_plot_{env}.csv")
        _atomic_write_text(plot_paths[env], _csv_text(PLOT_HEADER, plot_rows))

    _atomic_write_text(out_path, _csv_text(SUMMARY_HEADER, summary_rows))
    curves_path = Path(f"{stem}_curves.csv")
    _atomic_write_text(curves_path, _csv_text(CURVE_HEADER, [row for r in records for row in r.curve_rows()]))
    written = {"summary": out_path, "curves": curves_path, "plot_data": plot_paths, "figures": {}}
    if figures:
        from .figures import plot_transfer_figures

        written["figures"] = plot_transfer_figures(groups, stem)
    return written


def read_plot_data(path) -> dict[str, dict[str, np.ndarray]]:
    """Parse a plot-data CSV back into ``{series: {"env_steps", "mean", "std"}}``."""
    out: dict[str, dict[str, list]] = defaultdict(lambda: {"env_steps": [], "mean": [], "std": []})
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            s = out[row["series"]]
            s["env_steps"].append(int(row["env_steps"]))
            s["mean"].append(float(row["mean"]))
            s["std"].append(float(row["std"]))
    return {k: {kk: np.array(vv) for kk, vv in v.items()} for k, v in out.items()}
