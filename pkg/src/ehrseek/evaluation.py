"""Scoring and aggregation: sample-wise F1, group/overall means with 95%
Student-t confidence intervals, setting deltas, and tool-call distributions.

The overall score pools all per-sample scores (never a mean of group
means); unanswered trajectories score zero. CI radius is
``t(0.975, n-1) * s / sqrt(n)`` with s the sample standard deviation; it is
reported as absent below two samples.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Iterable

from scipy import stats

from .core import DomainError, Termination, Trajectory, normalize_answer


@dataclass(frozen=True)
class EvalRecord:
    task_id: str
    group: str
    f1: float
    predicted: tuple[str, ...]
    gold: tuple[str, ...]
    termination: str


@dataclass(frozen=True)
class CIEstimate:
    n: int
    mean: float
    radius: float | None  # absent below two samples

    def format(self) -> str:
        if self.radius is None:
            return f"{self.mean:.1f}"
        return f"{self.mean:.1f} ± {self.radius:.2f}"


@dataclass(frozen=True)
class GroupReport:
    overall: CIEstimate
    groups: dict[str, CIEstimate]
    records: tuple[EvalRecord, ...]


@dataclass(frozen=True)
class ToolUsageReport:
    counts: dict[str, int]
    shares: dict[str, float]
    total: int


def _normalized_set(labels: Iterable[str]) -> set[str]:
    return {normalize_answer(str(label)) for label in labels} - {""}


def score_sample(predicted: list[str] | tuple[str, ...], gold: list[str] | tuple[str, ...]) -> float:
    """Set-overlap F1 between normalized label sets, as a percentage.

    ``200 * |P∩G| / (|P| + |G|)``; for a single-label task this reduces to
    100 when the one predicted label matches and 0 otherwise.
    """
    gold_set = _normalized_set(gold)
    if not gold_set:
        raise DomainError("empty_gold", "gold label list is empty after normalization")
    predicted_set = _normalized_set(predicted)
    if not predicted_set:
        return 0.0
    overlap = len(predicted_set & gold_set)
    return 200.0 * overlap / (len(predicted_set) + len(gold_set))


def t_quantile_975(df: int) -> float:
    """Two-sided 95% Student-t critical value (inverse CDF at 0.975).

    The library inverse is polished with Newton steps on the CDF; the raw
    ppf is only good to ~1e-10 at low degrees of freedom, which is not
    enough for the pinned-reference checks.
    """
    t = float(stats.t.ppf(0.975, df))
    for _ in range(3):
        t -= (float(stats.t.cdf(t, df)) - 0.975) / float(stats.t.pdf(t, df))
    return t


def ci_estimate(scores: list[float]) -> CIEstimate:
    n = len(scores)
    if n == 0:
        raise DomainError("empty_input", "no scores to aggregate")
    mean = math.fsum(scores) / n
    if n < 2:
        return CIEstimate(n=n, mean=mean, radius=None)
    variance = math.fsum((s - mean) ** 2 for s in scores) / (n - 1)
    sd = math.sqrt(variance)
    radius = t_quantile_975(n - 1) * sd / math.sqrt(n)
    return CIEstimate(n=n, mean=mean, radius=radius)


def score_trajectory(trajectory: Trajectory, gold: tuple[str, ...]) -> EvalRecord:
    """Score one trajectory; anything that never finished scores zero."""
    if trajectory.termination == Termination.finished and trajectory.final_answer is not None:
        predicted = trajectory.final_answer
    else:
        predicted = ()
    return EvalRecord(
        task_id=trajectory.task.task_id,
        group=trajectory.task.group.value,
        f1=score_sample(predicted, gold),
        predicted=tuple(sorted(_normalized_set(predicted))),
        gold=tuple(sorted(_normalized_set(gold))),
        termination=trajectory.termination.value,
    )


def aggregate(records: list[EvalRecord]) -> GroupReport:
    """Per-group means plus the pooled overall mean, each with its CI."""
    if not records:
        raise DomainError("empty_input", "no records to aggregate")
    by_group: dict[str, list[float]] = {}
    for record in records:
        by_group.setdefault(record.group, []).append(record.f1)
    groups = {name: ci_estimate(scores) for name, scores in sorted(by_group.items())}
    overall = ci_estimate([r.f1 for r in records])
    return GroupReport(overall=overall, groups=groups, records=tuple(records))


@dataclass(frozen=True)
class DeltaCell:
    group: str
    agentic: float
    curated: float
    delta: float
    sign: str  # positive | negative | zero


def delta_report(agentic: GroupReport, curated: GroupReport) -> list[DeltaCell]:
    """Per-group and overall mean differences (agentic minus curated)."""
    if set(agentic.groups) != set(curated.groups):
        missing = set(agentic.groups) ^ set(curated.groups)
        raise DomainError("group_mismatch", f"reports disagree on groups: {sorted(missing)}")

    def cell(name: str, a: CIEstimate, c: CIEstimate) -> DeltaCell:
        delta = a.mean - c.mean
        sign = "zero" if delta == 0 else ("positive" if delta > 0 else "negative")
        return DeltaCell(group=name, agentic=a.mean, curated=c.mean, delta=delta, sign=sign)

    cells = [cell(name, agentic.groups[name], curated.groups[name]) for name in sorted(agentic.groups)]
    cells.append(cell("overall", agentic.overall, curated.overall))
    return cells


def tool_usage(trajectories: Iterable[Trajectory]) -> ToolUsageReport:
    counts: dict[str, int] = {}
    for trajectory in trajectories:
        for step in trajectory.steps:
            counts[step.call.name] = counts.get(step.call.name, 0) + 1
    return usage_from_counts(counts)


def usage_from_counts(counts: dict[str, int]) -> ToolUsageReport:
    total = sum(counts.values())
    shares = {name: count / total for name, count in counts.items()} if total else {}
    return ToolUsageReport(counts=dict(counts), shares=shares, total=total)


# ---------------------------------------------------------------------------
# Report (de)serialization and rendering

def report_to_dict(report: GroupReport) -> dict[str, Any]:
    def ci(value: CIEstimate) -> dict[str, Any]:
        return {"n": value.n, "mean": value.mean, "radius": value.radius}

    return {
        "overall": ci(report.overall),
        "groups": {name: ci(value) for name, value in report.groups.items()},
        "records": [
            {
                "task_id": r.task_id,
                "group": r.group,
                "f1": r.f1,
                "predicted": list(r.predicted),
                "gold": list(r.gold),
                "termination": r.termination,
            }
            for r in report.records
        ],
    }


def report_from_dict(data: dict[str, Any]) -> GroupReport:
    def ci(value: dict[str, Any]) -> CIEstimate:
        return CIEstimate(n=value["n"], mean=value["mean"], radius=value.get("radius"))

    records = tuple(
        EvalRecord(
            task_id=r["task_id"],
            group=r["group"],
            f1=r["f1"],
            predicted=tuple(r.get("predicted", [])),
            gold=tuple(r.get("gold", [])),
            termination=r.get("termination", ""),
        )
        for r in data.get("records", [])
    )
    return GroupReport(
        overall=ci(data["overall"]),
        groups={name: ci(value) for name, value in data.get("groups", {}).items()},
        records=records,
    )


def write_report(path: str, report: GroupReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_to_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_report(path: str) -> GroupReport:
    with open(path, encoding="utf-8") as fh:
        return report_from_dict(json.load(fh))


def render_report(report: GroupReport) -> str:
    """Aligned text table: one decimal for means, two for CI radii."""
    rows = [(name, str(ci.n), ci.format()) for name, ci in report.groups.items()]
    rows.append(("overall", str(report.overall.n), report.overall.format()))
    widths = [max(len(r[i]) for r in rows + [("group", "n", "mean f1 (95% CI)")]) for i in range(3)]
    header = ("group", "n", "mean f1 (95% CI)")
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def render_delta(cells: list[DeltaCell]) -> str:
    header = ("group", "agentic", "curated", "delta")
    rows = [
        (c.group, f"{c.agentic:.1f}", f"{c.curated:.1f}", f"{c.delta:+.1f}")
        for c in cells
    ]
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(4)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def render_usage(report: ToolUsageReport) -> str:
    if report.total == 0:
        return "No tool calls."
    items = sorted(report.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    rows = [(name, str(count), f"{report.shares[name] * 100:.1f}%") for name, count in items]
    rows.append(("total", str(report.total), "100.0%"))
    header = ("tool", "calls", "share")
    widths = [max(len(r[i]) for r in rows + [header]) for i in range(3)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)
