"""Benchmark construction: convert curated-context examples into paired
evidence-seeking tasks, sample per-subtask quotas, and verify pairings
against the store.

The derived cutoff is the maximum context-event timestamp (the last event,
given nondecreasing order), which the inclusive snapshot bound keeps
retrievable — so curated and agentic settings share valid answer labels.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

from .core import (
    AnswerSchema,
    DomainError,
    ImageRef,
    TaskGroup,
    TaskInstance,
    answer_schema_from_dict,
    answer_schema_to_dict,
    image_ref_from_dict,
    image_ref_to_dict,
    is_timestamp,
    normalize_answer,
)
from .ehr_tools import get_records_by_time
from .store import load_snapshot


@dataclass(frozen=True)
class CuratedExample:
    """One source-benchmark example with its pre-selected context."""

    task_id: str
    patient_id: str
    instruction: str
    context_events: tuple[tuple[str, str], ...]  # (timestamp, event text), nondecreasing
    gold_answers: tuple[str, ...]
    group: TaskGroup
    subtask: str = ""
    modality_meta: tuple[ImageRef, ...] = ()
    answer_schema: AnswerSchema = field(default_factory=AnswerSchema)

    def __post_init__(self) -> None:
        previous = None
        for stamp, _ in self.context_events:
            if not is_timestamp(stamp):
                raise DomainError("malformed_input", f"bad event timestamp {stamp!r} in {self.task_id}")
            if previous is not None and stamp < previous:
                raise DomainError(
                    "malformed_input", f"context events not nondecreasing in {self.task_id}"
                )
            previous = stamp


@dataclass(frozen=True)
class PairedExample:
    """The same task under both settings, linked by task_id and gold labels."""

    curated: CuratedExample
    agentic: TaskInstance

    def __post_init__(self) -> None:
        if self.curated.task_id != self.agentic.task_id:
            raise DomainError("malformed_input", "pair halves carry different task_ids")


def to_agentic(curated: CuratedExample) -> TaskInstance:
    """Drop the curated context; keep instruction, labels, schema, and images.

    The cutoff becomes the timestamp of the last (maximum) context event.
    """
    if not curated.context_events:
        raise DomainError("empty_context", f"{curated.task_id}: no events to derive a cutoff from")
    cutoff = max(stamp for stamp, _ in curated.context_events)
    return TaskInstance(
        patient_id=curated.patient_id,
        cutoff=cutoff,
        instruction=curated.instruction,
        modality_meta=curated.modality_meta,
        answer_schema=curated.answer_schema,
        task_id=curated.task_id,
        group=curated.group,
    )


def pair(curated: CuratedExample) -> PairedExample:
    return PairedExample(curated=curated, agentic=to_agentic(curated))


# ---------------------------------------------------------------------------
# File formats: curated files and paired benchmark files are JSONL.

def curated_to_dict(example: CuratedExample) -> dict[str, Any]:
    return {
        "task_id": example.task_id,
        "patient_id": example.patient_id,
        "instruction": example.instruction,
        "context_events": [[stamp, text] for stamp, text in example.context_events],
        "gold_answers": list(example.gold_answers),
        "group": example.group.value,
        "subtask": example.subtask,
        "modality_meta": [image_ref_to_dict(m) for m in example.modality_meta],
        "answer_schema": answer_schema_to_dict(example.answer_schema),
    }


def curated_from_dict(data: dict[str, Any]) -> CuratedExample:
    try:
        return CuratedExample(
            task_id=data["task_id"],
            patient_id=str(data["patient_id"]),
            instruction=data["instruction"],
            context_events=tuple((e[0], e[1]) for e in data.get("context_events", [])),
            gold_answers=tuple(data.get("gold_answers", [])),
            group=TaskGroup(data.get("group", "external")),
            subtask=data.get("subtask", ""),
            modality_meta=tuple(image_ref_from_dict(m) for m in data.get("modality_meta", [])),
            answer_schema=answer_schema_from_dict(data.get("answer_schema", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DomainError("malformed_input", f"bad curated example: {exc}") from exc


def read_curated(path: str | Path) -> Iterator[CuratedExample]:
    if not Path(path).is_file():
        raise DomainError("malformed_input", f"no curated file at {path}")
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError("malformed_input", f"line {number} is not JSON: {exc}") from exc
            yield curated_from_dict(data)


def write_benchmark(path: str | Path, pairs: Iterable[PairedExample]) -> None:
    from .core import task_to_dict

    with open(path, "w", encoding="utf-8") as fh:
        for item in pairs:
            record = {
                "curated": curated_to_dict(item.curated),
                "agentic": task_to_dict(item.agentic),
            }
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")


def read_benchmark(path: str | Path) -> Iterator[PairedExample]:
    from .core import task_from_dict

    if not Path(path).is_file():
        raise DomainError("malformed_input", f"no benchmark file at {path}")
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DomainError("malformed_input", f"line {number} is not JSON: {exc}") from exc
            yield PairedExample(
                curated=curated_from_dict(data["curated"]),
                agentic=task_from_dict(data["agentic"]),
            )


# ---------------------------------------------------------------------------
# Benchmark assembly

@dataclass(frozen=True)
class BenchmarkManifest:
    total: int
    per_group: dict[str, int]
    per_subtask: dict[str, int]
    quota: int | None
    seed: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "total": self.total,
            "per_group": dict(sorted(self.per_group.items())),
            "per_subtask": dict(sorted(self.per_subtask.items())),
            "quota": self.quota,
            "seed": self.seed,
        }


def build_benchmark(
    curated_path: str | Path,
    out_path: str | Path,
    quota: int | None = None,
    seed: int = 0,
    manifest_path: str | Path | None = None,
) -> BenchmarkManifest:
    """Assemble a paired benchmark file from curated examples.

    With a quota, exactly ``quota`` examples are drawn per subtask with a
    seeded sampler (``quota_exceeds_available`` when a subtask is short).
    Examples whose subtask is empty fall back to their group name.
    """
    examples = list(read_curated(curated_path))
    ids = [e.task_id for e in examples]
    if len(set(ids)) != len(ids):
        raise DomainError("malformed_input", "task_id values are not unique in the curated file")

    by_subtask: dict[str, list[CuratedExample]] = {}
    for example in examples:
        key = example.subtask or example.group.value
        by_subtask.setdefault(key, []).append(example)

    selected: list[CuratedExample] = []
    rng = random.Random(seed)
    for key in sorted(by_subtask):
        members = by_subtask[key]
        if quota is None:
            selected.extend(members)
            continue
        if quota > len(members):
            raise DomainError(
                "quota_exceeds_available",
                f"subtask {key!r} has {len(members)} examples, quota is {quota}",
            )
        selected.extend(rng.sample(members, quota))

    pairs = [pair(example) for example in selected]
    write_benchmark(out_path, pairs)

    per_group: dict[str, int] = {}
    per_subtask: dict[str, int] = {}
    for example in selected:
        per_group[example.group.value] = per_group.get(example.group.value, 0) + 1
        key = example.subtask or example.group.value
        per_subtask[key] = per_subtask.get(key, 0) + 1
    manifest = BenchmarkManifest(
        total=len(selected),
        per_group=per_group,
        per_subtask=per_subtask,
        quota=quota,
        seed=seed,
    )
    if manifest_path is not None:
        Path(manifest_path).write_text(
            json.dumps(manifest.to_dict(), indent=2) + "\n", encoding="utf-8"
        )
    return manifest


# ---------------------------------------------------------------------------
# Pairing verification

@dataclass(frozen=True)
class PairingReport:
    task_id: str
    events_retrievable: bool
    no_post_cutoff_rows: bool
    missing_events: tuple[tuple[str, str], ...]
    leaked_rows: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return self.events_retrievable and self.no_post_cutoff_rows


def verify_pairing(item: PairedExample, store_dir: str | Path) -> PairingReport:
    """Check the pairing contract against a freshly loaded snapshot.

    (a) every curated context event has at least one visible row at its
    timestamp; (b) nothing visible postdates the cutoff.
    """
    cutoff = item.agentic.cutoff
    snapshot = load_snapshot(store_dir, item.agentic.patient_id, cutoff)

    missing: list[tuple[str, str]] = []
    event_specs = snapshot.manifest.event_tables()
    for stamp, text in item.curated.context_events:
        if stamp > cutoff:
            missing.append((stamp, text))
            continue
        found = any(
            get_records_by_time(snapshot, spec.name, stamp, stamp).row_count_total > 0
            for spec in event_specs
        )
        if not found:
            missing.append((stamp, text))

    leaked: list[str] = []
    for spec in event_specs:
        ts_columns = [i for i, c in enumerate(spec.columns) if c.type == "timestamp"]
        for row in snapshot.rows(spec.name):
            for i in ts_columns:
                if row[i] is not None and row[i] > cutoff:
                    leaked.append(f"{spec.name}: {row}")
                    break

    return PairingReport(
        task_id=item.curated.task_id,
        events_retrievable=not missing,
        no_post_cutoff_rows=not leaked,
        missing_events=tuple(missing),
        leaked_rows=tuple(leaked),
    )


# ---------------------------------------------------------------------------
# Synthetic curated examples drawn from a fixture store (test plumbing)

_SUBTASK_TEMPLATES = (
    ("next_prescription", TaskGroup.decision_making, "Which drug is most likely to be ordered next for this patient?"),
    ("recent_lab_flag", TaskGroup.risk_prediction, "Will the patient's next laboratory result be flagged abnormal?"),
    ("readmission_30d", TaskGroup.risk_prediction, "Is this patient at elevated risk of readmission within 30 days?"),
    ("culture_positive", TaskGroup.risk_prediction, "Will the pending culture grow an organism?"),
    ("next_careunit", TaskGroup.decision_making, "Which care unit will the patient move to next?"),
)


def fixture_curated(
    store_dir: str | Path,
    out_path: str | Path,
    seed: int,
    n_examples: int,
    n_subtasks: int = 5,
    events_per_example: tuple[int, int] = (3, 8),
) -> list[CuratedExample]:
    """Generate curated examples whose context events are real fixture rows.

    Deterministic for a fixed seed; every event is drawn from one patient's
    event tables, rendered as text, and sorted by time, so the derived
    cutoff is consistent with the store by construction.
    """
    from .store import read_manifest
    import csv

    store_dir = Path(store_dir)
    manifest = read_manifest(store_dir)
    rng = random.Random(seed)

    # Pool every event row per patient as (timestamp, rendered text).
    pools: dict[str, list[tuple[str, str]]] = {}
    for spec in manifest.event_tables():
        time_idx = spec.column_index(spec.time_column)  # type: ignore[arg-type]
        patient_idx = spec.column_index(manifest.patient_column)
        with open(store_dir / f"{spec.name}.csv", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            for row in reader:
                stamp = row[time_idx]
                if not stamp:
                    continue
                patient = row[patient_idx]
                rendered = f"{spec.name}: " + ", ".join(
                    f"{col}={val}" for col, val in zip(header, row) if val
                )
                pools.setdefault(patient, []).append((stamp, rendered))
    patients = sorted(pools)
    if not patients:
        raise DomainError("malformed_input", f"no event rows in store {store_dir}")

    examples: list[CuratedExample] = []
    for i in range(n_examples):
        patient = patients[i % len(patients)]
        pool = pools[patient]
        count = min(len(pool), rng.randint(*events_per_example))
        events = sorted(rng.sample(pool, count))
        template_id = i % n_subtasks
        name, group, instruction = _SUBTASK_TEMPLATES[template_id % len(_SUBTASK_TEMPLATES)]
        subtask = f"{name}_{template_id:02d}"
        gold = _fixture_gold(template_id, events, rng)
        examples.append(
            CuratedExample(
                task_id=f"fx-{seed}-{i:05d}",
                patient_id=patient,
                instruction=instruction,
                context_events=tuple(events),
                gold_answers=gold,
                group=group,
                subtask=subtask,
            )
        )

    with open(out_path, "w", encoding="utf-8") as fh:
        for example in examples:
            fh.write(json.dumps(curated_to_dict(example), ensure_ascii=False) + "\n")
    return examples


def _fixture_gold(template_id: int, events: list[tuple[str, str]], rng: random.Random) -> tuple[str, ...]:
    if template_id % 2 == 0:
        drugs = [t.split("drug=")[1].split(",")[0] for _, t in events if "drug=" in t]
        label = drugs[-1] if drugs else rng.choice(["yes", "no"])
    else:
        label = rng.choice(["yes", "no"])
    return (normalize_answer(label),)
