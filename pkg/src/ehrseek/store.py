"""Patient EHR snapshots: load raw tables and materialize a time-cutoff view.

A snapshot is built once per (patient, cutoff) and never mutated afterwards,
so downstream query tools physically cannot observe anything after the
cutoff. The filter is inclusive: rows timestamped exactly at the cutoff are
visible (the most recent event that defines the cutoff is itself evidence).
Beyond row filtering, any timestamp-typed cell inside a visible row that
postdates the cutoff (e.g. a discharge time recorded on the admission row)
is censored to null — knowing it would leak outcomes.

Data layout on disk: a ``manifest.json`` plus one comma-delimited UTF-8 file
per table with a header row; timestamps as ``YYYY-MM-DD HH:MM:SS``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Iterator

from .core import DomainError, is_timestamp

MANIFEST_FILENAME = "manifest.json"
DEFAULT_PATIENT_COLUMN = "subject_id"

COLUMN_TYPES = ("text", "integer", "real", "timestamp")

EVENT_TABLE = "event_table"
DICTIONARY_TABLE = "dictionary_table"

Cell = Any  # str | int | float | None; timestamps stay "YYYY-MM-DD HH:MM:SS" strings


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    type: str
    description: str = ""


@dataclass(frozen=True)
class TableSpec:
    name: str
    kind: str
    columns: tuple[ColumnSpec, ...]
    time_column: str | None = None
    description: str = ""

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]

    def column_index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise KeyError(name)


@dataclass(frozen=True)
class TableManifest:
    """Schema metadata for every table in a data directory."""

    tables: tuple[TableSpec, ...]
    patient_column: str = DEFAULT_PATIENT_COLUMN

    def __post_init__(self) -> None:
        names = [t.name for t in self.tables]
        if len(set(names)) != len(names):
            raise DomainError("malformed_manifest", "duplicate table names in manifest")
        for spec in self.tables:
            if spec.kind == EVENT_TABLE:
                if not spec.time_column:
                    raise DomainError(
                        "malformed_manifest", f"event table {spec.name!r} has no time_column"
                    )
                if spec.time_column not in spec.column_names():
                    raise DomainError(
                        "malformed_manifest",
                        f"time_column {spec.time_column!r} not a column of {spec.name!r}",
                    )
            elif spec.kind == DICTIONARY_TABLE:
                if spec.time_column:
                    raise DomainError(
                        "malformed_manifest", f"dictionary table {spec.name!r} has a time_column"
                    )
            else:
                raise DomainError("malformed_manifest", f"unknown table kind {spec.kind!r}")
            for col in spec.columns:
                if col.type not in COLUMN_TYPES:
                    raise DomainError(
                        "malformed_manifest",
                        f"unknown column type {col.type!r} in table {spec.name!r}",
                    )

    def get(self, table: str) -> TableSpec:
        for spec in self.tables:
            if spec.name == table:
                return spec
        raise DomainError("unknown_table", f"no table named {table!r}")

    def event_tables(self) -> list[TableSpec]:
        return [t for t in self.tables if t.kind == EVENT_TABLE]

    def dictionary_tables(self) -> list[TableSpec]:
        return [t for t in self.tables if t.kind == DICTIONARY_TABLE]


@dataclass(frozen=True)
class EhrSnapshot:
    """An immutable, cutoff-filtered view of one patient's tables.

    Event-table rows are restricted to ``time_column <= cutoff`` for the
    given patient; dictionary tables are shared unfiltered.
    """

    patient_id: str
    cutoff: str
    tables: dict[str, tuple[tuple[Cell, ...], ...]]
    manifest: TableManifest
    source: str = ""
    loaded_at: str = ""

    def rows(self, table: str) -> tuple[tuple[Cell, ...], ...]:
        self.manifest.get(table)
        return self.tables[table]


def manifest_to_dict(manifest: TableManifest) -> dict[str, Any]:
    return {
        "patient_column": manifest.patient_column,
        "tables": [
            {
                "name": t.name,
                "kind": t.kind,
                "description": t.description,
                "time_column": t.time_column,
                "columns": [
                    {"name": c.name, "type": c.type, "description": c.description}
                    for c in t.columns
                ],
            }
            for t in manifest.tables
        ],
    }


def manifest_from_dict(data: dict[str, Any]) -> TableManifest:
    try:
        tables = tuple(
            TableSpec(
                name=t["name"],
                kind=t["kind"],
                description=t.get("description", ""),
                time_column=t.get("time_column"),
                columns=tuple(
                    ColumnSpec(name=c["name"], type=c["type"], description=c.get("description", ""))
                    for c in t["columns"]
                ),
            )
            for t in data["tables"]
        )
    except (KeyError, TypeError) as exc:
        raise DomainError("malformed_manifest", f"bad manifest structure: {exc}") from exc
    return TableManifest(tables=tables, patient_column=data.get("patient_column", DEFAULT_PATIENT_COLUMN))


def read_manifest(source: str | Path) -> TableManifest:
    path = Path(source) / MANIFEST_FILENAME
    if not path.is_file():
        raise DomainError("malformed_manifest", f"no {MANIFEST_FILENAME} in {source}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DomainError("malformed_manifest", f"manifest is not valid JSON: {exc}") from exc
    return manifest_from_dict(data)


def _coerce(value: str, col: ColumnSpec, table: str, row_number: int) -> Cell:
    if value == "":
        return None
    try:
        if col.type == "integer":
            return int(value)
        if col.type == "real":
            return float(value)
        if col.type == "timestamp":
            if not is_timestamp(value):
                raise ValueError(f"bad timestamp {value!r}")
            return value
        return value
    except ValueError as exc:
        raise DomainError(
            "malformed_table",
            f"table {table!r} row {row_number} column {col.name!r}: {exc}",
        ) from exc


def _iter_table_rows(source: Path, spec: TableSpec) -> Iterator[tuple[int, tuple[Cell, ...]]]:
    """Yield (row_number, coerced row) pairs; row numbers are 1-based data rows."""
    path = source / f"{spec.name}.csv"
    if not path.is_file():
        raise DomainError("malformed_table", f"missing data file for table {spec.name!r}")
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DomainError("malformed_table", f"table {spec.name!r} has no header row")
        if header != spec.column_names():
            raise DomainError(
                "malformed_table",
                f"table {spec.name!r} header {header} does not match manifest columns",
            )
        for row_number, raw in enumerate(reader, start=1):
            if len(raw) != len(spec.columns):
                raise DomainError(
                    "malformed_table",
                    f"table {spec.name!r} row {row_number}: expected {len(spec.columns)} fields,"
                    f" got {len(raw)}",
                )
            yield row_number, tuple(
                _coerce(v, c, spec.name, row_number) for v, c in zip(raw, spec.columns)
            )


def load_snapshot(source: str | Path, patient_id: str, cutoff: str) -> EhrSnapshot:
    """Materialize the cutoff view of one patient from a data directory.

    Rows with ``time_column`` exactly equal to the cutoff are included; rows
    with a null time are excluded (their visibility time is undefined).

    Raises ``unknown_patient`` when the patient id appears in no event table,
    ``malformed_manifest`` / ``malformed_table`` on corrupt inputs.
    """
    source = Path(source)
    if not is_timestamp(cutoff):
        raise DomainError("malformed_input", f"cutoff is not a valid timestamp: {cutoff!r}")
    manifest = read_manifest(source)

    tables: dict[str, tuple[tuple[Cell, ...], ...]] = {}
    patient_seen = False
    for spec in manifest.tables:
        if spec.kind == DICTIONARY_TABLE:
            tables[spec.name] = tuple(row for _, row in _iter_table_rows(source, spec))
            continue
        patient_idx = None
        if manifest.patient_column in spec.column_names():
            patient_idx = spec.column_index(manifest.patient_column)
        time_idx = spec.column_index(spec.time_column)  # type: ignore[arg-type]
        ts_columns = [i for i, c in enumerate(spec.columns) if c.type == "timestamp"]
        kept: list[tuple[Cell, ...]] = []
        for _, row in _iter_table_rows(source, spec):
            if patient_idx is not None and str(row[patient_idx]) == str(patient_id):
                patient_seen = True
            else:
                continue
            stamp = row[time_idx]
            if stamp is None or stamp > cutoff:
                continue
            # Censor any other future-dated timestamp cell on the visible row.
            if any(row[i] is not None and row[i] > cutoff for i in ts_columns):
                row = tuple(
                    None if (i in ts_columns and row[i] is not None and row[i] > cutoff) else v
                    for i, v in enumerate(row)
                )
            kept.append(row)
        tables[spec.name] = tuple(kept)

    if not patient_seen:
        raise DomainError("unknown_patient", f"patient {patient_id!r} not present in any event table")

    return EhrSnapshot(
        patient_id=str(patient_id),
        cutoff=cutoff,
        tables=tables,
        manifest=manifest,
        source=str(source),
        loaded_at=datetime.now().strftime("%Y-%m-%d %H:%M:%S"),
    )
