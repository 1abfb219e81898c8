"""Patient-record retrieval tools, each a pure function of an EhrSnapshot.

The snapshot is already cutoff-filtered at load time, so nothing here can
see post-cutoff data regardless of arguments; the SQL sandbox only guards
statement class (single read-only SELECT) and cost (row cap, wall-clock
bound).
"""

from __future__ import annotations

import math
import re
import sqlite3
import time
from collections import Counter
from dataclasses import dataclass
from typing import Any, Callable

from .core import DomainError, is_timestamp
from .store import DICTIONARY_TABLE, EVENT_TABLE, Cell, EhrSnapshot

DEFAULT_ROW_CAP = 200
DEFAULT_CANDIDATE_CAP = 50
DEFAULT_SQL_TIMEOUT_S = 10.0


@dataclass(frozen=True)
class SqlResult:
    """A capped page of rows plus the uncapped total count."""

    columns: tuple[str, ...]
    rows: tuple[tuple[Cell, ...], ...]
    row_count_total: int
    capped: bool


@dataclass(frozen=True)
class CandidateEntry:
    """A dictionary-table term surfaced for grounding."""

    code: str
    title: str
    source_table: str
    score: float | None = None


def get_table_names(snapshot: EhrSnapshot) -> list[tuple[str, str]]:
    """List every table as (name, kind): event tables first, alphabetical within kind."""
    events = sorted(t.name for t in snapshot.manifest.event_tables())
    dicts = sorted(t.name for t in snapshot.manifest.dictionary_tables())
    return [(n, EVENT_TABLE) for n in events] + [(n, DICTIONARY_TABLE) for n in dicts]


def get_table_description(snapshot: EhrSnapshot, table: str) -> dict[str, Any]:
    spec = snapshot.manifest.get(table)
    return {
        "table": spec.name,
        "kind": spec.kind,
        "description": spec.description,
        "time_column": spec.time_column,
        "columns": [
            {"name": c.name, "type": c.type, "description": c.description} for c in spec.columns
        ],
        "visible_rows": len(snapshot.rows(table)),
    }


def get_column_names(snapshot: EhrSnapshot, table: str) -> list[dict[str, str]]:
    spec = snapshot.manifest.get(table)
    return [{"name": c.name, "type": c.type, "description": c.description} for c in spec.columns]


def _event_spec(snapshot: EhrSnapshot, table: str):
    spec = snapshot.manifest.get(table)
    if spec.kind != EVENT_TABLE:
        raise DomainError("not_event_table", f"{table!r} is not an event table")
    return spec


def get_records_by_time(
    snapshot: EhrSnapshot,
    table: str,
    start: str,
    end: str,
    limit: int | None = None,
) -> SqlResult:
    """Rows with start <= time <= min(end, cutoff), ascending by time.

    The result is capped at ``limit`` rows (default 200) with the capped
    flag set when more matched.
    """
    spec = _event_spec(snapshot, table)
    if not is_timestamp(start) or not is_timestamp(end):
        raise DomainError("invalid_range", "start and end must be 'YYYY-MM-DD HH:MM:SS' timestamps")
    if start > end:
        raise DomainError("invalid_range", f"start {start!r} is after end {end!r}")
    cap = DEFAULT_ROW_CAP if limit is None else max(1, int(limit))
    end = min(end, snapshot.cutoff)
    time_idx = spec.column_index(spec.time_column)  # type: ignore[arg-type]
    matched = [
        row
        for row in snapshot.rows(table)
        if row[time_idx] is not None and start <= row[time_idx] <= end
    ]
    matched.sort(key=lambda r: r[time_idx])
    return SqlResult(
        columns=tuple(spec.column_names()),
        rows=tuple(matched[:cap]),
        row_count_total=len(matched),
        capped=len(matched) > cap,
    )


def get_latest_records(snapshot: EhrSnapshot, table: str) -> SqlResult:
    """All rows sharing the maximum visible timestamp of the table."""
    spec = _event_spec(snapshot, table)
    time_idx = spec.column_index(spec.time_column)  # type: ignore[arg-type]
    stamps = [row[time_idx] for row in snapshot.rows(table) if row[time_idx] is not None]
    if not stamps:
        return SqlResult(columns=tuple(spec.column_names()), rows=(), row_count_total=0, capped=False)
    latest = max(stamps)
    rows = tuple(row for row in snapshot.rows(table) if row[time_idx] == latest)
    return SqlResult(
        columns=tuple(spec.column_names()),
        rows=rows,
        row_count_total=len(rows),
        capped=False,
    )


# ---------------------------------------------------------------------------
# SQL sandbox

_SQLITE_TYPES = {"text": "TEXT", "integer": "INTEGER", "real": "REAL", "timestamp": "TEXT"}

# Authorizer action codes permitted for a read-only SELECT.
_ALLOWED_ACTIONS = {
    sqlite3.SQLITE_SELECT,
    sqlite3.SQLITE_READ,
    getattr(sqlite3, "SQLITE_FUNCTION", 31),
    getattr(sqlite3, "SQLITE_RECURSIVE", 33),
}

_LEADING_COMMENTS = re.compile(r"^(?:\s+|--[^\n]*\n?|/\*.*?\*/)*", re.DOTALL)


def _statement_head(sql: str) -> str:
    stripped = _LEADING_COMMENTS.sub("", sql)
    match = re.match(r"[A-Za-z]+", stripped)
    return match.group(0).upper() if match else ""


class SqlEngine:
    """One in-memory database materialized from a snapshot.

    Connections are cheap at fixture scale; an engine belongs to a single
    episode (thread) and must not be shared across threads.
    """

    def __init__(self, snapshot: EhrSnapshot, timeout_s: float = DEFAULT_SQL_TIMEOUT_S):
        self.snapshot = snapshot
        self.timeout_s = timeout_s
        self._conn = sqlite3.connect(":memory:")
        self._load()

    def _load(self) -> None:
        cur = self._conn.cursor()
        for spec in self.snapshot.manifest.tables:
            cols = ", ".join(
                f'"{c.name}" {_SQLITE_TYPES[c.type]}' for c in spec.columns
            )
            cur.execute(f'CREATE TABLE "{spec.name}" ({cols})')
            rows = self.snapshot.rows(spec.name)
            if rows:
                placeholders = ", ".join("?" for _ in spec.columns)
                cur.executemany(f'INSERT INTO "{spec.name}" VALUES ({placeholders})', rows)
        self._conn.commit()

    def close(self) -> None:
        self._conn.close()

    def query(self, sql: str, row_cap: int = DEFAULT_ROW_CAP) -> SqlResult:
        """Run a single read-only SELECT; rows capped, wall clock bounded."""
        if _statement_head(sql) not in ("SELECT", "WITH"):
            raise DomainError(
                "forbidden_statement",
                "only a single SELECT (optionally WITH a CTE) is allowed",
            )

        def authorize(action: int, *_: Any) -> int:
            return sqlite3.SQLITE_OK if action in _ALLOWED_ACTIONS else sqlite3.SQLITE_DENY

        deadline = time.monotonic() + self.timeout_s

        def check_deadline() -> int:
            return 1 if time.monotonic() > deadline else 0

        self._conn.set_authorizer(authorize)
        self._conn.set_progress_handler(check_deadline, 10_000)
        cur = self._conn.cursor()
        try:
            cur.execute(sql.strip().rstrip(";"))
            columns = tuple(d[0] for d in cur.description) if cur.description else ()
            kept: list[tuple[Cell, ...]] = []
            total = 0
            for row in cur:
                total += 1
                if total <= row_cap:
                    kept.append(tuple(row))
            return SqlResult(
                columns=columns, rows=tuple(kept), row_count_total=total, capped=total > row_cap
            )
        except (sqlite3.Warning, sqlite3.ProgrammingError, sqlite3.DatabaseError) as exc:
            message = str(exc)
            if "one statement at a time" in message:
                raise DomainError("forbidden_statement", message) from exc
            if "interrupted" in message:
                raise DomainError("timeout", f"query exceeded {self.timeout_s:g}s") from exc
            if "not authorized" in message or "prohibited" in message:
                raise DomainError("forbidden_statement", message) from exc
            raise DomainError("sql_error", message) from exc
        finally:
            self._conn.set_progress_handler(None, 0)
            self._conn.set_authorizer(None)


def run_sql_query(
    snapshot: EhrSnapshot,
    sql: str,
    row_cap: int = DEFAULT_ROW_CAP,
    timeout_s: float = DEFAULT_SQL_TIMEOUT_S,
    engine: SqlEngine | None = None,
) -> SqlResult:
    """Execute a read-only SELECT against the snapshot's tables.

    Pass a cached ``engine`` to reuse the materialized database across
    calls within one episode.
    """
    if engine is None:
        engine = SqlEngine(snapshot, timeout_s=timeout_s)
        try:
            return engine.query(sql, row_cap=row_cap)
        finally:
            engine.close()
    return engine.query(sql, row_cap=row_cap)


# ---------------------------------------------------------------------------
# Candidate-term retrieval over dictionary tables

def _dictionary_spec(snapshot: EhrSnapshot, table: str):
    spec = snapshot.manifest.get(table)
    if spec.kind != DICTIONARY_TABLE:
        raise DomainError("not_dictionary_table", f"{table!r} is not a dictionary table")
    return spec


def _code_title_indices(spec) -> tuple[int, int]:
    # Convention: first column is the code, last text column is the title.
    title_idx = max(i for i, c in enumerate(spec.columns) if c.type == "text")
    return 0, title_idx


def char_trigrams(text: str) -> Counter:
    """Lowercased character-3-gram counts; strings shorter than 3 chars count
    as a single gram so self-similarity stays 1."""
    text = text.lower()
    if len(text) < 3:
        return Counter({text: 1}) if text else Counter()
    return Counter(text[i : i + 3] for i in range(len(text) - 2))


def trigram_cosine(query: str, title: str) -> float:
    """Cosine similarity of 3-gram count vectors, in [0, 1]."""
    a, b = char_trigrams(query), char_trigrams(title)
    if not a or not b:
        return 0.0
    dot = sum(count * b[gram] for gram, count in a.items())
    if dot == 0:
        return 0.0
    norm_a = math.sqrt(sum(c * c for c in a.values()))
    norm_b = math.sqrt(sum(c * c for c in b.values()))
    return min(1.0, dot / (norm_a * norm_b))


SimilarityFn = Callable[[str, str], float]


def get_candidates_by_semantic_similarity(
    snapshot: EhrSnapshot,
    query: str,
    table: str,
    top_k: int = 10,
    similarity: SimilarityFn = trigram_cosine,
) -> list[CandidateEntry]:
    """Dictionary entries ranked by descending similarity to the query.

    The similarity backend is pluggable; the default is a deterministic
    character-3-gram cosine. Ties break by ascending code.
    """
    spec = _dictionary_spec(snapshot, table)
    if not query.strip():
        raise DomainError("empty_query", "query must be nonempty")
    top_k = max(1, min(int(top_k), DEFAULT_CANDIDATE_CAP))
    code_idx, title_idx = _code_title_indices(spec)
    scored = []
    for row in snapshot.rows(table):
        code = "" if row[code_idx] is None else str(row[code_idx])
        title = "" if row[title_idx] is None else str(row[title_idx])
        scored.append((similarity(query, title), code, title))
    scored.sort(key=lambda item: (-item[0], item[1]))
    return [
        CandidateEntry(code=code, title=title, source_table=table, score=round(score, 6))
        for score, code, title in scored[:top_k]
    ]


def get_candidates_by_keyword(
    snapshot: EhrSnapshot,
    keyword: str,
    table: str,
    top_k: int = 10,
) -> list[CandidateEntry]:
    """Dictionary entries whose title contains the keyword, case-insensitively."""
    spec = _dictionary_spec(snapshot, table)
    if not keyword.strip():
        raise DomainError("empty_query", "keyword must be nonempty")
    top_k = max(1, min(int(top_k), DEFAULT_CANDIDATE_CAP))
    code_idx, title_idx = _code_title_indices(spec)
    needle = keyword.lower()
    hits = []
    for row in snapshot.rows(table):
        code = "" if row[code_idx] is None else str(row[code_idx])
        title = "" if row[title_idx] is None else str(row[title_idx])
        if needle in title.lower():
            hits.append((code, title))
    hits.sort(key=lambda item: item[0])
    return [
        CandidateEntry(code=code, title=title, source_table=table)
        for code, title in hits[:top_k]
    ]


# ---------------------------------------------------------------------------
# Plain-text rendering of row results for observations

def format_table(columns: tuple[str, ...] | list[str], rows: list[tuple] | tuple) -> str:
    """Render rows as an aligned plain-text table."""
    cells = [[("" if v is None else str(v)) for v in row] for row in rows]
    headers = [str(c) for c in columns]
    widths = [len(h) for h in headers]
    for row in cells:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        " | ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
        "-+-".join("-" * w for w in widths),
    ]
    for row in cells:
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
    return "\n".join(lines)


def format_sql_result(result: SqlResult) -> str:
    if result.row_count_total == 0:
        header = ", ".join(result.columns) if result.columns else "(no columns)"
        return f"No rows. Columns: {header}"
    body = format_table(result.columns, list(result.rows))
    if result.capped:
        footer = f"\nShowing {len(result.rows)} of {result.row_count_total} rows (capped)."
    else:
        footer = f"\n{result.row_count_total} row(s)."
    return body + footer
