"""The unified 20-tool space: schemas, argument validation, and per-episode
execution sessions.

A registry binds the data sources (EHR store directory, knowledge backend,
imaging backend); opening a session binds one task. Image tools are enabled
only for tasks that link images; EHR and browser tools are always present.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import ehr_tools, imaging, knowledge
from .core import (
    FINISH_TOOL,
    THINK_TOOL,
    DomainError,
    ImageRef,
    ParamType,
    TaskInstance,
    ToolParam,
    ToolSchema,
)
from .ehr_tools import SqlEngine, format_sql_result, format_table
from .store import EhrSnapshot, load_snapshot

THINK_ACK = "Noted."
FINISH_ACK = "Final answer recorded."


def _p(name: str, type_: ParamType, required: bool, description: str) -> ToolParam:
    return ToolParam(name=name, type=type_, required=required, description=description)


EHR_TOOL_SCHEMAS: tuple[ToolSchema, ...] = (
    ToolSchema(
        name="ehr.load_ehr",
        description=(
            "Load the record tables for the task's patient, restricted to what was"
            " charted at or before the task's reference time. Must be called before"
            " any other ehr.* data tool."
        ),
    ),
    ToolSchema(
        name="ehr.get_table_names",
        description="List the loaded event and dictionary tables.",
    ),
    ToolSchema(
        name="ehr.get_table_description",
        description="Describe one table: purpose, columns with types, and visible row count.",
        parameters=(_p("table", ParamType.string, True, "table name"),),
    ),
    ToolSchema(
        name="ehr.get_column_names",
        description="List one table's columns in schema order with types.",
        parameters=(_p("table", ParamType.string, True, "table name"),),
    ),
    ToolSchema(
        name="ehr.get_records_by_time",
        description="Fetch an event table's rows inside a closed time range, ascending by time.",
        parameters=(
            _p("table", ParamType.string, True, "event table name"),
            _p("start", ParamType.string, True, "range start, 'YYYY-MM-DD HH:MM:SS'"),
            _p("end", ParamType.string, True, "range end, 'YYYY-MM-DD HH:MM:SS'"),
            _p("limit", ParamType.integer, False, "row cap, default 200"),
        ),
    ),
    ToolSchema(
        name="ehr.get_latest_records",
        description="Return every row carrying the most recent timestamp of an event table.",
        parameters=(_p("table", ParamType.string, True, "event table name"),),
    ),
    ToolSchema(
        name="ehr.run_sql_query",
        description=(
            "Run one read-only SQL SELECT over the loaded tables for filtering,"
            " joining, aggregation, or trends. Results are capped at 200 rows."
        ),
        parameters=(_p("sql", ParamType.string, True, "a single SELECT statement"),),
    ),
    ToolSchema(
        name="ehr.get_candidates_by_semantic_similarity",
        description="Rank a dictionary table's terms by similarity to a free-text query.",
        parameters=(
            _p("query", ParamType.string, True, "free-text term to ground"),
            _p("table", ParamType.string, True, "dictionary table name"),
            _p("top_k", ParamType.integer, False, "number of candidates, max 50"),
        ),
    ),
    ToolSchema(
        name="ehr.get_candidates_by_keyword",
        description="List dictionary terms whose title contains a keyword (case-insensitive).",
        parameters=(
            _p("keyword", ParamType.string, True, "substring to match"),
            _p("table", ParamType.string, True, "dictionary table name"),
            _p("top_k", ParamType.integer, False, "number of candidates, max 50"),
        ),
    ),
    ToolSchema(
        name=THINK_TOOL,
        description="Write down intermediate reasoning; the note is recorded verbatim.",
        parameters=(_p("note", ParamType.string, True, "your working notes"),),
    ),
    ToolSchema(
        name=FINISH_TOOL,
        description="Submit the final answer list and end the episode.",
        parameters=(_p("answers", ParamType.string_list, True, "final answer labels"),),
    ),
)

BROWSER_TOOL_SCHEMAS: tuple[ToolSchema, ...] = (
    ToolSchema(
        name="browser.search",
        description="Search the external medical knowledge source; returns ranked hits.",
        parameters=(
            _p("query", ParamType.string, True, "search query"),
            _p("k", ParamType.integer, False, "number of hits, max 10"),
        ),
    ),
    ToolSchema(
        name="browser.open",
        description="Open a retrieved document or URL; returns one page of text.",
        parameters=(
            _p("ref", ParamType.string, True, "doc_id or URL from a search hit"),
            _p("page", ParamType.integer, False, "1-based page number"),
        ),
    ),
    ToolSchema(
        name="browser.find",
        description="Find exact occurrences of a term inside an opened document.",
        parameters=(
            _p("ref", ParamType.string, True, "doc_id or URL"),
            _p("term", ParamType.string, True, "exact text to locate"),
        ),
    ),
)

IMAGE_TOOL_SCHEMAS: tuple[ToolSchema, ...] = (
    ToolSchema(
        name="image.dicom_processor",
        description="Convert a linked DICOM study to PNG (longest edge capped) and read its metadata.",
        parameters=(_p("image_id", ParamType.string, True, "image id from the task's linked studies"),),
    ),
    ToolSchema(
        name="image.image_visualizer",
        description="Render a linked image for inspection; returns the artifact path and size.",
        parameters=(_p("image_id", ParamType.string, True, "image id from the task's linked studies"),),
    ),
    ToolSchema(
        name="image.chest_xray_classifier",
        description="Estimate per-finding probabilities over the fixed 14-pathology set.",
        parameters=(_p("image_id", ParamType.string, True, "image id from the task's linked studies"),),
    ),
    ToolSchema(
        name="image.chest_xray_report_generator",
        description="Produce structured findings and impression sections for a chest radiograph.",
        parameters=(_p("image_id", ParamType.string, True, "image id from the task's linked studies"),),
    ),
    ToolSchema(
        name="image.xray_phrase_grounding",
        description="Locate a described finding in the image; returns pixel bounding boxes.",
        parameters=(
            _p("image_id", ParamType.string, True, "image id from the task's linked studies"),
            _p("phrase", ParamType.string, True, "finding phrase to ground"),
        ),
    ),
    ToolSchema(
        name="image.chest_xray_segmentation",
        description="Segment named anatomical structures; returns mask artifacts and pixel areas.",
        parameters=(
            _p("image_id", ParamType.string, True, "image id from the task's linked studies"),
            _p("structures", ParamType.string_list, True, "anatomy names to segment"),
        ),
    ),
)

ALL_TOOL_SCHEMAS: tuple[ToolSchema, ...] = (
    EHR_TOOL_SCHEMAS + BROWSER_TOOL_SCHEMAS + IMAGE_TOOL_SCHEMAS
)


def _coerce_argument(value: Any, param: ToolParam) -> Any:
    try:
        if param.type == ParamType.string:
            return value if isinstance(value, str) else str(value)
        if param.type == ParamType.integer:
            if isinstance(value, bool):
                raise ValueError("boolean is not an integer")
            return int(value)
        if param.type == ParamType.number:
            return float(value)
        if param.type == ParamType.boolean:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            raise ValueError(f"not a boolean: {value!r}")
        if param.type == ParamType.string_list:
            if isinstance(value, str):
                return [value]
            return [str(v) for v in value]
    except (TypeError, ValueError) as exc:
        raise DomainError("invalid_argument", f"argument {param.name!r}: {exc}") from exc
    raise DomainError("invalid_argument", f"argument {param.name!r} has unknown type")


def validate_arguments(schema: ToolSchema, arguments: dict[str, Any]) -> dict[str, Any]:
    known = {p.name: p for p in schema.parameters}
    unknown = sorted(set(arguments) - set(known))
    if unknown:
        raise DomainError("invalid_argument", f"unexpected argument(s): {', '.join(unknown)}")
    coerced: dict[str, Any] = {}
    for param in schema.parameters:
        if param.name in arguments and arguments[param.name] is not None:
            coerced[param.name] = _coerce_argument(arguments[param.name], param)
        elif param.required:
            raise DomainError("invalid_argument", f"missing required argument {param.name!r}")
    return coerced


@dataclass
class ToolRegistry:
    """Tool space configuration shared by all episodes of a run."""

    store_dir: str | Path | None = None
    knowledge_backend: knowledge.KnowledgeBackend | None = None
    imaging_backend: imaging.ImagingBackend | None = None
    sql_row_cap: int = ehr_tools.DEFAULT_ROW_CAP
    sql_timeout_s: float = ehr_tools.DEFAULT_SQL_TIMEOUT_S
    tools_disabled: bool = False

    def schemas_for(self, task: TaskInstance) -> tuple[ToolSchema, ...]:
        if self.tools_disabled:
            return tuple(s for s in EHR_TOOL_SCHEMAS if s.name == FINISH_TOOL)
        if task.modality_meta:
            return ALL_TOOL_SCHEMAS
        return EHR_TOOL_SCHEMAS + BROWSER_TOOL_SCHEMAS

    def open_session(self, task: TaskInstance) -> EpisodeSession:
        return EpisodeSession(registry=self, task=task)


@dataclass
class EpisodeSession:
    """Mutable per-episode tool state: the loaded snapshot and SQL engine."""

    registry: ToolRegistry
    task: TaskInstance
    snapshot: EhrSnapshot | None = None
    _engine: SqlEngine | None = field(default=None, repr=False)

    def close(self) -> None:
        if self._engine is not None:
            self._engine.close()
            self._engine = None

    def schemas(self) -> tuple[ToolSchema, ...]:
        return self.registry.schemas_for(self.task)

    def schema(self, name: str) -> ToolSchema | None:
        for schema in self.schemas():
            if schema.name == name:
                return schema
        return None

    # -- execution ------------------------------------------------------------

    def execute(self, name: str, arguments: dict[str, Any]) -> str:
        """Run one tool and return the observation content.

        Raises DomainError with the tool's error code on failure; think and
        finish are protocol tools handled by the runtime, which still routes
        them here for their acknowledgment content.
        """
        schema = self.schema(name)
        if schema is None:
            raise DomainError("unknown_tool", f"no tool named {name!r} is available for this task")
        args = validate_arguments(schema, arguments)

        if name == THINK_TOOL:
            return THINK_ACK
        if name == FINISH_TOOL:
            return FINISH_ACK
        if name == "ehr.load_ehr":
            return self._load_ehr()
        if name.startswith("ehr."):
            return self._run_ehr_tool(name, args)
        if name.startswith("browser."):
            return self._run_browser_tool(name, args)
        return self._run_image_tool(name, args)

    def _load_ehr(self) -> str:
        if self.registry.store_dir is None:
            raise DomainError("backend_unavailable", "no EHR store configured for this run")
        if self.snapshot is None:
            self.snapshot = load_snapshot(
                self.registry.store_dir, self.task.patient_id, self.task.cutoff
            )
            self._engine = SqlEngine(self.snapshot, timeout_s=self.registry.sql_timeout_s)
        snap = self.snapshot
        events = snap.manifest.event_tables()
        dicts = snap.manifest.dictionary_tables()
        visible = sum(len(snap.rows(t.name)) for t in events)
        return (
            f"Loaded records for patient {snap.patient_id} visible at or before {snap.cutoff}: "
            f"{len(events)} event tables ({visible} rows), {len(dicts)} dictionary tables."
        )

    def _require_snapshot(self) -> EhrSnapshot:
        if self.snapshot is None:
            raise DomainError("snapshot_not_loaded", "call ehr.load_ehr before other ehr.* tools")
        return self.snapshot

    def _run_ehr_tool(self, name: str, args: dict[str, Any]) -> str:
        snap = self._require_snapshot()
        if name == "ehr.get_table_names":
            rows = ehr_tools.get_table_names(snap)
            return format_table(("table", "kind"), rows)
        if name == "ehr.get_table_description":
            desc = ehr_tools.get_table_description(snap, args["table"])
            lines = [
                f"Table: {desc['table']} ({desc['kind']})",
                f"Description: {desc['description']}",
                f"Time column: {desc['time_column'] or '-'}",
                f"Visible rows: {desc['visible_rows']}",
                "",
                format_table(
                    ("column", "type", "description"),
                    [(c["name"], c["type"], c["description"]) for c in desc["columns"]],
                ),
            ]
            return "\n".join(lines)
        if name == "ehr.get_column_names":
            cols = ehr_tools.get_column_names(snap, args["table"])
            return format_table(
                ("column", "type", "description"),
                [(c["name"], c["type"], c["description"]) for c in cols],
            )
        if name == "ehr.get_records_by_time":
            result = ehr_tools.get_records_by_time(
                snap, args["table"], args["start"], args["end"], args.get("limit")
            )
            return format_sql_result(result)
        if name == "ehr.get_latest_records":
            result = ehr_tools.get_latest_records(snap, args["table"])
            if result.row_count_total == 0:
                return "No visible records in this table."
            return format_sql_result(result)
        if name == "ehr.run_sql_query":
            result = ehr_tools.run_sql_query(
                snap, args["sql"], row_cap=self.registry.sql_row_cap, engine=self._engine
            )
            return format_sql_result(result)
        if name == "ehr.get_candidates_by_semantic_similarity":
            entries = ehr_tools.get_candidates_by_semantic_similarity(
                snap, args["query"], args["table"], args.get("top_k", 10)
            )
            return format_table(
                ("code", "title", "score"),
                [(e.code, e.title, f"{e.score:.6f}") for e in entries],
            )
        if name == "ehr.get_candidates_by_keyword":
            entries = ehr_tools.get_candidates_by_keyword(
                snap, args["keyword"], args["table"], args.get("top_k", 10)
            )
            if not entries:
                return "No dictionary entries match."
            return format_table(("code", "title"), [(e.code, e.title) for e in entries])
        raise DomainError("unknown_tool", f"no tool named {name!r}")

    def _run_browser_tool(self, name: str, args: dict[str, Any]) -> str:
        backend = self.registry.knowledge_backend
        if backend is None:
            raise DomainError("backend_unavailable", "no knowledge backend configured for this run")
        if name == "browser.search":
            hits = knowledge.search(backend, args["query"], args.get("k", 5))
            if not hits:
                return "No results."
            return "\n".join(
                f"{h.rank}. [{h.doc_id}] {h.title}\n   {h.snippet}" for h in hits
            )
        if name == "browser.open":
            page = knowledge.open_doc(backend, args["ref"], args.get("page", 1))
            return (
                f"[{page['doc_id']}] {page['title']} (page {page['page']} of {page['total_pages']})\n"
                + page["text"]
            )
        if name == "browser.find":
            matches = knowledge.find_in_doc(backend, args["ref"], args["term"])
            if not matches:
                return "No matches."
            return "\n".join(
                f"offset {m.offset}: ...{m.context}..." for m in matches
            )
        raise DomainError("unknown_tool", f"no tool named {name!r}")

    def _resolve_image(self, image_id: str) -> ImageRef:
        for ref in self.task.modality_meta:
            if ref.image_id == image_id:
                return ref
        known = ", ".join(r.image_id for r in self.task.modality_meta) or "(none)"
        raise DomainError("unreadable_image", f"no linked image {image_id!r}; task links: {known}")

    def _run_image_tool(self, name: str, args: dict[str, Any]) -> str:
        backend = self.registry.imaging_backend
        if backend is None:
            raise DomainError("backend_unavailable", "no imaging backend configured for this run")
        ref = self._resolve_image(args["image_id"])
        call_args: dict[str, Any] = {"image_path": ref.path}
        if name == "image.xray_phrase_grounding":
            call_args["phrase"] = args["phrase"]
        if name == "image.chest_xray_segmentation":
            call_args["structures"] = args["structures"]
        payload = backend.run(name, call_args)
        return json.dumps(payload, indent=2, sort_keys=True)
