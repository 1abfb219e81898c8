"""Shared domain types: tasks, the tool-call protocol records, and trajectories.

Everything here is immutable after construction and safe to share across
concurrently running episodes. Trajectories persist as line-delimited JSON
(one trajectory per line) via :func:`write_trajectories` /
:func:`read_trajectories`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Iterator

TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S"

THINK_TOOL = "ehr.think"
FINISH_TOOL = "ehr.finish"

#: Hard default for the per-episode round budget (tool calls per episode).
DEFAULT_MAX_ROUNDS = 200
#: Hard default for the observation-content character limit.
DEFAULT_TOOL_RESULT_CHARS = 100_000


class DomainError(Exception):
    """An operation failure with a stable machine-readable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code
        self.message = message

    def __str__(self) -> str:
        return f"{self.code}: {self.message}"


def parse_timestamp(text: str) -> datetime:
    """Parse a second-resolution, timezone-naive timestamp."""
    return datetime.strptime(text, TIMESTAMP_FORMAT)


def format_timestamp(value: datetime) -> str:
    return value.strftime(TIMESTAMP_FORMAT)


def is_timestamp(text: str) -> bool:
    try:
        parse_timestamp(text)
    except (ValueError, TypeError):
        return False
    return True


def normalize_answer(raw: str) -> str:
    """Canonicalize an answer label for scoring.

    Lowercases, collapses whitespace runs to single spaces, and strips any
    trailing mix of periods and whitespace (so the result is a fixed point:
    normalizing twice never changes the output). All other punctuation is
    preserved; code titles carry meaningful commas and parentheses.
    """
    collapsed = " ".join(raw.lower().split())
    return collapsed.rstrip(" .")


class TaskGroup(str, Enum):
    risk_prediction = "risk_prediction"
    decision_making = "decision_making"
    cxr_presence = "cxr_presence"
    cxr_enumeration = "cxr_enumeration"
    cxr_change = "cxr_change"
    decompensation_24h = "decompensation_24h"
    inpatient_mortality = "inpatient_mortality"
    phenotype = "phenotype"
    external = "external"


class AnswerKind(str, Enum):
    single_label = "single_label"
    label_set = "label_set"
    free_list = "free_list"


@dataclass(frozen=True)
class AnswerSchema:
    """Shape of an admissible final answer.

    ``candidates``, when present, is the closed label set the task allows;
    ``max_answers`` bounds how many labels may be submitted.
    """

    kind: AnswerKind = AnswerKind.free_list
    candidates: tuple[str, ...] | None = None
    max_answers: int | None = None

    def __post_init__(self) -> None:
        if self.kind == AnswerKind.single_label:
            if self.max_answers is None:
                object.__setattr__(self, "max_answers", 1)
            elif self.max_answers != 1:
                raise ValueError("single_label schema requires max_answers=1")
        if self.max_answers is not None and self.max_answers < 1:
            raise ValueError("max_answers must be positive")
        if self.candidates is not None:
            normalized = [normalize_answer(c) for c in self.candidates]
            if len(set(normalized)) != len(normalized):
                raise ValueError("candidates must be unique after normalization")


@dataclass(frozen=True)
class ImageRef:
    """A study-linked image file reference (DICOM or PNG)."""

    study_id: str
    image_id: str
    path: str
    view: str | None = None


@dataclass(frozen=True)
class TaskInstance:
    """One clinical task: a patient, a cutoff time, an instruction, optional
    linked images, and the expected answer shape."""

    patient_id: str
    cutoff: str
    instruction: str
    modality_meta: tuple[ImageRef, ...] = ()
    answer_schema: AnswerSchema = field(default_factory=AnswerSchema)
    task_id: str = ""
    group: TaskGroup = TaskGroup.external

    def __post_init__(self) -> None:
        if not self.patient_id:
            raise ValueError("patient_id must be nonempty")
        if not is_timestamp(self.cutoff):
            raise ValueError(f"cutoff is not a valid timestamp: {self.cutoff!r}")


class ParamType(str, Enum):
    string = "string"
    integer = "integer"
    number = "number"
    boolean = "boolean"
    string_list = "string-list"


@dataclass(frozen=True)
class ToolParam:
    name: str
    type: ParamType
    required: bool
    description: str


@dataclass(frozen=True)
class ToolSchema:
    """The declared interface of one tool as presented to policies."""

    name: str
    description: str
    parameters: tuple[ToolParam, ...] = ()

    def to_json_schema(self) -> dict[str, Any]:
        """Render parameters as a JSON-schema object (chat tool declaration)."""
        type_map = {
            ParamType.string: {"type": "string"},
            ParamType.integer: {"type": "integer"},
            ParamType.number: {"type": "number"},
            ParamType.boolean: {"type": "boolean"},
            ParamType.string_list: {"type": "array", "items": {"type": "string"}},
        }
        properties = {
            p.name: dict(type_map[p.type], description=p.description) for p in self.parameters
        }
        required = [p.name for p in self.parameters if p.required]
        return {"type": "object", "properties": properties, "required": required}


class ObsStatus(str, Enum):
    ok = "ok"
    error = "error"


@dataclass(frozen=True)
class ToolCall:
    """One action a_k: the tool invoked at step k and its arguments.

    ``reasoning`` carries the policy's optional free-text channel emitted
    alongside the invocation; it is preserved for dataset export and ignored
    by evaluation.
    """

    step_index: int
    name: str
    arguments: dict[str, Any] = field(default_factory=dict)
    reasoning: str | None = None


@dataclass(frozen=True)
class Observation:
    """One environment result o_k paired with the call at the same step."""

    step_index: int
    status: ObsStatus
    content: str
    truncated: bool = False
    error_code: str | None = None
    latency_ms: int = 0


@dataclass(frozen=True)
class TrajectoryStep:
    call: ToolCall
    observation: Observation


class Termination(str, Enum):
    finished = "finished"
    round_budget_exhausted = "round_budget_exhausted"
    policy_error = "policy_error"


@dataclass(frozen=True)
class Trajectory:
    """A full episode: the task, the ordered (call, observation) steps, and
    the final answer when the policy terminated by finishing."""

    task: TaskInstance
    steps: tuple[TrajectoryStep, ...]
    final_answer: tuple[str, ...] | None
    termination: Termination
    policy_id: str
    wall_time_ms: int = 0


def validate_trajectory(traj: Trajectory, max_rounds: int = DEFAULT_MAX_ROUNDS) -> list[str]:
    """Check every trajectory invariant; return one description per violation.

    An empty list means the trajectory is well formed.
    """
    violations: list[str] = []
    prev_index = 0
    for step in traj.steps:
        if step.call.step_index <= prev_index:
            violations.append(
                f"step_index not strictly increasing at step {step.call.step_index}"
                f" (previous {prev_index})"
            )
        if step.observation.step_index != step.call.step_index:
            violations.append(
                f"observation step_index {step.observation.step_index} does not match"
                f" call step_index {step.call.step_index}"
            )
        prev_index = step.call.step_index

    if len(traj.steps) > max_rounds:
        violations.append(f"{len(traj.steps)} steps exceed the round budget {max_rounds}")

    last = traj.steps[-1] if traj.steps else None
    finished_by_tool = (
        last is not None
        and last.call.name == FINISH_TOOL
        and last.observation.status == ObsStatus.ok
    )
    if traj.termination == Termination.finished and not finished_by_tool:
        violations.append("termination=finished but last step is not a successful finish call")
    if traj.termination != Termination.finished and finished_by_tool:
        violations.append(f"last step is a successful finish call but termination={traj.termination.value}")

    if traj.termination == Termination.finished and traj.final_answer is None:
        violations.append("termination=finished but final_answer is absent")
    if traj.termination != Termination.finished and traj.final_answer is not None:
        violations.append(f"final_answer present but termination={traj.termination.value}")

    return violations


# ---------------------------------------------------------------------------
# JSON (de)serialization. Field names are part of the on-disk contract.

def answer_schema_to_dict(schema: AnswerSchema) -> dict[str, Any]:
    return {
        "kind": schema.kind.value,
        "candidates": list(schema.candidates) if schema.candidates is not None else None,
        "max_answers": schema.max_answers,
    }


def answer_schema_from_dict(data: dict[str, Any]) -> AnswerSchema:
    candidates = data.get("candidates")
    return AnswerSchema(
        kind=AnswerKind(data.get("kind", "free_list")),
        candidates=tuple(candidates) if candidates is not None else None,
        max_answers=data.get("max_answers"),
    )


def image_ref_to_dict(ref: ImageRef) -> dict[str, Any]:
    return {"study_id": ref.study_id, "image_id": ref.image_id, "path": ref.path, "view": ref.view}


def image_ref_from_dict(data: dict[str, Any]) -> ImageRef:
    return ImageRef(
        study_id=data["study_id"],
        image_id=data["image_id"],
        path=data["path"],
        view=data.get("view"),
    )


def task_to_dict(task: TaskInstance) -> dict[str, Any]:
    return {
        "patient_id": task.patient_id,
        "cutoff": task.cutoff,
        "instruction": task.instruction,
        "modality_meta": [image_ref_to_dict(ref) for ref in task.modality_meta],
        "answer_schema": answer_schema_to_dict(task.answer_schema),
        "task_id": task.task_id,
        "group": task.group.value,
    }


def task_from_dict(data: dict[str, Any]) -> TaskInstance:
    return TaskInstance(
        patient_id=data["patient_id"],
        cutoff=data["cutoff"],
        instruction=data["instruction"],
        modality_meta=tuple(image_ref_from_dict(m) for m in data.get("modality_meta", [])),
        answer_schema=answer_schema_from_dict(data.get("answer_schema", {})),
        task_id=data.get("task_id", ""),
        group=TaskGroup(data.get("group", "external")),
    )


def _call_to_dict(call: ToolCall) -> dict[str, Any]:
    return {
        "step_index": call.step_index,
        "name": call.name,
        "arguments": call.arguments,
        "reasoning": call.reasoning,
    }


def _call_from_dict(data: dict[str, Any]) -> ToolCall:
    return ToolCall(
        step_index=data["step_index"],
        name=data["name"],
        arguments=data.get("arguments", {}),
        reasoning=data.get("reasoning"),
    )


def _observation_to_dict(obs: Observation) -> dict[str, Any]:
    return {
        "step_index": obs.step_index,
        "status": obs.status.value,
        "content": obs.content,
        "truncated": obs.truncated,
        "error_code": obs.error_code,
        "latency_ms": obs.latency_ms,
    }


def _observation_from_dict(data: dict[str, Any]) -> Observation:
    return Observation(
        step_index=data["step_index"],
        status=ObsStatus(data["status"]),
        content=data["content"],
        truncated=data.get("truncated", False),
        error_code=data.get("error_code"),
        latency_ms=data.get("latency_ms", 0),
    )


def trajectory_to_dict(traj: Trajectory) -> dict[str, Any]:
    return {
        "task": task_to_dict(traj.task),
        "steps": [
            {"call": _call_to_dict(s.call), "observation": _observation_to_dict(s.observation)}
            for s in traj.steps
        ],
        "final_answer": list(traj.final_answer) if traj.final_answer is not None else None,
        "termination": traj.termination.value,
        "policy_id": traj.policy_id,
        "wall_time_ms": traj.wall_time_ms,
    }


def trajectory_from_dict(data: dict[str, Any]) -> Trajectory:
    steps = tuple(
        TrajectoryStep(
            call=_call_from_dict(s["call"]),
            observation=_observation_from_dict(s["observation"]),
        )
        for s in data["steps"]
    )
    final = data.get("final_answer")
    return Trajectory(
        task=task_from_dict(data["task"]),
        steps=steps,
        final_answer=tuple(final) if final is not None else None,
        termination=Termination(data["termination"]),
        policy_id=data.get("policy_id", ""),
        wall_time_ms=data.get("wall_time_ms", 0),
    )


def write_trajectories(path: str | Path, trajectories: Iterable[Trajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_dict(traj), ensure_ascii=False) + "\n")


def read_trajectories(path: str | Path) -> Iterator[Trajectory]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield trajectory_from_dict(json.loads(line))
