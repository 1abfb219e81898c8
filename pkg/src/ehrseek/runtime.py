"""The interaction loop: bind a task to the tool space, query a policy for
actions, execute tools, enforce budgets, and record the trajectory.

The loop stops on a successful finish call, when the round budget runs out
(no answer recorded), or on unrecoverable policy transport failure. Every
tool result is truncated to the configured observation limit; the full
prior history is shown to the policy each turn; no ordering over evidence
sources is imposed.
"""

from __future__ import annotations

import json
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Protocol

import httpx

from .core import (
    DEFAULT_MAX_ROUNDS,
    DEFAULT_TOOL_RESULT_CHARS,
    FINISH_TOOL,
    AnswerKind,
    DomainError,
    Observation,
    ObsStatus,
    TaskInstance,
    Termination,
    ToolCall,
    ToolSchema,
    Trajectory,
    TrajectoryStep,
    normalize_answer,
)
from .registry import FINISH_ACK, ToolRegistry

DEFAULT_MAX_OUTPUT_TOKENS = 8192
DEFAULT_TEMPERATURE = 1.0
DEFAULT_PARALLELISM = 6

PROTOCOL_VERSION = "1"

SYSTEM_PROMPT = """You are a clinical evidence-seeking assistant. You are given a task about one \
patient and a set of tools. Gather whatever evidence the task needs by calling tools, one call \
per turn, then submit your final answer with the ehr.finish tool.

Rules:
- For patient-record questions, call ehr.load_ehr first; the record is restricted to what was \
charted at or before the task's reference time.
- You may interleave record queries, knowledge search, and image analysis in any order.
- Each tool call consumes one round of a fixed budget; episodes that never call ehr.finish end \
unanswered.
- ehr.finish takes a list of answer strings. Submit exactly one when the task asks for a single \
label, or every applicable label otherwise.
"""


@dataclass(frozen=True)
class RuntimeBudget:
    """Per-episode limits; the protocol defaults are fixed constants."""

    max_rounds: int = DEFAULT_MAX_ROUNDS
    max_tool_result_chars: int = DEFAULT_TOOL_RESULT_CHARS
    max_output_tokens_hint: int = DEFAULT_MAX_OUTPUT_TOKENS
    episode_wall_clock_limit_s: float | None = None
    max_concurrent_episodes: int = DEFAULT_PARALLELISM

    def __post_init__(self) -> None:
        if self.max_rounds < 1 or self.max_tool_result_chars < 1:
            raise ValueError("budgets must be positive")
        if self.max_output_tokens_hint < 1 or self.max_concurrent_episodes < 1:
            raise ValueError("budgets must be positive")
        if self.episode_wall_clock_limit_s is not None and self.episode_wall_clock_limit_s <= 0:
            raise ValueError("budgets must be positive")


@dataclass(frozen=True)
class PolicyTurn:
    """One policy decision: a tool request, or terminate-with-answer.

    Exactly one of ``name`` (tool request) or ``answers`` (terminate) is set;
    a terminate request is recorded as an ehr.finish call. ``malformed``
    carries a parse-failure description instead when the policy produced an
    undecodable action.
    """

    name: str | None = None
    arguments: dict[str, Any] | None = None
    answers: list[str] | None = None
    reasoning: str | None = None
    malformed: str | None = None

    def __post_init__(self) -> None:
        variants = sum((self.name is not None, self.answers is not None, self.malformed is not None))
        if variants != 1:
            raise ValueError("PolicyTurn needs exactly one of name / answers / malformed")


def call(name: str, reasoning: str | None = None, **arguments: Any) -> PolicyTurn:
    """Script helper: a tool-request turn."""
    return PolicyTurn(name=name, arguments=arguments, reasoning=reasoning)


def finish(answers: list[str], reasoning: str | None = None) -> PolicyTurn:
    """Script helper: a terminate-with-answer turn."""
    return PolicyTurn(answers=list(answers), reasoning=reasoning)


class PolicySession(Protocol):
    def turn(self, task: TaskInstance, history: tuple[TrajectoryStep, ...]) -> PolicyTurn: ...


class Policy(Protocol):
    policy_id: str

    def start(
        self, task: TaskInstance, schemas: tuple[ToolSchema, ...], system_prompt: str
    ) -> PolicySession: ...


class PolicyTransportError(Exception):
    """Unrecoverable policy transport failure; ends the episode as policy_error."""


# ---------------------------------------------------------------------------
# Scripted policy (deterministic test double)

class _ScriptSession:
    def __init__(self, turns: tuple[PolicyTurn, ...]):
        self._turns = turns
        self._cursor = 0

    def turn(self, task: TaskInstance, history: tuple[TrajectoryStep, ...]) -> PolicyTurn:
        if not self._turns:
            raise PolicyTransportError("scripted policy has an empty script")
        turn = self._turns[min(self._cursor, len(self._turns) - 1)]
        self._cursor += 1
        return turn


@dataclass
class ScriptedPolicy:
    """Replays a fixed action list; when exhausted, repeats the last action."""

    turns: tuple[PolicyTurn, ...]
    policy_id: str = "scripted"

    def start(
        self, task: TaskInstance, schemas: tuple[ToolSchema, ...], system_prompt: str
    ) -> _ScriptSession:
        return _ScriptSession(self.turns)


def scripted_policy(turns: Iterable[PolicyTurn], policy_id: str = "scripted") -> ScriptedPolicy:
    return ScriptedPolicy(turns=tuple(turns), policy_id=policy_id)


# ---------------------------------------------------------------------------
# Chat-completions policy

@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    temperature: float = DEFAULT_TEMPERATURE
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS
    request_timeout_s: float = 120.0
    max_retries: int = 3
    backoff_s: float = 0.5


def task_prompt(task: TaskInstance) -> str:
    """The user-turn presentation of a task; shared by inference and export."""
    lines = [
        f"Patient identifier: {task.patient_id}",
        f"Reference time: {task.cutoff}",
        f"Task: {task.instruction}",
    ]
    if task.modality_meta:
        linked = ", ".join(
            f"{ref.image_id} (study {ref.study_id}" + (f", view {ref.view})" if ref.view else ")")
            for ref in task.modality_meta
        )
        lines.append(f"Linked images: {linked}")
    schema = task.answer_schema
    if schema.kind == AnswerKind.single_label:
        lines.append("Answer with exactly one label.")
    elif schema.max_answers:
        lines.append(f"Answer with at most {schema.max_answers} labels.")
    if schema.candidates:
        lines.append("Candidate answers: " + "; ".join(schema.candidates))
    return "\n".join(lines)


def _history_messages(history: tuple[TrajectoryStep, ...]) -> list[dict[str, Any]]:
    messages: list[dict[str, Any]] = []
    for step in history:
        call_id = f"call_{step.call.step_index}"
        messages.append(
            {
                "role": "assistant",
                "content": step.call.reasoning or "",
                "tool_calls": [
                    {
                        "id": call_id,
                        "type": "function",
                        "function": {
                            "name": step.call.name,
                            "arguments": json.dumps(step.call.arguments),
                        },
                    }
                ],
            }
        )
        messages.append(
            {"role": "tool", "tool_call_id": call_id, "content": step.observation.content}
        )
    return messages


class _LlmSession:
    def __init__(self, policy: LlmPolicy, task: TaskInstance,
                 schemas: tuple[ToolSchema, ...], system_prompt: str):
        self._policy = policy
        self._task = task
        self._system = system_prompt
        self._tools = [
            {
                "type": "function",
                "function": {
                    "name": s.name,
                    "description": s.description,
                    "parameters": s.to_json_schema(),
                },
            }
            for s in schemas
        ]

    def turn(self, task: TaskInstance, history: tuple[TrajectoryStep, ...]) -> PolicyTurn:
        messages = [
            {"role": "system", "content": self._system},
            {"role": "user", "content": task_prompt(task)},
        ] + _history_messages(history)
        body = {
            "model": self._policy.endpoint.model,
            "messages": messages,
            "tools": self._tools,
            "temperature": self._policy.endpoint.temperature,
            "max_tokens": self._policy.endpoint.max_output_tokens,
        }
        reply = self._policy.request(body)
        return _decode_chat_reply(reply)


def _decode_chat_reply(reply: dict[str, Any]) -> PolicyTurn:
    try:
        message = reply["choices"][0]["message"]
    except (KeyError, IndexError, TypeError):
        return PolicyTurn(malformed="reply carries no choices[0].message")
    reasoning = message.get("content") or None
    tool_calls = message.get("tool_calls") or []
    if not tool_calls:
        return PolicyTurn(malformed="reply contains no tool invocation")
    function = tool_calls[0].get("function", {})
    name = function.get("name")
    if not name:
        return PolicyTurn(malformed="tool invocation has no name")
    raw_arguments = function.get("arguments", "{}")
    try:
        arguments = json.loads(raw_arguments) if isinstance(raw_arguments, str) else dict(raw_arguments)
    except (json.JSONDecodeError, TypeError, ValueError):
        return PolicyTurn(malformed=f"arguments for {name} are not valid JSON")
    if not isinstance(arguments, dict):
        return PolicyTurn(malformed=f"arguments for {name} are not an object")
    return PolicyTurn(name=name, arguments=arguments, reasoning=reasoning)


@dataclass
class LlmPolicy:
    """Drives a chat-completions endpoint with declared tools.

    Transport failures are retried with exponential backoff; after the retry
    budget they abort the episode. Malformed replies never abort — they are
    fed back as error observations so the model can self-correct.
    """

    endpoint: EndpointConfig
    policy_id: str = ""
    transport: httpx.BaseTransport | None = None

    def __post_init__(self) -> None:
        if not self.policy_id:
            self.policy_id = f"llm:{self.endpoint.model}"
        headers = {}
        if self.endpoint.api_key:
            headers["Authorization"] = f"Bearer {self.endpoint.api_key}"
        self._client = httpx.Client(
            transport=self.transport, timeout=self.endpoint.request_timeout_s, headers=headers
        )

    def start(
        self, task: TaskInstance, schemas: tuple[ToolSchema, ...], system_prompt: str
    ) -> _LlmSession:
        return _LlmSession(self, task, schemas, system_prompt)

    def request(self, body: dict[str, Any]) -> dict[str, Any]:
        url = self.endpoint.base_url.rstrip("/") + "/chat/completions"
        last_error: Exception | None = None
        for attempt in range(self.endpoint.max_retries):
            try:
                response = self._client.post(url, json=body)
                if response.status_code >= 500:
                    raise httpx.HTTPStatusError(
                        f"server error {response.status_code}",
                        request=response.request,
                        response=response,
                    )
                response.raise_for_status()
                return response.json()
            except httpx.HTTPError as exc:
                last_error = exc
                if attempt + 1 < self.endpoint.max_retries:
                    time.sleep(self.endpoint.backoff_s * (2**attempt))
        raise PolicyTransportError(f"endpoint failed after {self.endpoint.max_retries} attempts: {last_error}")


# ---------------------------------------------------------------------------
# Episode loop

def truncate_content(content: str, limit: int) -> tuple[str, bool]:
    """Clamp observation content to the budget; truncated iff it exceeded it."""
    if len(content) > limit:
        return content[:limit], True
    return content, False


def _finish_answers(task: TaskInstance, answers: list[str]) -> tuple[tuple[str, ...], str]:
    """Normalize, deduplicate (order-preserving), and apply the answer schema."""
    normalized: list[str] = []
    for raw in answers:
        label = normalize_answer(str(raw))
        if label not in normalized:
            normalized.append(label)
    note = FINISH_ACK
    if task.answer_schema.kind == AnswerKind.single_label and len(normalized) > 1:
        normalized = normalized[:1]
        note += " Warning: task takes a single label; kept only the first answer."
    return tuple(normalized), note


def run_episode(
    task: TaskInstance,
    policy: Policy,
    registry: ToolRegistry,
    budget: RuntimeBudget | None = None,
    system_prompt: str = SYSTEM_PROMPT,
) -> Trajectory:
    """Run one task to termination and return its trajectory.

    All failures are encoded in the trajectory's termination; nothing is
    raised for policy or tool misbehavior.
    """
    budget = budget or RuntimeBudget()
    session = registry.open_session(task)
    schemas = session.schemas()
    policy_session = policy.start(task, schemas, system_prompt)

    steps: list[TrajectoryStep] = []
    final_answer: tuple[str, ...] | None = None
    termination = Termination.round_budget_exhausted
    started = time.monotonic()

    try:
        for step_index in range(1, budget.max_rounds + 1):
            if (
                budget.episode_wall_clock_limit_s is not None
                and time.monotonic() - started > budget.episode_wall_clock_limit_s
            ):
                break
            try:
                turn = policy_session.turn(task, tuple(steps))
            except PolicyTransportError:
                termination = Termination.policy_error
                break

            if turn.malformed is not None:
                tool_call = ToolCall(
                    step_index=step_index, name="<unparsed>", arguments={}, reasoning=turn.reasoning
                )
                content, was_cut = truncate_content(
                    f"Could not parse a tool invocation: {turn.malformed}. "
                    "Reply with exactly one tool call.",
                    budget.max_tool_result_chars,
                )
                steps.append(
                    TrajectoryStep(
                        call=tool_call,
                        observation=Observation(
                            step_index=step_index,
                            status=ObsStatus.error,
                            content=content,
                            truncated=was_cut,
                            error_code="malformed_call",
                        ),
                    )
                )
                continue

            if turn.answers is not None:
                name, arguments = FINISH_TOOL, {"answers": list(turn.answers)}
            else:
                name, arguments = turn.name, dict(turn.arguments or {})
            tool_call = ToolCall(
                step_index=step_index, name=name, arguments=arguments, reasoning=turn.reasoning
            )

            call_started = time.monotonic()
            error_code: str | None = None
            if name == FINISH_TOOL:
                answers = arguments.get("answers", [])
                if isinstance(answers, str):
                    answers = [answers]
                try:
                    final_answer, content = _finish_answers(task, list(answers))
                    status = ObsStatus.ok
                    termination = Termination.finished
                except (TypeError, ValueError) as exc:
                    content, status, error_code = f"invalid answers: {exc}", ObsStatus.error, "invalid_argument"
            else:
                try:
                    content = session.execute(name, arguments)
                    status = ObsStatus.ok
                except DomainError as exc:
                    content, status, error_code = exc.message, ObsStatus.error, exc.code

            latency_ms = int((time.monotonic() - call_started) * 1000)
            content, was_cut = truncate_content(content, budget.max_tool_result_chars)
            steps.append(
                TrajectoryStep(
                    call=tool_call,
                    observation=Observation(
                        step_index=step_index,
                        status=status,
                        content=content,
                        truncated=was_cut,
                        error_code=error_code,
                        latency_ms=latency_ms,
                    ),
                )
            )
            if termination == Termination.finished:
                break
    finally:
        session.close()

    if termination != Termination.finished:
        final_answer = None
    return Trajectory(
        task=task,
        steps=tuple(steps),
        final_answer=final_answer,
        termination=termination,
        policy_id=policy.policy_id,
        wall_time_ms=int((time.monotonic() - started) * 1000),
    )


# ---------------------------------------------------------------------------
# Batch execution

ProgressCallback = Callable[[dict[str, Any]], None]


def stderr_progress(event: dict[str, Any]) -> None:
    sys.stderr.write(json.dumps(event) + "\n")
    sys.stderr.flush()


@dataclass
class BatchResult:
    trajectories: list[Trajectory]
    peak_concurrency: int
    wall_time_ms: int


def run_batch(
    tasks: list[TaskInstance],
    policy: Policy,
    registry: ToolRegistry,
    budget: RuntimeBudget | None = None,
    parallelism: int | None = None,
    progress: ProgressCallback | None = None,
    system_prompt: str = SYSTEM_PROMPT,
) -> BatchResult:
    """Run every task exactly once, at most ``parallelism`` episodes in flight.

    The returned trajectory list matches the input task order.
    """
    budget = budget or RuntimeBudget()
    workers = parallelism if parallelism is not None else budget.max_concurrent_episodes
    if workers < 1:
        raise DomainError("malformed_input", "parallelism must be >= 1")
    emit = progress or (lambda event: None)

    in_flight = 0
    peak = 0
    lock = threading.Lock()
    started = time.monotonic()

    def run_one(index: int, task: TaskInstance) -> Trajectory:
        nonlocal in_flight, peak
        with lock:
            in_flight += 1
            peak = max(peak, in_flight)
        emit({"event": "episode_start", "index": index, "task_id": task.task_id})
        try:
            trajectory = run_episode(task, policy, registry, budget, system_prompt)
        finally:
            with lock:
                in_flight -= 1
        emit(
            {
                "event": "episode_end",
                "index": index,
                "task_id": task.task_id,
                "steps": len(trajectory.steps),
                "termination": trajectory.termination.value,
            }
        )
        return trajectory

    if not tasks:
        return BatchResult(trajectories=[], peak_concurrency=0, wall_time_ms=0)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        trajectories = list(pool.map(run_one, range(len(tasks)), tasks))

    wall_ms = int((time.monotonic() - started) * 1000)
    emit(
        {
            "event": "batch_end",
            "episodes": len(trajectories),
            "peak_concurrency": peak,
            "wall_time_ms": wall_ms,
        }
    )
    return BatchResult(trajectories=trajectories, peak_concurrency=peak, wall_time_ms=wall_ms)
