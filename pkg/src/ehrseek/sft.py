"""Render finished trajectories into native tool-call training samples and
filter them by length.

Message layout per sample: one system message (protocol + tool schemas),
one user message (the task), then per step an assistant message whose text
ends with a ``<tool_call>`` block and a tool message wrapping the
observation in ``<tool_response>``. Payloads are JSON with every ``<``
escaped as ``\\u003c``, so a delimiter can never appear inside a payload
and parsing is exact.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterable

from .core import (
    DomainError,
    Observation,
    ObsStatus,
    Termination,
    ToolCall,
    Trajectory,
)
from .registry import ToolRegistry
from .runtime import SYSTEM_PROMPT, task_prompt

TOOL_CALL_OPEN = "<tool_call>"
TOOL_CALL_CLOSE = "</tool_call>"
TOOL_RESPONSE_OPEN = "<tool_response>"
TOOL_RESPONSE_CLOSE = "</tool_response>"

DEFAULT_MAX_TOKENS = 52_000

_TOKEN_PATTERN = re.compile(r"\w+|[^\w\s]")


def approx_token_count(text: str) -> int:
    """Whitespace-plus-punctuation token count; an approximate, clearly
    labeled stand-in for a model tokenizer."""
    return len(_TOKEN_PATTERN.findall(text))


Tokenizer = Callable[[str], int]


@dataclass(frozen=True)
class SftSample:
    messages: tuple[tuple[str, str], ...]  # (role, content)
    token_count: int
    task_id: str
    kept: bool = True

    def __post_init__(self) -> None:
        roles = [role for role, _ in self.messages]
        if len(roles) < 2 or roles[0] != "system" or roles[1] != "user":
            raise ValueError("sample must start with a system then a user message")
        for i, role in enumerate(roles):
            if role == "assistant" and TOOL_CALL_OPEN in self.messages[i][1]:
                if i + 1 >= len(roles) or roles[i + 1] != "tool":
                    raise ValueError(f"assistant tool invocation at message {i} lacks a tool reply")
        if self.token_count <= 0:
            raise ValueError("token_count must be positive")


def _escape_payload(payload: dict[str, Any]) -> str:
    # < is plain '<' to json.loads; after this no delimiter can occur
    # inside the payload text.
    return json.dumps(payload, ensure_ascii=False, sort_keys=True).replace("<", "\\u003c")


def _call_payload(call: ToolCall) -> dict[str, Any]:
    return {"name": call.name, "arguments": call.arguments}


def _observation_payload(obs: Observation) -> dict[str, Any]:
    return {
        "status": obs.status.value,
        "content": obs.content,
        "truncated": obs.truncated,
        "error_code": obs.error_code,
    }


def render_system_message(trajectory: Trajectory) -> str:
    registry = ToolRegistry()
    schemas = registry.schemas_for(trajectory.task)
    lines = [SYSTEM_PROMPT, "", "Available tools:", "<tools>"]
    for schema in schemas:
        lines.append(
            _escape_payload(
                {
                    "name": schema.name,
                    "description": schema.description,
                    "parameters": schema.to_json_schema(),
                }
            )
        )
    lines.append("</tools>")
    return "\n".join(lines)


def render(trajectory: Trajectory, tokenizer: Tokenizer = approx_token_count) -> SftSample:
    """Render one finished trajectory into a training sample.

    Raises ``unfinished_trajectory`` for anything that did not terminate via
    a successful finish call.
    """
    if trajectory.termination != Termination.finished:
        raise DomainError(
            "unfinished_trajectory",
            f"trajectory terminated as {trajectory.termination.value}; only finished ones render",
        )
    messages: list[tuple[str, str]] = [
        ("system", render_system_message(trajectory)),
        ("user", task_prompt(trajectory.task)),
    ]
    for step in trajectory.steps:
        block = f"{TOOL_CALL_OPEN}\n{_escape_payload(_call_payload(step.call))}\n{TOOL_CALL_CLOSE}"
        if step.call.reasoning:
            assistant = f"{step.call.reasoning}\n{block}"
        else:
            assistant = block
        messages.append(("assistant", assistant))
        response = (
            f"{TOOL_RESPONSE_OPEN}\n"
            f"{_escape_payload(_observation_payload(step.observation))}\n"
            f"{TOOL_RESPONSE_CLOSE}"
        )
        messages.append(("tool", response))
    token_count = sum(tokenizer(content) for _, content in messages)
    return SftSample(
        messages=tuple(messages),
        token_count=token_count,
        task_id=trajectory.task.task_id,
    )


@dataclass(frozen=True)
class ParsedStep:
    name: str
    arguments: dict[str, Any]
    reasoning: str | None
    status: str
    content: str
    truncated: bool
    error_code: str | None


def parse_sample(messages: Iterable[tuple[str, str]]) -> list[ParsedStep]:
    """Invert :func:`render`: recover every call and observation exactly."""
    messages = list(messages)
    steps: list[ParsedStep] = []
    pending: tuple[str, dict[str, Any], str | None] | None = None
    for role, content in messages:
        if role == "assistant":
            if not content.endswith(TOOL_CALL_CLOSE):
                raise ValueError("assistant message does not end with a tool_call block")
            opener = content.rfind(TOOL_CALL_OPEN)
            if opener < 0:
                raise ValueError("assistant message has no tool_call opener")
            payload = json.loads(
                content[opener + len(TOOL_CALL_OPEN) + 1 : -len(TOOL_CALL_CLOSE) - 1]
            )
            reasoning = content[:opener].rstrip("\n") or None
            pending = (payload["name"], payload["arguments"], reasoning)
        elif role == "tool":
            if pending is None:
                raise ValueError("tool message without a preceding assistant invocation")
            inner = content
            if not (inner.startswith(TOOL_RESPONSE_OPEN) and inner.endswith(TOOL_RESPONSE_CLOSE)):
                raise ValueError("tool message is not a tool_response block")
            payload = json.loads(
                inner[len(TOOL_RESPONSE_OPEN) + 1 : -len(TOOL_RESPONSE_CLOSE) - 1]
            )
            name, arguments, reasoning = pending
            steps.append(
                ParsedStep(
                    name=name,
                    arguments=arguments,
                    reasoning=reasoning,
                    status=payload["status"],
                    content=payload["content"],
                    truncated=payload["truncated"],
                    error_code=payload.get("error_code"),
                )
            )
            pending = None
    return steps


@dataclass(frozen=True)
class ExportStats:
    kept: int
    dropped: int

    @property
    def drop_fraction(self) -> float:
        total = self.kept + self.dropped
        return self.dropped / total if total else 0.0


def export_dataset(
    trajectories: Iterable[Trajectory],
    out_path: str | Path,
    max_tokens: int = DEFAULT_MAX_TOKENS,
    tokenizer: Tokenizer = approx_token_count,
    gold_by_task: dict[str, tuple[str, ...]] | None = None,
) -> ExportStats:
    """Write kept samples as line-delimited JSON; drop over-length ones.

    The limit is inclusive: a sample of exactly ``max_tokens`` tokens is
    kept. When ``gold_by_task`` is given, only trajectories whose final
    answer matches the gold label set are exported (correct-only mode).
    """
    kept = 0
    dropped = 0
    try:
        with open(out_path, "w", encoding="utf-8") as fh:
            for trajectory in trajectories:
                if trajectory.termination != Termination.finished:
                    continue
                if gold_by_task is not None:
                    gold = gold_by_task.get(trajectory.task.task_id)
                    if gold is None or not _answers_match(trajectory, gold):
                        continue
                sample = render(trajectory, tokenizer=tokenizer)
                if sample.token_count > max_tokens:
                    dropped += 1
                    continue
                kept += 1
                fh.write(
                    json.dumps(
                        {
                            "messages": [
                                {"role": role, "content": content}
                                for role, content in sample.messages
                            ],
                            "token_count": sample.token_count,
                            "task_id": sample.task_id,
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )
    except OSError as exc:
        raise DomainError("io_failure", f"cannot write dataset: {exc}") from exc
    return ExportStats(kept=kept, dropped=dropped)


def _answers_match(trajectory: Trajectory, gold: tuple[str, ...]) -> bool:
    from .core import normalize_answer

    predicted = {normalize_answer(a) for a in (trajectory.final_answer or ())} - {""}
    expected = {normalize_answer(g) for g in gold} - {""}
    return predicted == expected
