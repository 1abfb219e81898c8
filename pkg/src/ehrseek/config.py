"""Run configuration: config file, environment variables, and flag overrides.

Precedence everywhere: command-line flags > environment variables > config
file > built-in defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .core import DomainError
from .runtime import DEFAULT_MAX_OUTPUT_TOKENS, DEFAULT_TEMPERATURE, EndpointConfig, RuntimeBudget

ENV_ENDPOINT_URL = "EHRSEEK_ENDPOINT_URL"
ENV_MODEL = "EHRSEEK_MODEL"
ENV_API_KEY = "EHRSEEK_API_KEY"
ENV_SEARCH_URL = "EHRSEEK_SEARCH_URL"
ENV_IMAGING_TOKEN = "EHRSEEK_IMAGING_TOKEN"


@dataclass
class RunConfig:
    """Resolved settings for one command invocation."""

    store_dir: str | None = None
    knowledge: str | None = None  # "cache:<dir>" | "live"
    imaging: str = "stub"  # "stub" | service URL
    seed: int = 0
    budget: RuntimeBudget = field(default_factory=RuntimeBudget)
    endpoints: dict[str, dict[str, Any]] = field(default_factory=dict)


def load_config_file(path: str | Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    path = Path(path)
    if not path.is_file():
        raise DomainError("malformed_input", f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DomainError("malformed_input", f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise DomainError("malformed_input", "config file must hold a JSON object")
    return data


def budget_from(data: dict[str, Any], max_rounds_flag: int | None = None) -> RuntimeBudget:
    section = data.get("budget", {})
    try:
        return RuntimeBudget(
            max_rounds=(
                max_rounds_flag
                if max_rounds_flag is not None
                else section.get("max_rounds", RuntimeBudget().max_rounds)
            ),
            max_tool_result_chars=section.get(
                "max_tool_result_chars", RuntimeBudget().max_tool_result_chars
            ),
            max_output_tokens_hint=section.get(
                "max_output_tokens_hint", RuntimeBudget().max_output_tokens_hint
            ),
            episode_wall_clock_limit_s=section.get("episode_wall_clock_limit_s"),
            max_concurrent_episodes=section.get(
                "max_concurrent_episodes", RuntimeBudget().max_concurrent_episodes
            ),
        )
    except ValueError as exc:
        raise DomainError("malformed_input", str(exc)) from exc


def resolve_endpoint(profile: str, data: dict[str, Any]) -> EndpointConfig:
    """Build an endpoint config for ``llm:<profile>`` policies.

    Fields come from the config file's ``endpoints.<profile>`` section with
    environment overrides; the API key is read from the environment, either
    the name the profile declares via ``api_key_env`` or the default.
    """
    section = data.get("endpoints", {}).get(profile, {})
    base_url = os.environ.get(ENV_ENDPOINT_URL) or section.get("base_url")
    model = os.environ.get(ENV_MODEL) or section.get("model")
    if not base_url or not model:
        raise DomainError(
            "malformed_input",
            f"endpoint profile {profile!r} needs base_url and model"
            f" (config file or {ENV_ENDPOINT_URL}/{ENV_MODEL})",
        )
    key_env = section.get("api_key_env", ENV_API_KEY)
    return EndpointConfig(
        base_url=base_url,
        model=model,
        api_key=os.environ.get(key_env),
        temperature=section.get("temperature", DEFAULT_TEMPERATURE),
        max_output_tokens=section.get("max_output_tokens", DEFAULT_MAX_OUTPUT_TOKENS),
        request_timeout_s=section.get("request_timeout_s", 120.0),
    )
