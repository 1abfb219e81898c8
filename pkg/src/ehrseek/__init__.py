"""Multi-source clinical evidence-seeking environment.

A tool space over temporally-cutoff EHR snapshots plus knowledge search and
image analysis, an agent interaction loop, a paired benchmark builder, an
F1/CI evaluator, and a trajectory-to-dataset exporter.
"""

from .core import (
    AnswerKind,
    AnswerSchema,
    DomainError,
    ImageRef,
    Observation,
    ObsStatus,
    TaskGroup,
    TaskInstance,
    Termination,
    ToolCall,
    ToolSchema,
    Trajectory,
    TrajectoryStep,
    normalize_answer,
    read_trajectories,
    validate_trajectory,
    write_trajectories,
)
from .registry import ToolRegistry
from .runtime import (
    LlmPolicy,
    PolicyTurn,
    RuntimeBudget,
    call,
    finish,
    run_batch,
    run_episode,
    scripted_policy,
)
from .store import EhrSnapshot, TableManifest, load_snapshot

__version__ = "0.1.0"

__all__ = [
    "AnswerKind",
    "AnswerSchema",
    "DomainError",
    "EhrSnapshot",
    "ImageRef",
    "LlmPolicy",
    "Observation",
    "ObsStatus",
    "PolicyTurn",
    "RuntimeBudget",
    "TableManifest",
    "TaskGroup",
    "TaskInstance",
    "Termination",
    "ToolCall",
    "ToolRegistry",
    "ToolSchema",
    "Trajectory",
    "TrajectoryStep",
    "call",
    "finish",
    "load_snapshot",
    "normalize_answer",
    "read_trajectories",
    "run_batch",
    "run_episode",
    "scripted_policy",
    "validate_trajectory",
    "write_trajectories",
]
