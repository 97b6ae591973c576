"""Training-free visual reasoning: a Think-Critique-Act loop over vision-language backends."""

from .core import (
    AgentTurn,
    AuditTrail,
    ConversationMemory,
    DraftTriple,
    FixedClock,
    ImageRef,
    Role,
    VqaTask,
    append_turn,
    latest_response,
    read_audit,
    write_audit,
)
from .gateway import BackendConfig, BackendKind, Gateway, mock_from_script
from .orchestrator import Pipeline, PipelineConfig, PipelineResult, run_task

__version__ = "0.1.0"

__all__ = [
    "AgentTurn",
    "AuditTrail",
    "BackendConfig",
    "BackendKind",
    "ConversationMemory",
    "DraftTriple",
    "FixedClock",
    "Gateway",
    "ImageRef",
    "Pipeline",
    "PipelineConfig",
    "PipelineResult",
    "Role",
    "VqaTask",
    "append_turn",
    "latest_response",
    "mock_from_script",
    "read_audit",
    "run_task",
    "write_audit",
]
