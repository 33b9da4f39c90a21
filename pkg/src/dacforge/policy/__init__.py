from .base import (
    Backend,
    BackendError,
    Completion,
    GenerationRequest,
    ScriptExhausted,
    derive_seed,
    generate,
    split_tokens,
    truncate_tokens,
)
from .mock import MockBackend
from .remote import RemoteBackend
from .synthetic import NonMonotoneError, SyntheticBackend, SyntheticPolicyParams, synthetic_rollout

__all__ = [
    "Backend",
    "BackendError",
    "Completion",
    "GenerationRequest",
    "MockBackend",
    "NonMonotoneError",
    "RemoteBackend",
    "ScriptExhausted",
    "SyntheticBackend",
    "SyntheticPolicyParams",
    "derive_seed",
    "generate",
    "split_tokens",
    "synthetic_rollout",
    "truncate_tokens",
]
