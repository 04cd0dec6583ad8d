"""Streaming dialogue toolkit with Silence/Standby/Response decision states.

Covers dialogue construction, a class-balanced focal loss over state tokens,
a synthetic imbalanced corpus, a small trainable model, one-pass streaming
inference, benchmark metrics and an LLM-judge client.
"""

from __future__ import annotations

__version__ = "0.1.0"

from .dialogue import (
    STATES,
    DialogueTurn,
    StateToken,
    StreamingDialogue,
    TaskKind,
    TimeInterval,
    build_dialogue,
    deserialize_dialogue,
    format_time_marker,
    label_states,
    parse_time_marker,
    serialize_dialogue,
)
from .loss import LossBatch, LossConfig, LossOutput, alpha_weights, batch_loss, batch_loss_grad, focal_weight

__all__ = [
    "STATES",
    "DialogueTurn",
    "LossBatch",
    "LossConfig",
    "LossOutput",
    "StateToken",
    "StreamingDialogue",
    "TaskKind",
    "TimeInterval",
    "alpha_weights",
    "batch_loss",
    "batch_loss_grad",
    "build_dialogue",
    "deserialize_dialogue",
    "focal_weight",
    "format_time_marker",
    "label_states",
    "parse_time_marker",
    "serialize_dialogue",
]
