"""One-pass streaming inference.

Each pushed segment is appended to the session context once; the next token
is decoded restricted to the three state ids, and on ``<Response>`` the model
keeps decoding content in the same pass until EOT (or a 64-token cap). Any
model exposing ``vocab`` and ``forward(history) -> logits`` can be streamed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .dialogue import STATES, StateToken, StreamingDialogue, load_system_prompt
from .errors import ContextOverflow, SessionClosed, SchemaViolation, VocabularyMismatch
from .vocab import EOT, Vocabulary

logger = logging.getLogger(__name__)

MAX_CONTENT_TOKENS = 64


@dataclass(frozen=True)
class StateDecision:
    turn: int
    state: StateToken
    content: str | None = None
    forward_calls: int = 0
    decoded_tokens: int = 0  # tokens generated after the state token, EOT included
    protocol_violation: bool = False

    def as_record(self) -> dict[str, Any]:
        rec: dict[str, Any] = {
            "turn": self.turn,
            "state": self.state.value,
            "latency_forward_calls": self.forward_calls,
        }
        if self.content is not None:
            rec["content"] = self.content
        if self.protocol_violation:
            rec["protocol_violation"] = "empty Response content"
        return rec


@dataclass
class StreamSession:
    model: Any
    system_prompt: str
    max_context_tokens: int | None = None
    overflow: str = "error"
    context: list[int] = field(default_factory=list)
    pending_instructions: list[tuple[str, int]] = field(default_factory=list)
    emitted: list[StateDecision] = field(default_factory=list)
    clock: int = 0
    forward_calls: int = 0
    closed: bool = False
    # context index where each turn's segment begins (used by drop_oldest)
    _turn_starts: list[int] = field(default_factory=list, repr=False)
    _prompt_len: int = field(default=0, repr=False)

    @property
    def vocab(self) -> Vocabulary:
        return self.model.vocab

    def close(self) -> None:
        self.closed = True

    def _forward(self) -> np.ndarray:
        self.forward_calls += 1
        return np.asarray(self.model.forward(self.context), dtype=np.float64)

    def _make_room(self, incoming: int) -> None:
        if self.max_context_tokens is None:
            return
        while len(self.context) + incoming > self.max_context_tokens:
            if self.overflow != "drop_oldest" or not self._turn_starts:
                raise ContextOverflow(
                    f"context of {len(self.context)} tokens cannot take {incoming} more "
                    f"(limit {self.max_context_tokens})"
                )
            # experimental: evict the oldest turn, keep the system prompt
            start = self._turn_starts.pop(0)
            end = self._turn_starts[0] if self._turn_starts else len(self.context)
            del self.context[start:end]
            self._turn_starts = [s - (end - start) for s in self._turn_starts]

    def push_segment(self, frames: Sequence[int], user_text: str | None = None) -> StateDecision:
        if self.closed:
            raise SessionClosed("session is closed")
        if len(frames) == 0:
            raise ValueError("a segment needs at least one observation")
        vocab = self.vocab
        segment = vocab.encode_segment(self.clock, frames, user_text)
        # room for the segment plus the state token and EOT
        self._make_room(len(segment) + 2)
        if user_text:
            self.pending_instructions.append((user_text, self.clock))
        self._turn_starts.append(len(self.context))
        self.context.extend(segment)

        calls_before = self.forward_calls
        state_ids = list(vocab.state_ids)
        logits = self._forward()
        state = STATES[int(np.argmax(logits[state_ids]))]
        self.context.append(vocab.state_id(state))

        content_tokens: list[int] = []
        decoded = 0
        if state is StateToken.RESPONSE:
            while len(content_tokens) < MAX_CONTENT_TOKENS:
                self._make_room(1)
                token = int(np.argmax(self._forward()))
                decoded += 1
                if token == EOT:
                    break
                content_tokens.append(token)
                self.context.append(token)
        self._make_room(1)
        self.context.append(EOT)

        content = vocab.decode_text(content_tokens) if state is StateToken.RESPONSE else None
        violation = state is StateToken.RESPONSE and not content_tokens
        if violation:
            logger.warning("turn %d: Response emitted with empty content", self.clock)
        decision = StateDecision(
            turn=self.clock,
            state=state,
            content=content if content_tokens else None,
            forward_calls=self.forward_calls - calls_before,
            decoded_tokens=decoded,
            protocol_violation=violation,
        )
        self.emitted.append(decision)
        self.clock += 1
        return decision


def open_session(
    model,
    system_prompt: str | None = None,
    *,
    max_context_tokens: int | None = None,
    overflow: str = "error",
) -> StreamSession:
    vocab = getattr(model, "vocab", None)
    if not isinstance(vocab, Vocabulary):
        raise VocabularyMismatch("model exposes no streaming vocabulary")
    if overflow not in ("error", "drop_oldest"):
        raise ValueError(f"unknown overflow policy {overflow!r}")
    model_vocab_size = getattr(getattr(model, "config", None), "vocab_size", vocab.size)
    if model_vocab_size != vocab.size or max(vocab.state_ids) >= model_vocab_size:
        raise VocabularyMismatch(
            f"model scores {model_vocab_size} ids but the state tokens need {vocab.size}"
        )
    prompt = load_system_prompt() if system_prompt is None else system_prompt
    session = StreamSession(model=model, system_prompt=prompt, max_context_tokens=max_context_tokens, overflow=overflow)
    session.context.extend(vocab.encode_prompt(prompt))
    session._prompt_len = len(session.context)
    if max_context_tokens is not None and session._prompt_len > max_context_tokens:
        raise ContextOverflow("system prompt alone exceeds the context limit")
    return session


def push_segment(session: StreamSession, frames: Sequence[int], user_text: str | None = None) -> StateDecision:
    return session.push_segment(frames, user_text)


# --------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplayResult:
    decisions: list[StateDecision]
    gold: list[StateToken]
    matches: list[bool]
    # for each gold Response turn: signed offset (pred - gold) of the
    # prediction it was paired with, or None when unanswered within tolerance
    timing_offsets: list[tuple[int, int | None]]
    forward_calls: int

    @property
    def mismatches(self) -> int:
        return self.matches.count(False)

    @property
    def timing_f1(self) -> float:
        matched = sum(1 for _, off in self.timing_offsets if off is not None)
        n_pred = sum(1 for d in self.decisions if d.state is StateToken.RESPONSE)
        n_gold = len(self.timing_offsets)
        if matched == 0:
            return 0.0
        p, r = matched / n_pred, matched / n_gold
        return 2 * p * r / (p + r)


def _pair_gold_first(gold_turns: list[int], pred_turns: list[int], tolerance: int) -> list[tuple[int, int | None]]:
    claimed: set[int] = set()
    offsets: list[tuple[int, int | None]] = []
    for g in gold_turns:
        hit = next((p for p in pred_turns if p not in claimed and abs(p - g) <= tolerance), None)
        if hit is None:
            offsets.append((g, None))
        else:
            claimed.add(hit)
            offsets.append((g, hit - g))
    return offsets


def replay(model, dialogue: StreamingDialogue, *, tolerance: int = 1, **session_kwargs) -> ReplayResult:
    """Stream a dialogue's segments through a fresh session and diff against gold."""
    session = open_session(model, dialogue.system_prompt, **session_kwargs)
    decisions = [session.push_segment(t.frames, t.user_text) for t in dialogue.turns]
    session.close()
    gold = dialogue.states
    pred_turns = [d.turn for d in decisions if d.state is StateToken.RESPONSE]
    gold_turns = [k for k, s in enumerate(gold) if s is StateToken.RESPONSE]
    return ReplayResult(
        decisions=decisions,
        gold=gold,
        matches=[d.state is g for d, g in zip(decisions, gold)],
        timing_offsets=_pair_gold_first(gold_turns, pred_turns, tolerance),
        forward_calls=session.forward_calls,
    )


# --------------------------------------------------------------------------
# scripted oracle


class ScriptedModel:
    """Replays a fixed per-turn script through the ``forward`` interface.

    The turn index is read from the context (count of marker tokens), so the
    model's output at turn ``k`` depends only on what has been streamed so far.
    """

    def __init__(self, vocab: Vocabulary, script: Sequence[tuple[StateToken, str | None]]):
        self.vocab = vocab
        self.script = [(StateToken(s), text) for s, text in script]
        self._replies = [vocab.encode_reply(s, text) for s, text in self.script]

    @classmethod
    def from_dialogue(cls, dialogue: StreamingDialogue, vocab: Vocabulary | None = None) -> "ScriptedModel":
        if vocab is None:
            vocab = vocabulary_for_dialogues([dialogue])
        return cls(vocab, [(t.state, t.response_text) for t in dialogue.turns])

    def forward(self, history: Sequence[int]) -> np.ndarray:
        vocab = self.vocab
        turn = -1
        last_marker = -1
        for i, tok in enumerate(history):
            if vocab.is_marker(tok):
                turn += 1
                last_marker = i
        logits = np.zeros(vocab.size)
        if turn < 0 or turn >= len(self._replies):
            logits[EOT] = 1.0
            return logits
        reply = self._replies[turn]
        # how far into the assistant reply we already are
        produced = 0
        for tok in history[last_marker + 1 :]:
            if vocab.state_of(tok) is not None or produced:
                produced += 1
        logits[reply[min(produced, len(reply) - 1)]] = 1.0
        return logits

    def checkpoint_record(self) -> dict:
        from .toy_model import CHECKPOINT_FORMAT, CHECKPOINT_VERSION

        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": "scripted",
            "vocab": self.vocab.to_dict(),
            "script": [{"state": s.value, "content": text} for s, text in self.script],
        }

    @classmethod
    def from_record(cls, record: dict, vocab: Vocabulary) -> "ScriptedModel":
        try:
            script = [(StateToken(item["state"]), item.get("content")) for item in record["script"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaViolation("script", f"malformed script: {exc}") from None
        return cls(vocab, script)


def vocabulary_for_dialogues(dialogues: Sequence[StreamingDialogue], num_markers: int = 64) -> Vocabulary:
    """Smallest vocabulary covering the words and observations of ``dialogues``."""
    words: dict[str, None] = {}
    max_obs = 0
    for d in dialogues:
        for t in d.turns:
            for text in (t.user_text, t.response_text):
                for w in (text or "").split():
                    words.setdefault(w, None)
            max_obs = max(max_obs, max(t.frames))
    return Vocabulary(num_markers=num_markers, words=tuple(words), num_frames=max_obs + 1)
