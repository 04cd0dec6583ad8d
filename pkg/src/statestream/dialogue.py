"""Streaming multi-turn dialogue format.

A video stream is cut into fixed-width turns. Each turn carries a time marker
``<Xs-Ys>``, the observation tokens seen during that window, an optional user
instruction, and the assistant's reply: one state token, plus content when the
state is ``<Response>``.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

from .errors import (
    EventOutOfRange,
    InvalidDialogue,
    InvalidInterval,
    MalformedMarker,
    NonRepresentable,
    OverlappingEvents,
    QuestionAfterEvent,
    SchemaViolation,
)

__all__ = [
    "SCHEMA_VERSION",
    "StateToken",
    "TaskKind",
    "TimeInterval",
    "DialogueTurn",
    "StreamingDialogue",
    "parse_time_marker",
    "format_time_marker",
    "label_states",
    "merge_state_tracks",
    "build_dialogue",
    "serialize_dialogue",
    "deserialize_dialogue",
    "render_dialogue",
    "load_system_prompt",
    "load_task_templates",
]

SCHEMA_VERSION = 1

# Float slack used when mapping event times onto the turn grid.
_GRID_EPS = 1e-9


class StateToken(str, Enum):
    SILENCE = "Silence"
    STANDBY = "Standby"
    RESPONSE = "Response"

    @property
    def surface(self) -> str:
        return f"<{self.value}>"

    @property
    def rank(self) -> int:
        return _STATE_RANK[self]

    @classmethod
    def parse(cls, text: str) -> "StateToken":
        name = text[1:-1] if text.startswith("<") and text.endswith(">") else text
        return cls(name)


_STATE_RANK = {StateToken.SILENCE: 0, StateToken.STANDBY: 1, StateToken.RESPONSE: 2}
STATES: tuple[StateToken, ...] = (StateToken.SILENCE, StateToken.STANDBY, StateToken.RESPONSE)


class TaskKind(str, Enum):
    NARRATION = "narration"
    EVENT_CAPTION = "event_caption"
    ACTION_CAPTION = "action_caption"
    EVENT_GROUNDING = "event_grounding"
    TSQA = "tsqa"
    OFFLINE_QA = "offline_qa"


# Tasks whose instruction must precede the events it refers to.
_QUESTION_FIRST = {TaskKind.EVENT_GROUNDING, TaskKind.TSQA}


@dataclass(frozen=True, order=True)
class TimeInterval:
    start_s: float
    end_s: float

    def __post_init__(self) -> None:
        start, end = float(self.start_s), float(self.end_s)
        if not (math.isfinite(start) and math.isfinite(end)):
            raise InvalidInterval(f"non-finite interval ({self.start_s}, {self.end_s})")
        if start < 0:
            raise InvalidInterval(f"negative start {start}")
        if end <= start:
            raise InvalidInterval(f"end {end} must exceed start {start}")
        object.__setattr__(self, "start_s", start)
        object.__setattr__(self, "end_s", end)

    @property
    def duration(self) -> float:
        return self.end_s - self.start_s

    def shifted(self, offset: float) -> "TimeInterval":
        return TimeInterval(self.start_s + offset, self.end_s + offset)


@dataclass(frozen=True)
class DialogueTurn:
    interval: TimeInterval
    frames: tuple[int, ...]
    state: StateToken
    user_text: str | None = None
    response_text: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", tuple(int(f) for f in self.frames))
        object.__setattr__(self, "state", StateToken(self.state))
        if not self.frames:
            raise InvalidDialogue(f"turn {self.marker} has no frames")
        if any(f < 0 for f in self.frames):
            raise InvalidDialogue(f"turn {self.marker} has negative observation ids")
        has_text = bool(self.response_text)
        if has_text != (self.state is StateToken.RESPONSE):
            raise InvalidDialogue(
                f"turn {self.marker}: response text must be present iff state is Response"
            )
        if self.user_text == "":
            object.__setattr__(self, "user_text", None)

    @property
    def marker(self) -> str:
        return format_time_marker(self.interval)


@dataclass(frozen=True)
class StreamingDialogue:
    system_prompt: str
    turns: tuple[DialogueTurn, ...]
    task_kind: TaskKind

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if not self.turns:
            raise InvalidDialogue("a dialogue needs at least one turn")
        if self.turns[0].interval.start_s != 0.0:
            raise InvalidDialogue("first turn must start at 0s")
        for i in range(len(self.turns) - 1):
            if self.turns[i + 1].interval.start_s != self.turns[i].interval.end_s:
                raise InvalidDialogue(f"turns {i} and {i + 1} are not contiguous")

    @property
    def states(self) -> list[StateToken]:
        return [t.state for t in self.turns]

    def __len__(self) -> int:
        return len(self.turns)


# --------------------------------------------------------------------------
# time markers

_MARKER_RE = re.compile(r"<(\d+(?:\.\d+)?)s-(\d+(?:\.\d+)?)s>")


def parse_time_marker(text: str) -> TimeInterval:
    m = _MARKER_RE.fullmatch(text)
    if m is None:
        raise MalformedMarker(f"not a time marker: {text!r}")
    start, end = float(m.group(1)), float(m.group(2))
    if end <= start:
        raise MalformedMarker(f"marker end must exceed start: {text!r}")
    return TimeInterval(start, end)


def _format_seconds(x: float) -> str:
    if x == int(x):
        return str(int(x))
    # shortest round-tripping positional form, never scientific notation
    return format(Decimal(repr(x)), "f")


def format_time_marker(interval: TimeInterval | tuple[float, float]) -> str:
    """Render ``<Xs-Ys>``; ``parse_time_marker`` inverts it exactly."""
    if isinstance(interval, TimeInterval):
        start, end = interval.start_s, interval.end_s
    else:
        start, end = (float(v) for v in interval)
    if not (math.isfinite(start) and math.isfinite(end)) or start < 0 or end <= start:
        raise NonRepresentable(f"cannot render interval ({start}, {end}) as a marker")
    return f"<{_format_seconds(start)}s-{_format_seconds(end)}s>"


# --------------------------------------------------------------------------
# state labelling


def _grid_floor(t: float, g: float) -> int:
    return int(math.floor(t / g + _GRID_EPS))


def _grid_ceil(t: float, g: float) -> int:
    return int(math.ceil(t / g - _GRID_EPS))


def _event_track(
    event: TimeInterval, num_turns: int, g: float, task: TaskKind
) -> dict[int, StateToken]:
    """States contributed by one event, keyed by turn index."""
    first = min(_grid_floor(event.start_s, g), num_turns - 1)
    last_overlap = min(_grid_ceil(event.end_s, g) - 1, num_turns - 1)
    if task is TaskKind.NARRATION:
        return {k: StateToken.RESPONSE for k in range(first, last_overlap + 1)}
    # The event is answered in the turn whose [start, end) holds its end time,
    # i.e. the first turn in which completion is observable. Events ending at
    # the stream end snap to the final turn.
    respond_at = min(_grid_floor(event.end_s, g), num_turns - 1)
    track = {k: StateToken.STANDBY for k in range(first, respond_at)}
    track[respond_at] = StateToken.RESPONSE
    return track


def merge_state_tracks(tracks: Iterable[Sequence[StateToken]]) -> list[StateToken]:
    """Per-turn precedence merge: Response > Standby > Silence."""
    tracks = [list(t) for t in tracks]
    if not tracks:
        return []
    n = len(tracks[0])
    if any(len(t) != n for t in tracks):
        raise ValueError("state tracks differ in length")
    return [max((t[k] for t in tracks), key=lambda s: s.rank) for k in range(n)]


def _check_events(events: Sequence[TimeInterval], horizon: float) -> None:
    for i, ev in enumerate(events):
        if ev.end_s > horizon + _GRID_EPS:
            raise EventOutOfRange(f"event {i} ends at {ev.end_s}s beyond {horizon}s")
        if i and ev.start_s < events[i - 1].end_s:
            raise OverlappingEvents(
                f"event {i} starting at {ev.start_s}s overlaps or precedes event {i - 1}"
            )


def label_states(
    events: Sequence[TimeInterval],
    num_turns: int,
    granularity_s: float = 1.0,
    task: TaskKind | str = TaskKind.EVENT_CAPTION,
) -> list[StateToken]:
    """Per-turn state labels derived from ground-truth event spans.

    A turn overlapping an unfinished event is ``Standby``; the turn holding the
    event's end time is ``Response``; everything else is ``Silence``. Narration
    skips the waiting phase and answers every turn the event overlaps.
    """
    task = TaskKind(task)
    if num_turns < 1:
        raise ValueError("num_turns must be >= 1")
    events = [e if isinstance(e, TimeInterval) else TimeInterval(*e) for e in events]
    _check_events(events, num_turns * granularity_s)
    labels = [StateToken.SILENCE] * num_turns
    for ev in events:
        for k, state in _event_track(ev, num_turns, granularity_s, task).items():
            if state.rank > labels[k].rank:
                labels[k] = state
    return labels


def _response_texts(
    events: Sequence[tuple[TimeInterval, str]], num_turns: int, g: float, task: TaskKind
) -> dict[int, list[str]]:
    texts: dict[int, list[str]] = {}
    for ev, text in events:
        for k, state in _event_track(ev, num_turns, g, task).items():
            if state is StateToken.RESPONSE:
                texts.setdefault(k, []).append(text)
    return texts


# --------------------------------------------------------------------------
# construction


def build_dialogue(
    duration_s: float,
    granularity_s: float,
    events: Sequence[tuple[TimeInterval, str]],
    task: TaskKind | str,
    question: tuple[str, int] | Sequence[tuple[str, int]] | None = None,
    *,
    frames: Sequence[Sequence[int]] | None = None,
    system_prompt: str | None = None,
) -> StreamingDialogue:
    """Assemble a supervised streaming dialogue from annotated event spans.

    ``frames`` gives the observation ids of each turn; by default every turn
    carries a single placeholder observation ``0`` (one ``<video>`` slot).
    ``question`` is one ``(text, turn_index)`` pair or a list of them.
    """
    task = TaskKind(task)
    g = float(granularity_s)
    if not (g > 0 and math.isfinite(g)):
        raise ValueError(f"granularity must be positive, got {granularity_s}")
    if not (duration_s > 0 and math.isfinite(duration_s)):
        raise ValueError(f"duration must be positive, got {duration_s}")
    num_turns = max(1, _grid_ceil(duration_s, g))

    spans = [(e if isinstance(e, TimeInterval) else TimeInterval(*e), str(t)) for e, t in events]
    for i, (ev, text) in enumerate(spans):
        if ev.end_s > duration_s + _GRID_EPS:
            raise EventOutOfRange(f"event {i} ends at {ev.end_s}s beyond {duration_s}s")
        if not text.strip():
            raise InvalidDialogue(f"event {i} has empty text")
    _check_events([ev for ev, _ in spans], duration_s)

    if question is None:
        questions: list[tuple[str, int]] = []
    elif isinstance(question, tuple) and len(question) == 2 and isinstance(question[0], str):
        questions = [question]
    else:
        questions = [tuple(q) for q in question]  # type: ignore[misc]
    user_texts: dict[int, list[str]] = {}
    for text, turn in questions:
        if not 0 <= turn < num_turns:
            raise ValueError(f"question turn {turn} outside 0..{num_turns - 1}")
        user_texts.setdefault(int(turn), []).append(text)
    if questions and task in _QUESTION_FIRST:
        asked_at = min(t for _, t in questions) * g
        for i, (ev, _) in enumerate(spans):
            if ev.start_s < asked_at - _GRID_EPS:
                raise QuestionAfterEvent(
                    f"event {i} starts at {ev.start_s}s, before the question at {asked_at}s"
                )

    if frames is None:
        frames = [(0,)] * num_turns
    elif len(frames) != num_turns:
        raise ValueError(f"expected frames for {num_turns} turns, got {len(frames)}")

    states = label_states([ev for ev, _ in spans], num_turns, g, task)
    responses = _response_texts(spans, num_turns, g, task)
    turns = []
    for k in range(num_turns):
        state = states[k]
        turns.append(
            DialogueTurn(
                interval=TimeInterval(k * g, (k + 1) * g),
                frames=tuple(frames[k]),
                state=state,
                user_text="\n".join(user_texts[k]) if k in user_texts else None,
                response_text=" ".join(responses[k]) if state is StateToken.RESPONSE else None,
            )
        )
    prompt = load_system_prompt() if system_prompt is None else system_prompt
    return StreamingDialogue(system_prompt=prompt, turns=tuple(turns), task_kind=task)


# --------------------------------------------------------------------------
# serialization


def _turn_record(turn: DialogueTurn) -> dict[str, Any]:
    return {
        "start_s": turn.interval.start_s,
        "end_s": turn.interval.end_s,
        "frames": list(turn.frames),
        "user_text": turn.user_text,
        "state": turn.state.value,
        "response_text": turn.response_text,
    }


def serialize_dialogue(dialogue: StreamingDialogue) -> str:
    """One canonical JSON line (sorted keys, no trailing newline)."""
    record = {
        "schema_version": SCHEMA_VERSION,
        "system_prompt": dialogue.system_prompt,
        "task_kind": dialogue.task_kind.value,
        "turns": [_turn_record(t) for t in dialogue.turns],
    }
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def _require(record: Mapping[str, Any], key: str, kind: type | tuple, path: str) -> Any:
    if key not in record:
        raise SchemaViolation(f"{path}{key}", "missing field")
    value = record[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise SchemaViolation(f"{path}{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


_TURN_KEYS = {"start_s", "end_s", "frames", "user_text", "state", "response_text"}
_TOP_KEYS = {"schema_version", "system_prompt", "task_kind", "turns"}


def deserialize_dialogue(record: str | Mapping[str, Any]) -> StreamingDialogue:
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise SchemaViolation("$", f"invalid JSON: {exc.msg}") from None
    if not isinstance(record, Mapping):
        raise SchemaViolation("$", "record must be an object")
    extra = set(record) - _TOP_KEYS
    if extra:
        raise SchemaViolation(sorted(extra)[0], "unknown field")
    version = _require(record, "schema_version", int, "")
    if version != SCHEMA_VERSION:
        raise SchemaViolation("schema_version", f"unsupported version {version}")
    prompt = _require(record, "system_prompt", str, "")
    kind = _require(record, "task_kind", str, "")
    try:
        task = TaskKind(kind)
    except ValueError:
        raise SchemaViolation("task_kind", f"unknown task kind {kind!r}") from None
    raw_turns = _require(record, "turns", list, "")
    if not raw_turns:
        raise SchemaViolation("turns", "must contain at least one turn")

    turns = []
    for i, raw in enumerate(raw_turns):
        path = f"turns[{i}]."
        if not isinstance(raw, Mapping):
            raise SchemaViolation(f"turns[{i}]", "turn must be an object")
        extra = set(raw) - _TURN_KEYS
        if extra:
            raise SchemaViolation(path + sorted(extra)[0], "unknown field")
        start = _require(raw, "start_s", float, path)
        end = _require(raw, "end_s", float, path)
        frames = _require(raw, "frames", list, path)
        if not all(isinstance(f, int) and not isinstance(f, bool) for f in frames):
            raise SchemaViolation(path + "frames", "observation ids must be integers")
        state = _require(raw, "state", str, path)
        user_text = raw.get("user_text")
        response = raw.get("response_text")
        for key, value in (("user_text", user_text), ("response_text", response)):
            if value is not None and not isinstance(value, str):
                raise SchemaViolation(path + key, "expected string or null")
        try:
            turns.append(
                DialogueTurn(
                    interval=TimeInterval(start, end),
                    frames=tuple(frames),
                    state=StateToken(state),
                    user_text=user_text,
                    response_text=response,
                )
            )
        except ValueError as exc:
            raise SchemaViolation(f"turns[{i}]", str(exc)) from None
    try:
        return StreamingDialogue(system_prompt=prompt, turns=tuple(turns), task_kind=task)
    except InvalidDialogue as exc:
        raise SchemaViolation("turns", str(exc)) from None


def render_dialogue(dialogue: StreamingDialogue) -> str:
    """Human-readable USER/ASSISTANT transcript, one block per turn."""
    lines = ["SYSTEM PROMPT"]
    for turn in dialogue.turns:
        lines.append(f"USER       {turn.marker} <video>")
        if turn.user_text:
            lines.append(f"           {turn.user_text}")
        reply = turn.state.surface
        if turn.response_text:
            reply += f" {turn.response_text}"
        lines.append(f"ASSISTANT  {reply}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# bundled assets


def load_system_prompt() -> str:
    return resources.files(__package__).joinpath("assets/system_prompt.txt").read_text("utf-8")


def load_task_templates() -> dict[str, list[str]]:
    raw = resources.files(__package__).joinpath("assets/task_templates.json").read_text("utf-8")
    return json.loads(raw)
