"""Synthetic observation streams with planted events.

Each episode alternates silent gaps with events. While an event is running,
every turn carries one class-signal observation among noise observations; the
turn right after the event carries no signal and is the ``Response`` turn,
whose content names the event class. Gap and event lengths are drawn so that
state counts converge to a requested Silence:Standby:Response ratio.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dialogue import (
    STATES,
    StateToken,
    StreamingDialogue,
    TaskKind,
    TimeInterval,
    build_dialogue,
    deserialize_dialogue,
    load_system_prompt,
    serialize_dialogue,
)
from .errors import ConfigError, InfeasibleRatio, SchemaViolation
from .vocab import Vocabulary

CLASS_NAMES = ("red", "green", "blue", "yellow", "white", "black", "orange", "purple")
CAPTION_SUFFIX = "finished"


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 256
    num_turns: int = 60
    tokens_per_turn: int = 4
    event_rate: float | None = None
    event_len_range: tuple[int, int] = (1, 2)
    target_state_ratio: tuple[float, float, float] = (12.0, 3.0, 2.0)
    num_classes: int = 4
    num_markers: int = 64
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "event_len_range", tuple(int(v) for v in self.event_len_range))
        object.__setattr__(self, "target_state_ratio", tuple(float(r) for r in self.target_state_ratio))
        lo, hi = self.event_len_range
        if self.num_turns < 1 or self.tokens_per_turn < 1:
            raise ConfigError("num_turns and tokens_per_turn must be >= 1")
        if not 1 <= lo <= hi:
            raise ConfigError(f"event_len_range must satisfy 1 <= min <= max, got {self.event_len_range}")
        if len(self.target_state_ratio) != 3 or any(r < 0 or not math.isfinite(r) for r in self.target_state_ratio):
            raise ConfigError("target_state_ratio needs three finite non-negative values")
        if sum(self.target_state_ratio) <= 0:
            raise ConfigError("target_state_ratio must not be all zero")
        if self.event_rate is not None and not (0 <= self.event_rate <= 1):
            raise ConfigError(f"event_rate must lie in [0, 1], got {self.event_rate}")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ConfigError(f"num_classes must lie in 1..{len(CLASS_NAMES)}")

    @property
    def normalized_ratio(self) -> tuple[float, float, float]:
        total = sum(self.target_state_ratio)
        return tuple(r / total for r in self.target_state_ratio)  # type: ignore[return-value]

    def vocabulary(self) -> Vocabulary:
        return synthetic_vocabulary(self)


@dataclass(frozen=True)
class SyntheticEpisode:
    dialogue: StreamingDialogue
    events: tuple[tuple[TimeInterval, int], ...]
    gold_states: tuple[StateToken, ...]


def synthetic_vocabulary(config: SyntheticConfig) -> Vocabulary:
    words = CLASS_NAMES[: config.num_classes] + (CAPTION_SUFFIX,)
    vocab = Vocabulary.with_size(config.vocab_size, words=words, num_markers=config.num_markers)
    if vocab.num_frames <= config.num_classes:
        raise ConfigError("vocabulary leaves no room for noise observations")
    return vocab


def caption_for(class_id: int) -> str:
    return f"{CLASS_NAMES[class_id]} {CAPTION_SUFFIX}"


@dataclass(frozen=True)
class _Schedule:
    gap_mean: float
    long_prob: float  # P(length == hi_len) in the two-point length law
    lo_len: int
    hi_len: int


def _schedule(config: SyntheticConfig) -> _Schedule | None:
    """Gap/length laws reproducing the target ratio; ``None`` means no events."""
    if config.event_rate == 0:
        return None
    r_sil, r_stb, r_rsp = config.normalized_ratio
    if r_rsp == 0:
        if r_stb > 0:
            raise InfeasibleRatio("Standby turns only occur before a Response turn")
        return None
    lo, hi = config.event_len_range
    # each event yields `length` Standby turns and one Response turn
    mean_len = r_stb / r_rsp
    if not lo - 1e-12 <= mean_len <= hi + 1e-12:
        raise InfeasibleRatio(
            f"Standby:Response = {mean_len:.3f} needs mean event length outside {config.event_len_range}"
        )
    lo_len, hi_len = math.floor(mean_len), math.ceil(mean_len)
    long_prob = mean_len - lo_len if hi_len > lo_len else 0.0
    if config.event_rate is not None:
        gap_mean = 1.0 / config.event_rate - mean_len - 1.0
        if gap_mean < 0:
            raise InfeasibleRatio(f"event_rate {config.event_rate} leaves no room between events")
    else:
        gap_mean = r_sil / r_rsp
    if config.num_turns < lo_len + 1:
        raise InfeasibleRatio(f"{config.num_turns} turns cannot hold an event of {lo_len} turns plus its Response")
    return _Schedule(gap_mean=gap_mean, long_prob=long_prob, lo_len=lo_len, hi_len=hi_len)


def _sample_events(config: SyntheticConfig, sched: _Schedule, rng: np.random.Generator) -> list[tuple[int, int, int]]:
    """Integer-turn events ``(start, end, class)``; ``end`` is the Response turn."""
    events = []
    t = 0
    while True:
        t += int(rng.geometric(1.0 / (sched.gap_mean + 1.0))) - 1
        length = sched.hi_len if rng.random() < sched.long_prob else sched.lo_len
        # an event cut by the episode end keeps whatever still fits before its Response turn
        length = min(length, config.num_turns - 1 - t)
        if length < 1:
            break
        events.append((t, t + length, int(rng.integers(config.num_classes))))
        t += length + 1
    return events


def _episode_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def generate_episode(config: SyntheticConfig, index: int = 0) -> SyntheticEpisode:
    """Deterministic episode number ``index`` of the stream seeded by ``config.seed``."""
    vocab = synthetic_vocabulary(config)
    sched = _schedule(config)
    rng = _episode_rng(config.seed, index)
    spans = _sample_events(config, sched, rng) if sched is not None else []

    noise_lo, noise_hi = config.num_classes, vocab.num_frames
    frames = rng.integers(noise_lo, noise_hi, size=(config.num_turns, config.tokens_per_turn))
    for start, end, cls in spans:
        for k in range(start, end):
            frames[k, rng.integers(config.tokens_per_turn)] = cls

    events = tuple((TimeInterval(float(s), float(e)), c) for s, e, c in spans)
    dialogue = build_dialogue(
        duration_s=float(config.num_turns),
        granularity_s=1.0,
        events=[(iv, caption_for(c)) for iv, c in events],
        task=TaskKind.EVENT_CAPTION,
        frames=[tuple(int(f) for f in row) for row in frames],
        system_prompt=load_system_prompt(),
    )
    return SyntheticEpisode(dialogue=dialogue, events=events, gold_states=tuple(dialogue.states))


def generate_episodes(config: SyntheticConfig, num_episodes: int, start: int = 0) -> list[SyntheticEpisode]:
    return [generate_episode(config, start + i) for i in range(num_episodes)]


def count_states(dialogues: Iterable[StreamingDialogue]) -> dict[str, int]:
    counts = {s.value.lower(): 0 for s in STATES}
    for d in dialogues:
        for turn in d.turns:
            counts[turn.state.value.lower()] += 1
    return counts


def manifest_path_for(corpus_path: str | os.PathLike) -> Path:
    p = Path(corpus_path)
    return p.with_name(p.name + ".manifest.json")


def _atomic_write(path: Path, lines: Iterable[str]) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_corpus(
    dialogues: Sequence[StreamingDialogue],
    path: str | os.PathLike,
    *,
    seed: int | None = None,
    extra: dict | None = None,
) -> dict:
    """Write JSONL plus its manifest; the manifest is only written after the data."""
    path = Path(path)
    _atomic_write(path, (serialize_dialogue(d) for d in dialogues))
    manifest = {"counts": count_states(dialogues), "episodes": len(dialogues), "seed": seed}
    if extra:
        manifest.update(extra)
    _atomic_write(manifest_path_for(path), [json.dumps(manifest, sort_keys=True, indent=2)])
    return manifest


def generate_corpus(config: SyntheticConfig, num_episodes: int, path: str | os.PathLike) -> dict:
    if num_episodes < 0:
        raise ValueError("num_episodes must be >= 0")
    episodes = generate_episodes(config, num_episodes)
    extra = {"synth_config": _config_record(config)}
    return write_corpus([e.dialogue for e in episodes], path, seed=config.seed, extra=extra)


def _config_record(config: SyntheticConfig) -> dict:
    rec = asdict(config)
    rec["event_len_range"] = list(config.event_len_range)
    rec["target_state_ratio"] = list(config.target_state_ratio)
    return rec


def load_corpus(path: str | os.PathLike) -> list[StreamingDialogue]:
    """Read a JSONL corpus; schema errors are reported with their line number."""
    dialogues = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                dialogues.append(deserialize_dialogue(line))
            except SchemaViolation as exc:
                raise SchemaViolation(f"line {lineno}: {exc.path}", str(exc).split(": ", 1)[-1]) from None
    return dialogues
