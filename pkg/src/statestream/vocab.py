"""Token layout shared by the toy model, the streaming engine and the trainer.

Ids, low to high::

    0 BOS | 1 EOT | 2 UNK | time markers | words | observations | 3 state tokens

Time marker ``k`` encodes the k-th turn window (wrapping modulo the marker
block). Observation ids of a dialogue (``DialogueTurn.frames``) map onto the
observation block. Text is split on whitespace into words; unknown words
become UNK.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

from .dialogue import STATES, StateToken, StreamingDialogue
from .errors import IdOutOfRange, VocabularyMismatch

BOS, EOT, UNK = 0, 1, 2
_N_RESERVED = 3


@dataclass(frozen=True)
class Vocabulary:
    num_markers: int
    words: tuple[str, ...]
    num_frames: int
    _word_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "words", tuple(self.words))
        if self.num_markers < 1 or self.num_frames < 1:
            raise VocabularyMismatch("need at least one marker and one observation id")
        if len(set(self.words)) != len(self.words):
            raise VocabularyMismatch("duplicate words in vocabulary")
        index = {w: self.word_base + i for i, w in enumerate(self.words)}
        object.__setattr__(self, "_word_index", index)

    @classmethod
    def with_size(cls, vocab_size: int, words: Sequence[str] = (), num_markers: int = 64) -> "Vocabulary":
        """Fill whatever is left after markers and words with observation ids."""
        num_frames = vocab_size - _N_RESERVED - num_markers - len(words) - len(STATES)
        if num_frames < 1:
            raise VocabularyMismatch(f"vocab_size {vocab_size} too small for the requested layout")
        return cls(num_markers=num_markers, words=tuple(words), num_frames=num_frames)

    # layout -------------------------------------------------------------
    @property
    def marker_base(self) -> int:
        return _N_RESERVED

    @property
    def word_base(self) -> int:
        return _N_RESERVED + self.num_markers

    @property
    def frame_base(self) -> int:
        return self.word_base + len(self.words)

    @property
    def state_base(self) -> int:
        return self.frame_base + self.num_frames

    @property
    def size(self) -> int:
        return self.state_base + len(STATES)

    @property
    def state_ids(self) -> tuple[int, int, int]:
        b = self.state_base
        return (b, b + 1, b + 2)

    def state_id(self, state: StateToken) -> int:
        return self.state_base + StateToken(state).rank

    def state_of(self, token: int) -> StateToken | None:
        k = token - self.state_base
        return STATES[k] if 0 <= k < len(STATES) else None

    def is_marker(self, token: int) -> bool:
        return self.marker_base <= token < self.word_base

    def marker_token(self, turn_index: int) -> int:
        return self.marker_base + turn_index % self.num_markers

    def frame_token(self, observation: int) -> int:
        if not 0 <= observation < self.num_frames:
            raise IdOutOfRange(f"observation id {observation} outside 0..{self.num_frames - 1}")
        return self.frame_base + observation

    # text ---------------------------------------------------------------
    def encode_text(self, text: str | None) -> list[int]:
        if not text:
            return []
        return [self._word_index.get(w, UNK) for w in text.split()]

    def decode_text(self, tokens: Iterable[int]) -> str:
        out = []
        for t in tokens:
            k = t - self.word_base
            out.append(self.words[k] if 0 <= k < len(self.words) else "<unk>")
        return " ".join(out)

    def is_word(self, token: int) -> bool:
        return self.word_base <= token < self.frame_base

    # segments -----------------------------------------------------------
    def encode_segment(self, turn_index: int, frames: Sequence[int], user_text: str | None = None) -> list[int]:
        """User side of one turn: marker, observations, then instruction words."""
        tokens = [self.marker_token(turn_index)]
        tokens.extend(self.frame_token(f) for f in frames)
        tokens.extend(self.encode_text(user_text))
        return tokens

    def encode_reply(self, state: StateToken, text: str | None = None) -> list[int]:
        tokens = [self.state_id(state)]
        if state is StateToken.RESPONSE:
            tokens.extend(self.encode_text(text))
        tokens.append(EOT)
        return tokens

    def encode_prompt(self, system_prompt: str) -> list[int]:
        return [BOS] + self.encode_text(system_prompt)

    def to_dict(self) -> dict[str, Any]:
        return {"num_markers": self.num_markers, "words": list(self.words), "num_frames": self.num_frames}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Vocabulary":
        return cls(num_markers=int(data["num_markers"]), words=tuple(data["words"]), num_frames=int(data["num_frames"]))


@dataclass(frozen=True)
class EncodedDialogue:
    """Flat token stream of a dialogue plus supervision bookkeeping.

    ``targets_at`` lists positions ``p`` whose next token ``tokens[p + 1]`` is
    an assistant token (state, response words, EOT). ``state_at[k]`` is the
    position that predicts turn ``k``'s state token.
    """

    tokens: np.ndarray
    targets_at: np.ndarray
    state_at: np.ndarray
    gold_states: tuple[StateToken, ...]


def encode_dialogue(dialogue: StreamingDialogue, vocab: Vocabulary) -> EncodedDialogue:
    tokens: list[int] = vocab.encode_prompt(dialogue.system_prompt)
    targets_at: list[int] = []
    state_at: list[int] = []
    for k, turn in enumerate(dialogue.turns):
        tokens.extend(vocab.encode_segment(k, turn.frames, turn.user_text))
        reply = vocab.encode_reply(turn.state, turn.response_text)
        state_at.append(len(tokens) - 1)
        targets_at.extend(range(len(tokens) - 1, len(tokens) - 1 + len(reply)))
        tokens.extend(reply)
    return EncodedDialogue(
        tokens=np.asarray(tokens, dtype=np.int64),
        targets_at=np.asarray(targets_at, dtype=np.int64),
        state_at=np.asarray(state_at, dtype=np.int64),
        gold_states=tuple(dialogue.states),
    )

