from __future__ import annotations

import pytest

from statestream.dialogue import StateToken, TaskKind, build_dialogue
from statestream.errors import IdOutOfRange, VocabularyMismatch
from statestream.vocab import BOS, EOT, UNK, Vocabulary, encode_dialogue


@pytest.fixture
def vocab():
    return Vocabulary(num_markers=4, words=("light", "green"), num_frames=5)


def test_layout(vocab):
    # BOS EOT UNK | 4 markers | 2 words | 5 observations | 3 states
    assert (vocab.marker_base, vocab.word_base, vocab.frame_base, vocab.state_base) == (3, 7, 9, 14)
    assert vocab.size == 17
    assert vocab.state_ids == (14, 15, 16)
    assert [vocab.state_of(i) for i in vocab.state_ids] == [StateToken.SILENCE, StateToken.STANDBY, StateToken.RESPONSE]
    assert vocab.state_of(13) is None


def test_with_size_fills_observations():
    v = Vocabulary.with_size(256, words=("a", "b"), num_markers=64)
    assert v.size == 256
    with pytest.raises(VocabularyMismatch):
        Vocabulary.with_size(70, num_markers=64)


def test_invalid():
    with pytest.raises(VocabularyMismatch):
        Vocabulary(num_markers=0, words=(), num_frames=1)
    with pytest.raises(VocabularyMismatch):
        Vocabulary(num_markers=1, words=("a", "a"), num_frames=1)


def test_markers_wrap(vocab):
    assert vocab.marker_token(0) == vocab.marker_token(4) == 3
    assert vocab.is_marker(vocab.marker_token(7))


def test_text(vocab):
    assert vocab.encode_text("green light blue") == [8, 7, UNK]
    assert vocab.decode_text([8, 7, UNK]) == "green light <unk>"
    assert vocab.encode_text(None) == []


def test_frames_checked(vocab):
    with pytest.raises(IdOutOfRange):
        vocab.frame_token(5)


def test_reply(vocab):
    assert vocab.encode_reply(StateToken.SILENCE) == [14, EOT]
    assert vocab.encode_reply(StateToken.RESPONSE, "green") == [16, 8, EOT]


def test_round_trip_dict(vocab):
    assert Vocabulary.from_dict(vocab.to_dict()) == vocab


def test_encode_dialogue_supervises_assistant_tokens_only(vocab):
    d = build_dialogue(2, 1, [((0, 1), "green")], TaskKind.EVENT_CAPTION, frames=[(1, 2), (3,)], system_prompt="light")
    enc = encode_dialogue(d, vocab)
    assert enc.tokens.tolist() == [BOS, 7, 3, 10, 11, 15, EOT, 4, 12, 16, 8, EOT]
    targets = enc.tokens[enc.targets_at + 1].tolist()
    assert targets == [15, EOT, 16, 8, EOT]
    assert enc.tokens[enc.state_at + 1].tolist() == [15, 16]
