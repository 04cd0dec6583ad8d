"""State-decision metrics shared by the trainer and the streaming engine."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dialogue import STATES, StateToken


def response_turns(states: Sequence[StateToken]) -> list[int]:
    return [k for k, s in enumerate(states) if s is StateToken.RESPONSE]


def match_response_timing(
    gold: Sequence[int], predicted: Sequence[int], tolerance: int = 1
) -> list[tuple[int, int]]:
    """One-to-one matching of predicted to gold Response turns within ``tolerance``.

    Greedy over sorted turns; for equal-width windows on a line this yields a
    maximum matching.
    """
    gold = sorted(gold)
    pairs = []
    used = [False] * len(gold)
    start = 0
    for p in sorted(predicted):
        while start < len(gold) and gold[start] < p - tolerance:
            start += 1
        for i in range(start, len(gold)):
            if gold[i] > p + tolerance:
                break
            if not used[i]:
                used[i] = True
                pairs.append((gold[i], p))
                break
    return pairs


def _f1(precision: float, recall: float) -> float:
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


@dataclass(frozen=True)
class StateReport:
    confusion: np.ndarray  # rows gold, columns predicted, order Silence/Standby/Response
    timing_matched: int
    timing_predicted: int
    timing_gold: int

    def precision(self, state: StateToken) -> float:
        k = StateToken(state).rank
        return _ratio(self.confusion[k, k], self.confusion[:, k].sum())

    def recall(self, state: StateToken) -> float:
        k = StateToken(state).rank
        return _ratio(self.confusion[k, k], self.confusion[k, :].sum())

    def f1(self, state: StateToken) -> float:
        return _f1(self.precision(state), self.recall(state))

    @property
    def accuracy(self) -> float:
        return _ratio(np.trace(self.confusion), self.confusion.sum())

    @property
    def timing_precision(self) -> float:
        return _ratio(self.timing_matched, self.timing_predicted)

    @property
    def timing_recall(self) -> float:
        return _ratio(self.timing_matched, self.timing_gold)

    @property
    def timing_f1(self) -> float:
        return _f1(self.timing_precision, self.timing_recall)

    def as_dict(self) -> dict:
        out = {}
        for s in STATES:
            name = s.value.lower()
            out[f"{name}_precision"] = self.precision(s)
            out[f"{name}_recall"] = self.recall(s)
            out[f"{name}_f1"] = self.f1(s)
        out["accuracy"] = self.accuracy
        out["timing_precision"] = self.timing_precision
        out["timing_recall"] = self.timing_recall
        out["timing_f1"] = self.timing_f1
        out["confusion"] = self.confusion.tolist()
        return out


def state_report(
    gold: Sequence[Sequence[StateToken]], predicted: Sequence[Sequence[StateToken]], tolerance: int = 1
) -> StateReport:
    if len(gold) != len(predicted):
        raise ValueError("gold and predicted hold different numbers of sequences")
    confusion = np.zeros((3, 3), dtype=np.int64)
    matched = n_pred = n_gold = 0
    for g, p in zip(gold, predicted):
        if len(g) != len(p):
            raise ValueError("gold and predicted sequences differ in length")
        for a, b in zip(g, p):
            confusion[a.rank, b.rank] += 1
        gr, pr = response_turns(g), response_turns(p)
        matched += len(match_response_timing(gr, pr, tolerance))
        n_pred += len(pr)
        n_gold += len(gr)
    return StateReport(confusion, matched, n_pred, n_gold)
