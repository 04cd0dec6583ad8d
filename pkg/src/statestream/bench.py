"""Benchmark metrics: grounding mIoU, time-sensitive QA, pairwise win rate."""

from __future__ import annotations

import json
import math
import re
import unicodedata
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .dialogue import TimeInterval
from .errors import DegenerateInterval, EmptyGold, EmptySet
from .judge import JudgeClient, JudgeRequest, JudgeVerdict

DEFAULT_DELTA_T = 3.0
REPORT_COLUMNS = (
    ("grounding", "forward_miou", "Grounding F"),
    ("grounding", "backward_miou", "Grounding B"),
    ("caption", "narration_winrate", "Caption N"),
    ("caption", "dense_winrate", "Caption D"),
    ("tsqa", "accuracy", "TSQA Acc"),
    ("tsqa", "recall", "TSQA Rec"),
)


def _bounds(x) -> tuple[float, float]:
    if isinstance(x, TimeInterval):
        return x.start_s, x.end_s
    s, e = (float(v) for v in x)
    if not (math.isfinite(s) and math.isfinite(e)) or e <= s:
        raise DegenerateInterval(f"interval ({s}, {e}) has no positive length")
    return s, e


def iou(pred, gold) -> float:
    """Temporal intersection-over-union of two intervals."""
    sp, ep = _bounds(pred)
    sg, eg = _bounds(gold)
    inter = max(0.0, min(ep, eg) - max(sp, sg))
    union = max(ep, eg) - min(sp, sg)
    return inter / union


@dataclass(frozen=True)
class GroundingItem:
    query_text: str
    direction: str
    gold: TimeInterval
    prediction: TimeInterval | None = None

    def __post_init__(self) -> None:
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be forward or backward, got {self.direction!r}")
        if not isinstance(self.gold, TimeInterval):
            object.__setattr__(self, "gold", TimeInterval(*self.gold))


def mean_iou(items: Sequence[GroundingItem]) -> float:
    """Mean IoU; an item without a prediction scores 0."""
    if not items:
        raise EmptySet("mean IoU over an empty set")
    total = 0.0
    for item in items:
        if item.prediction is not None:
            total += iou(item.prediction, item.gold)
    return total / len(items)


def grounding_scores(items: Sequence[GroundingItem]) -> dict[str, float | None]:
    out: dict[str, float | None] = {}
    for direction in ("forward", "backward"):
        subset = [i for i in items if i.direction == direction]
        out[f"{direction}_miou"] = mean_iou(subset) if subset else None
    return out


# --------------------------------------------------------------------------
# time-sensitive QA

_OPTION_PREFIX = re.compile(r"^\(?[A-Za-z]\s*[.):]\s+")


def normalize_answer(value) -> str:
    """Case-fold, strip an option letter prefix (``"A. "``), trim punctuation."""
    text = unicodedata.normalize("NFKC", str(value)).strip()
    text = _OPTION_PREFIX.sub("", text)
    text = re.sub(r"\s+", " ", text).strip().strip(".,;:!?\"'").strip()
    return text.casefold()


def content_match(pred_value, gold_value, judge: JudgeClient | None = None, question: str = "") -> bool:
    """Exact match after normalization; otherwise ask the judge, if one is given."""
    if normalize_answer(pred_value) == normalize_answer(gold_value):
        return True
    if judge is None:
        return False
    request = JudgeRequest(
        "content-match",
        {"question": question, "reference": str(gold_value), "prediction": str(pred_value)},
    )
    return judge.judge(request).decision == "yes"


@dataclass(frozen=True)
class TsqaItem:
    question: str
    gold: tuple[tuple[str, float], ...]
    predictions: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        gold = tuple((v, float(t)) for v, t in self.gold)
        preds = tuple((v, float(t)) for v, t in self.predictions)
        if len(gold) < 2:
            raise EmptyGold(f"question {self.question!r} needs at least 2 time-stamped answers")
        times = [t for _, t in gold]
        if any(t < 0 for t in times) or any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError(f"gold times must be non-negative and strictly increasing: {times}")
        object.__setattr__(self, "gold", gold)
        object.__setattr__(self, "predictions", preds)

    @property
    def m(self) -> int:
        return len(self.gold)

    @property
    def n(self) -> int:
        return len(self.predictions)


Matcher = Callable[[object, object], bool]


def _satisfied(item: TsqaItem, delta_t: float, match: Matcher) -> list[bool]:
    out = []
    for value, t in item.gold:
        out.append(
            any(abs(pt - t) <= delta_t and match(pv, value) for pv, pt in item.predictions)
        )
    return out


def tsqa_score(items: Sequence[TsqaItem], delta_t: float = DEFAULT_DELTA_T, match: Matcher | None = None) -> dict[str, float]:
    """Answer-point accuracy (pooled) and recall (mean per question).

    A gold point counts when any prediction matches its content and lies
    within ``delta_t`` seconds; one prediction may satisfy several points.
    """
    if delta_t < 0 or not math.isfinite(delta_t):
        raise ValueError(f"delta_t must be finite and >= 0, got {delta_t}")
    if not items:
        raise EmptyGold("no TSQA questions to score")
    match = match or content_match
    hits = 0
    points = 0
    fractions = []
    for item in items:
        sat = _satisfied(item, delta_t, match)
        hits += sum(sat)
        points += len(sat)
        fractions.append(sum(sat) / len(sat))
    return {"accuracy": hits / points, "recall": sum(fractions) / len(fractions)}


# --------------------------------------------------------------------------
# win rate


@dataclass(frozen=True)
class WinRateTask:
    video_id: str
    task: str
    candidate_a: str  # system under test
    candidate_b: str  # reference system
    verdict: str | None = None

    def __post_init__(self) -> None:
        if self.task not in ("narration", "dense_caption"):
            raise ValueError(f"win-rate task must be narration or dense_caption, got {self.task!r}")


_SCORE_SYSTEM_FIRST = {"A": 1.0, "B": 0.0, "tie": 0.5}
_SCORE_SYSTEM_SECOND = {"A": 0.0, "B": 1.0, "tie": 0.5}


def win_rate(
    tasks: Sequence[WinRateTask],
    judge: JudgeClient,
    *,
    swap: bool = True,
    max_in_flight: int = 8,
) -> float:
    """Share of comparisons won by ``candidate_a``.

    With ``swap`` each pair is judged twice, once per presentation order, and
    the two outcomes are averaged.
    """
    if not tasks:
        raise EmptySet("no win-rate tasks")
    requests = []
    for t in tasks:
        requests.append(JudgeRequest("pairwise-preference", {"task": t.task, "candidate_a": t.candidate_a, "candidate_b": t.candidate_b}))
        if swap:
            requests.append(JudgeRequest("pairwise-preference", {"task": t.task, "candidate_a": t.candidate_b, "candidate_b": t.candidate_a}))
    verdicts = judge.batch_judge(requests, max_in_flight)
    for v in verdicts:
        if isinstance(v, Exception):
            raise v
    per_task = 2 if swap else 1
    total = 0.0
    for i in range(len(tasks)):
        first: JudgeVerdict = verdicts[i * per_task]  # type: ignore[assignment]
        score = _SCORE_SYSTEM_FIRST[first.decision]
        if swap:
            second: JudgeVerdict = verdicts[i * per_task + 1]  # type: ignore[assignment]
            score = (score + _SCORE_SYSTEM_SECOND[second.decision]) / 2
        total += score
    return total / len(tasks)


# --------------------------------------------------------------------------
# report


@dataclass
class ScoreReport:
    grounding: dict[str, float | None] = field(default_factory=lambda: {"forward_miou": None, "backward_miou": None})
    tsqa: dict[str, float | None] = field(default_factory=lambda: {"accuracy": None, "recall": None})
    caption: dict[str, float | None] = field(default_factory=lambda: {"narration_winrate": None, "dense_winrate": None})
    delta_t: float = DEFAULT_DELTA_T

    @property
    def columns(self) -> list[tuple[str, float | None]]:
        return [(label, getattr(self, section)[key]) for section, key, label in REPORT_COLUMNS]

    @property
    def average(self) -> float | None:
        """Arithmetic mean of the populated columns (all six when complete)."""
        values = [v for _, v in self.columns if v is not None]
        return sum(values) / len(values) if values else None

    def to_dict(self) -> dict:
        missing = [label for label, v in self.columns if v is None]
        return {
            "schema_version": 1,
            "grounding": dict(self.grounding),
            "tsqa": dict(self.tsqa),
            "caption": dict(self.caption),
            "average": self.average,
            "average_note": (
                "arithmetic mean of the six columns"
                if not missing
                else f"arithmetic mean over populated columns; missing: {', '.join(missing)}"
            ),
            "delta_t": self.delta_t,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_table(self) -> str:
        """Markdown table; values are percentages, '-' for empty columns."""
        labels = [label for label, _ in self.columns] + ["Average"]
        values = [v for _, v in self.columns] + [self.average]
        cells = ["-" if v is None else f"{100 * v:.2f}" for v in values]
        head = "| " + " | ".join(labels) + " |"
        rule = "|" + "|".join("---" for _ in labels) + "|"
        return "\n".join([head, rule, "| " + " | ".join(cells) + " |"]) + "\n"
