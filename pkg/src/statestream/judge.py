"""LLM judge client with mock, fixture-replay and HTTP transports.

A transport turns a rendered prompt into raw model text. ``JudgeClient``
adds retries with exponential backoff and parses the raw text against the
answer forms the template declares; anything else is a protocol error.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import string
import threading
import time
from functools import lru_cache
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

from .errors import ConfigError, JudgeProtocolError, JudgeUnavailable

logger = logging.getLogger(__name__)

TEMPLATE_FILES = {
    "pairwise-preference": "pairwise.txt",
    "content-match": "content_match.txt",
    # data-annotation prompts; outputs are free-form but still grammar-checked
    "annotate-recap": "annotate_recap.txt",
    "annotate-description": "annotate_description.txt",
    "annotate-narration": "annotate_narration.txt",
    "annotate-tsqa": "annotate_tsqa.txt",
}
ANSWER_FORMS = {"pairwise-preference": ("A", "B", "tie"), "content-match": ("yes", "no")}
NEGATIVE_SAMPLE = "Negative Sample"


@lru_cache(maxsize=None)
def load_template(template_id: str) -> str:
    try:
        name = TEMPLATE_FILES[template_id]
    except KeyError:
        raise ConfigError(f"unknown judge template {template_id!r}") from None
    return resources.files(__package__).joinpath("assets/judge", name).read_text("utf-8")


@lru_cache(maxsize=None)
def template_slots(template: str) -> frozenset[str]:
    return frozenset(name for _, name, _, _ in string.Formatter().parse(template) if name)


@dataclass(frozen=True)
class JudgeRequest:
    template_id: str
    slots: Mapping[str, str]
    temperature: float = 0.0
    timeout: float = 30.0
    retries: int = 2

    def __post_init__(self) -> None:
        missing = template_slots(load_template(self.template_id)) - set(self.slots)
        if missing:
            raise ConfigError(f"template {self.template_id!r} needs slots {sorted(missing)}")
        if self.retries < 0 or self.timeout <= 0:
            raise ConfigError("retries must be >= 0 and timeout > 0")

    def render(self) -> str:
        return load_template(self.template_id).format(**self.slots)

    def key(self) -> str:
        """Stable fingerprint used to name replay fixtures."""
        blob = json.dumps(
            {"template": self.template_id, "prompt": self.render(), "temperature": self.temperature},
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class JudgeVerdict:
    decision: str
    raw_text: str
    latency_ms: float = field(default=0.0, compare=False)


def _parse_sentence(template_id: str, raw_text: str) -> str:
    text = raw_text.strip()
    if not text or "\n" in text:
        raise JudgeProtocolError(f"{template_id} expects one non-empty line, got {raw_text!r}")
    return text


_NARRATION_LINE = re.compile(r"\d{3}: \S.*")


def _parse_narration(template_id: str, raw_text: str) -> str:
    text = raw_text.strip()
    if text == NEGATIVE_SAMPLE:
        return text
    lines = text.splitlines()
    if not lines or not all(_NARRATION_LINE.fullmatch(line) for line in lines):
        raise JudgeProtocolError(f"{template_id} output must be 'SSS: sentence' lines or {NEGATIVE_SAMPLE!r}")
    seconds = [int(line[:3]) for line in lines]
    if any(b <= a for a, b in zip(seconds, seconds[1:])):
        raise JudgeProtocolError(f"{template_id} timestamps must increase: {seconds}")
    return text


_FENCE = re.compile(r"\s*```(?:json)?\s*(.*?)\s*```\s*", re.DOTALL)


def _parse_tsqa(template_id: str, raw_text: str) -> str:
    """A JSON list of questions, each with >= 2 chronologically ordered answers."""
    m = _FENCE.fullmatch(raw_text)
    body = m.group(1) if m else raw_text
    try:
        data = json.loads(body)
    except json.JSONDecodeError:
        raise JudgeProtocolError(f"{template_id} output is not JSON") from None
    ok = isinstance(data, list) and all(
        isinstance(q, dict)
        and isinstance(q.get("question"), str)
        and isinstance(q.get("answers"), list)
        and len(q["answers"]) >= 2
        and all(isinstance(a, dict) and "value" in a and isinstance(a.get("time"), (int, float)) for a in q["answers"])
        and all(a["time"] <= b["time"] for a, b in zip(q["answers"], q["answers"][1:]))
        for q in data
    )
    if not ok:
        raise JudgeProtocolError(f"{template_id} output does not follow the question/answers schema")
    return json.dumps(data, sort_keys=True, ensure_ascii=False)


_FREE_FORM_PARSERS = {
    "annotate-recap": _parse_sentence,
    "annotate-description": _parse_sentence,
    "annotate-narration": _parse_narration,
    "annotate-tsqa": _parse_tsqa,
}


def parse_verdict(template_id: str, raw_text: str) -> str:
    """Map raw judge text onto one declared answer form, or raise."""
    if template_id in _FREE_FORM_PARSERS:
        return _FREE_FORM_PARSERS[template_id](template_id, raw_text)
    forms = ANSWER_FORMS[template_id]
    pattern = r"\s*(" + "|".join(re.escape(f) for f in forms) + r")\s*\.?\s*"
    m = re.fullmatch(pattern, raw_text, flags=re.IGNORECASE)
    if m is None:
        raise JudgeProtocolError(f"unparseable {template_id} verdict: {raw_text!r}")
    word = m.group(1)
    return next(f for f in forms if f.lower() == word.lower())


class Transport(Protocol):
    def __call__(self, prompt: str, request: JudgeRequest) -> str: ...


# --------------------------------------------------------------------------
# transports


class ConstantJudge:
    """Always returns the same raw text (e.g. ``"A"``)."""

    def __init__(self, answer: str):
        self.answer = answer

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        return self.answer


class CoinFlipJudge:
    """Deterministic pseudo-random verdicts keyed on the prompt text."""

    def __init__(self, seed: int = 0):
        self.seed = seed

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        digest = hashlib.sha256(f"{self.seed}\0{prompt}".encode("utf-8")).digest()
        heads = digest[0] & 1
        if request.template_id == "content-match":
            return "yes" if heads else "no"
        return "A" if heads else "B"


class ExactMatchJudge:
    """Content judge that answers ``yes`` iff normalized texts agree."""

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        from .bench import normalize_answer

        same = normalize_answer(request.slots["prediction"]) == normalize_answer(request.slots["reference"])
        return "yes" if same else "no"


class SlowJudge:
    """Wraps a transport and sleeps ``delay_s`` per call (throughput tests)."""

    def __init__(self, inner: Transport, delay_s: float):
        self.inner = inner
        self.delay_s = delay_s

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        time.sleep(self.delay_s)
        return self.inner(prompt, request)


class UnreachableJudge:
    def __init__(self, exc: type[Exception] = TimeoutError):
        self.exc = exc
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        with self._lock:
            self.calls += 1
        raise self.exc("judge endpoint did not answer")


class FixtureJudge:
    """Replays recorded raw answers from ``<dir>/<request key>.json``.

    With ``record_from`` set, misses are forwarded there and written back.
    """

    def __init__(self, directory: str | os.PathLike, record_from: Transport | None = None):
        self.directory = Path(directory)
        self.record_from = record_from
        self._lock = threading.Lock()

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        path = self.directory / f"{request.key()}.json"
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))["raw_text"]
        if self.record_from is None:
            raise JudgeProtocolError(f"no fixture for request {request.key()[:12]} in {self.directory}")
        raw = self.record_from(prompt, request)
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            record = {"template_id": request.template_id, "prompt": prompt, "raw_text": raw}
            path.write_text(json.dumps(record, sort_keys=True, ensure_ascii=False, indent=1), encoding="utf-8")
        return raw


class HttpJudge:
    """Chat-completions style JSON-over-HTTP endpoint."""

    def __init__(
        self,
        base_url: str,
        model: str,
        *,
        path: str = "/v1/chat/completions",
        api_key_env: str = "JUDGE_API_KEY",
        auth_header: str = "Authorization",
        session=None,
    ):
        import requests

        self.url = base_url.rstrip("/") + "/" + path.lstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.auth_header = auth_header
        self.session = session or requests.Session()
        self._requests = requests

    def __call__(self, prompt: str, request: JudgeRequest) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers[self.auth_header] = f"Bearer {key}" if self.auth_header == "Authorization" else key
        body = {
            "model": self.model,
            "temperature": request.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
        try:
            resp = self.session.post(self.url, json=body, headers=headers, timeout=request.timeout)
        except self._requests.Timeout as exc:
            raise TimeoutError(str(exc)) from exc
        except self._requests.ConnectionError as exc:
            raise ConnectionError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise ConnectionError(f"judge endpoint returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise JudgeProtocolError(f"judge endpoint rejected request: HTTP {resp.status_code}")
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise JudgeProtocolError("judge response lacks choices[0].message.content") from None


# --------------------------------------------------------------------------
# client

_RETRYABLE = (TimeoutError, ConnectionError)


class JudgeClient:
    def __init__(
        self,
        transport: Transport,
        *,
        backoff_s: float = 0.5,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.transport = transport
        self.backoff_s = backoff_s
        self._sleep = sleep

    def judge(self, request: JudgeRequest) -> JudgeVerdict:
        prompt = request.render()
        attempts = 0
        last: Exception | None = None
        while attempts <= request.retries:
            if attempts:
                self._sleep(self.backoff_s * 2 ** (attempts - 1))
            attempts += 1
            started = time.perf_counter()
            try:
                raw = self.transport(prompt, request)
            except _RETRYABLE as exc:
                last = exc
                logger.debug("judge attempt %d failed: %s", attempts, exc)
                continue
            latency = (time.perf_counter() - started) * 1000.0
            return JudgeVerdict(parse_verdict(request.template_id, raw), raw, latency)
        raise JudgeUnavailable(f"judge unavailable: {last}", attempts)

    def batch_judge(
        self, requests: Sequence[JudgeRequest], max_in_flight: int = 8
    ) -> list[JudgeVerdict | Exception]:
        """Order-preserving; a failed item yields its exception in place."""
        if max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")

        def run(req: JudgeRequest) -> JudgeVerdict | Exception:
            try:
                return self.judge(req)
            except Exception as exc:  # isolated per item
                return exc

        if max_in_flight == 1:
            return [run(r) for r in requests]
        with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
            return list(pool.map(run, requests))


def judge(request: JudgeRequest, client: JudgeClient) -> JudgeVerdict:
    return client.judge(request)


def batch_judge(requests: Sequence[JudgeRequest], client: JudgeClient, max_in_flight: int = 8):
    return client.batch_judge(requests, max_in_flight)


MOCK_MODES = ("mock-always-a", "mock-always-b", "mock-coinflip", "mock-exact")


def make_client(
    mode: str,
    *,
    endpoint: str | None = None,
    model: str = "judge",
    path: str = "/v1/chat/completions",
    api_key_env: str = "JUDGE_API_KEY",
    fixtures_dir: str | None = None,
    seed: int = 0,
    backoff_s: float = 0.5,
) -> JudgeClient:
    """Build a client from configuration values."""
    if mode == "mock-always-a":
        transport: Transport = ConstantJudge("A")
    elif mode == "mock-always-b":
        transport = ConstantJudge("B")
    elif mode == "mock-coinflip":
        transport = CoinFlipJudge(seed)
    elif mode == "mock-exact":
        transport = ExactMatchJudge()
    elif mode == "fixture":
        if not fixtures_dir:
            raise ConfigError("judge mode 'fixture' needs fixtures_dir")
        transport = FixtureJudge(fixtures_dir)
    elif mode == "http":
        if not endpoint:
            raise ConfigError("judge mode 'http' needs an endpoint")
        transport = HttpJudge(endpoint, model, path=path, api_key_env=api_key_env)
    else:
        raise ConfigError(f"unknown judge mode {mode!r}")
    return JudgeClient(transport, backoff_s=backoff_s)
