"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines
appear under "acceptance criteria" at the end of the report.
"""

from __future__ import annotations

import io
import json
import logging
import random
import statistics
import time
from contextlib import redirect_stdout
from fractions import Fraction

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE_LINES, FIXTURES
from statestream.bench import GroundingItem, TsqaItem, WinRateTask, mean_iou, iou, tsqa_score, win_rate
from statestream.cli import main as cli_main
from statestream.dialogue import (
    StateToken,
    TaskKind,
    TimeInterval,
    build_dialogue,
    deserialize_dialogue,
    serialize_dialogue,
)
from statestream.engine import ScriptedModel, open_session, replay
from statestream.judge import CoinFlipJudge, JudgeClient
from statestream.loss import (
    LossBatch,
    LossConfig,
    alpha_weights,
    batch_loss,
    batch_loss_grad,
    finite_difference_grad,
)
from statestream.synth import SyntheticConfig, count_states, generate_episodes
from statestream.toy_model import (
    OptimizerConfig,
    ToyModel,
    ToyModelConfig,
    _encode_all,
    evaluate_states,
    split_corpus,
    train,
)
from statestream.vocab import Vocabulary

S, V = (5, 6, 7), 8


@pytest.fixture(scope="module", autouse=True)
def warm_kernels():
    """Load the JIT-compiled kernels once so per-criterion timers measure the checks."""
    b = LossBatch(np.zeros((2, V)), np.array([S[0], 1]), np.ones(2, bool))
    batch_loss_grad(b, LossConfig.for_mode("focal", S))
    ToyModel.initialize(ToyModelConfig(vocab_size=V, context_window=2, turn_tokens=1), Vocabulary(1, (), 1)).loss_and_grads(
        np.zeros((1, 2), dtype=np.int64), np.array([S[0]]), LossConfig.for_mode("focal", S)
    )


def report(n: int, ok: bool, elapsed: float, budget: float, detail: str) -> None:
    within = elapsed <= budget
    status = "PASS" if ok and within else "FAIL"
    line = f"[{n}] {status} ({elapsed:.2f}s / budget {budget:g}s) {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, detail
    assert within, f"criterion {n} took {elapsed:.2f}s, budget {budget}s"


def random_batch(rng, n=16, v=V, special=S, mask_frac=0.8):
    logits = rng.normal(0, 2, (n, v))
    targets = rng.integers(0, v, n)
    # make state targets common
    pick = rng.random(n) < 0.6
    targets[pick] = rng.choice(special, pick.sum())
    mask = rng.random(n) < mask_frac
    mask[0] = True
    return LossBatch(logits, targets, mask)


# --------------------------------------------------------------------------


def test_c1_loss_reduction():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        n_each = int(rng.integers(1, 5))
        targets = np.array(list(S) * n_each + list(rng.integers(0, 5, 4)))
        rng.shuffle(targets)
        logits = rng.normal(0, 2, (len(targets), V))
        b = LossBatch(logits, targets, np.ones(len(targets), bool))
        focal = batch_loss(b, LossConfig(S, gamma=0.0, mode="focal")).total
        ce = batch_loss(b, LossConfig(S, mode="plain_ce")).total
        worst = max(worst, abs(focal - ce) / abs(ce))
    report(1, worst <= 1e-12, time.perf_counter() - t0, 1, f"max rel err focal(gamma=0, uniform) vs CE = {worst:.2e}")


def test_c2_alpha_conservation():
    t0 = time.perf_counter()
    rng = random.Random(2)
    worst = 0.0
    for _ in range(1000):
        counts = [rng.randint(1, 10_000) for _ in range(3)]
        a = alpha_weights(counts)
        lhs = sum(ak * nk for ak, nk in zip(a, counts))
        worst = max(worst, abs(lhs - sum(counts)) / sum(counts))
    exact = alpha_weights((12, 3, 2))
    want = (Fraction(17, 36), Fraction(17, 9), Fraction(17, 6))
    rational_ok = all(a == float(w) for a, w in zip(exact, want)) and oracles.alpha_exact((12, 3, 2)) == want
    ok = worst <= 1e-12 and rational_ok
    report(2, ok, time.perf_counter() - t0, 1, f"conservation max rel err {worst:.2e}; (12,3,2) -> 17/36, 17/9, 17/6: {rational_ok}")


def test_c3_gradient_correctness():
    t0 = time.perf_counter()
    worst = {}
    for mode in ("plain_ce", "fixed_scale", "focal"):
        cfg = LossConfig.for_mode(mode, S, gamma=2.0)
        errs = []
        for seed in range(10):
            b = random_batch(np.random.default_rng(100 + seed))
            a = batch_loss_grad(b, cfg)
            f = finite_difference_grad(b, cfg, eps=1e-4)
            errs.append(oracles.normwise_rel_err(a.ravel(), f.ravel()))
        worst[mode] = max(errs)

    # end-to-end: toy-model parameter gradients on a 2-turn micro-batch
    vocab = Vocabulary(num_markers=4, words=("red", "finished"), num_frames=4)
    d = build_dialogue(2, 1, [((0, 1), "red finished")], TaskKind.EVENT_CAPTION, frames=[(1, 2), (3, 0)], system_prompt="")
    cfg = ToyModelConfig(vocab_size=vocab.size, embed_dim=3, context_window=2, turn_tokens=3, num_layers=2, hidden_dim=5)
    model = ToyModel.initialize(cfg, vocab, seed=3)
    enc = _encode_all(model, [d])[0]
    lcfg = LossConfig.for_mode("focal", vocab.state_ids)
    _, grads = model.loss_and_grads(enc.windows, enc.targets, lcfg)
    e2e = 0.0
    eps = 1e-4
    for name, param in model.params.items():
        numeric = np.zeros_like(param)
        flat = param.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = model.loss_and_grads(enc.windows, enc.targets, lcfg)[0].total
            flat[i] = orig - eps
            down = model.loss_and_grads(enc.windows, enc.targets, lcfg)[0].total
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        e2e = max(e2e, oracles.normwise_rel_err(grads[name].ravel(), numeric.ravel()))
    ok = max(worst.values()) <= 1e-5 and e2e <= 1e-4
    detail = ", ".join(f"{m} {e:.1e}" for m, e in worst.items()) + f"; toy model {e2e:.1e}"
    report(3, ok, time.perf_counter() - t0, 30, f"max rel grad err: {detail}")


def test_c4_metric_oracles():
    t0 = time.perf_counter()
    rng = random.Random(4)
    values = ["red", "green", "blue", "Red", "yellow"]
    mismatches = 0
    monotone = True
    for _ in range(1000):
        questions = []
        for _ in range(rng.randint(1, 3)):
            m = rng.randint(2, 5)
            times = sorted(rng.sample(range(0, 400), m))
            gold = [(rng.choice(values), t / 10) for t in times]
            preds = [(rng.choice(values), rng.randint(0, 400) / 10) for _ in range(rng.randint(0, 8))]
            questions.append((gold, preds))
        items = [TsqaItem("q", tuple(g), tuple(p)) for g, p in questions]
        dt = float(rng.choice([0, 1, 2, 3, 5]))
        got = tsqa_score(items, dt)
        want = oracles.tsqa(questions, dt)
        if (got["accuracy"], got["recall"]) != want:
            mismatches += 1
        wider = tsqa_score(items, dt + 2)
        if wider["accuracy"] < got["accuracy"] or wider["recall"] < got["recall"]:
            monotone = False
    for _ in range(1000):
        pairs = []
        for _ in range(50):
            s = rng.randint(0, 50)
            gold = (float(s), float(s + rng.randint(1, 10)))
            if rng.random() < 0.2:
                pred = None
            else:
                ps = rng.randint(0, 55)
                pred = (float(ps), float(ps + rng.randint(1, 10)))
            pairs.append((pred, gold))
        items = [GroundingItem("q", "forward", TimeInterval(*g), None if p is None else TimeInterval(*p)) for p, g in pairs]
        if mean_iou(items) != oracles.mean_iou(pairs):
            mismatches += 1
    hand = iou((2, 5), (3, 6)) == 0.5 and iou((1, 4), (1, 4)) == 1.0 and iou((0, 1), (2, 3)) == 0.0
    ok = mismatches == 0 and monotone and hand
    report(4, ok, time.perf_counter() - t0, 30, f"oracle mismatches {mismatches}/2000, monotone in delta_t {monotone}, IoU hand cases {hand}")


def test_c5_table1_conformance(tmp_path):
    t0 = time.perf_counter()
    d = build_dialogue(
        5, 1, [((3, 4), "The light just turned green.")], TaskKind.EVENT_GROUNDING,
        question=("Notify me when the light turns green.", 1),
    )
    trace = [t.state for t in d.turns]
    want = [StateToken.SILENCE] * 3 + [StateToken.STANDBY, StateToken.RESPONSE]
    trace_ok = (
        trace == want
        and d.turns[4].marker == "<4s-5s>"
        and d.turns[4].response_text == "The light just turned green."
        and d.turns[1].user_text == "Notify me when the light turns green."
    )
    out = tmp_path / "log.jsonl"
    with redirect_stdout(io.StringIO()):
        rc = cli_main([
            "infer", "--checkpoint", str(FIXTURES / "tab1_oracle.ckpt.json"),
            "--dialogues", str(FIXTURES / "tab1_dialogue.jsonl"), "--out", str(out),
        ])
    log_ok = rc == 0 and out.read_bytes() == (FIXTURES / "tab1_expected_log.jsonl").read_bytes()
    fixture_ok = (FIXTURES / "tab1_dialogue.jsonl").read_text(encoding="utf-8").strip() == serialize_dialogue(d)
    ok = trace_ok and log_ok and fixture_ok
    report(5, ok, time.perf_counter() - t0, 1, f"trace {trace_ok}, fixture dialogue {fixture_ok}, emission log bit-exact {log_ok}")


def test_c6_imbalance_regime():
    t0 = time.perf_counter()
    cfg = SyntheticConfig()
    episodes = generate_episodes(cfg, 170)
    counts = count_states(e.dialogue for e in episodes)
    total = sum(counts.values())
    target = {"silence": 12 / 17, "standby": 3 / 17, "response": 2 / 17}
    rel = {k: counts[k] / total / target[k] - 1 for k in target}
    ok = total >= 10_000 and all(abs(r) <= 0.10 for r in rel.values())
    shares = " ".join(f"{k}={17 * counts[k] / total:.2f}({rel[k]:+.1%})" for k in target)
    report(6, ok, time.perf_counter() - t0, 30, f"{total} turns, ratio x17: {shares}")


SEEDS = range(5)
MODES = ("plain_ce", "fixed_scale", "focal")


@pytest.mark.slow
def test_c7_ablation_ordering():
    t0 = time.perf_counter()
    logging.getLogger("statestream").setLevel(logging.ERROR)
    cfg = SyntheticConfig()
    vocab = cfg.vocabulary()
    train_set, heldout = split_corpus([e.dialogue for e in generate_episodes(cfg, 170)])
    recalls = {m: [] for m in MODES}
    for mode in MODES:
        for seed in SEEDS:
            mc = ToyModelConfig(vocab_size=vocab.size, optimizer=OptimizerConfig(seed=seed, eval_every=10**6))
            model, _ = train(mc, train_set, LossConfig.for_mode(mode, vocab.state_ids), vocab)
            recalls[mode].append(evaluate_states(model, heldout).recall(StateToken.RESPONSE))
    med = {m: statistics.median(v) for m, v in recalls.items()}
    ok = med["focal"] > med["fixed_scale"] > med["plain_ce"] and med["focal"] - med["plain_ce"] >= 0.10
    detail = ", ".join(f"{m} {med[m]:.3f}" for m in MODES) + f"; focal - plain_ce = {med['focal'] - med['plain_ce']:.3f}"
    report(7, ok, time.perf_counter() - t0, 600, f"median held-out Response recall over {len(SEEDS)} seeds: {detail}")


class CountingModel:
    """Wraps a model, counting forward calls."""

    def __init__(self, inner):
        self.inner = inner
        self.vocab = inner.vocab
        self.config = getattr(inner, "config", None)
        self.calls = 0

    def forward(self, history):
        self.calls += 1
        return self.inner.forward(history)


def test_c8_one_pass_discipline():
    t0 = time.perf_counter()
    cfg = SyntheticConfig(num_turns=40)
    vocab = cfg.vocabulary()
    episodes = [e.dialogue for e in generate_episodes(cfg, 6)]
    mc = ToyModelConfig(vocab_size=vocab.size)
    models = [ToyModel.initialize(mc, vocab, seed=s) for s in range(3)]
    models.append(ScriptedModel.from_dialogue(episodes[0], vocab))
    bound_ok = True
    causal_ok = True
    for model in models:
        for d in episodes:
            counted = CountingModel(model)
            result = replay(counted, d)
            decoded = sum(x.decoded_tokens for x in result.decisions)
            content = sum(len(x.content.split()) if x.content else 0 for x in result.decisions)
            # decoded counts content tokens plus the closing EOT of each Response
            n_resp = sum(1 for x in result.decisions if x.state is StateToken.RESPONSE)
            bound_ok &= counted.calls == result.forward_calls
            bound_ok &= counted.calls <= len(d.turns) + decoded
            bound_ok &= decoded <= content + n_resp
            # prefix replay: decisions for turns < k from a k-turn prefix equal the full run
            full = [(x.state, x.content) for x in result.decisions]
            for k in (1, 7, len(d.turns) // 2):
                session = open_session(model, d.system_prompt)
                prefix = [session.push_segment(t.frames, t.user_text) for t in d.turns[:k]]
                causal_ok &= [(x.state, x.content) for x in prefix] == full[:k]
    ok = bound_ok and causal_ok
    report(8, ok, time.perf_counter() - t0, 30, f"forward calls <= turns + decoded tokens: {bound_ok}; prefix causality: {causal_ok}")


def _random_dialogue(rng: random.Random):
    n = rng.randint(1, 12)
    g = rng.choice([0.5, 1.0, 2.0])
    events, t = [], 0
    while True:
        t += rng.randint(0, 4)
        length = rng.randint(1, 3)
        if t + length > n:
            break
        events.append(((t * g, (t + length) * g), rng.choice(["door opens", "a cat jumps", "Lights dim"])))
        t += length
    task = rng.choice([TaskKind.NARRATION, TaskKind.EVENT_CAPTION, TaskKind.ACTION_CAPTION])
    frames = [tuple(rng.randint(0, 9) for _ in range(rng.randint(1, 3))) for _ in range(n)]
    q = (rng.choice(["describe it", "ünïcode ✓ ok"]), rng.randrange(n)) if rng.random() < 0.5 else None
    return build_dialogue(n * g, g, events, task, q, frames=frames)


def test_c9_roundtrip_and_golden(tmp_path):
    t0 = time.perf_counter()
    rng = random.Random(9)
    lossless = 0
    for _ in range(1000):
        d = _random_dialogue(rng)
        line = serialize_dialogue(d)
        back = deserialize_dialogue(json.loads(line))
        lossless += back == d and serialize_dialogue(back) == line

    out = tmp_path / "report.json"
    with redirect_stdout(io.StringIO()):
        rc = cli_main([
            "eval", "--predictions", str(FIXTURES / "eval_predictions.jsonl"),
            "--gold", str(FIXTURES / "eval_gold.jsonl"), "--judge", "mock-coinflip", "--out", str(out),
        ])
    golden_ok = rc == 0 and out.read_bytes() == (FIXTURES / "golden_report.json").read_bytes()

    client = JudgeClient(CoinFlipJudge(seed=0))
    tasks = [WinRateTask(f"v{i}", "narration", f"system text {i}", f"reference text {i}") for i in range(10_000)]
    rate = win_rate(tasks, client, swap=False, max_in_flight=8)
    ok = lossless == 1000 and golden_ok and abs(rate - 0.5) <= 0.02
    report(9, ok, time.perf_counter() - t0, 60, f"round-trip {lossless}/1000, golden report byte-exact {golden_ok}, coin-flip win rate {rate:.4f}")
