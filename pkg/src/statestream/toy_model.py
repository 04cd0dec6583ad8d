"""Desk-scale autoregressive next-token model and its trainer.

The model is a causal windowed MLP language model: the logits for position
``p`` depend on the embeddings of the last ``window`` tokens up to and
including ``p`` (position-specific input weights), followed by ``tanh``
hidden layers and a vocabulary projection. Tokens before the start of the
stream read as BOS. Because the receptive field is fixed, the model runs on
unbounded streams.

Gradients are hand-derived and checked against finite differences in the
test suite; training uses ``loss.batch_loss_and_grad`` for the logit
gradient.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .dialogue import STATES, StateToken, StreamingDialogue
from .errors import ConfigError, DivergenceDetected, EmptyEvaluationSet, IdOutOfRange, SchemaViolation
from .loss import LossBatch, LossConfig, batch_loss, batch_loss_and_grad
from .metrics import StateReport, state_report
from .vocab import BOS, Vocabulary, encode_dialogue

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "statestream-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.1
    steps: int = 400
    batch_size: int = 8
    seed: int = 0
    name: str = "sgd"
    eval_every: int = 50

    def __post_init__(self) -> None:
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and eval_every >= 1 required")
        if self.name not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.name!r}")


@dataclass(frozen=True)
class ToyModelConfig:
    vocab_size: int = 256
    embed_dim: int = 16
    context_window: int = 3
    turn_tokens: int = 8
    num_layers: int = 2
    hidden_dim: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if isinstance(self.optimizer, dict):
            object.__setattr__(self, "optimizer", OptimizerConfig(**self.optimizer))
        for name in ("vocab_size", "embed_dim", "num_layers", "hidden_dim", "turn_tokens"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.context_window < 2:
            raise ConfigError("context_window must be >= 2 turns")

    @property
    def window(self) -> int:
        """Receptive field in tokens."""
        return self.context_window * self.turn_tokens


def _param_shapes(cfg: ToyModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"embed": (cfg.vocab_size, cfg.embed_dim)}
    fan_in = cfg.window * cfg.embed_dim
    for layer in range(cfg.num_layers):
        shapes[f"w{layer}"] = (fan_in, cfg.hidden_dim)
        shapes[f"b{layer}"] = (cfg.hidden_dim,)
        fan_in = cfg.hidden_dim
    shapes["out_w"] = (cfg.hidden_dim, cfg.vocab_size)
    shapes["out_b"] = (cfg.vocab_size,)
    return shapes


class ToyModel:
    def __init__(self, config: ToyModelConfig, vocab: Vocabulary, params: dict[str, np.ndarray]):
        if vocab.size != config.vocab_size:
            raise ConfigError(f"vocabulary has {vocab.size} ids, config says {config.vocab_size}")
        shapes = _param_shapes(config)
        if set(params) != set(shapes):
            raise ConfigError(f"parameter set mismatch: {sorted(set(params) ^ set(shapes))}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ConfigError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.vocab = vocab
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in params.items()}

    @classmethod
    def initialize(cls, config: ToyModelConfig, vocab: Vocabulary, seed: int | None = None) -> "ToyModel":
        rng = np.random.default_rng(config.optimizer.seed if seed is None else seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name.startswith("b") or name == "out_b":
                params[name] = np.zeros(shape)
            elif name == "embed":
                params[name] = rng.normal(0.0, 1.0, shape)
            else:
                params[name] = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        return cls(config, vocab, params)

    def copy(self) -> "ToyModel":
        return ToyModel(self.config, self.vocab, {k: v.copy() for k, v in self.params.items()})

    # forward / backward --------------------------------------------------
    def windows(self, tokens: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Token ids visible at each position, most recent first; BOS-padded."""
        offsets = positions[:, None] - np.arange(self.config.window)[None, :]
        win = np.where(offsets >= 0, tokens[np.clip(offsets, 0, None)], BOS)
        return np.ascontiguousarray(win, dtype=np.int64)

    def _forward_windows(self, win: np.ndarray):
        p = self.params
        x = p["embed"][win].reshape(win.shape[0], -1)
        acts = [x]
        h = x
        for layer in range(self.config.num_layers):
            h = np.tanh(h @ p[f"w{layer}"] + p[f"b{layer}"])
            acts.append(h)
        logits = h @ p["out_w"] + p["out_b"]
        return logits, acts

    def logits_for_windows(self, win: np.ndarray) -> np.ndarray:
        return self._forward_windows(win)[0]

    def backward(self, win: np.ndarray, acts: list[np.ndarray], dlogits: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        h = acts[-1]
        grads["out_w"] = h.T @ dlogits
        grads["out_b"] = dlogits.sum(axis=0)
        dh = dlogits @ p["out_w"].T
        for layer in reversed(range(self.config.num_layers)):
            out = acts[layer + 1]
            da = dh * (1.0 - out * out)
            grads[f"w{layer}"] = acts[layer].T @ da
            grads[f"b{layer}"] = da.sum(axis=0)
            dh = da @ p[f"w{layer}"].T
        d_embed = np.zeros_like(p["embed"])
        rows = dh.reshape(-1, self.config.embed_dim)
        _kernels.scatter_add_rows(d_embed, win.reshape(-1), np.ascontiguousarray(rows))
        grads["embed"] = d_embed
        return grads

    def loss_and_grads(self, win: np.ndarray, targets: np.ndarray, loss_config: LossConfig):
        logits, acts = self._forward_windows(win)
        batch = LossBatch(logits, targets, np.ones(len(targets), dtype=bool), self.config.vocab_size)
        out, dlogits = batch_loss_and_grad(batch, loss_config)
        return out, self.backward(win, acts, dlogits)

    def forward(self, history: Sequence[int]) -> np.ndarray:
        """Next-token logits after ``history``."""
        tokens = np.asarray(history, dtype=np.int64)
        if tokens.size == 0:
            raise IdOutOfRange("history must be non-empty")
        if tokens.min() < 0 or tokens.max() >= self.config.vocab_size:
            raise IdOutOfRange(f"token ids must lie in [0, {self.config.vocab_size})")
        win = self.windows(tokens, np.array([tokens.size - 1]))
        return self.logits_for_windows(win)[0]


# --------------------------------------------------------------------------
# data


@dataclass
class _Encoded:
    windows: np.ndarray
    targets: np.ndarray
    state_rows: np.ndarray  # row index of each turn's state prediction
    gold_states: tuple[StateToken, ...]


def _encode_all(model: ToyModel, dialogues: Sequence[StreamingDialogue]) -> list[_Encoded]:
    out = []
    for d in dialogues:
        enc = encode_dialogue(d, model.vocab)
        win = model.windows(enc.tokens, enc.targets_at)
        row_of = {int(pos): i for i, pos in enumerate(enc.targets_at)}
        out.append(
            _Encoded(
                windows=win,
                targets=enc.tokens[enc.targets_at + 1],
                state_rows=np.array([row_of[int(p)] for p in enc.state_at], dtype=np.int64),
                gold_states=enc.gold_states,
            )
        )
    return out


def split_corpus(dialogues: Sequence[StreamingDialogue], holdout_fraction: float = 0.2):
    """Deterministic split: the last ``holdout_fraction`` of episodes are held out."""
    n_hold = int(round(len(dialogues) * holdout_fraction))
    n_hold = min(max(n_hold, 1 if len(dialogues) > 1 else 0), len(dialogues) - 1) if dialogues else 0
    cut = len(dialogues) - n_hold
    return list(dialogues[:cut]), list(dialogues[cut:])


def teacher_forced_states(model: ToyModel, encoded: Sequence[_Encoded]) -> list[list[StateToken]]:
    """Restricted-argmax state decisions with gold history in context."""
    state_ids = list(model.vocab.state_ids)
    preds = []
    for e in encoded:
        logits = model.logits_for_windows(e.windows[e.state_rows])
        preds.append([STATES[i] for i in logits[:, state_ids].argmax(axis=1)])
    return preds


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class CurvePoint:
    step: int
    loss: float
    heldout_loss: float
    silence_recall: float
    standby_recall: float
    response_recall: float


CURVE_FIELDS = [f.name for f in CurvePoint.__dataclass_fields__.values()]


class _Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1**self.t)
            vhat = self.v[k] / (1 - self.b2**self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _set_loss(model: ToyModel, encoded: Sequence[_Encoded], loss_config: LossConfig) -> float:
    win = np.concatenate([e.windows for e in encoded])
    tgt = np.concatenate([e.targets for e in encoded])
    logits = model.logits_for_windows(win)
    return batch_loss(LossBatch(logits, tgt, np.ones(len(tgt), bool)), loss_config).total


def _curve_point(model, step, train_enc, held_enc, loss_config) -> CurvePoint:
    loss = _set_loss(model, train_enc, loss_config)
    if not math.isfinite(loss):
        raise DivergenceDetected(step, loss)
    if held_enc:
        h_loss = _set_loss(model, held_enc, loss_config)
        report = state_report([e.gold_states for e in held_enc], teacher_forced_states(model, held_enc))
        recalls = [report.recall(s) for s in STATES]
    else:
        h_loss, recalls = float("nan"), [float("nan")] * 3
    return CurvePoint(step, loss, h_loss, *recalls)


def train(
    model_config: ToyModelConfig,
    corpus: Sequence[StreamingDialogue],
    loss_config: LossConfig,
    vocab: Vocabulary,
    *,
    heldout: Sequence[StreamingDialogue] | None = None,
    init: ToyModel | None = None,
) -> tuple[ToyModel, list[CurvePoint]]:
    """Minibatch gradient descent over whole episodes.

    ``corpus`` is the training split; ``heldout`` (if given) is scored every
    ``eval_every`` steps and after the last step with teacher-forced
    per-state recall. The curve's ``loss`` is the full training-set loss. A minibatch is
    ``batch_size`` episodes drawn without replacement from a seeded
    permutation; state counts for the loss are taken over that minibatch.
    """
    opt = model_config.optimizer
    loss_config.check_vocab(model_config.vocab_size)
    if not corpus:
        raise EmptyEvaluationSet("training corpus is empty")
    model = init.copy() if init is not None else ToyModel.initialize(model_config, vocab)
    rng = np.random.default_rng(np.random.SeedSequence([opt.seed, 1]))
    train_enc = _encode_all(model, corpus)
    held_enc = _encode_all(model, heldout) if heldout else []
    adam = _Adam(model.params, opt.learning_rate) if opt.name == "adam" else None

    curve: list[CurvePoint] = []
    order = rng.permutation(len(train_enc))
    cursor = 0
    for step in range(opt.steps):
        if step % opt.eval_every == 0:
            curve.append(_curve_point(model, step, train_enc, held_enc, loss_config))
        if cursor + opt.batch_size > len(order):
            order = rng.permutation(len(train_enc))
            cursor = 0
        pick = order[cursor : cursor + opt.batch_size]
        cursor += opt.batch_size
        win = np.concatenate([train_enc[i].windows for i in pick])
        tgt = np.concatenate([train_enc[i].targets for i in pick])
        out, grads = model.loss_and_grads(win, tgt, loss_config)
        if not math.isfinite(out.total) or not all(np.isfinite(g).all() for g in grads.values()):
            raise DivergenceDetected(step, out.total)
        if adam is not None:
            adam.step(model.params, grads)
        else:
            for k, g in grads.items():
                model.params[k] -= opt.learning_rate * g
    curve.append(_curve_point(model, opt.steps, train_enc, held_enc, loss_config))
    return model, curve


def write_curve(curve: Sequence[CurvePoint], path: str | os.PathLike) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_FIELDS)
    for point in curve:
        writer.writerow([point.step] + [repr(float(getattr(point, f))) for f in CURVE_FIELDS[1:]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_curve(path: str | os.PathLike) -> list[CurvePoint]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(int(r["step"]), *(float(r[f]) for f in CURVE_FIELDS[1:])) for r in rows]


# --------------------------------------------------------------------------
# evaluation


def evaluate_states(model, episodes, tolerance: int = 1) -> StateReport:
    """Free-running streaming evaluation via the inference engine.

    Every turn is pushed through a fresh session, so the model conditions on
    its own earlier decisions exactly as at deployment.
    """
    from .engine import replay

    dialogues = [getattr(e, "dialogue", e) for e in episodes]
    if not dialogues:
        raise EmptyEvaluationSet("no episodes to evaluate")
    gold, pred = [], []
    for d in dialogues:
        result = replay(model, d)
        gold.append(d.states)
        pred.append([dec.state for dec in result.decisions])
    return state_report(gold, pred, tolerance)


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(checkpoint_record(model), sort_keys=True), encoding="utf-8")


def checkpoint_record(model) -> dict:
    if hasattr(model, "checkpoint_record"):
        return model.checkpoint_record()
    cfg = asdict(model.config)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": "toy",
        "config": cfg,
        "vocab": model.vocab.to_dict(),
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in sorted(model.params.items())
        },
    }


def load_checkpoint(path: str | os.PathLike):
    try:
        record = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaViolation(str(path), f"not a JSON checkpoint: {exc.msg}") from None
    return model_from_record(record)


def model_from_record(record: dict):
    if record.get("format") != CHECKPOINT_FORMAT:
        raise SchemaViolation("format", f"expected {CHECKPOINT_FORMAT!r}")
    if record.get("version") != CHECKPOINT_VERSION:
        raise SchemaViolation("version", f"unsupported checkpoint version {record.get('version')!r}")
    vocab = Vocabulary.from_dict(record["vocab"])
    kind = record.get("kind")
    if kind == "scripted":
        from .engine import ScriptedModel

        return ScriptedModel.from_record(record, vocab)
    if kind != "toy":
        raise SchemaViolation("kind", f"unknown model kind {kind!r}")
    cfg = dict(record["config"])
    cfg["optimizer"] = OptimizerConfig(**cfg["optimizer"])
    config = ToyModelConfig(**cfg)
    params = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in record["params"].items()
    }
    return ToyModel(config, vocab, params)
