from __future__ import annotations

import numpy as np
import pytest

from statestream.dialogue import StateToken, TaskKind, build_dialogue
from statestream.engine import ScriptedModel, vocabulary_for_dialogues
from statestream.errors import ConfigError, DivergenceDetected, EmptyEvaluationSet, IdOutOfRange, SchemaViolation
from statestream.loss import LossConfig
from statestream.synth import SyntheticConfig, generate_episodes
from statestream.toy_model import (
    OptimizerConfig,
    ToyModel,
    ToyModelConfig,
    evaluate_states,
    load_checkpoint,
    read_curve,
    save_checkpoint,
    split_corpus,
    train,
    write_curve,
)

SYN = SyntheticConfig(num_turns=16, vocab_size=128, num_markers=20)


@pytest.fixture(scope="module")
def corpus():
    return [e.dialogue for e in generate_episodes(SYN, 12)]


@pytest.fixture(scope="module")
def vocab():
    return SYN.vocabulary()


def small_config(vocab, **opt):
    opt = {"steps": 6, "batch_size": 3, "eval_every": 2, **opt}
    return ToyModelConfig(vocab_size=vocab.size, embed_dim=4, hidden_dim=8, turn_tokens=4, optimizer=OptimizerConfig(**opt))


class TestConfig:
    @pytest.mark.parametrize("kwargs", [{"embed_dim": 0}, {"context_window": 1}, {"num_layers": 0}])
    def test_dimensions(self, kwargs):
        with pytest.raises(ConfigError):
            ToyModelConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [{"learning_rate": -1}, {"steps": -1}, {"batch_size": 0}, {"name": "rmsprop"}])
    def test_optimizer(self, kwargs):
        with pytest.raises(ConfigError):
            OptimizerConfig(**kwargs)

    def test_optimizer_from_dict(self):
        assert ToyModelConfig(optimizer={"steps": 3}).optimizer.steps == 3

    def test_vocab_size_must_match(self, vocab):
        with pytest.raises(ConfigError):
            ToyModel.initialize(ToyModelConfig(vocab_size=vocab.size + 1), vocab)


class TestForward:
    def test_finite_and_deterministic(self, vocab):
        model = ToyModel.initialize(small_config(vocab), vocab)
        history = [1, 2, 3, 40, 41]
        a = model.forward(history)
        assert a.shape == (vocab.size,)
        assert np.isfinite(a).all()
        assert np.array_equal(a, model.forward(list(history)))

    def test_window_is_causal(self, vocab):
        model = ToyModel.initialize(small_config(vocab), vocab)
        # tokens older than the receptive field do not matter
        w = model.config.window
        tail = list(range(1, w + 1))
        assert np.array_equal(model.forward([9, 9, 9] + tail), model.forward([7] + tail))

    @pytest.mark.parametrize("history", [[], [-1], [10**6]])
    def test_bad_history(self, vocab, history):
        model = ToyModel.initialize(small_config(vocab), vocab)
        with pytest.raises(IdOutOfRange):
            model.forward(history)


class TestTraining:
    def test_seeded_determinism(self, corpus, vocab):
        cfg = small_config(vocab)
        lc = LossConfig.for_mode("focal", vocab.state_ids)
        tr, ho = split_corpus(corpus)
        m1, c1 = train(cfg, tr, lc, vocab, heldout=ho)
        m2, c2 = train(cfg, tr, lc, vocab, heldout=ho)
        assert c1 == c2
        assert all(np.array_equal(m1.params[k], m2.params[k]) for k in m1.params)

    def test_zero_learning_rate_is_flat(self, corpus, vocab):
        _, curve = train(small_config(vocab, learning_rate=0.0), corpus, LossConfig.for_mode("focal", vocab.state_ids), vocab)
        assert len({p.loss for p in curve}) == 1

    def test_curve_schedule_and_heldout(self, corpus, vocab):
        tr, ho = split_corpus(corpus)
        assert (len(tr), len(ho)) == (10, 2)
        _, curve = train(small_config(vocab), tr, LossConfig.for_mode("plain_ce", vocab.state_ids), vocab, heldout=ho)
        assert [p.step for p in curve] == [0, 2, 4, 6]
        assert all(0 <= p.response_recall <= 1 for p in curve)

    def test_reduction_gamma0_uniform_counts(self):
        # every episode holds one turn of each state, so every minibatch has equal counts
        dialogues = [
            build_dialogue(3, 1, [((1, 2), "done")], TaskKind.EVENT_CAPTION, frames=[(i % 3,)] * 3) for i in range(6)
        ]
        vocab = vocabulary_for_dialogues(dialogues, num_markers=4)
        cfg = ToyModelConfig(vocab_size=vocab.size, embed_dim=3, hidden_dim=4, turn_tokens=3,
                             optimizer=OptimizerConfig(steps=5, batch_size=2, eval_every=1))
        _, focal = train(cfg, dialogues, LossConfig(vocab.state_ids, gamma=0.0), vocab)
        _, ce = train(cfg, dialogues, LossConfig(vocab.state_ids, mode="plain_ce"), vocab)
        assert np.allclose([p.loss for p in focal], [p.loss for p in ce], rtol=1e-6, atol=0)

    def test_divergence_reports_step(self, corpus, vocab):
        cfg = small_config(vocab)
        broken = ToyModel.initialize(cfg, vocab)
        broken.params["out_b"][0] = np.nan
        with pytest.raises(DivergenceDetected) as info:
            train(cfg, corpus, LossConfig.for_mode("plain_ce", vocab.state_ids), vocab, init=broken)
        assert info.value.step == 0

    def test_adam_runs(self, corpus, vocab):
        _, curve = train(small_config(vocab, name="adam", learning_rate=0.01), corpus,
                         LossConfig.for_mode("focal", vocab.state_ids), vocab)
        assert curve[-1].loss < curve[0].loss

    def test_empty_corpus(self, vocab):
        with pytest.raises(EmptyEvaluationSet):
            train(small_config(vocab), [], LossConfig.for_mode("focal", vocab.state_ids), vocab)


class TestPersistence:
    def test_checkpoint_round_trip(self, tmp_path, vocab, corpus):
        model, _ = train(small_config(vocab), corpus, LossConfig.for_mode("focal", vocab.state_ids), vocab)
        path = tmp_path / "m.ckpt.json"
        save_checkpoint(model, path)
        again = load_checkpoint(path)
        assert again.config == model.config
        assert again.vocab == model.vocab
        assert all(np.array_equal(again.params[k], model.params[k]) for k in model.params)

    def test_scripted_checkpoint(self, tmp_path, corpus):
        model = ScriptedModel.from_dialogue(corpus[0])
        save_checkpoint(model, tmp_path / "s.json")
        assert load_checkpoint(tmp_path / "s.json").script == model.script

    @pytest.mark.parametrize("text", ["not json", '{"format": "other"}', '{"format": "statestream-checkpoint", "version": 9}'])
    def test_bad_checkpoint(self, tmp_path, text):
        (tmp_path / "bad.json").write_text(text)
        with pytest.raises(SchemaViolation):
            load_checkpoint(tmp_path / "bad.json")

    def test_curve_csv_round_trip(self, tmp_path, corpus, vocab):
        tr, ho = split_corpus(corpus)
        _, curve = train(small_config(vocab), tr, LossConfig.for_mode("focal", vocab.state_ids), vocab, heldout=ho)
        write_curve(curve, tmp_path / "c.csv")
        assert (tmp_path / "c.csv").read_text().splitlines()[0] == "step,loss,heldout_loss,silence_recall,standby_recall,response_recall"
        assert read_curve(tmp_path / "c.csv") == curve


class TestEvaluate:
    def test_oracle_scores_one(self, corpus):
        reports = [evaluate_states(ScriptedModel.from_dialogue(d), [d]) for d in corpus[:4]]
        for r in reports:
            assert r.accuracy == 1.0
            assert r.timing_f1 == 1.0 or r.timing_gold == 0

    def test_constant_silence_has_zero_response_recall(self, corpus):
        d = corpus[0]
        silent = ScriptedModel(vocabulary_for_dialogues([d]), [(StateToken.SILENCE, None)] * len(d))
        r = evaluate_states(silent, [d])
        assert r.recall(StateToken.RESPONSE) == 0.0
        assert r.recall(StateToken.SILENCE) == 1.0

    def test_empty(self, vocab):
        with pytest.raises(EmptyEvaluationSet):
            evaluate_states(ToyModel.initialize(small_config(vocab), vocab), [])
