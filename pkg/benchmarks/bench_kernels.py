"""Compare the numba and numpy kernel paths, and time a short training run under each.

Usage:
    python3 benchmarks/bench_kernels.py [--rows 4096] [--vocab 256] [--repeat 20]

The kernel comparison calls both implementations in one process. The
training comparison runs a subprocess per path so the
``STATESTREAM_DISABLE_NUMBA`` switch takes effect at import time.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from statestream import _kernels as K

TRAIN_SNIPPET = """
import logging, time
logging.disable(logging.WARNING)
from statestream import _kernels
from statestream.loss import LossConfig
from statestream.synth import SyntheticConfig, generate_episodes
from statestream.toy_model import OptimizerConfig, ToyModelConfig, split_corpus, train
cfg = SyntheticConfig()
vocab = cfg.vocabulary()
tr, _ = split_corpus([e.dialogue for e in generate_episodes(cfg, 170)])
mc = ToyModelConfig(vocab_size=vocab.size, optimizer=OptimizerConfig(steps={steps}, eval_every=10**6))
train(mc, tr[:8], LossConfig.for_mode("focal", vocab.state_ids), vocab)  # warm-up / JIT
t = time.perf_counter()
train(mc, tr, LossConfig.for_mode("focal", vocab.state_ids), vocab)
print(_kernels.USE_NUMBA, time.perf_counter() - t)
"""


def best_of(fn, repeat: int) -> float:
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_kernels(rows: int, vocab: int, repeat: int) -> None:
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(rows, vocab))
    targets = rng.integers(0, vocab, rows)
    coef = rng.random(rows)
    index = rng.integers(0, vocab, rows)
    src = rng.normal(size=(rows, 16))

    lse, _ = K.row_log_softmax_stats_np(logits, targets)
    cases = {
        "row_log_softmax_stats": (
            lambda: K.row_log_softmax_stats_np(logits, targets),
            lambda: K.row_log_softmax_stats_nb(logits, targets),
        ),
        "softmax_xent_grad": (
            lambda: K.softmax_xent_grad_np(logits, lse, targets, coef),
            lambda: K.softmax_xent_grad_nb(logits, lse, targets, coef),
        ),
        "scatter_add_rows": (
            lambda: K.scatter_add_rows_np(np.zeros((vocab, 16)), index, src),
            lambda: K.scatter_add_rows_nb(np.zeros((vocab, 16)), index, src),
        ),
    }
    print(f"kernels on {rows} x {vocab} (best of {repeat}), numba available: {K.HAVE_NUMBA}")
    print(f"{'kernel':<24}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (np_fn, nb_fn) in cases.items():
        nb_fn()  # compile outside the timed region
        t_np = best_of(np_fn, repeat)
        t_nb = best_of(nb_fn, repeat)
        print(f"{name:<24}{1e3 * t_np:>10.3f}{1e3 * t_nb:>10.3f}{t_np / t_nb:>8.2f}x")


def bench_training(steps: int) -> None:
    print(f"\ntoy-model training, {steps} steps on the default corpus")
    for disabled in ("1", "0"):
        env = dict(os.environ, STATESTREAM_DISABLE_NUMBA=disabled)
        out = subprocess.run(
            [sys.executable, "-c", TRAIN_SNIPPET.format(steps=steps)],
            env=env, capture_output=True, text=True, check=True,
        ).stdout.split()
        label = "numba" if out[0] == "True" else "numpy"
        print(f"  {label:<6} {float(out[1]):.2f} s")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--vocab", type=int, default=256)
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--train-steps", type=int, default=200)
    parser.add_argument("--skip-training", action="store_true")
    args = parser.parse_args(argv)
    bench_kernels(args.rows, args.vocab, args.repeat)
    if not args.skip_training:
        bench_training(args.train_steps)


if __name__ == "__main__":
    main()
