from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest

from statestream import _kernels as K


@pytest.fixture
def data():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 3, (64, 17))
    targets = rng.integers(0, 17, 64)
    return logits, targets, rng


def test_log_softmax_paths_agree(data):
    logits, targets, _ = data
    lse_np, lp_np = K.row_log_softmax_stats_np(logits, targets)
    lse_nb, lp_nb = K.row_log_softmax_stats_nb(logits, targets)
    assert np.allclose(lse_np, lse_nb, rtol=1e-14, atol=0)
    assert np.allclose(lp_np, lp_nb, rtol=1e-13, atol=1e-14)


def test_log_softmax_is_stable_for_large_logits():
    z = np.array([[1000.0, 0.0], [-1000.0, 0.0]])
    for fn in (K.row_log_softmax_stats_np, K.row_log_softmax_stats_nb):
        lse, lp = fn(z, np.array([0, 0]))
        assert np.allclose(lse, [1000.0, 0.0])
        assert np.allclose(lp, [0.0, -1000.0])


def test_grad_paths_agree(data):
    logits, targets, rng = data
    lse, _ = K.row_log_softmax_stats_np(logits, targets)
    coef = rng.random(64)
    a = K.softmax_xent_grad_np(logits, lse, targets, coef)
    b = K.softmax_xent_grad_nb(logits, lse, targets, coef)
    assert np.allclose(a, b, rtol=1e-13, atol=1e-16)
    # each row sums to zero: softmax minus a one-hot
    assert np.allclose(a.sum(axis=1), 0.0, atol=1e-14)


def test_scatter_accumulates_repeats():
    src = np.arange(8.0).reshape(4, 2)
    index = np.array([1, 1, 0, 1])
    for fn in (K.scatter_add_rows_np, K.scatter_add_rows_nb):
        dst = np.zeros((3, 2))
        fn(dst, index, src)
        assert dst.tolist() == [[4.0, 5.0], [8.0, 11.0], [0.0, 0.0]]


@pytest.mark.parametrize("flag, want", [("1", "False"), ("true", "False")])
def test_env_flag_selects_numpy(flag, want):
    env = dict(os.environ, STATESTREAM_DISABLE_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from statestream import _kernels as K; print(K.USE_NUMBA, K.row_log_softmax_stats is K.row_log_softmax_stats_np)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.split()
    assert out == [want, "True"]
