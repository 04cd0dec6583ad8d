"""Hot numeric kernels.

Each kernel has a pure-numpy implementation (``*_np``) and, when numba is
importable, an ``@njit`` twin (``*_nb``). The public names bind to the numba
versions unless ``STATESTREAM_DISABLE_NUMBA`` is set to a truthy value, or
numba is missing. Both paths are kept importable so tests can compare them.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

_DISABLED = os.environ.get("STATESTREAM_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}
USE_NUMBA = HAVE_NUMBA and not _DISABLED


def row_log_softmax_stats_np(logits, targets):
    """Return (logsumexp per row, log-probability of each row's target)."""
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    logp_t = logits[np.arange(logits.shape[0]), targets] - lse
    return lse, logp_t


def softmax_xent_grad_np(logits, lse, targets, coef):
    """Rows ``coef_i * (softmax(z_i) - onehot(t_i))``."""
    grad = np.exp(logits - lse[:, None])
    grad[np.arange(logits.shape[0]), targets] -= 1.0
    grad *= coef[:, None]
    return grad


def scatter_add_rows_np(dst, index, src):
    """``dst[index[i]] += src[i]`` with repeated indices accumulated."""
    np.add.at(dst, index, src)


if HAVE_NUMBA:

    @njit(cache=True)
    def row_log_softmax_stats_nb(logits, targets):
        n, v = logits.shape
        lse = np.empty(n)
        logp_t = np.empty(n)
        for i in range(n):
            m = logits[i, 0]
            for j in range(1, v):
                if logits[i, j] > m:
                    m = logits[i, j]
            s = 0.0
            for j in range(v):
                s += np.exp(logits[i, j] - m)
            lse[i] = m + np.log(s)
            logp_t[i] = logits[i, targets[i]] - lse[i]
        return lse, logp_t

    @njit(cache=True)
    def softmax_xent_grad_nb(logits, lse, targets, coef):
        n, v = logits.shape
        grad = np.empty((n, v))
        for i in range(n):
            c = coef[i]
            for j in range(v):
                grad[i, j] = c * np.exp(logits[i, j] - lse[i])
            grad[i, targets[i]] -= c
        return grad

    @njit(cache=True)
    def scatter_add_rows_nb(dst, index, src):
        d = dst.shape[1]
        for i in range(index.shape[0]):
            r = index[i]
            for j in range(d):
                dst[r, j] += src[i, j]

else:  # pragma: no cover
    row_log_softmax_stats_nb = row_log_softmax_stats_np
    softmax_xent_grad_nb = softmax_xent_grad_np
    scatter_add_rows_nb = scatter_add_rows_np


if USE_NUMBA:
    row_log_softmax_stats = row_log_softmax_stats_nb
    softmax_xent_grad = softmax_xent_grad_nb
    scatter_add_rows = scatter_add_rows_nb
else:
    row_log_softmax_stats = row_log_softmax_stats_np
    softmax_xent_grad = softmax_xent_grad_np
    scatter_add_rows = scatter_add_rows_np
