"""Independent reference implementations used as test oracles.

These are deliberately naive: plain Python loops and ``math`` only, no code
shared with the package under test.
"""

from __future__ import annotations

import math
from fractions import Fraction


def ce_row(z, t):
    m = max(z)
    lse = m + math.log(sum(math.exp(v - m) for v in z))
    return lse - z[t]


def loss_total(logits, targets, mask, special, mode, gamma=2.0, fixed=(0.3, 1.3, 2.0)):
    """Straight-line masked loss: per-position weights times CE, averaged over the mask."""
    rows = [i for i in range(len(targets)) if mask[i]]
    counts = [sum(1 for i in rows if targets[i] == s) for s in special]
    total_states = sum(counts)
    terms = []
    for i in rows:
        z = list(logits[i])
        t = int(targets[i])
        ce = ce_row(z, t)
        if t in special and mode != "plain_ce":
            k = special.index(t)
            if mode == "fixed_scale":
                w = fixed[k]
            else:
                alpha = (total_states / counts[k]) / 3.0
                p = math.exp(-ce)
                w = alpha * (1.0 - p) ** gamma
            terms.append(w * ce)
        else:
            terms.append(ce)
    return sum(terms) / len(terms)


def alpha_exact(counts):
    total = sum(counts)
    return tuple(Fraction(total, 3 * n) if n else Fraction(0) for n in counts)


def iou(a, b):
    (s1, e1), (s2, e2) = a, b
    inter = min(e1, e2) - max(s1, s2)
    if inter < 0:
        inter = 0.0
    return inter / (max(e1, e2) - min(s1, s2))


def mean_iou(pairs):
    """``pairs`` of (prediction or None, gold)."""
    acc = 0.0
    for pred, gold in pairs:
        acc += 0.0 if pred is None else iou(pred, gold)
    return acc / len(pairs)


def tsqa(questions, delta_t, same=lambda a, b: a.strip().lower() == b.strip().lower()):
    """Brute force over all (gold i, prediction j) pairs."""
    hit_total = 0
    point_total = 0
    fractions = []
    for gold, preds in questions:
        indicator = []
        for gv, gt in gold:
            ok = 0
            for pv, pt in preds:
                if same(pv, gv) and abs(pt - gt) <= delta_t:
                    ok = 1
            indicator.append(ok)
        hit_total += sum(indicator)
        point_total += len(indicator)
        fractions.append(sum(indicator) / len(indicator))
    return hit_total / point_total, sum(fractions) / len(fractions)


def normwise_rel_err(analytic, numeric):
    """max |a - n| / max |n| over all entries (inf-norm relative error)."""
    diff = max(abs(a - n) for a, n in zip(analytic, numeric))
    scale = max(abs(n) for n in numeric)
    return diff / scale if scale else diff
