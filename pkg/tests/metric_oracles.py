"""Independent brute-force references for the metric suite."""

import itertools

import numpy as np


def auc_pairs(scores, labels) -> float:
    """P(score of a positive > score of a negative) + half the tie probability."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel() >= 0.5
    pos, neg = s[l], s[~l]
    wins = ties = 0
    for a in pos:
        for b in neg:
            wins += a > b
            ties += a == b
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def ssim_loops(x, y, win=7, c1=1e-4, c2=9e-4) -> float:
    h, w = x.shape
    vals = []
    for i, j in itertools.product(range(h - win + 1), range(w - win + 1)):
        a = x[i:i + win, j:j + win].ravel()
        b = y[i:i + win, j:j + win].ravel()
        ma, mb = a.mean(), b.mean()
        va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
        cab = ((a - ma) * (b - mb)).mean()
        vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))
