"""Brute-force reference computations used as independent test oracles."""

import itertools
import math

import numpy as np


def collapse(path):
    out, prev = [], None
    for k in path:
        if k != 0 and k != prev:
            out.append(k)
        prev = k
    return out


def ctc_brute_force(grid, target):
    """-log of the summed probability of every frame labelling that collapses to ``target``."""
    grid = np.asarray(grid, dtype=np.float64)
    n_frames, n_labels = grid.shape
    total = 0.0
    for path in itertools.product(range(n_labels), repeat=n_frames):
        if collapse(path) == list(target):
            total += math.exp(sum(grid[t, k] for t, k in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def rnnt_brute_force(lattice, y):
    """-log of the summed probability of every blank/label move sequence through the lattice."""
    lattice = np.asarray(lattice, dtype=np.float64)
    n_frames = lattice.shape[0]
    n_labels = len(y)
    n_moves = n_frames + n_labels
    total = 0.0
    # the last move is always the final blank; choose where the labels go among the rest
    for label_slots in itertools.combinations(range(n_moves - 1), n_labels):
        t = u = 0
        logp = 0.0
        slots = set(label_slots)
        for m in range(n_moves):
            if m in slots:
                logp += lattice[t, u, y[u]]
                u += 1
            else:
                logp += lattice[t, u, 0]
                t += 1
        total += math.exp(logp)
    return -math.log(total)


def random_log_softmax(rng, shape, scale=1.5):
    x = rng.normal(size=shape) * scale
    x = x - x.max(-1, keepdims=True)
    return x - np.log(np.exp(x).sum(-1, keepdims=True))
