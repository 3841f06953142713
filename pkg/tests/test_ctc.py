import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from maskstream.ctc import (InfeasibleTargetError, ctc_greedy, ctc_loss, ctc_loss_batch, ctc_spikes,
                            ctc_viterbi_align, min_frames, viterbi_path)
from maskstream.nn import grad_check
from oracles import collapse, ctc_brute_force, random_log_softmax


def _onehot_grid(path, n_labels, hi=0.97):
    grid = np.full((len(path), n_labels), (1 - hi) / (n_labels - 1))
    grid[np.arange(len(path)), path] = hi
    return np.log(grid)


def test_single_frame_single_path():
    grid = np.log([[0.5, 0.5]])
    loss, _ = ctc_loss(grid, [1])
    assert loss == pytest.approx(-math.log(0.5), abs=1e-9)


def test_two_frames_uniform():
    loss, _ = ctc_loss(np.log(np.full((2, 2), 0.5)), [1])
    assert loss == pytest.approx(0.287682, abs=1e-6)


def test_repeat_needs_separating_blank():
    assert min_frames([1, 1]) == 3
    with pytest.raises(InfeasibleTargetError):
        ctc_loss(np.log(np.full((2, 2), 0.5)), [1, 1])


def test_matches_brute_force(rng):
    for _ in range(60):
        n_frames = int(rng.integers(1, 6))
        n_labels = int(rng.integers(2, 5))
        target = list(rng.integers(1, n_labels, size=int(rng.integers(1, 4))))
        if min_frames(target) > n_frames:
            continue
        grid = random_log_softmax(rng, (n_frames, n_labels))
        assert ctc_loss(grid, target)[0] == pytest.approx(ctc_brute_force(grid, target), abs=1e-6)


def test_batch_matches_single_with_padding(rng):
    grids = [random_log_softmax(rng, (n, 4)) for n in (6, 3, 5)]
    targets = [[1, 2, 1], [3], [2, 2]]
    lp = torch.full((3, 6, 4), -1e4, dtype=torch.float64)
    for i, g in enumerate(grids):
        lp[i, : len(g)] = torch.from_numpy(g)
    tg = torch.tensor([[1, 2, 1], [3, 0, 0], [2, 2, 0]])
    out = ctc_loss_batch(lp, torch.tensor([6, 3, 5]), tg, torch.tensor([3, 1, 2]))
    for i in range(3):
        assert float(out[i]) == pytest.approx(ctc_loss(grids[i], targets[i])[0], abs=1e-9)


def test_gradient_against_central_differences(rng):
    logits = torch.from_numpy(rng.normal(size=(5, 4)))
    target = torch.tensor([[1, 3, 1]])

    def f(p):
        lp = torch.log_softmax(p["x"], -1)[None]
        return ctc_loss_batch(lp, torch.tensor([5]), target, torch.tensor([3]))[0]

    assert grad_check(f, {"x": logits}) < 1e-3


def test_grid_gradient_is_negative_occupancy(rng):
    # d loss / d log p_t(k) = -(posterior occupancy of k at t); occupancies sum to 1 per frame
    grid = random_log_softmax(rng, (5, 3))
    _, grad = ctc_loss(grid, [1, 2])
    np.testing.assert_allclose(-grad.sum(1), np.ones(5), atol=1e-9)


@pytest.mark.parametrize("path,expected", [([1, 1, 0, 2], [1, 2]), ([0, 0, 0], []), ([1, 0, 1], [1, 1])])
def test_greedy_collapse(path, expected):
    assert ctc_greedy(_onehot_grid(path, 3)) == expected


def test_spikes_pick_peak_inside_run():
    grid = np.log(np.array([[0.1, 0.6, 0.3], [0.05, 0.9, 0.05], [0.9, 0.05, 0.05]]))
    assert ctc_spikes(grid, [1]) == [1]


def test_spikes_single_frame_runs_strictly_increasing():
    grid = _onehot_grid([1, 0, 2, 2, 0, 1], 3)
    spikes = ctc_spikes(grid)
    assert spikes[0] == 0 and spikes[2] == 5
    assert all(a < b for a, b in zip(spikes, spikes[1:]))


def test_spikes_reject_mismatched_decode():
    with pytest.raises(ValueError):
        ctc_spikes(_onehot_grid([1, 2], 3), [2, 1])


def test_viterbi_two_frame_example():
    grid = np.log(np.array([[0.05, 0.9, 0.05], [0.9, 0.05, 0.05]]))
    (span,) = ctc_viterbi_align(grid, [1])
    assert (span.start, span.end, span.spike) == (0, 1, 0)


def test_viterbi_exact_one_frame_per_token():
    path = [2, 1, 3]
    spans = ctc_viterbi_align(_onehot_grid(path, 4), path)
    assert [(s.token, s.start, s.end) for s in spans] == [(2, 0, 1), (1, 1, 2), (3, 2, 3)]


def test_viterbi_tie_prefers_earliest_transition():
    # uniform grid: every valid path ties; the earliest-advancing one emits the token at frame 0
    grid = np.log(np.full((3, 2), 0.5))
    path, _ = viterbi_path(grid, [1])
    assert collapse(path) == [1]
    assert path[0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_viterbi_score_is_max_over_paths(seed):
    import itertools

    rng = np.random.default_rng(seed)
    n_frames, n_labels = int(rng.integers(2, 5)), 3
    target = [int(rng.integers(1, n_labels))]
    if rng.random() < 0.5 and n_frames >= 2:
        target.append(int(rng.integers(1, n_labels)))
    if min_frames(target) > n_frames:
        return
    grid = random_log_softmax(rng, (n_frames, n_labels))
    path, score = viterbi_path(grid, target)
    best = max(sum(grid[t, k] for t, k in enumerate(p))
               for p in itertools.product(range(n_labels), repeat=n_frames) if collapse(p) == target)
    assert collapse(path) == target
    assert score == pytest.approx(best, abs=1e-9)
