"""CTC: log-space forward algorithm, best-path decoding, Viterbi alignment and spikes."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .data import Span

BLANK = 0
# Stand-in for log(0). Large enough that exp() underflows to exactly 0, small
# enough that sums of a few of them stay finite in float32.
LOG_ZERO = -1e30


class InfeasibleTargetError(ValueError):
    """The target cannot be emitted in the available number of frames."""


def min_frames(target: Sequence[int]) -> int:
    """Frames needed to emit ``target``: one per token plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def check_feasible(n_frames: int, target: Sequence[int]) -> None:
    need = min_frames(target)
    if n_frames < need:
        raise InfeasibleTargetError(f"target of length {len(target)} needs {need} frames, have {n_frames}")


def _extend(targets: torch.Tensor) -> torch.Tensor:
    """Interleave blanks: (B, U) -> (B, 2U + 1)."""
    n_batch, n_tok = targets.shape
    ext = torch.full((n_batch, 2 * n_tok + 1), BLANK, dtype=torch.long)
    ext[:, 1::2] = targets
    return ext


def ctc_loss_batch(log_probs: torch.Tensor, lengths: torch.Tensor, targets: torch.Tensor,
                   target_lengths: torch.Tensor) -> torch.Tensor:
    """Per-utterance CTC negative log-likelihood, differentiable by autograd.

    ``log_probs`` (B, T, V) normalized log posteriors with blank at index 0;
    ``targets`` (B, U) padded content ids. Returns a (B,) tensor.
    """
    n_batch, t_max, _ = log_probs.shape
    for b in range(n_batch):
        check_feasible(int(lengths[b]), targets[b, : int(target_lengths[b])].tolist())
    lp = log_probs.clamp_min(LOG_ZERO)
    ext = _extend(targets)
    n_states = ext.shape[1]
    s_len = 2 * target_lengths + 1
    states = torch.arange(n_states)
    # s-2 transition allowed into a non-blank that differs from the token two back
    skip_ok = torch.zeros(n_batch, n_states, dtype=torch.bool)
    skip_ok[:, 2:] = (ext[:, 2:] != BLANK) & (ext[:, 2:] != ext[:, :-2])
    in_range = states[None, :] < s_len[:, None]
    neg = torch.full((n_batch, 1), LOG_ZERO, dtype=lp.dtype)
    neg2 = torch.full((n_batch, 2), LOG_ZERO, dtype=lp.dtype)

    emit = torch.gather(lp, 2, ext[:, None, :].expand(n_batch, t_max, n_states))
    alpha = torch.full((n_batch, n_states), LOG_ZERO, dtype=lp.dtype)
    alpha = torch.where(states[None, :] < 2, emit[:, 0], alpha)
    alpha = torch.where(in_range, alpha, torch.full_like(alpha, LOG_ZERO))
    for t in range(1, t_max):
        prev1 = torch.cat([neg, alpha[:, :-1]], dim=1)
        prev2 = torch.cat([neg2, alpha[:, :-2]], dim=1)
        prev2 = torch.where(skip_ok, prev2, torch.full_like(prev2, LOG_ZERO))
        new = torch.logsumexp(torch.stack([alpha, prev1, prev2]), dim=0) + emit[:, t]
        new = torch.where(in_range, new, torch.full_like(new, LOG_ZERO))
        alpha = torch.where((t < lengths)[:, None], new, alpha)
    last = torch.gather(alpha, 1, (s_len - 1)[:, None])[:, 0]
    second = torch.gather(alpha, 1, (s_len - 2).clamp_min(0)[:, None])[:, 0]
    second = torch.where(target_lengths > 0, second, torch.full_like(second, LOG_ZERO))
    return -torch.logaddexp(last, second)


def ctc_loss(grid, target: Sequence[int]) -> tuple[float, np.ndarray]:
    """CTC loss of one ``(T, V)`` log-posterior grid and its gradient w.r.t. the grid."""
    target = [int(t) for t in target]
    if not target:
        raise ValueError("CTC target must be non-empty")
    if min(target) < 1:
        raise ValueError("CTC target must contain content ids only")
    g = torch.as_tensor(np.asarray(grid), dtype=torch.float64).clone().requires_grad_(True)
    check_feasible(g.shape[0], target)
    loss = ctc_loss_batch(g[None], torch.tensor([g.shape[0]]), torch.tensor([target]),
                          torch.tensor([len(target)]))[0]
    loss.backward()
    return loss.item(), g.grad.numpy()


def best_path(grid: np.ndarray) -> np.ndarray:
    """Per-frame argmax; numpy's argmax already breaks ties toward the lowest id."""
    return np.asarray(grid).argmax(axis=1)


def _runs(path: np.ndarray):
    """Yield ``(token, start, end)`` for each maximal run of a frame labelling."""
    start = 0
    for t in range(1, len(path) + 1):
        if t == len(path) or path[t] != path[start]:
            yield int(path[start]), start, t
            start = t


def ctc_greedy(grid) -> list[int]:
    return [tok for tok, _, _ in _runs(best_path(grid)) if tok != BLANK]


def ctc_spikes(grid, decoded: Sequence[int] | None = None) -> list[int]:
    """Frame of peak posterior inside each non-blank run of the best path."""
    grid = np.asarray(grid)
    path = best_path(grid)
    spikes, tokens = [], []
    for tok, s, e in _runs(path):
        if tok == BLANK:
            continue
        tokens.append(tok)
        spikes.append(s + int(np.argmax(grid[s:e, tok])))
    if decoded is not None and list(decoded) != tokens:
        raise ValueError("decoded sequence does not match the grid's best path")
    return spikes


def viterbi_path(grid, target: Sequence[int]) -> tuple[np.ndarray, float]:
    """Best blank-augmented frame labelling for ``target`` and its log-probability.

    Among equally likely paths the one whose state index is lexicographically
    largest (i.e. that advances earliest) is returned: a backward max-product pass
    followed by greedy forward reconstruction.
    """
    grid = np.maximum(np.asarray(grid, dtype=np.float64), LOG_ZERO)
    target = [int(t) for t in target]
    n_frames = grid.shape[0]
    check_feasible(n_frames, target)
    ext = [BLANK]
    for tok in target:
        ext += [tok, BLANK]
    n_states = len(ext)
    ext_arr = np.array(ext)
    # a skip s -> s+2 is allowed onto a token that differs from the one two states back
    skip = np.zeros(n_states, dtype=bool)
    skip[:-2] = (ext_arr[2:] != BLANK) & (ext_arr[2:] != ext_arr[:-2])

    def successors(s):
        out = [s]
        if s + 1 < n_states:
            out.append(s + 1)
        if s + 2 < n_states and skip[s]:
            out.append(s + 2)
        return out

    # beta[t, s]: best log-prob of frames t+1.. given state s at frame t
    beta = np.full((n_frames, n_states), -np.inf)
    beta[-1, n_states - 1] = 0.0
    if n_states >= 2:
        beta[-1, n_states - 2] = 0.0
    for t in range(n_frames - 2, -1, -1):
        v = grid[t + 1, ext_arr] + beta[t + 1]
        best_next = v.copy()
        best_next[:-1] = np.maximum(best_next[:-1], v[1:])
        best_next[:-2] = np.where(skip[:-2], np.maximum(best_next[:-2], v[2:]), best_next[:-2])
        beta[t] = best_next

    starts = [0, 1] if n_states > 1 else [0]
    scores = [grid[0, ext[s]] + beta[0, s] for s in starts]
    best = max(scores)
    state = max(s for s, sc in zip(starts, scores) if sc == best)
    path_states = [state]
    for t in range(1, n_frames):
        cand = successors(state)
        sc = [grid[t, ext[n]] + beta[t, n] for n in cand]
        top = max(sc)
        state = max(n for n, v in zip(cand, sc) if v == top)
        path_states.append(state)
    return np.array([ext[s] for s in path_states]), float(best)


def ctc_viterbi_align(grid, target: Sequence[int]) -> list[Span]:
    """Forced alignment: emission span and peak-posterior spike of each target token."""
    grid = np.asarray(grid)
    path, _ = viterbi_path(grid, target)
    spans = []
    # runs are split at token changes; a repeated token is separated by a blank run
    for tok, s, e in _runs(path):
        if tok == BLANK:
            continue
        spike = s + int(np.argmax(grid[s:e, tok]))
        spans.append(Span(tok, s, e, spike))
    return spans
