"""Transformer-Transducer head: label encoder, joint network, lattice loss and decoding."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ctc import LOG_ZERO
from .data import Vocabulary
from .nn import EncoderConfig, LSTMCell, TransformerEncoder
from .streaming import AttentionPolicy, Chunk

BLANK = 0


class LabelEncoder(nn.Module):
    """Embedding + a single gated recurrent layer over ``sos, y_1, ..., y_{u-1}``."""

    def __init__(self, vocab_size: int, width: int = 64):
        super().__init__()
        self.width = width
        self.embed = nn.Embedding(vocab_size, width)
        self.cell = LSTMCell(width, width)

    def forward(self, prefix: torch.Tensor) -> torch.Tensor:
        """``prefix`` (B, U+1) starting with sos -> states (B, U+1, width)."""
        emb = self.embed(prefix)
        state = self.cell.initial_state(prefix.shape[0], emb.dtype)
        outs = []
        for u in range(prefix.shape[1]):
            h, state = self.cell(emb[:, u], state)
            outs.append(h)
        return torch.stack(outs, dim=1)

    def step(self, token: torch.Tensor, state):
        return self.cell(self.embed(token), state)


def label_encode(prefix: Sequence[int], label_encoder: LabelEncoder) -> torch.Tensor:
    """States for every position of ``prefix`` (which must start with sos)."""
    return label_encoder(torch.as_tensor([list(prefix)], dtype=torch.long))[0]


class JointNetwork(nn.Module):
    def __init__(self, d_acoustic: int, d_label: int, d_joint: int, n_out: int):
        super().__init__()
        self.d_acoustic = d_acoustic
        self.d_label = d_label
        self.acoustic = nn.Linear(d_acoustic, d_joint)
        self.label = nn.Linear(d_label, d_joint, bias=False)
        self.output = nn.Linear(d_joint, n_out)

    def forward(self, h_ae: torch.Tensor, h_le: torch.Tensor) -> torch.Tensor:
        """Log-probabilities; broadcasting ``(B,T,1,d)`` against ``(B,1,U+1,d)`` gives the lattice."""
        if h_ae.shape[-1] != self.d_acoustic or h_le.shape[-1] != self.d_label:
            raise ValueError("joint input widths do not match the network")
        return F.log_softmax(self.output(torch.tanh(self.acoustic(h_ae) + self.label(h_le))), dim=-1)


def joint(h_ae: torch.Tensor, h_le: torch.Tensor, net: JointNetwork) -> torch.Tensor:
    return net(h_ae, h_le)


def rnnt_loss_batch(lattice: torch.Tensor, targets: torch.Tensor, lengths: torch.Tensor,
                    target_lengths: torch.Tensor) -> torch.Tensor:
    """Per-utterance transducer loss over a padded ``(B, T, U+1, V)`` log-prob lattice.

    The forward variables are swept along anti-diagonals ``k = t + u`` so each step
    is one vectorized update over ``u``.
    """
    n_batch, t_max, u_1, _ = lattice.shape
    lat = lattice.clamp_min(LOG_ZERO)
    blank = lat[..., BLANK]                                        # (B, T, U+1)
    tgt = targets[:, : u_1 - 1].clamp_min(0)
    if u_1 > 1:
        emit = lat[:, :, :-1, :].gather(3, tgt[:, None, :, None].expand(n_batch, t_max, u_1 - 1, 1))[..., 0]
    else:
        emit = lat.new_zeros(n_batch, t_max, 0)

    n_diag = t_max + u_1 - 1
    u_idx = torch.arange(u_1)
    neg = lat.new_full((n_batch, 1), LOG_ZERO)

    def skew(x, u_off):
        # out[:, k, u] = x[:, k - u, u - u_off] for valid k - u in [0, T)
        t_of = torch.arange(n_diag)[:, None] - u_idx[None, :]
        ok = (t_of >= 0) & (t_of < t_max) & (u_idx[None, :] >= u_off)
        cols = (u_idx - u_off).clamp(0, max(x.shape[2] - 1, 0))
        if x.shape[2] == 0:
            return lat.new_full((n_batch, n_diag, u_1), LOG_ZERO), ok
        vals = x[:, t_of.clamp(0, t_max - 1), cols[None, :].expand(n_diag, u_1)]
        return torch.where(ok[None], vals, torch.full_like(vals, LOG_ZERO)), ok

    blank_sk, ok = skew(blank, 0)
    emit_sk, _ = skew(emit, 1)

    alphas = []
    alpha = torch.where(u_idx[None, :] == 0, lat.new_zeros(n_batch, u_1), lat.new_full((n_batch, u_1), LOG_ZERO))
    alphas.append(alpha)
    for k in range(1, n_diag):
        from_blank = alpha + blank_sk[:, k - 1]
        from_emit = torch.cat([neg, alpha[:, :-1] + emit_sk[:, k, 1:]], dim=1)
        alpha = torch.logaddexp(from_blank, from_emit)
        alpha = torch.where(ok[k][None], alpha, torch.full_like(alpha, LOG_ZERO))
        alphas.append(alpha)
    alphas = torch.stack(alphas, dim=1)                           # (B, K, U+1)

    k_end = lengths - 1 + target_lengths
    final_alpha = alphas[torch.arange(n_batch), k_end, target_lengths]
    final_blank = blank[torch.arange(n_batch), lengths - 1, target_lengths]
    return -(final_alpha + final_blank)


def rnnt_loss(lattice, y: Sequence[int]) -> tuple[float, np.ndarray]:
    """Loss of one ``(T, U+1, V)`` lattice and its gradient w.r.t. the lattice."""
    y = [int(t) for t in y]
    lat = torch.as_tensor(np.asarray(lattice), dtype=torch.float64).clone().requires_grad_(True)
    n_frames, u_1, _ = lat.shape
    if u_1 != len(y) + 1:
        raise ValueError(f"lattice has {u_1} label positions, target needs {len(y) + 1}")
    if n_frames < 1:
        raise ValueError("lattice needs at least one frame")
    targets = torch.tensor([y if y else [0]], dtype=torch.long)
    loss = rnnt_loss_batch(lat[None], targets, torch.tensor([n_frames]), torch.tensor([len(y)]))[0]
    loss.backward()
    return loss.item(), lat.grad.numpy()


class TransducerModel(nn.Module):
    def __init__(self, vocab: Vocabulary, enc: EncoderConfig, label_width: int = 64, joint_width: int = 64):
        super().__init__()
        self.vocab = vocab
        self.encoder = TransformerEncoder(enc)
        self.label_encoder = LabelEncoder(vocab.size, label_width)
        self.joint = JointNetwork(enc.d_model, label_width, joint_width, vocab.n_content + 1)

    def lattice(self, h_ae: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
        """``h_ae`` (B, T, d), ``targets`` (B, U) padded -> (B, T, U+1, V) log-probs."""
        sos = torch.full((targets.shape[0], 1), self.vocab.sos, dtype=torch.long)
        prefix = torch.cat([sos, targets.clamp_min(0)], dim=1)
        h_le = self.label_encoder(prefix)
        return self.joint(h_ae[:, :, None, :], h_le[:, None, :, :])

    def forward(self, feats, lengths, targets, target_lengths, policy: AttentionPolicy = Chunk(4)):
        h_ae = self.encoder(feats, policy, lengths)
        return rnnt_loss_batch(self.lattice(h_ae, targets), targets, lengths, target_lengths)


@dataclass
class Emission:
    token: int
    frame: int
    logp: float = 0.0


@dataclass
class GreedyResult:
    tokens: list[int]
    emissions: list[Emission]
    score: float
    cap_hits: int = 0


@torch.no_grad()
def transducer_greedy(h_ae: torch.Tensor, model: TransducerModel, max_symbols_per_frame: int = 5) -> GreedyResult:
    """Frame-synchronous greedy search; records the frame at which each token is emitted."""
    if max_symbols_per_frame < 1:
        raise ValueError("max_symbols_per_frame must be >= 1")
    le = model.label_encoder
    h_le, state = le.step(torch.tensor(model.vocab.sos), le.cell.initial_state(dtype=h_ae.dtype))
    tokens, emissions, score, cap_hits = [], [], 0.0, 0
    for t in range(h_ae.shape[0]):
        for n_sym in range(max_symbols_per_frame + 1):
            logp = model.joint(h_ae[t], h_le)
            if n_sym == max_symbols_per_frame:
                # cap reached: the frame is closed by a forced blank
                cap_hits += 1
                score += float(logp[BLANK])
                break
            k = int(logp.argmax())
            score += float(logp[k])
            if k == BLANK:
                break
            tokens.append(k)
            emissions.append(Emission(k, t, float(logp[k])))
            h_le, state = le.step(torch.tensor(k), state)
    return GreedyResult(tokens, emissions, score, cap_hits)


@dataclass
class _Hyp:
    prefix: tuple
    score: float
    h_le: torch.Tensor = field(repr=False)
    state: tuple = field(repr=False)
    frames: tuple = ()


def _rank(h: _Hyp):
    return (-h.score, len(h.prefix), h.prefix)


def _merge(pool: dict, hyp: _Hyp) -> None:
    old = pool.get(hyp.prefix)
    if old is None:
        pool[hyp.prefix] = hyp
    else:
        keep = old if _rank(old) <= _rank(hyp) else hyp
        pool[hyp.prefix] = _Hyp(hyp.prefix, float(np.logaddexp(old.score, hyp.score)), keep.h_le, keep.state, keep.frames)


@dataclass
class BeamResult:
    tokens: list[int]
    score: float
    emissions: list[Emission]


@torch.no_grad()
def transducer_beam(h_ae: torch.Tensor, model: TransducerModel, beam: int = 10,
                    max_symbols_per_frame: int = 5) -> BeamResult:
    """Frame-synchronous beam search with prefix merging (log-sum-exp).

    Per frame, up to ``max_symbols_per_frame`` expansion rounds run over the hypotheses
    still active in that frame. Each round pools blank extensions (which finish the
    frame) and label extensions (which stay active) and keeps the ``beam`` best,
    ranked by score, then shorter prefix, then lexicographic prefix. With ``beam=1``
    this reduces to :func:`transducer_greedy`.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    le = model.label_encoder
    memo = {}

    def advance(hyp: _Hyp, token: int):
        key = hyp.prefix + (token,)
        if key not in memo:
            memo[key] = le.step(torch.tensor(token), hyp.state)
        return memo[key]

    h0, s0 = le.step(torch.tensor(model.vocab.sos), le.cell.initial_state(dtype=h_ae.dtype))
    hyps = [_Hyp((), 0.0, h0, s0)]
    for t in range(h_ae.shape[0]):
        done: dict = {}
        active = hyps
        for n_round in range(max_symbols_per_frame + 1):
            if not active:
                break
            h_le = torch.stack([h.h_le for h in active])
            logp = model.joint(h_ae[t].expand(len(active), -1), h_le)
            if n_round == max_symbols_per_frame:
                for h, lp in zip(active, logp):
                    _merge(done, _Hyp(h.prefix, h.score + float(lp[BLANK]), h.h_le, h.state, h.frames))
                break
            cands = []
            for h, lp in zip(active, logp):
                cands.append(("blank", h, BLANK, h.score + float(lp[BLANK])))
                top = torch.topk(lp[1:], min(beam, lp.shape[0] - 1))
                for v, i in zip(top.values.tolist(), top.indices.tolist()):
                    cands.append(("label", h, i + 1, h.score + v))
            cands.sort(key=lambda c: (-c[3], len(c[1].prefix) + (c[0] == "label"),
                                      c[1].prefix + ((c[2],) if c[0] == "label" else ())))
            nxt: dict = {}
            for kind, h, tok, sc in cands[:beam]:
                if kind == "blank":
                    _merge(done, _Hyp(h.prefix, sc, h.h_le, h.state, h.frames))
                else:
                    h_new, st_new = advance(h, tok)
                    _merge(nxt, _Hyp(h.prefix + (tok,), sc, h_new, st_new, h.frames + (t,)))
            active = sorted(nxt.values(), key=_rank)
        hyps = sorted(done.values(), key=_rank)[:beam]
    best = hyps[0]
    return BeamResult(list(best.prefix), best.score,
                      [Emission(k, f) for k, f in zip(best.prefix, best.frames)])
