"""Mask-CTC: random target masking, CMLM mask prediction and the joint CTC objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .ctc import ctc_loss_batch
from .data import Vocabulary
from .nn import DecoderConfig, EncoderConfig, TransformerDecoder, TransformerEncoder
from .streaming import Full

CMLM_NEG = -1e9


@dataclass
class MaskedPair:
    """Observed tokens (masked slots replaced by the mask id) and the masked slots."""

    y_obs: np.ndarray
    positions: np.ndarray
    y_true: np.ndarray

    @property
    def y_mask(self) -> np.ndarray:
        return self.y_true[self.positions]


def sample_mask(y: Sequence[int], rng: np.random.Generator, mask_id: int) -> MaskedPair:
    """Mask ``Uniform{1..|y|}`` positions chosen uniformly without replacement."""
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("cannot mask an empty sequence")
    n_mask = int(rng.integers(1, y.size + 1))
    positions = np.sort(rng.choice(y.size, size=n_mask, replace=False))
    y_obs = y.copy()
    y_obs[positions] = mask_id
    return MaskedPair(y_obs, positions, y)


def cmlm_loss(logits: torch.Tensor, pair: MaskedPair) -> torch.Tensor:
    """Mean negative log-likelihood of the true tokens at the masked slots only."""
    if len(pair.positions) == 0:
        raise ValueError("no masked positions")
    if logits.shape[0] != len(pair.y_true):
        raise ValueError("logits must cover every target position")
    pos = torch.as_tensor(pair.positions, dtype=torch.long)
    truth = torch.as_tensor(pair.y_true[pair.positions], dtype=torch.long)
    logp = F.log_softmax(logits[pos], dim=-1)
    return -logp.gather(1, truth[:, None]).mean()


def cmlm_loss_batch(logits: torch.Tensor, targets: torch.Tensor, masked: torch.Tensor) -> torch.Tensor:
    """Per-utterance CMLM loss for padded ``(B, U, V)`` logits; ``masked`` is (B, U) bool."""
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(2, targets.clamp(0, logits.shape[-1] - 1)[..., None])[..., 0]
    weights = masked.to(nll.dtype)
    return (nll * weights).sum(1) / weights.sum(1).clamp_min(1.0)


def maskctc_loss(grid: torch.Tensor, decoder_logits: torch.Tensor, y: Sequence[int], pair: MaskedPair,
                 alpha: float = 0.3) -> torch.Tensor:
    """``alpha * CTC + (1 - alpha) * CMLM`` for one utterance."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    y = [int(t) for t in y]
    ctc = ctc_loss_batch(grid[None], torch.tensor([grid.shape[0]]), torch.tensor([y]), torch.tensor([len(y)]))[0]
    return alpha * ctc + (1 - alpha) * cmlm_loss(decoder_logits, pair)


class MaskCTCModel(nn.Module):
    """Full-attention encoder with a CTC head and a non-causal CMLM decoder."""

    def __init__(self, vocab: Vocabulary, enc: EncoderConfig, dec: DecoderConfig):
        super().__init__()
        self.vocab = vocab
        self.encoder = TransformerEncoder(enc)
        self.ctc_head = nn.Linear(enc.d_model, vocab.n_content + 1)
        self.decoder = TransformerDecoder(vocab.size, vocab.n_content + 1, dec)

    def ctc_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.ctc_head(h), dim=-1)

    def cmlm_logits(self, y_obs: torch.Tensor, memory: torch.Tensor, y_valid: torch.Tensor | None = None,
                    memory_valid: torch.Tensor | None = None) -> torch.Tensor:
        self_mask = None if y_valid is None else y_valid[:, None, :]
        logits = self.decoder(y_obs, memory, self_mask, memory_valid)
        # blank is never a CMLM target
        return logits.index_fill(-1, torch.tensor([0]), CMLM_NEG)

    def forward(self, feats, lengths, y_obs, y_lengths):
        h = self.encoder(feats, Full(), lengths)
        frames_ok = torch.arange(feats.shape[1])[None, :] < lengths[:, None]
        tok_ok = torch.arange(y_obs.shape[1])[None, :] < y_lengths[:, None]
        return self.ctc_log_probs(h), self.cmlm_logits(y_obs, h, tok_ok, frames_ok)


@torch.no_grad()
def maskfill_decode(model: MaskCTCModel, encoder_out: torch.Tensor, y_init: Sequence[int]) -> list[int]:
    """Fill every mask slot of ``y_init`` with the decoder's argmax in a single pass."""
    y = torch.as_tensor(np.asarray(y_init, dtype=np.int64))
    is_mask = y == model.vocab.mask
    if not bool(is_mask.any()):
        return y.tolist()
    logits = model.cmlm_logits(y[None], encoder_out[None])[0]
    filled = torch.where(is_mask, logits.argmax(-1), y)
    return filled.tolist()
