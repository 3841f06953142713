"""Contextual block streaming ASR: block encoder + CTC head + attention decoder,
decoded by block-synchronous beam search with block boundary detection (BBD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .data import Vocabulary
from .nn import DecoderConfig, EncoderConfig, TransformerDecoder, TransformerEncoder, causal_mask
from .streaming import Block, BlockRange, encode_blocks, encode_blocks_batch, stream_blocks

logger = logging.getLogger(__name__)


class CBSModel(nn.Module):
    def __init__(self, vocab: Vocabulary, enc: EncoderConfig, dec: DecoderConfig):
        super().__init__()
        self.vocab = vocab
        self.encoder = TransformerEncoder(enc)
        self.ctc_head = nn.Linear(enc.d_model, vocab.n_content + 1)
        # outputs: index 0 unused (blank), content ids, and eos in the last slot
        self.decoder = TransformerDecoder(vocab.size, vocab.n_content + 2, dec)

    @property
    def eos_index(self) -> int:
        return self.vocab.n_content + 1

    def ctc_log_probs(self, h: torch.Tensor) -> torch.Tensor:
        return F.log_softmax(self.ctc_head(h), dim=-1)

    def decoder_log_probs(self, prefix: torch.Tensor, memory: torch.Tensor,
                          memory_valid: torch.Tensor | None = None,
                          prefix_valid: torch.Tensor | None = None) -> torch.Tensor:
        """Next-token log-probs for every position of ``prefix`` (B, L) under a causal mask."""
        mask = causal_mask(prefix.shape[1])
        if prefix_valid is not None:
            mask = mask[None] & prefix_valid[:, None, :]
        logits = self.decoder(prefix, memory, mask, memory_valid)
        logits = logits.index_fill(-1, torch.tensor([0]), -1e9)
        return F.log_softmax(logits, dim=-1)

    def encode(self, feats: torch.Tensor, lengths: torch.Tensor, spec: Block) -> torch.Tensor:
        return encode_blocks_batch(self.encoder, feats, lengths, spec)


@dataclass
class BeamHypothesis:
    tokens: tuple        # y_0 = sos first
    score: float

    @property
    def content(self) -> list[int]:
        return list(self.tokens[1:])


@dataclass
class BBDResult:
    hyps: list[BeamHypothesis]
    boundary: int
    reason: str          # "eos", "repetition" or "cap"
    ended: list = field(default_factory=list)


def _rank(h: BeamHypothesis):
    return (-h.score, h.tokens)


@torch.no_grad()
def bbd_step(model: CBSModel, hyps: list[BeamHypothesis], memory: torch.Tensor, beam: int,
             max_expansions: int, final: bool = False) -> BBDResult:
    """Expand hypotheses over the encoded blocks seen so far until BBD fires.

    Each expansion extends every hypothesis by one token and keeps the ``beam`` best
    (score, then lexicographic). The block stops when the best candidate is eos or
    repeats its hypothesis' previous token; that expansion is discarded and the
    boundary is the confirmed token count. In the final block repetition is not a
    stopping criterion and an eos candidate finishes its hypothesis.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    eos_out = model.eos_index
    ended = []
    for _ in range(max_expansions):
        prefix = torch.tensor([h.tokens for h in hyps], dtype=torch.long)
        logp = model.decoder_log_probs(prefix, memory.expand(len(hyps), -1, -1))[:, -1]
        cands = []
        for h, lp in zip(hyps, logp):
            top = torch.topk(lp, min(beam + 1, lp.shape[0]))
            for v, i in zip(top.values.tolist(), top.indices.tolist()):
                cands.append((h.score + v, h, i))
        cands.sort(key=lambda c: (-c[0], c[1].tokens + (c[2],)))
        score, top_h, tok = cands[0]
        is_eos = tok == eos_out
        repeated = not final and len(top_h.tokens) > 1 and tok == top_h.tokens[-1]
        if is_eos and not final:
            return BBDResult(hyps, len(hyps[0].tokens) - 1, "eos", ended)
        if repeated:
            return BBDResult(hyps, len(hyps[0].tokens) - 1, "repetition", ended)
        if is_eos:
            # final block: the best candidate finishes the utterance
            return BBDResult([BeamHypothesis(top_h.tokens, score)], len(top_h.tokens) - 1, "eos", ended)
        nxt = []
        for sc, h, t in cands[:beam]:
            if t == eos_out:
                ended.append(BeamHypothesis(h.tokens, sc))
            else:
                nxt.append(BeamHypothesis(h.tokens + (t,), sc))
        hyps = nxt
    logger.debug("BBD expansion cap (%d) reached", max_expansions)
    return BBDResult(hyps, len(hyps[0].tokens) - 1, "cap", ended)


@dataclass
class BlockState:
    block: BlockRange
    hyps: list[BeamHypothesis]
    boundary: int
    reason: str

    @property
    def confirmed(self) -> list[int]:
        return self.hyps[0].content[: self.boundary]


@dataclass
class CBSResult:
    tokens: list[int]
    boundaries: list[int]
    reasons: list[str]
    cap_hits: int = 0


def cbs_stream(model: CBSModel, feats: torch.Tensor, spec: Block, beam: int = 10, max_len: int | None = None):
    """Block-synchronous decoding; yields a :class:`BlockState` after every block.

    The last yielded state carries the finished hypotheses. Blocks cap their
    expansions at ``2 * N_c``; the final block is capped at ``max_len`` (default 2T).
    """
    n_frames = feats.shape[0]
    max_len = max_len or 2 * n_frames
    hyps = [BeamHypothesis((model.vocab.sos,), 0.0)]
    outs = []
    blocks = list(stream_blocks(model.encoder, feats, spec))
    ended = []
    for blk, h, _ in blocks:
        outs.append(h)
        memory = torch.cat(outs, dim=0)[None]
        final = blk.index == len(blocks)
        cap = max_len if final else 2 * spec.center
        res = bbd_step(model, hyps, memory, beam, cap, final=final)
        hyps = res.hyps
        ended += res.ended
        if final:
            if res.reason == "eos":
                best = hyps[0]
            else:
                best = sorted(ended + hyps, key=_rank)[0]
            yield BlockState(blk, [best], len(best.tokens) - 1, res.reason)
        else:
            yield BlockState(blk, hyps, res.boundary, res.reason)


def cbs_beam_search(model: CBSModel, feats: torch.Tensor, spec: Block, beam: int = 10) -> CBSResult:
    """Decode one utterance; returns the best hypothesis (eos stripped) and the index boundaries."""
    with torch.no_grad():
        states = list(cbs_stream(model, feats, spec, beam))
    tokens = states[-1].hyps[0].content
    boundaries = [s.boundary for s in states]
    reasons = [s.reason for s in states]
    return CBSResult(tokens, boundaries, reasons, reasons.count("cap"))


@torch.no_grad()
def cbs_ctc_posteriors(model: CBSModel, feats: torch.Tensor, spec: Block) -> torch.Tensor:
    """CTC log-posteriors of the streaming block encoder, for spike analysis."""
    return model.ctc_log_probs(encode_blocks(model.encoder, feats, spec))
