import math

import numpy as np
import pytest
import torch

from maskstream import ContextualBlockASR
from maskstream.cbs import BeamHypothesis, CBSModel, bbd_step, cbs_beam_search, cbs_stream
from maskstream.data import Vocabulary
from maskstream.nn import DecoderConfig, EncoderConfig
from maskstream.streaming import Block, block_split

VOCAB = Vocabulary(4)      # content 1..4, eos output index 5, sos id 7
EOS = 5


class Scripted:
    """Stand-in exposing the decoder interface bbd_step uses; ``script(content)`` picks the next output."""

    def __init__(self, script):
        self.vocab = VOCAB
        self.eos_index = EOS
        self.script = script
        self.calls = 0

    def decoder_log_probs(self, prefix, memory, *_):
        self.calls += 1
        out = torch.full((prefix.shape[0], prefix.shape[1], 6), math.log(0.02))
        for i, row in enumerate(prefix.tolist()):
            out[i, -1, 0] = -1e9
            out[i, -1, self.script(row[1:])] = math.log(0.9)
        return out


def _start():
    return [BeamHypothesis((VOCAB.sos,), 0.0)]


@pytest.mark.parametrize("final", [False, True])
def test_immediate_eos_keeps_tokens(final):
    res = bbd_step(Scripted(lambda c: EOS), _start(), torch.zeros(1, 3, 8), beam=3, max_expansions=8, final=final)
    assert res.reason == "eos" and res.boundary == 0
    assert res.hyps[0].tokens == (VOCAB.sos,)


def test_repetition_discards_second_token():
    script = {0: 2, 1: 3, 2: 3}
    res = bbd_step(Scripted(lambda c: script[len(c)]), _start(), torch.zeros(1, 3, 8), beam=1, max_expansions=8)
    assert res.reason == "repetition"
    assert res.hyps[0].content == [2, 3] and res.boundary == 2


def test_repetition_not_a_stop_in_final_block():
    script = {0: 2, 1: 2, 2: EOS}
    res = bbd_step(Scripted(lambda c: script[len(c)]), _start(), torch.zeros(1, 3, 8), beam=1, max_expansions=8,
                   final=True)
    assert res.reason == "eos" and res.hyps[0].content == [2, 2]


def test_expansion_cap():
    model = Scripted(lambda c: 1 + len(c) % 2)
    res = bbd_step(model, _start(), torch.zeros(1, 3, 8), beam=2, max_expansions=5)
    assert res.reason == "cap" and model.calls == 5
    assert res.hyps[0].content == [1, 2, 1, 2, 1]


def test_beam_must_be_positive():
    with pytest.raises(ValueError):
        bbd_step(Scripted(lambda c: EOS), _start(), torch.zeros(1, 3, 8), beam=0, max_expansions=2)


def _model(seed=0):
    torch.manual_seed(seed)
    return CBSModel(VOCAB, EncoderConfig(4, 8, 2, 16, 2), DecoderConfig(8, 2, 16, 1)).eval()


@pytest.mark.parametrize("n_frames", [1, 4, 9, 13])
def test_one_boundary_record_per_block(n_frames):
    spec = Block(3, 4, 2)
    res = cbs_beam_search(_model(), torch.randn(n_frames, 4), spec, beam=3)
    assert len(res.boundaries) == math.ceil(n_frames / spec.center) == len(block_split(n_frames, spec))
    assert EOS not in res.tokens and all(1 <= t <= 4 for t in res.tokens)


def test_confirmed_prefix_ignores_later_frames():
    spec = Block(2, 3, 1)
    gen = torch.Generator().manual_seed(3)
    for seed in range(6):
        model = _model(seed)
        x = torch.randn(14, 4, generator=gen)
        blocks = block_split(14, spec)
        for b in range(len(blocks) - 1):
            y = x.clone()
            y[blocks[b].end:] += torch.randn(14 - blocks[b].end, 4, generator=gen) * 3
            sa = list(cbs_stream(model, x, spec, beam=2))[b]
            sb = list(cbs_stream(model, y, spec, beam=2))[b]
            assert sa.confirmed == sb.confirmed and sa.boundary == sb.boundary


def test_decoder_never_outputs_blank():
    model = _model()
    memory = torch.randn(1, 5, 8)
    logp = model.decoder_log_probs(torch.tensor([[VOCAB.sos, 1, 2]]), memory)
    assert logp.shape == (1, 3, 6)
    assert (logp[..., 0] < -1e8).all()
    assert torch.allclose(logp.exp().sum(-1), torch.ones(1, 3))


def test_partial_targets_keep_tokens_spiking_before_cut():
    est = ContextualBlockASR(n_content=3, block_left=2, block_center=2, block_right=1)
    n = 10
    # tokens 1, 2, 3 spike at frames 1, 4, 8; blank elsewhere
    lp = torch.full((1, n, 4), -20.0)
    lp[0, :, 0] = 0.0
    for tok, frame in ((1, 1), (2, 4), (3, 8)):
        lp[0, frame, :] = -20.0
        lp[0, frame, tok] = 0.0
    batch = {"lengths": torch.tensor([n]), "target_lengths": torch.tensor([3]), "targets": torch.tensor([[1, 2, 3]])}
    stops = [b.central.stop for b in block_split(n, est.spec)][:-1]
    seen_at = {}
    for s in range(40):
        cut, seen = est._partial_targets(lp, batch, np.random.default_rng(s))
        seen_at[int(cut)] = int(seen)
    assert set(seen_at) <= set(stops) and len(seen_at) > 1
    for cut, seen in seen_at.items():
        assert seen == sum(f < cut for f in (1, 4, 8))
