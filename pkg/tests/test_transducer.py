import math

import numpy as np
import pytest
import torch

from maskstream.data import Vocabulary
from maskstream.nn import EncoderConfig, grad_check
from maskstream.transducer import (JointNetwork, LabelEncoder, TransducerModel, joint, label_encode,
                                   rnnt_loss, rnnt_loss_batch, transducer_beam, transducer_greedy)
from oracles import random_log_softmax, rnnt_brute_force


def test_single_path_lattice():
    lattice = np.log(np.full((1, 2, 2), 0.5))
    assert rnnt_loss(lattice, [1])[0] == pytest.approx(1.386294, abs=1e-6)


def test_two_frame_two_paths():
    lattice = np.log(np.full((2, 2, 2), 0.5))
    assert rnnt_loss(lattice, [1])[0] == pytest.approx(1.386294, abs=1e-6)


def test_empty_target_is_sum_of_blanks(rng):
    lattice = random_log_softmax(rng, (4, 1, 3))
    assert rnnt_loss(lattice, [])[0] == pytest.approx(-lattice[:, 0, 0].sum(), abs=1e-9)


def test_matches_brute_force(rng):
    for _ in range(60):
        n_frames, n_labels = int(rng.integers(1, 5)), int(rng.integers(0, 4))
        y = [int(k) for k in rng.integers(1, 4, size=n_labels)]
        lattice = random_log_softmax(rng, (n_frames, n_labels + 1, 4))
        assert rnnt_loss(lattice, y)[0] == pytest.approx(rnnt_brute_force(lattice, y), abs=1e-6)


def test_batch_with_padding_matches_single(rng):
    lats = [random_log_softmax(rng, (t, u + 1, 4)) for t, u in ((4, 2), (2, 1), (3, 0))]
    ys = [[1, 3], [2], []]
    big = torch.zeros((3, 4, 3, 4), dtype=torch.float64)
    for i, lat in enumerate(lats):
        big[i, : lat.shape[0], : lat.shape[1]] = torch.from_numpy(lat)
    out = rnnt_loss_batch(big, torch.tensor([[1, 3], [2, 0], [0, 0]]), torch.tensor([4, 2, 3]),
                          torch.tensor([2, 1, 0]))
    for i in range(3):
        assert float(out[i]) == pytest.approx(rnnt_loss(lats[i], ys[i])[0], abs=1e-9)


def test_loss_gradient_against_central_differences(rng):
    logits = torch.from_numpy(rng.normal(size=(3, 3, 4)))

    def f(p):
        lat = torch.log_softmax(p["x"], -1)[None]
        return rnnt_loss_batch(lat, torch.tensor([[2, 1]]), torch.tensor([3]), torch.tensor([2]))[0]

    assert grad_check(f, {"x": logits}) < 1e-3


def test_joint_zero_weights_gives_uniform():
    net = JointNetwork(4, 4, 6, 5)
    for p in net.parameters():
        torch.nn.init.zeros_(p)
    out = joint(torch.zeros(4), torch.zeros(4), net)
    np.testing.assert_allclose(out.exp().detach().numpy(), np.full(5, 0.2), atol=1e-7)


def test_joint_normalized_and_gradient(rng):
    torch.manual_seed(0)
    net = JointNetwork(6, 5, 8, 4).double()
    h_ae, h_le = torch.randn(3, 1, 6, dtype=torch.float64), torch.randn(1, 2, 5, dtype=torch.float64)
    lattice = joint(h_ae, h_le, net)
    assert lattice.shape == (3, 2, 4)
    np.testing.assert_allclose(lattice.exp().sum(-1).detach().numpy(), 1.0, atol=1e-6)
    names = dict(net.named_parameters())

    def f(p):
        x = torch.func.functional_call(net, p, (h_ae, h_le))
        return (x * torch.linspace(-1, 1, 4, dtype=x.dtype)).sum()

    assert grad_check(f, names) < 1e-3


def test_label_encoder_prefix_causality():
    torch.manual_seed(0)
    le = LabelEncoder(10, 8)
    a = label_encode([9, 1, 2, 3], le)
    b = label_encode([9, 1, 2, 7], le)
    assert a.shape == (4, 8)
    assert torch.equal(a[:3], b[:3]) and not torch.equal(a[3], b[3])
    assert torch.equal(label_encode([9], le), a[:1])
    assert torch.equal(label_encode([9, 1, 2, 3], le), a)


def _model(seed=0, n_content=4):
    torch.manual_seed(seed)
    return TransducerModel(Vocabulary(n_content), EncoderConfig(input_dim=4, d_model=8, n_heads=2, d_ff=16,
                                                                n_layers=1), label_width=8, joint_width=8).eval()


def _force(model, fn):
    """Replace the joint network by a hand-written function of (frame, emitted count)."""

    class Forced(torch.nn.Module):
        def forward(self, h_ae, h_le):
            return fn(h_ae, h_le)

    model.joint = Forced()
    return model


def test_greedy_all_blank_is_empty():
    model = _force(_model(), lambda a, b: torch.log_softmax(
        torch.tensor([5.0, 0, 0, 0, 0]).expand(*torch.broadcast_shapes(a.shape[:-1], b.shape[:-1]), 5), -1))
    out = transducer_greedy(torch.zeros(6, 8), model)
    assert out.tokens == [] and out.emissions == []


def test_greedy_forced_emission_frame():
    model = _model()
    le_sos = label_encode([model.vocab.sos], model.label_encoder)[0]

    def fn(h_ae, h_le):
        # emit token 3 at frame 2 from the initial label state, blank everywhere else
        logits = torch.tensor([5.0, 0, 0, 0, 0])
        if h_ae[0] == 2 and torch.equal(h_le, le_sos):
            logits = torch.tensor([0.0, 0, 0, 5, 0])
        return torch.log_softmax(logits, -1)

    _force(model, fn)
    h_ae = torch.arange(5, dtype=torch.float32)[:, None].expand(5, 8).contiguous()
    out = transducer_greedy(h_ae, model)
    assert out.tokens == [3]
    assert [(e.token, e.frame) for e in out.emissions] == [(3, 2)]


def test_symbol_cap_per_frame():
    model = _force(_model(), lambda a, b: torch.log_softmax(torch.tensor([0.0, 5, 0, 0, 0]), -1))
    out = transducer_greedy(torch.zeros(3, 8), model, max_symbols_per_frame=2)
    assert len(out.tokens) == 6 and out.cap_hits == 3


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_equals_greedy_and_wider_beam_scores_no_lower(seed):
    model = _model(seed)
    h_ae = torch.randn(7, 8, generator=torch.Generator().manual_seed(seed)) * 2
    greedy = transducer_greedy(h_ae, model)
    frames = [e.frame for e in greedy.emissions]
    assert frames == sorted(frames)
    one = transducer_beam(h_ae, model, beam=1)
    assert one.tokens == greedy.tokens
    assert one.score == pytest.approx(greedy.score, abs=1e-5)
    wide = transducer_beam(h_ae, model, beam=10)
    assert wide.score >= one.score - 1e-6
    assert transducer_beam(h_ae, model, beam=10).tokens == wide.tokens


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        transducer_beam(torch.zeros(2, 8), _model(), beam=0)


def test_model_loss_matches_lattice_brute_force():
    model = _model().double()
    feats = torch.randn(1, 3, 4, dtype=torch.float64)
    y = torch.tensor([[2, 1]])
    from maskstream.streaming import Chunk

    loss = model(feats, torch.tensor([3]), y, torch.tensor([2]), Chunk(2))
    h = model.encoder(feats, Chunk(2))
    lattice = model.lattice(h, y)[0].detach().numpy()
    assert float(loss[0]) == pytest.approx(rnnt_brute_force(lattice, [2, 1]), abs=1e-9)
    assert math.isfinite(float(loss[0]))
