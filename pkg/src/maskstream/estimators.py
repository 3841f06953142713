"""scikit-learn style estimators for the three models.

``X`` is a sequence of ``(T, D)`` float arrays (40 ms frames), ``y`` a sequence of
content-token id arrays. Every estimator supports ``fit``, ``predict``, ``score``
(``1 - TER``) and ``get_params``/``set_params``; trained parameters live in
``checkpoint_``.
"""

from __future__ import annotations

import logging
import time

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import __version__
from .analysis import token_error_rate
from .cbs import CBSModel, cbs_beam_search, cbs_ctc_posteriors
from .checkpoint import CBS_MAPPING, TRANSDUCER_MAPPING, Checkpoint, average_params, config_hash, transplant
from .ctc import ctc_greedy, ctc_loss_batch, ctc_spikes, ctc_viterbi_align
from .data import Vocabulary, augment
from .maskctc import MaskCTCModel, cmlm_loss_batch, maskfill_decode, sample_mask
from .nn import Adam, DecoderConfig, EncoderConfig, load_parameter_set
from .streaming import Block, Chunk, Full, block_split
from .transducer import TransducerModel, transducer_beam, transducer_greedy
from .validation import check_features, check_targets, pad_features, pad_tokens

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


def _set_threads():
    if torch.get_num_threads() > 4:
        torch.set_num_threads(4)


class _SequenceModel(BaseEstimator):
    """Shared training loop: epochs of shuffled length-bucketed minibatches, one
    parameter snapshot per epoch, final weights = mean of the ``k_best`` snapshots
    ranked by the validation criterion."""

    _arch = ""
    _select_higher = False

    # -- hooks --------------------------------------------------------------
    def _build(self, feat_dim: int):
        raise NotImplementedError

    def _batch_loss(self, model, batch, rng, train: bool):
        raise NotImplementedError

    def _val_metric(self, model, batch) -> tuple[float, float]:
        """(summed metric, weight) for one validation batch; default = loss per utterance."""
        with torch.no_grad():
            loss = self._batch_loss(model, batch, np.random.default_rng(0), train=False)
        return float(loss) * len(batch["feats"]), len(batch["feats"])

    def _init_mapping(self):
        return ()

    # -- helpers -------------------------------------------------------------
    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.n_content)

    def _enc_cfg(self, feat_dim):
        return EncoderConfig(feat_dim, self.d_model, self.n_heads, self.d_ff, self.enc_layers, self.dropout)

    def _dec_cfg(self):
        return DecoderConfig(self.d_model, self.n_heads, self.d_ff, self.dec_layers, self.dropout)

    def _make_batch(self, xs, ys, rng=None):
        if rng is not None and self.specaug_width > 0:
            xs = [augment(x, self.specaug_time, self.specaug_freq, self.specaug_width, int(rng.integers(2**31)))
                  for x in xs]
        feats, lengths = pad_features(xs)
        targets, target_lengths = pad_tokens(ys)
        return {"feats": feats, "lengths": lengths, "targets": targets, "target_lengths": target_lengths,
                "ys": ys}

    def _batches(self, xs, ys, rng=None):
        order = np.arange(len(xs)) if rng is None else rng.permutation(len(xs))
        bucket = self.batch_size * 8
        for i in range(0, len(order), bucket):
            group = sorted(order[i:i + bucket], key=lambda j: xs[j].shape[0])
            chunks = [group[k:k + self.batch_size] for k in range(0, len(group), self.batch_size)]
            if rng is not None:
                chunks = [chunks[k] for k in rng.permutation(len(chunks))]
            for idx in chunks:
                yield self._make_batch([xs[j] for j in idx], [ys[j] for j in idx], rng)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet")

    def _meta(self, **extra):
        params = self.get_params()
        params["init"] = None if params.get("init") is None else "checkpoint"
        meta = {"arch": self._arch, "params": params, "feat_dim": self.n_features_in_,
                "config_hash": config_hash(params), "version": __version__}
        meta.update(extra)
        return meta

    # -- public API ------------------------------------------------------------
    def fit(self, X, y, X_val=None, y_val=None):
        """Train from scratch (or from ``init``); validation data defaults to a held-out split."""
        _set_threads()
        xs = check_features(X)
        self.n_features_in_ = xs[0].shape[1]
        ys = check_targets(y, self.n_content, [x.shape[0] for x in xs], ctc_feasible=True)
        rng = np.random.default_rng(self.seed)
        if X_val is None:
            n_val = int(round(len(xs) * self.val_fraction))
            perm = rng.permutation(len(xs))
            val_idx, tr_idx = perm[:n_val], np.sort(perm[n_val:])
            xv, yv = [xs[i] for i in val_idx], [ys[i] for i in val_idx]
            xs, ys = [xs[i] for i in tr_idx], [ys[i] for i in tr_idx]
        else:
            xv = check_features(X_val, self.n_features_in_)
            yv = check_targets(y_val, self.n_content, [x.shape[0] for x in xv])

        torch.manual_seed(self.seed)
        model = self._build(self.n_features_in_)
        self.transplant_report_ = None
        if self.init is not None:
            init = self.init if isinstance(self.init, Checkpoint) else Checkpoint.load(self.init)
            self.transplant_report_ = transplant(model, init, self._init_mapping())
        frozen = None
        if self.freeze:
            prefixes = tuple(p for p in str(self.freeze).split(",") if p)
            frozen = lambda name: name.startswith(prefixes)  # noqa: E731
        opt = Adam(model.named_parameters(), lr=self.lr, warmup=self.warmup, frozen=frozen)

        history, snapshots = [], []
        for epoch in range(self.epochs):
            t0 = time.perf_counter()
            model.train()
            total, count = 0.0, 0
            for batch in self._batches(xs, ys, rng):
                loss = self._batch_loss(model, batch, rng, train=True)
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite loss {loss.item()} at epoch {epoch + 1}, step {opt.step_count + 1} "
                        f"(lr={opt.current_lr():.2e})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(batch["feats"])
                count += len(batch["feats"])
            model.eval()
            metric = 0.0
            weight = 0.0
            if xv:
                for batch in self._batches(xv, yv):
                    m, w = self._val_metric(model, batch)
                    metric += m
                    weight += w
            val = metric / weight if weight else float("nan")
            history.append({"epoch": epoch + 1, "train_loss": total / max(count, 1), "val": val,
                            "seconds": round(time.perf_counter() - t0, 3)})
            snapshots.append({n: p.detach().numpy().copy() for n, p in model.named_parameters()})
            if self.verbose:
                logger.info("%s epoch %d train %.4f val %.4f", self._arch, epoch + 1, total / max(count, 1), val)

        vals = np.array([h["val"] for h in history])
        if np.isnan(vals).all():
            chosen = list(range(len(snapshots)))[-self.k_best:]
        else:
            key = -vals if self._select_higher else vals
            chosen = sorted(np.argsort(key, kind="stable")[: self.k_best].tolist())
        averaged = average_params([snapshots[i] for i in chosen])
        load_parameter_set(model, averaged)
        model.eval()
        self.model_ = model
        self.history_ = history
        self.selected_epochs_ = [i + 1 for i in chosen]
        self.checkpoint_ = Checkpoint.from_module(model, self._meta(
            stage=2 if self._arch != "maskctc" else 1, epoch=self.epochs,
            loss_history=[{k: v for k, v in h.items() if k != "seconds"} for h in history],
            selected_epochs=self.selected_epochs_, rng_state=rng.bit_generator.state))
        return self

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint | str):
        ckpt = ckpt if isinstance(ckpt, Checkpoint) else Checkpoint.load(ckpt)
        if ckpt.meta.get("arch") != cls._arch:
            raise ValueError(f"checkpoint holds a {ckpt.meta.get('arch')!r} model, not {cls._arch!r}")
        params = dict(ckpt.meta["params"])
        params["init"] = None
        est = cls(**params)
        est.n_features_in_ = ckpt.meta["feat_dim"]
        model = est._build(est.n_features_in_)
        load_parameter_set(model, ckpt.params)
        model.eval()
        est.model_ = model
        est.history_ = ckpt.meta.get("loss_history", [])
        est.checkpoint_ = ckpt
        return est

    def save(self, path):
        self._check_fitted()
        return self.checkpoint_.save(path)

    def score(self, X, y):
        """``1 - TER`` of :meth:`predict` against ``y``."""
        return 1.0 - token_error_rate([list(t) for t in y], self.predict(X))

    def _tensor(self, x):
        return torch.from_numpy(np.asarray(x, dtype=np.float32))


class MaskCTC(_SequenceModel):
    """Stage-1 Mask-CTC model: full-attention encoder trained with joint CTC + CMLM."""

    _arch = "maskctc"

    def __init__(self, n_content=30, d_model=64, n_heads=4, d_ff=128, enc_layers=4, dec_layers=2,
                 dropout=0.0, ctc_weight=0.3, epochs=20, batch_size=16, lr=1e-3, warmup=200,
                 k_best=3, val_fraction=0.05, specaug_time=0, specaug_freq=0, specaug_width=0,
                 seed=0, init=None, freeze="", verbose=False):
        self.n_content = n_content
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.dropout = dropout
        self.ctc_weight = ctc_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.k_best = k_best
        self.val_fraction = val_fraction
        self.specaug_time = specaug_time
        self.specaug_freq = specaug_freq
        self.specaug_width = specaug_width
        self.seed = seed
        self.init = init
        self.freeze = freeze
        self.verbose = verbose

    def _build(self, feat_dim):
        return MaskCTCModel(self.vocab, self._enc_cfg(feat_dim), self._dec_cfg())

    def _init_mapping(self):
        return ("encoder.", "ctc_head.", "decoder.")

    def _batch_loss(self, model, batch, rng, train):
        pairs = [sample_mask(y, rng, self.vocab.mask) for y in batch["ys"]]
        y_obs, y_len = pad_tokens([p.y_obs for p in pairs], self.vocab.pad)
        masked = torch.zeros_like(y_obs, dtype=torch.bool)
        for i, p in enumerate(pairs):
            masked[i, torch.as_tensor(p.positions)] = True
        ctc_lp, logits = model(batch["feats"], batch["lengths"], y_obs, y_len)
        ctc = ctc_loss_batch(ctc_lp, batch["lengths"], batch["targets"], batch["target_lengths"])
        cmlm = cmlm_loss_batch(logits, batch["targets"], masked)
        return (self.ctc_weight * ctc + (1 - self.ctc_weight) * cmlm).mean()

    def encode(self, x) -> torch.Tensor:
        self._check_fitted()
        with torch.no_grad():
            return self.model_.encoder(self._tensor(x), Full())

    def ctc_posteriors(self, x) -> np.ndarray:
        with torch.no_grad():
            return self.model_.ctc_log_probs(self.encode(x)).numpy()

    def predict(self, X):
        """CTC best-path transcripts."""
        self._check_fitted()
        xs = check_features(X, self.n_features_in_)
        return [ctc_greedy(self.ctc_posteriors(x)) for x in xs]

    def maskfill(self, x, y_init):
        """One-pass fill of the mask slots in ``y_init`` (use ``vocab.mask`` for masked slots)."""
        self._check_fitted()
        return maskfill_decode(self.model_, self.encode(x), y_init)


class TransformerTransducer(_SequenceModel):
    """Streaming Transformer-Transducer with a chunk-wise attention mask.

    ``chunk_size=None`` gives the non-streaming (full attention) model.
    """

    _arch = "transducer"

    def __init__(self, n_content=30, chunk_size=4, d_model=64, n_heads=4, d_ff=128, enc_layers=4,
                 label_width=64, joint_width=64, dropout=0.0, epochs=20, batch_size=16, lr=1e-3,
                 warmup=200, k_best=3, val_fraction=0.05, specaug_time=0, specaug_freq=0,
                 specaug_width=0, beam=10, max_symbols=5, seed=0, init=None, freeze="", verbose=False):
        self.n_content = n_content
        self.chunk_size = chunk_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.enc_layers = enc_layers
        self.label_width = label_width
        self.joint_width = joint_width
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.k_best = k_best
        self.val_fraction = val_fraction
        self.specaug_time = specaug_time
        self.specaug_freq = specaug_freq
        self.specaug_width = specaug_width
        self.beam = beam
        self.max_symbols = max_symbols
        self.seed = seed
        self.init = init
        self.freeze = freeze
        self.verbose = verbose

    @property
    def policy(self):
        return Full() if self.chunk_size is None else Chunk(int(self.chunk_size))

    def _build(self, feat_dim):
        return TransducerModel(self.vocab, self._enc_cfg(feat_dim), self.label_width, self.joint_width)

    def _init_mapping(self):
        return TRANSDUCER_MAPPING

    def _batch_loss(self, model, batch, rng, train):
        loss = model(batch["feats"], batch["lengths"], batch["targets"], batch["target_lengths"], self.policy)
        return loss.mean()

    def encode(self, x) -> torch.Tensor:
        self._check_fitted()
        with torch.no_grad():
            return self.model_.encoder(self._tensor(x), self.policy)

    def predict(self, X):
        self._check_fitted()
        xs = check_features(X, self.n_features_in_)
        if self.beam == 1:
            return [transducer_greedy(self.encode(x), self.model_, self.max_symbols).tokens for x in xs]
        return [transducer_beam(self.encode(x), self.model_, self.beam, self.max_symbols).tokens for x in xs]

    def align(self, X):
        """Greedy decoding with per-token emission frames (list of GreedyResult)."""
        self._check_fitted()
        xs = check_features(X, self.n_features_in_)
        return [transducer_greedy(self.encode(x), self.model_, self.max_symbols) for x in xs]


class ContextualBlockASR(_SequenceModel):
    """Contextual block streaming encoder-decoder ASR (block encoder + CTC + attention decoder)."""

    _arch = "cbs"
    _select_higher = True

    def __init__(self, n_content=30, block_left=8, block_center=4, block_right=2, d_model=64, n_heads=4,
                 d_ff=128, enc_layers=4, dec_layers=2, dropout=0.0, ctc_weight=0.3, epochs=20,
                 batch_size=16, lr=1e-3, warmup=200, k_best=3, val_fraction=0.05, specaug_time=0,
                 specaug_freq=0, specaug_width=0, beam=10, partial_memory=0.5, seed=0, init=None, freeze="",
                 verbose=False):
        self.n_content = n_content
        self.block_left = block_left
        self.block_center = block_center
        self.block_right = block_right
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ff = d_ff
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.dropout = dropout
        self.ctc_weight = ctc_weight
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.k_best = k_best
        self.val_fraction = val_fraction
        self.specaug_time = specaug_time
        self.specaug_freq = specaug_freq
        self.specaug_width = specaug_width
        self.beam = beam
        self.partial_memory = partial_memory
        self.seed = seed
        self.init = init
        self.freeze = freeze
        self.verbose = verbose

    @property
    def spec(self) -> Block:
        return Block(self.block_left, self.block_center, self.block_right)

    def _build(self, feat_dim):
        return CBSModel(self.vocab, self._enc_cfg(feat_dim), self._dec_cfg())

    def _init_mapping(self):
        return CBS_MAPPING

    def _forward(self, model, batch, rng=None):
        h = model.encode(batch["feats"], batch["lengths"], self.spec)
        ctc_lp = model.ctc_log_probs(h)
        ctc = ctc_loss_batch(ctc_lp, batch["lengths"], batch["targets"], batch["target_lengths"])
        targets, t_len = batch["targets"], batch["target_lengths"]
        n_batch = targets.shape[0]
        sos = torch.full((n_batch, 1), self.vocab.sos, dtype=torch.long)
        prefix = torch.cat([sos, targets.clamp_min(0)], dim=1)
        frames_ok = torch.arange(h.shape[1])[None, :] < batch["lengths"][:, None]
        att, correct, total = self._decoder_nll(model, prefix, targets, t_len, h, frames_ok)
        if rng is not None and self.partial_memory > 0:
            cut, n_seen = self._partial_targets(ctc_lp.detach(), batch, rng)
            seen_ok = torch.arange(h.shape[1])[None, :] < cut[:, None]
            att_part, _, _ = self._decoder_nll(model, prefix, targets, n_seen, h, seen_ok)
            att = (1 - self.partial_memory) * att + self.partial_memory * att_part
        return ctc, att, correct, total

    @staticmethod
    def _decoder_nll(model, prefix, targets, n_tokens, memory, memory_ok):
        n_batch = targets.shape[0]
        out = torch.cat([targets.clamp_min(0), torch.zeros(n_batch, 1, dtype=torch.long)], dim=1)
        out[torch.arange(n_batch), n_tokens] = model.eos_index
        valid = torch.arange(prefix.shape[1])[None, :] <= n_tokens[:, None]
        logp = model.decoder_log_probs(prefix, memory, memory_ok, valid)
        nll = -logp.gather(2, out[..., None])[..., 0]
        correct = ((logp.argmax(-1) == out) & valid).sum()
        return (nll * valid).sum(1), correct, valid.sum()

    def _partial_targets(self, ctc_lp, batch, rng):
        """Cut each utterance's memory after a random non-final block.

        The decoder target becomes the tokens whose forced-alignment CTC spike lies
        before the cut, then eos: with the memory exhausted mid-utterance the decoder
        learns to stop, which is what block boundary detection relies on.
        """
        cuts, seen = [], []
        for i, (n, u) in enumerate(zip(batch["lengths"].tolist(), batch["target_lengths"].tolist())):
            blocks = block_split(n, self.spec)
            if len(blocks) < 2:
                cuts.append(n)
                seen.append(u)
                continue
            cut = blocks[int(rng.integers(len(blocks) - 1))].central.stop
            spans = ctc_viterbi_align(ctc_lp[i, :n].numpy(), batch["targets"][i, :u].tolist())
            cuts.append(cut)
            seen.append(sum(s.spike < cut for s in spans))
        return torch.tensor(cuts), torch.tensor(seen)

    def _batch_loss(self, model, batch, rng, train):
        ctc, att, _, _ = self._forward(model, batch, rng if train else None)
        return (self.ctc_weight * ctc + (1 - self.ctc_weight) * att).mean()

    def _val_metric(self, model, batch):
        """Teacher-forced decoder token accuracy (including eos)."""
        with torch.no_grad():
            _, _, correct, total = self._forward(model, batch)
        return float(correct), float(total)

    def predict(self, X):
        self._check_fitted()
        xs = check_features(X, self.n_features_in_)
        return [cbs_beam_search(self.model_, self._tensor(x), self.spec, self.beam).tokens for x in xs]

    def decode(self, x, beam=None):
        """Full block-synchronous result (tokens, index boundaries, stop reasons)."""
        self._check_fitted()
        return cbs_beam_search(self.model_, self._tensor(x), self.spec, self.beam if beam is None else beam)

    def ctc_posteriors(self, x) -> np.ndarray:
        self._check_fitted()
        return cbs_ctc_posteriors(self.model_, self._tensor(x), self.spec).numpy()

    def spikes(self, X):
        """CTC best-path tokens and their spike frames from the streaming encoder."""
        out = []
        for x in check_features(X, self.n_features_in_):
            grid = self.ctc_posteriors(x)
            tokens = ctc_greedy(grid)
            out.append((tokens, ctc_spikes(grid, tokens)))
        return out


ESTIMATORS = {cls._arch: cls for cls in (MaskCTC, TransformerTransducer, ContextualBlockASR)}


def load_estimator(ckpt: Checkpoint | str):
    ckpt = ckpt if isinstance(ckpt, Checkpoint) else Checkpoint.load(ckpt)
    return ESTIMATORS[ckpt.meta["arch"]].from_checkpoint(ckpt)
