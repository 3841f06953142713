"""Two-stage training orchestration, experiment configs and evaluation.

Stage 1 trains a full-attention Mask-CTC model; stage 2 trains a streaming
Transformer-Transducer or contextual-block model either from random weights
("random" init) or with the stage-1 encoder (and CTC head) transplanted
("mask-ctc" init).
"""

from __future__ import annotations

import configparser
import io
import logging
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .analysis import DelayStats, ResultRow, corpus_delay, edit_distance, relative_delay, token_error_rate
from .checkpoint import Checkpoint, average_checkpoints, config_hash, transplant  # noqa: F401 (re-exported)
from .ctc import ctc_greedy, ctc_spikes
from .data import CorpusSpec, Dataset, make_corpus
from .estimators import ContextualBlockASR, MaskCTC, TransformerTransducer, load_estimator
from .streaming import Block, Chunk, Full, latency, parse_policy, policy_name

logger = logging.getLogger(__name__)

ARCHS = ("maskctc", "transducer", "cbs")

DEFAULTS: dict[str, object] = {
    "data.n_content": 30,
    "data.feat_dim": 16,
    "data.dur_min": 3,
    "data.dur_max": 8,
    "data.noise_sigma": 0.3,
    "data.len_min": 4,
    "data.len_max": 12,
    "data.proto_scale": 0.35,
    "data.branching": 4,
    "data.seed": 0,
    "data.n_train": 2000,
    "data.n_test": 200,
    "model.arch": "maskctc",
    "model.policy": "full",
    "model.d_model": 64,
    "model.n_heads": 4,
    "model.d_ff": 128,
    "model.enc_layers": 4,
    "model.dec_layers": 2,
    "model.label_width": 64,
    "model.joint_width": 64,
    "model.dropout": 0.0,
    "loss.ctc_weight": 0.3,
    "loss.partial_memory": 0.5,
    "optim.lr": 1e-3,
    "optim.warmup": 200,
    "optim.epochs": 20,
    "optim.batch_size": 16,
    "optim.k_best": 3,
    "optim.val_fraction": 0.05,
    "optim.freeze": "",
    "augment.time_masks": 0,
    "augment.freq_masks": 0,
    "augment.max_width": 0,
    "decode.beam": 10,
    "decode.max_symbols": 5,
    "run.seed": 0,
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw) -> object:
    kind = type(DEFAULTS[key])
    if isinstance(raw, kind) and not (kind is int and isinstance(raw, bool)):
        return raw
    text = str(raw).strip()
    try:
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}") from None
    return text


class ExperimentConfig:
    """Flat ``section.key`` settings with typed defaults.

    Files are INI (``[optim]`` / ``lr = 1e-3``); overrides are ``section.key=value``
    strings. Unknown keys are errors in both.
    """

    def __init__(self, values: Mapping[str, object] | None = None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self[key] = value

    def __getitem__(self, key: str):
        return self._values[key]

    def __setitem__(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, value)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def as_dict(self) -> dict:
        return dict(self._values)

    def copy(self, **updates) -> "ExperimentConfig":
        cfg = ExperimentConfig(self._values)
        for key, value in updates.items():
            cfg[key.replace("__", ".")] = value
        return cfg

    @property
    def arch(self) -> str:
        return self["model.arch"]

    @property
    def policy(self):
        return parse_policy(self["model.policy"])

    @property
    def seed(self) -> int:
        return self["run.seed"]

    @property
    def hash(self) -> str:
        return config_hash(self._values)

    # -- text forms --------------------------------------------------------
    @classmethod
    def from_ini(cls, text: str, source: str = "<string>") -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                dotted = f"{section}.{key}"
                if dotted not in DEFAULTS:
                    raise ConfigError(f"{source}: unknown config key {dotted!r}")
                cfg[dotted] = value
        return cfg

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, str(path))

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for key, value in self._values.items():
            section, name = key.split(".", 1)
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, repr(value) if isinstance(value, float) else str(value))
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def with_overrides(self, overrides: Sequence[str]) -> "ExperimentConfig":
        cfg = self.copy()
        for item in overrides:
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"override {item!r} is not key=value")
            cfg[key.strip()] = value
        return cfg

    # -- checks ----------------------------------------------------------------
    def validate(self) -> "ExperimentConfig":
        v = self._values
        if v["model.arch"] not in ARCHS:
            raise ConfigError(f"model.arch must be one of {ARCHS}, got {v['model.arch']!r}")
        try:
            policy = self.policy
        except ValueError as exc:
            raise ConfigError(f"model.policy: {exc}") from exc
        allowed = {"maskctc": (Full,), "transducer": (Full, Chunk), "cbs": (Block,)}[v["model.arch"]]
        if not isinstance(policy, allowed):
            raise ConfigError(f"policy {v['model.policy']!r} does not apply to arch {v['model.arch']!r}")
        positive = ["data.n_content", "data.feat_dim", "data.dur_min", "data.len_min", "data.n_train",
                    "model.d_model", "model.n_heads", "model.d_ff", "model.enc_layers", "model.dec_layers",
                    "model.label_width", "model.joint_width", "optim.epochs", "optim.batch_size",
                    "optim.k_best", "decode.beam", "decode.max_symbols"]
        for key in positive:
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1, got {v[key]}")
        if v["data.n_content"] < 2:
            raise ConfigError("data.n_content must be >= 2")
        if v["data.dur_max"] < v["data.dur_min"] or v["data.len_max"] < v["data.len_min"]:
            raise ConfigError("data ranges must satisfy min <= max")
        if v["model.d_model"] % v["model.n_heads"]:
            raise ConfigError("model.d_model must be divisible by model.n_heads")
        for key in ("data.noise_sigma", "optim.lr", "data.proto_scale"):
            if not (math.isfinite(v[key]) and v[key] >= 0):
                raise ConfigError(f"{key} must be finite and >= 0")
        if not 0.0 <= v["loss.ctc_weight"] <= 1.0:
            raise ConfigError("loss.ctc_weight must lie in [0, 1]")
        if not 0.0 <= v["loss.partial_memory"] <= 1.0:
            raise ConfigError("loss.partial_memory must lie in [0, 1]")
        if not 0.0 <= v["optim.val_fraction"] < 1.0:
            raise ConfigError("optim.val_fraction must lie in [0, 1)")
        if not 0.0 <= v["model.dropout"] < 1.0:
            raise ConfigError("model.dropout must lie in [0, 1)")
        return self

    # -- builders --------------------------------------------------------------
    def corpus_spec(self) -> CorpusSpec:
        v = self._values
        return CorpusSpec(v["data.n_content"], v["data.feat_dim"], v["data.dur_min"], v["data.dur_max"],
                          v["data.noise_sigma"], v["data.len_min"], v["data.len_max"], v["data.proto_scale"],
                          v["data.branching"], v["data.seed"])

    def estimator(self, init: Checkpoint | None = None, verbose: bool = False):
        """Unfitted estimator for this config (``init`` is only used in stage 2)."""
        self.validate()
        v = self._values
        common = dict(
            n_content=v["data.n_content"], d_model=v["model.d_model"], n_heads=v["model.n_heads"],
            d_ff=v["model.d_ff"], enc_layers=v["model.enc_layers"], dropout=v["model.dropout"],
            epochs=v["optim.epochs"], batch_size=v["optim.batch_size"], lr=v["optim.lr"],
            warmup=v["optim.warmup"], k_best=v["optim.k_best"], val_fraction=v["optim.val_fraction"],
            specaug_time=v["augment.time_masks"], specaug_freq=v["augment.freq_masks"],
            specaug_width=v["augment.max_width"], seed=v["run.seed"], freeze=v["optim.freeze"],
            init=init, verbose=verbose)
        if self.arch == "maskctc":
            return MaskCTC(dec_layers=v["model.dec_layers"], ctc_weight=v["loss.ctc_weight"], **common)
        policy = self.policy
        if self.arch == "transducer":
            return TransformerTransducer(
                chunk_size=None if isinstance(policy, Full) else policy.size, label_width=v["model.label_width"],
                joint_width=v["model.joint_width"], beam=v["decode.beam"], max_symbols=v["decode.max_symbols"],
                **common)
        return ContextualBlockASR(
            block_left=policy.left, block_center=policy.center, block_right=policy.right,
            dec_layers=v["model.dec_layers"], ctc_weight=v["loss.ctc_weight"], beam=v["decode.beam"],
            partial_memory=v["loss.partial_memory"], **common)


# -- data ----------------------------------------------------------------------

def make_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Train and test splits sharing prototypes and grammar (``data.seed``)."""
    spec = config.corpus_spec()
    train = make_corpus(spec, config["data.n_train"], split_seed=1, prefix="train")
    test = make_corpus(spec, config["data.n_test"], split_seed=2, prefix="test")
    return train, test


def _check_dataset(config: ExperimentConfig, dataset: Dataset) -> None:
    if dataset.n_content != config["data.n_content"]:
        raise ConfigError(f"dataset has {dataset.n_content} content tokens, config says {config['data.n_content']}")
    if dataset.feat_dim != config["data.feat_dim"]:
        raise ConfigError(f"dataset feature dim {dataset.feat_dim} != data.feat_dim {config['data.feat_dim']}")


# -- training ------------------------------------------------------------------

def train_maskctc(config: ExperimentConfig, dataset: Dataset, verbose: bool = False) -> Checkpoint:
    """Stage 1: full-attention encoder + CTC head + CMLM decoder."""
    config.validate()
    if config.arch != "maskctc" or not isinstance(config.policy, Full):
        raise ConfigError("stage 1 needs model.arch=maskctc with model.policy=full")
    _check_dataset(config, dataset)
    est = config.estimator(verbose=verbose).fit(dataset.features, dataset.transcripts)
    est.checkpoint_.meta["experiment"] = config.as_dict()
    return est.checkpoint_


def train_streaming(config: ExperimentConfig, dataset: Dataset, init: Checkpoint | None = None,
                    verbose: bool = False) -> Checkpoint:
    """Stage 2. ``init=None`` is the random-init baseline; a stage-1 checkpoint gives the enhanced model."""
    config.validate()
    if config.arch not in ("transducer", "cbs"):
        raise ConfigError("stage 2 needs model.arch=transducer or cbs")
    if init is not None and init.meta.get("arch") != "maskctc":
        raise ConfigError(f"init checkpoint must come from stage 1, got arch {init.meta.get('arch')!r}")
    _check_dataset(config, dataset)
    est = config.estimator(init=init, verbose=verbose).fit(dataset.features, dataset.transcripts)
    est.checkpoint_.meta["experiment"] = config.as_dict()
    est.checkpoint_.meta["init"] = "random" if init is None else "mask-ctc"
    if init is not None:
        est.checkpoint_.meta["init_hash"] = init.meta.get("config_hash")
    return est.checkpoint_


# -- decoding and scoring --------------------------------------------------------

@dataclass
class DecodeRecord:
    """One utterance: final hypothesis plus the token sequence used for timing.

    For CTC-based models the timing tokens are the CTC best path of the (streaming)
    encoder; for the transducer they are the greedy emissions.
    """

    uid: str
    tokens: list[int]
    timed_tokens: list[int]
    frames: list[int]
    posteriors: list[float]

    def to_json(self) -> dict:
        return {"id": self.uid, "tokens": self.tokens, "timed_tokens": self.timed_tokens,
                "frames": self.frames, "posteriors": self.posteriors}

    @classmethod
    def from_json(cls, rec: dict) -> "DecodeRecord":
        return cls(rec["id"], list(rec["tokens"]), list(rec["timed_tokens"]), list(rec["frames"]),
                   [float(p) for p in rec["posteriors"]])


def _ctc_timing(grid: np.ndarray):
    tokens = ctc_greedy(grid)
    frames = ctc_spikes(grid, tokens)
    return tokens, frames, [float(np.exp(grid[f, k])) for k, f in zip(tokens, frames)]


@torch.no_grad()
def decode(model, dataset: Dataset) -> list[DecodeRecord]:
    """Decode every utterance with a fitted estimator (or checkpoint)."""
    est = load_estimator(model) if isinstance(model, (Checkpoint, str, Path)) else model
    out = []
    for utt in dataset:
        x = utt.features
        if isinstance(est, MaskCTC):
            timed, frames, post = _ctc_timing(est.ctc_posteriors(x))
            tokens = list(timed)
        elif isinstance(est, TransformerTransducer):
            tokens = est.predict([x])[0]
            greedy = est.align([x])[0]
            timed = greedy.tokens
            frames = [e.frame for e in greedy.emissions]
            post = [float(np.exp(e.logp)) for e in greedy.emissions]
        else:
            tokens = est.predict([x])[0]
            timed, frames, post = _ctc_timing(est.ctc_posteriors(x))
        out.append(DecodeRecord(utt.uid, [int(t) for t in tokens], [int(t) for t in timed],
                                [int(f) for f in frames], post))
    return out


@dataclass
class Evaluation:
    error_rate: float
    delay: DelayStats
    relative: DelayStats | None
    alignment_records: list[dict]

    def summary(self) -> dict:
        out = {"error_rate": self.error_rate, "delay_vs_reference": self.delay.summary()}
        if self.relative is not None:
            out["delay_vs_nonstreaming"] = self.relative.summary()
        return out


def evaluate(records: Sequence[DecodeRecord], dataset: Dataset,
             reference: Sequence[DecodeRecord] | None = None) -> Evaluation:
    """TER of the final hypotheses, spike delay against the exact alignments and,
    if ``reference`` (a non-streaming run) is given, delay relative to its spikes."""
    by_id = {u.uid: u for u in dataset}
    if set(by_id) != {r.uid for r in records}:
        raise ValueError("decode records and dataset cover different utterances")
    utts = [by_id[r.uid] for r in records]
    refs = [[int(t) for t in u.tokens] for u in utts]
    ter = token_error_rate(refs, [r.tokens for r in records])
    delay = corpus_delay(refs, [u.alignment for u in utts], [r.timed_tokens for r in records],
                         [r.frames for r in records], dataset.frame_ms)
    relative = None
    if reference is not None:
        ref_by_id = {r.uid: r for r in reference}
        base = [ref_by_id[r.uid] for r in records]
        relative = relative_delay([r.timed_tokens for r in records], [r.frames for r in records],
                                  [b.timed_tokens for b in base], [b.frames for b in base], dataset.frame_ms)
    dump = []
    for rec, utt, ref in zip(records, utts, refs):
        _, ops = edit_distance(ref, rec.timed_tokens)
        ref_of = {j: i for kind, i, j in ops if j is not None and i is not None}
        for j, (tok, frame, post) in enumerate(zip(rec.timed_tokens, rec.frames, rec.posteriors)):
            span = utt.alignment[ref_of[j]] if j in ref_of else None
            dump.append({"utt": rec.uid, "token": tok, "frame": frame, "posterior": post,
                         "ref_token": None if span is None else span.token,
                         "ref_start": None if span is None else span.start,
                         "ref_end": None if span is None else span.end})
    return Evaluation(ter, delay, relative, dump)


def result_row(config: ExperimentConfig, init: str, evaluation: Evaluation) -> ResultRow:
    policy = config.policy
    return ResultRow(model=config.arch, policy=policy_name(policy), latency_ms=latency(policy), init=init,
                     error_rate=100.0 * evaluation.error_rate, mean_delay_ms=evaluation.delay.mean,
                     seed=config.seed)
