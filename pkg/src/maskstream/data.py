"""Synthetic speech-like corpora with frame-exact reference alignments.

Each content token owns a prototype feature vector. An utterance realizes its
transcript token by token, holding the prototype (plus Gaussian noise) for a
random number of 40 ms frames, so the reference alignment is known exactly.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FRAME_MS = 40
FEATURE_MAGIC_HEADER = struct.Struct("<II")


class ManifestError(OSError):
    """Raised when a manifest or one of its feature files is missing or corrupt."""


@dataclass(frozen=True)
class Vocabulary:
    """Token id layout: blank=0, content 1..n_content, then pad, mask, sos, eos."""

    n_content: int

    def __post_init__(self):
        if int(self.n_content) < 2:
            raise ValueError(f"vocabulary needs at least 2 content tokens, got {self.n_content}")

    blank = 0

    @property
    def pad(self) -> int:
        return self.n_content + 1

    @property
    def mask(self) -> int:
        return self.n_content + 2

    @property
    def sos(self) -> int:
        return self.n_content + 3

    @property
    def eos(self) -> int:
        return self.n_content + 4

    @property
    def size(self) -> int:
        """Total number of ids including all specials."""
        return self.n_content + 5

    @property
    def content_ids(self) -> range:
        return range(1, self.n_content + 1)

    @property
    def specials(self) -> dict:
        return {"blank": self.blank, "pad": self.pad, "mask": self.mask,
                "sos": self.sos, "eos": self.eos}

    def is_content(self, token: int) -> bool:
        return 1 <= token <= self.n_content


def build_vocab(n_content: int) -> Vocabulary:
    return Vocabulary(int(n_content))


@dataclass(frozen=True)
class Span:
    """One aligned token: frames ``[start, end)`` and an optional spike frame."""

    token: int
    start: int
    end: int
    spike: int | None = None

    @property
    def last(self) -> int:
        return self.end - 1


@dataclass
class Utterance:
    features: np.ndarray
    tokens: np.ndarray
    alignment: list[Span]
    uid: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.features.shape[0])


@dataclass
class Dataset:
    utterances: list[Utterance]
    n_content: int
    feat_dim: int
    frame_ms: int = FRAME_MS
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def features(self) -> list[np.ndarray]:
        return [u.features for u in self.utterances]

    @property
    def transcripts(self) -> list[np.ndarray]:
        return [u.tokens for u in self.utterances]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.utterances[i] for i in indices], self.n_content,
                       self.feat_dim, self.frame_ms, self.seed, dict(self.extra))


def make_protos(n_content: int, feat_dim: int, seed: int, scale: float = 1.0) -> np.ndarray:
    """Prototype table, row ``k - 1`` belongs to content token ``k``."""
    rng = np.random.default_rng([int(seed), 0x9E37])
    protos = rng.standard_normal((n_content, feat_dim)) * scale
    return protos.astype(np.float32)


def make_grammar(n_content: int, seed: int, branching: int = 4) -> np.ndarray:
    """Sparse bigram transition matrix over content tokens.

    Row ``i`` (token ``i + 1``) puts all of its mass on ``branching`` successors,
    never on itself, so transcripts carry predictable left-to-right context.
    Row ``n_content`` is the start distribution (uniform).
    """
    rng = np.random.default_rng([int(seed), 0x7F4A])
    branching = max(1, min(branching, n_content - 1))
    trans = np.zeros((n_content + 1, n_content))
    for i in range(n_content):
        choices = [j for j in range(n_content) if j != i]
        succ = rng.choice(choices, size=branching, replace=False)
        weights = rng.dirichlet(np.ones(branching) * 2.0)
        trans[i, succ] = weights
    trans[n_content] = 1.0 / n_content
    return trans


def sample_transcript(rng: np.random.Generator, grammar: np.ndarray,
                      length_range: tuple[int, int]) -> np.ndarray:
    n_content = grammar.shape[1]
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    tokens = []
    state = n_content
    for _ in range(length):
        nxt = int(rng.choice(n_content, p=grammar[state]))
        tokens.append(nxt + 1)
        state = nxt
    return np.asarray(tokens, dtype=np.int64)


def synth_utterance(tokens: Sequence[int], protos: np.ndarray, dur_range: tuple[int, int],
                    noise_sigma: float, seed: int, silence: np.ndarray | None = None,
                    silence_frames: int = 0, uid: str = "") -> Utterance:
    """Render a transcript into noisy piecewise-constant feature frames.

    Token ``k`` holds ``protos[k - 1]`` for ``Uniform{d_min..d_max}`` frames. With
    ``silence`` given, ``silence_frames`` frames of it pad both utterance edges and
    are absorbed into the first and last spans.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("cannot synthesize an empty transcript")
    d_min, d_max = int(dur_range[0]), int(dur_range[1])
    if d_min < 1 or d_max < d_min:
        raise ValueError(f"invalid duration range {dur_range}")
    n_content, dim = protos.shape
    if tokens.min() < 1 or tokens.max() > n_content:
        raise ValueError("transcript contains non-content token ids")

    rng = np.random.default_rng(int(seed))
    durations = rng.integers(d_min, d_max + 1, size=tokens.size)
    pad = silence_frames if silence is not None else 0
    n_frames = int(durations.sum()) + 2 * pad

    clean = np.empty((n_frames, dim), dtype=np.float64)
    spans = []
    pos = pad
    for k, (tok, dur) in enumerate(zip(tokens.tolist(), durations.tolist())):
        clean[pos:pos + dur] = protos[tok - 1]
        start = 0 if k == 0 else pos
        end = n_frames if k == tokens.size - 1 else pos + dur
        spans.append(Span(tok, start, end))
        pos += dur
    if pad:
        clean[:pad] = silence
        clean[n_frames - pad:] = silence

    noise = rng.standard_normal((n_frames, dim)) * noise_sigma
    feats = (clean + noise).astype(np.float32) if noise_sigma > 0 else clean.astype(np.float32)
    return Utterance(feats, tokens, spans, uid)


@dataclass
class CorpusSpec:
    """Generation settings for a synthetic corpus."""

    n_content: int = 30
    feat_dim: int = 16
    dur_min: int = 3
    dur_max: int = 8
    noise_sigma: float = 0.3
    len_min: int = 4
    len_max: int = 12
    proto_scale: float = 0.35
    branching: int = 4
    seed: int = 0


def make_corpus(spec: CorpusSpec, n_utts: int, split_seed: int, prefix: str = "utt") -> Dataset:
    """Draw ``n_utts`` utterances. Prototypes and grammar depend on ``spec.seed`` only,
    so train and test splits drawn with different ``split_seed`` share the same "language".
    """
    protos = make_protos(spec.n_content, spec.feat_dim, spec.seed, spec.proto_scale)
    grammar = make_grammar(spec.n_content, spec.seed, spec.branching)
    rng = np.random.default_rng([int(spec.seed), int(split_seed)])
    utts = []
    for i in range(n_utts):
        tokens = sample_transcript(rng, grammar, (spec.len_min, spec.len_max))
        utt_seed = int(rng.integers(0, 2**31 - 1))
        utts.append(synth_utterance(tokens, protos, (spec.dur_min, spec.dur_max),
                                    spec.noise_sigma, utt_seed, uid=f"{prefix}{i:05d}"))
    return Dataset(utts, spec.n_content, spec.feat_dim, FRAME_MS, spec.seed,
                   {"split_seed": int(split_seed)})


def augment(features: np.ndarray, n_time_masks: int, n_freq_masks: int, max_width: int,
            seed: int) -> np.ndarray:
    """Zero out random time spans and feature bands (simplified SpecAugment)."""
    out = np.array(features, copy=True)
    if max_width <= 0:
        return out
    n_frames, dim = out.shape
    rng = np.random.default_rng(int(seed))
    for _ in range(n_time_masks):
        width = int(rng.integers(0, min(max_width, n_frames) + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start:start + width] = 0
    for _ in range(n_freq_masks):
        width = int(rng.integers(0, min(max_width, dim) + 1))
        start = int(rng.integers(0, dim - width + 1))
        out[:, start:start + width] = 0
    return out


def nearest_proto_frames(features: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Per-frame token id of the closest prototype."""
    dist = ((features[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
    return dist.argmin(1) + 1


# -- persistence -------------------------------------------------------------

def write_features(path: Path, feats: np.ndarray) -> None:
    feats = np.ascontiguousarray(feats, dtype="<f4")
    n_frames, dim = feats.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC_HEADER.pack(n_frames, dim))
        f.write(feats.tobytes())


def read_features(path: Path) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read feature file {path}: {exc}") from exc
    if len(raw) < FEATURE_MAGIC_HEADER.size:
        raise ManifestError(f"feature file {path} is truncated (no header)")
    n_frames, dim = FEATURE_MAGIC_HEADER.unpack_from(raw)
    expected = FEATURE_MAGIC_HEADER.size + 4 * n_frames * dim
    if len(raw) != expected:
        raise ManifestError(f"feature file {path} has {len(raw)} bytes, header implies {expected}")
    return np.frombuffer(raw, dtype="<f4", offset=FEATURE_MAGIC_HEADER.size).reshape(n_frames, dim).astype(np.float32)


def atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(dataset: Dataset, out_dir: str | os.PathLike) -> Path:
    """Write features and ``manifest.jsonl`` (+ ``meta.json``) under ``out_dir``.

    The manifest is written last and atomically, so a crashed write never leaves
    a manifest pointing at missing feature files.
    """
    out_dir = Path(out_dir)
    feat_dir = out_dir / "feats"
    feat_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, utt in enumerate(dataset.utterances):
        uid = utt.uid or f"utt{i:05d}"
        rel = Path("feats") / f"{uid}.bin"
        write_features(out_dir / rel, utt.features)
        lines.append(json.dumps({
            "id": uid,
            "feats": rel.as_posix(),
            "tokens": " ".join(str(int(t)) for t in utt.tokens),
            "alignment": [[s.token, s.start, s.end] for s in utt.alignment],
        }))
    meta = {"n_content": dataset.n_content, "feat_dim": dataset.feat_dim,
            "frame_ms": dataset.frame_ms, "seed": dataset.seed, "n_utts": len(dataset),
            "extra": dataset.extra}
    atomic_write_text(out_dir / "meta.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    path = out_dir / "manifest.jsonl"
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return path


def read_manifest(path: str | os.PathLike) -> Dataset:
    """Load a dataset written by :func:`write_manifest`.

    ``path`` may be the manifest file or its directory. Every record is validated
    against ``meta.json`` before anything is returned.
    """
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    root = path.parent
    try:
        meta = json.loads((root / "meta.json").read_text())
        lines = path.read_text().splitlines()
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"corrupt meta.json in {root}: {exc}") from exc

    utts = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            tokens = np.array([int(t) for t in rec["tokens"].split()], dtype=np.int64)
            spans = [Span(int(a), int(b), int(c)) for a, b, c in rec["alignment"]]
            feats = read_features(root / rec["feats"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"{path}:{lineno}: malformed record ({exc})") from exc
        if feats.shape[1] != meta["feat_dim"]:
            raise ManifestError(f"{path}:{lineno}: feature dim {feats.shape[1]} != manifest D {meta['feat_dim']}")
        _check_alignment(spans, tokens, feats.shape[0], f"{path}:{lineno}")
        utts.append(Utterance(feats, tokens, spans, rec["id"]))
    return Dataset(utts, int(meta["n_content"]), int(meta["feat_dim"]), int(meta["frame_ms"]),
                   meta.get("seed"), meta.get("extra", {}))


def _check_alignment(spans: list[Span], tokens: np.ndarray, n_frames: int, where: str) -> None:
    if [s.token for s in spans] != tokens.tolist():
        raise ManifestError(f"{where}: alignment tokens differ from transcript")
    pos = 0
    for s in spans:
        if s.start != pos or s.end <= s.start:
            raise ManifestError(f"{where}: alignment spans must partition the frames")
        pos = s.end
    if pos != n_frames:
        raise ManifestError(f"{where}: alignment covers {pos} of {n_frames} frames")
