"""Error rates, spike/emission delay statistics and report files."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import FRAME_MS, Span
from .streaming import latency, parse_policy

MATCH, SUB, INS, DEL = "match", "sub", "ins", "del"


def edit_distance(ref: Sequence, hyp: Sequence) -> tuple[int, list[tuple[str, int | None, int | None]]]:
    """Unit-cost Levenshtein distance and one optimal op alignment.

    Ops are ``(kind, ref_index, hyp_index)`` with ``kind`` in match/sub/ins/del;
    backtracking prefers match/sub, then deletion, then insertion.
    """
    ref, hyp = list(ref), list(hyp)
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            diag = dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            dist[i, j] = min(diag, dist[i - 1, j] + 1, dist[i, j - 1] + 1)
    ops = []
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            ops.append((MATCH if ref[i - 1] == hyp[j - 1] else SUB, i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            ops.append((DEL, i - 1, None))
            i -= 1
        else:
            ops.append((INS, None, j - 1))
            j -= 1
    return int(dist[n, m]), ops[::-1]


def token_error_rate(refs: Sequence[Sequence], hyps: Sequence[Sequence]) -> float:
    """Corpus TER: total edit distance over total reference length."""
    errors = sum(edit_distance(r, h)[0] for r, h in zip(refs, hyps))
    total = sum(len(r) for r in refs)
    return errors / total if total else float(errors > 0)


@dataclass
class DelayStats:
    """Delays (ms) of matched hypothesis tokens behind the reference span end."""

    delays: list[float] = field(default_factory=list)
    n_ref: int = 0

    @property
    def count(self) -> int:
        return len(self.delays)

    @property
    def mean(self) -> float:
        return float(np.mean(self.delays)) if self.delays else math.nan

    @property
    def median(self) -> float:
        return float(np.median(self.delays)) if self.delays else math.nan

    @property
    def match_rate(self) -> float:
        return self.count / self.n_ref if self.n_ref else math.nan

    def merge(self, other: "DelayStats") -> "DelayStats":
        return DelayStats(self.delays + other.delays, self.n_ref + other.n_ref)

    def summary(self) -> dict:
        return {"mean_ms": self.mean, "median_ms": self.median, "count": self.count,
                "n_ref": self.n_ref, "match_rate": self.match_rate}


def spike_delay(hyp_frames: Sequence[int], ref_align: Sequence[Span], ops, frame_ms: float = FRAME_MS) -> DelayStats:
    """Delay of each matched (correct or substituted) hypothesis token.

    ``hyp_frames[j]`` is the spike/emission frame of hypothesis token ``j``; the
    baseline is the last frame of the aligned reference span. Insertions and
    deletions are excluded; ``match_rate`` shows how many reference tokens counted.
    """
    delays = []
    for kind, i, j in ops:
        if kind in (MATCH, SUB):
            delays.append(float((hyp_frames[j] - ref_align[i].last) * frame_ms))
    return DelayStats(delays, len(ref_align))


def corpus_delay(refs: Sequence[Sequence[int]], ref_aligns, hyps, hyp_frames, frame_ms=FRAME_MS) -> DelayStats:
    total = DelayStats()
    for ref, align, hyp, frames in zip(refs, ref_aligns, hyps, hyp_frames):
        _, ops = edit_distance(list(ref), list(hyp))
        total = total.merge(spike_delay(frames, align, ops, frame_ms))
    return total


def relative_delay(hyps_a, frames_a, hyps_b, frames_b, frame_ms=FRAME_MS) -> DelayStats:
    """Delay of run A's spikes relative to run B's on tokens the two runs share."""
    total = DelayStats()
    for ha, fa, hb, fb in zip(hyps_a, frames_a, hyps_b, frames_b):
        _, ops = edit_distance(list(hb), list(ha))
        delays = [float((fa[j] - fb[i]) * frame_ms) for kind, i, j in ops if kind == MATCH]
        total = total.merge(DelayStats(delays, len(hb)))
    return total


@dataclass
class ResultRow:
    model: str
    policy: str
    latency_ms: float
    init: str
    error_rate: float
    mean_delay_ms: float
    seed: int


def _row_from_strings(d: dict) -> ResultRow:
    kw = {}
    for f in fields(ResultRow):
        v = d[f.name]
        kw[f.name] = int(v) if f.type in (int, "int") else float(v) if f.type in (float, "float") else v
    return ResultRow(**kw)


def write_results_table(rows: Sequence[ResultRow], path: str | os.PathLike) -> Path:
    path = Path(path)
    names = [f.name for f in fields(ResultRow)]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=names, delimiter="\t", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in asdict(r).items()})
    return path


def read_results_table(path: str | os.PathLike) -> list[ResultRow]:
    with open(path, newline="") as f:
        return [_row_from_strings(d) for d in csv.DictReader(f, delimiter="\t")]


def emit_report(rows: Sequence[ResultRow], delays: dict, out_dir: str | os.PathLike,
                alignment_records: Sequence[dict] = (), metadata: dict | None = None) -> dict:
    """Write ``results.tsv``, ``alignments.jsonl`` and ``report_meta.json`` under ``out_dir``.

    Alignment records are dicts with at least ``utt``, ``token``, ``frame``,
    ``posterior``, ``ref_start`` and ``ref_end`` (one per hypothesis token).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for r in rows:
        expected = latency(parse_policy(r.policy))
        if not (expected == r.latency_ms or (math.isinf(expected) and math.isinf(r.latency_ms))):
            raise ValueError(f"row {r.model}/{r.policy}: latency {r.latency_ms} != formula value {expected}")
    table = write_results_table(rows, out_dir / "results.tsv")
    with open(out_dir / "alignments.jsonl", "w") as f:
        for rec in alignment_records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    meta = {"delays": {k: (v.summary() if isinstance(v, DelayStats) else v) for k, v in delays.items()},
            "decisions": DESIGN_FLAGS}
    if metadata:
        meta.update(metadata)
    (out_dir / "report_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
    return {"table": table, "alignments": out_dir / "alignments.jsonl", "meta": out_dir / "report_meta.json"}


DESIGN_FLAGS = {
    "spike_definition": "peak posterior frame within the token's best-path run (CTC); greedy emission frame (transducer)",
    "delay_baseline": "last frame of the reference token span",
    "delay_pairs": "correct and substituted alignment pairs; insertions/deletions excluded",
    "bbd_repetition": "immediate self-repetition of the top hypothesis only",
    "bbd_rollback": "only the triggering expansion is discarded",
    "bbd_eos": "eos in a non-final block marks the block boundary; eos in the final block ends decoding",
    "bbd_block_cap": "2 * N_c expansions per block; 2 * T in the final block",
    "transducer_max_symbols_per_frame": 5,
    "context_injection": "every encoder layer, one context vector per layer",
    "context_slot_init": "mean of central-frame layer inputs",
    "positional_encoding": "sinusoidal, absolute frame index",
    "mask_count_distribution": "Uniform{1..|y|}",
    "decode_rescoring": "none (attention beam search only)",
}
