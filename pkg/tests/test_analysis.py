import itertools
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maskstream.analysis import (DESIGN_FLAGS, DelayStats, ResultRow, corpus_delay, edit_distance, emit_report,
                                 read_results_table, relative_delay, spike_delay, token_error_rate)
from maskstream.data import Span

# (ref, hyp, distance), each verified by hand
HAND_CASES = [
    ("a b c", "a x c", 1),
    ("a b c", "a b c", 0),
    ("", "a", 1),
    ("a", "", 1),
    ("", "", 0),
    ("a b c", "c b a", 2),
    ("a b c d", "a c d", 1),
    ("a b", "a b c d", 2),
    ("kitten", "sitting", 3),
    ("a a a", "a", 2),
]


@pytest.mark.parametrize("ref,hyp,dist", HAND_CASES)
def test_hand_verified_distances(ref, hyp, dist):
    r = ref.split() if " " in ref or len(ref) <= 1 else list(ref)
    h = hyp.split() if " " in hyp or len(hyp) <= 1 else list(hyp)
    d, ops = edit_distance(r, h)
    assert d == dist
    assert sum(kind != "match" for kind, _, _ in ops) == dist
    assert [i for _, i, _ in ops if i is not None] == list(range(len(r)))
    assert [j for _, _, j in ops if j is not None] == list(range(len(h)))


def test_ter_value():
    assert token_error_rate([["a", "b", "c"]], [["a", "x", "c"]]) == pytest.approx(1 / 3)


seqs = st.lists(st.integers(0, 3), max_size=6)


@settings(max_examples=150, deadline=None)
@given(seqs, seqs, seqs)
def test_symmetry_and_triangle_inequality(a, b, c):
    ab, ba = edit_distance(a, b)[0], edit_distance(b, a)[0]
    assert ab == ba
    assert edit_distance(a, c)[0] <= ab + edit_distance(b, c)[0]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 2), max_size=4), st.lists(st.integers(0, 2), max_size=4))
def test_distance_matches_brute_force(a, b):
    # BFS over single-token edits from a towards b, restricted to the shared alphabet
    alphabet = sorted(set(a) | set(b)) or [0]
    frontier, seen, depth = {tuple(a)}, {tuple(a)}, 0
    while tuple(b) not in frontier:
        nxt = set()
        for s in frontier:
            for i in range(len(s) + 1):
                for x in alphabet:
                    nxt.add(s[:i] + (x,) + s[i:])
                if i < len(s):
                    nxt.add(s[:i] + s[i + 1:])
                    for x in alphabet:
                        nxt.add(s[:i] + (x,) + s[i + 1:])
        frontier = {s for s in nxt if s not in seen and len(s) <= max(len(a), len(b))}
        seen |= frontier
        depth += 1
    assert edit_distance(a, b)[0] == depth


def test_spike_delay_arithmetic():
    ops = edit_distance([4], [4])[1]
    assert spike_delay([10], [Span(4, 5, 9)], ops).mean == 80.0
    assert spike_delay([8], [Span(4, 5, 9)], ops).mean == 0.0


def test_delay_excludes_insertions_and_deletions():
    ref = [1, 2, 3]
    align = [Span(1, 0, 3), Span(2, 3, 6), Span(3, 6, 9)]
    stats = corpus_delay([ref], [align], [[1, 9, 9, 3]], [[2, 3, 4, 10]])
    _, ops = edit_distance(ref, [1, 9, 9, 3])
    assert stats.count == sum(k in ("match", "sub") for k, _, _ in ops)
    assert stats.count <= stats.n_ref == 3
    assert stats.match_rate == stats.count / 3


def test_empty_stats_are_explicit():
    stats = spike_delay([], [Span(1, 0, 4)], edit_distance([1], [])[1])
    assert stats.count == 0 and math.isnan(stats.mean) and stats.summary()["count"] == 0


def test_relative_delay_on_shared_tokens():
    stats = relative_delay([[1, 2]], [[5, 9]], [[1, 2]], [[4, 6]])
    assert stats.delays == [40.0, 120.0]


def _rows():
    return [ResultRow("transducer", "chunk4", 120, "random", 12.5, 80.0, 0),
            ResultRow("cbs", "block8-4-2", 200, "mask-ctc", 7.25, 40.5, 1),
            ResultRow("maskctc", "full", math.inf, "none", 3.0, -20.0, 0)]


def test_report_roundtrip_and_dump(tmp_path):
    align = [{"utt": "u", "token": 1, "frame": f, "posterior": 0.5, "ref_start": 0, "ref_end": 3} for f in range(4)]
    paths = emit_report(_rows(), {"x": DelayStats([40.0], 1)}, tmp_path, align)
    assert read_results_table(paths["table"]) == _rows()
    assert len(paths["alignments"].read_text().splitlines()) == 4
    meta = json.loads(paths["meta"].read_text())
    assert meta["decisions"] == DESIGN_FLAGS and meta["delays"]["x"]["mean_ms"] == 40.0


def test_empty_report_is_header_only(tmp_path):
    emit_report([], {}, tmp_path)
    assert (tmp_path / "results.tsv").read_text().splitlines() == [
        "model\tpolicy\tlatency_ms\tinit\terror_rate\tmean_delay_ms\tseed"]


def test_report_rejects_wrong_latency(tmp_path):
    with pytest.raises(ValueError, match="latency"):
        emit_report([ResultRow("transducer", "chunk4", 160, "random", 1.0, 0.0, 0)], {}, tmp_path)


def test_spike_delay_single_pair_mean_equals_pair():
    for hyp, last in itertools.product([0, 3, 7], [2, 5]):
        stats = spike_delay([hyp], [Span(1, 0, last + 1)], [("match", 0, 0)])
        assert stats.mean == (hyp - last) * 40
