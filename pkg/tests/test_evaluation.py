import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from momentloc.evaluation import (PredictionSet, decode_from_probs, decode_topk, ensemble_merge,
                                  format_metric_table, merge_prediction_files, metric_grid, random_baseline,
                                  read_predictions, recall_at_k, temporal_iou, to_frames, to_seconds,
                                  write_predictions)
from momentloc.types import ClipSample, MomentSpan

from oracles import iou, recall, topk_spans


def test_decode_examples():
    ps, pe = np.array([0.7, 0.2, 0.1]), np.array([0.1, 0.2, 0.7])
    top1 = decode_from_probs(ps, pe, 1, 3).candidates
    assert [(s, e) for s, e, _ in top1] == [(0, 2)] and top1[0][2] == pytest.approx(0.49)
    top3 = decode_from_probs(ps, pe, 3, 3).candidates
    assert [(s, e) for s, e, _ in top3] == [(0, 2), (0, 1), (1, 2)]
    np.testing.assert_allclose([c[2] for c in top3], [0.49, 0.14, 0.14])


def test_decode_single_frame_ties_follow_start():
    cands = decode_from_probs(np.full(4, 0.25), np.full(4, 0.25), 4, 1).candidates
    assert [(s, e) for s, e, _ in cands] == [(0, 0), (1, 1), (2, 2), (3, 3)]
    assert all(c[2] == 1 / 16 for c in cands)


def test_decode_rejects_bad_arguments():
    with pytest.raises(ValueError):
        decode_topk(np.zeros(3), np.zeros(3), k=0)
    with pytest.raises(ValueError):
        decode_topk(np.zeros(3), np.zeros(3), max_len=0)


def test_decode_matches_enumeration():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 65))
        a, b = rng.standard_normal(n) * 2, rng.standard_normal(n) * 2
        k, max_len = int(rng.integers(1, 8)), int(rng.integers(1, 40))
        got = decode_topk(a, b, k, max_len).candidates
        ps = np.exp(a - a.max()) / np.exp(a - a.max()).sum()
        pe = np.exp(b - b.max()) / np.exp(b - b.max()).sum()
        want = topk_spans(ps.tolist(), pe.tolist(), k, max_len)
        assert [(s, e) for s, e, _ in got] == [(s, e) for s, e, _ in want]


@pytest.mark.parametrize("a, b, expected", [
    ((0, 9), (0, 9), 1.0),
    ((0, 9), (5, 14), 1 / 3),
    ((0, 4), (5, 9), 0.0),
    ((3, 3), (0, 9), 0.1),
])
def test_temporal_iou_values(a, b, expected):
    assert temporal_iou(MomentSpan(*a), MomentSpan(*b)) == expected


def test_iou_of_overlapping_example_is_exactly_one_third():
    assert temporal_iou(MomentSpan(0, 9), MomentSpan(5, 14)) == 5 / 15


spans = st.tuples(st.integers(0, 50), st.integers(0, 30)).map(lambda t: MomentSpan(t[0], t[0] + t[1]))


@given(spans, spans)
@settings(max_examples=200, deadline=None)
def test_iou_properties(a, b):
    v = temporal_iou(a, b)
    assert v == temporal_iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)
    assert v == pytest.approx(iou((a.start, a.end), (b.start, b.end)), abs=0)


def random_queries(rng, n):
    preds, truths = [], []
    for i in range(n):
        length = int(rng.integers(5, 40))
        s = int(rng.integers(0, length))
        truths.append(MomentSpan(s, int(rng.integers(s, length))))
        cands = []
        for _ in range(int(rng.integers(0, 7))):
            a = int(rng.integers(0, length))
            cands.append((a, int(rng.integers(a, length)), float(rng.random())))
        preds.append(PredictionSet(f"c{i}", sorted(cands, key=lambda c: -c[2])))
    return preds, truths


def test_recall_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(40):
        preds, truths = random_queries(rng, int(rng.integers(1, 30)))
        for k in (1, 5):
            for thr in (0.3, 0.5, 0.7):
                want = recall([p.candidates for p in preds], [(t.start, t.end) for t in truths], k, thr)
                assert recall_at_k(preds, truths, k, thr) == want


def test_recall_examples_and_monotonicity():
    truths = [MomentSpan(0, 9), MomentSpan(5, 6)]
    perfect = [PredictionSet("a", [(0, 9, 1.0)]), PredictionSet("b", [(5, 6, 1.0)])]
    assert recall_at_k(perfect, truths, 1, 0.9) == 1.0
    rng = np.random.default_rng(2)
    preds, truths = random_queries(rng, 100)
    r = [recall_at_k(preds, truths, k, 0.3) for k in (1, 2, 5)]
    assert r == sorted(r)
    r = [recall_at_k(preds, truths, 5, t) for t in (0.1, 0.3, 0.5, 0.9)]
    assert r == sorted(r, reverse=True)
    with pytest.raises(ValueError):
        recall_at_k(preds, truths[:-1], 1, 0.3)


def test_metric_table_has_four_cells():
    table = format_metric_table({"r1_03": 0.5, "r1_05": 0.25, "r5_03": 1.0, "r5_05": 0.75})
    assert "IoU=0.3" in table and "IoU=0.5" in table
    assert [line.split()[0] for line in table.splitlines()[1:]] == ["R@1", "R@5"]
    assert "50.00" in table and "100.00" in table


def test_ensemble_examples():
    a = PredictionSet("x", [(0, 1, 0.9), (2, 3, 0.5)])
    b = PredictionSet("x", [(4, 5, 0.7), (6, 7, 0.6)])
    assert [c[2] for c in ensemble_merge(a, b, 3).candidates] == [0.9, 0.7, 0.6]
    assert ensemble_merge(a, PredictionSet("x"), 1).candidates == [(0, 1, 0.9)]
    with pytest.raises(ValueError):
        ensemble_merge(a, PredictionSet("y"))


def test_self_merge_duplicates_then_truncates():
    a = PredictionSet("x", [(0, 1, 0.9), (2, 3, 0.8), (4, 5, 0.7), (6, 7, 0.6), (8, 9, 0.5)])
    merged = ensemble_merge(a, a, 5).candidates
    assert merged == [a.candidates[0]] * 2 + [a.candidates[1]] * 2 + [a.candidates[2]]


def test_merge_tie_rule_is_deterministic():
    a = PredictionSet("x", [(3, 9, 0.5), (1, 4, 0.5)])
    b = PredictionSet("x", [(1, 2, 0.5), (0, 8, 0.4)])
    one = ensemble_merge(a, b, 4).candidates
    two = ensemble_merge(b, a, 4).candidates
    assert one == two == [(1, 2, 0.5), (1, 4, 0.5), (3, 9, 0.5), (0, 8, 0.4)]


@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 1)), max_size=5),
       st.lists(st.tuples(st.integers(0, 5), st.integers(0, 5), st.floats(0, 1)), max_size=5),
       st.integers(1, 10))
@settings(max_examples=100, deadline=None)
def test_merge_properties(ca, cb, k):
    a = PredictionSet("x", [(s, s + e, p) for s, e, p in ca])
    b = PredictionSet("x", [(s, s + e, p) for s, e, p in cb])
    out = [c[2] for c in ensemble_merge(a, b, k).candidates]
    pool = sorted([c[2] for c in a.candidates + b.candidates], reverse=True)
    assert out == pool[:k]


def test_prediction_file_round_trip(tmp_path):
    preds = [PredictionSet("a", [(4, 5, 0.5), (0, 9, 0.25)]), PredictionSet("b", [(1, 1, 1.0)], query_idx=2)]
    path = tmp_path / "p.jsonl"
    write_predictions(path, preds, {"a": 2.0, "b": 2.0})
    lines = path.read_text().splitlines()
    assert len(lines) == 2 and '"candidates": [[2.0, 3.0, 0.5]' in lines[0]
    back = read_predictions(path, {"a": 2.0, "b": 2.0})
    assert [(p.clip_id, p.query_idx, p.candidates) for p in back] == [(p.clip_id, p.query_idx, p.candidates)
                                                                      for p in preds]
    merged = merge_prediction_files(back, back, 5)
    assert merged[1].candidates == [(1, 1, 1.0)] * 2


@given(st.integers(0, 500), st.integers(0, 60), st.sampled_from([0.5, 1.0, 1.87, 2.0, 30.0]))
@settings(max_examples=200, deadline=None)
def test_seconds_conversion_round_trips(s, length, fps):
    assert to_frames(*to_seconds(s, s + length, fps), fps) == (s, s + length)


def test_random_baseline_matches_simple_case():
    clip = ClipSample("c", np.zeros((10, 1)), np.zeros((1, 1)), MomentSpan(0, 9))
    assert random_baseline([clip], 1, 0.3, n_trials=100) == 1.0
    rng = np.random.default_rng(0)
    clips = [ClipSample(str(i), np.zeros((100, 1)), np.zeros((1, 1)), MomentSpan(10, 19)) for i in range(3)]
    est = random_baseline(clips, 1, 0.5, n_trials=4000, rng=rng)
    # length-10 windows with IoU >= 0.5 against [10, 19] start in [7, 13]: 7 of 91 starts
    assert est == pytest.approx(7 / 91, abs=0.015)


def test_metric_grid_keys():
    preds = [PredictionSet("a", [(0, 9, 1.0)])]
    assert metric_grid(preds, [MomentSpan(0, 9)]) == {"r1_03": 1.0, "r1_05": 1.0, "r5_03": 1.0, "r5_05": 1.0}
