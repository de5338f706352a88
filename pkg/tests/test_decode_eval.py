import csv
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avhubert import decode_eval as de


def onehot(path, C):
    x = np.full((len(path), C), -20.0)
    x[np.arange(len(path)), path] = 20.0
    return x


def test_greedy_collapse_examples():
    a, b, blank = 0, 1, 2
    assert de.greedy_decode(onehot([a, a, blank, b], 3)) == [a, b]
    assert de.greedy_decode(onehot([blank] * 4, 3)) == []
    assert de.greedy_decode(onehot([a, blank, a], 3)) == [a, a]


@given(st.lists(st.integers(0, 2), min_size=0, max_size=6))
@settings(max_examples=100, deadline=None)
def test_greedy_inverts_collapse_on_valid_paths(labels):
    # build the canonical path: blank between repeats
    path = []
    for i, k in enumerate(labels):
        if i and labels[i - 1] == k:
            path.append(3)
        path.append(k)
    path = path or [3]
    assert de.greedy_decode(onehot(path, 4)) == labels


def brute_best(logits):
    lp = de._log_softmax(logits)
    T, C = lp.shape
    scores = {}
    for path in itertools.product(range(C), repeat=T):
        lab = tuple(de.collapse(path, C - 1))
        scores[lab] = np.logaddexp(scores.get(lab, -np.inf), lp[np.arange(T), path].sum())
    return scores


def test_exhaustive_beam_equals_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(500):
        T = int(rng.integers(1, 5))
        U = int(rng.integers(1, 3))
        logits = rng.normal(size=(T, U + 1)) * 2
        scores = brute_best(logits)
        best = max(scores.values())
        hyp = de.beam_decode(logits, beam_width=(U + 1) ** T)
        assert hyp.score == pytest.approx(best, abs=1e-9)
        assert scores[hyp.tokens] == pytest.approx(best, abs=1e-9)


def test_beam_one_matches_greedy_on_unambiguous():
    logits = onehot([0, 0, 2, 1, 1, 2, 0], 3)
    assert list(de.beam_decode(logits, 1).tokens) == de.greedy_decode(logits)


def test_narrow_beams_bounded_by_exhaustive():
    # a pruned beam only sums a subset of each labeling's alignments, so its
    # score is a lower bound on that labeling's marginal, which in turn is at
    # most the exhaustive optimum
    rng = np.random.default_rng(1)
    for _ in range(100):
        logits = rng.normal(size=(4, 3))
        scores = brute_best(logits)
        exact = de.beam_decode(logits, 3**4).score
        for w in (1, 2, 4, 8):
            hyp = de.beam_decode(logits, w)
            assert hyp.score <= scores[hyp.tokens] + 1e-12
            assert hyp.score <= exact + 1e-12


def test_beam_rejects_zero_width():
    with pytest.raises(ValueError):
        de.beam_decode(np.zeros((2, 3)), 0)


def test_wer_examples():
    assert de.wer([1, 2, 3], [1, 2, 3]) == 0.0
    assert de.wer([], [4, 5, 6]) == 1.0
    a, b, c, d, x = range(5)
    assert de.wer([a, b, c], [a, x, c, d]) == 0.5
    with pytest.raises(ValueError):
        de.wer([1], [])


@given(st.lists(st.integers(0, 4), max_size=8), st.lists(st.integers(0, 4), min_size=1, max_size=8),
       st.permutations(range(5)))
@settings(max_examples=200, deadline=None)
def test_wer_properties(hyp, ref, perm):
    w = de.wer(hyp, ref)
    assert 0 <= w <= (len(hyp) + len(ref)) / len(ref)
    assert de.wer([perm[h] for h in hyp], [perm[r] for r in ref]) == w
    assert de.wer(ref, ref) == 0


def test_segment_words():
    lex = [(0, 1), (2, 3, 4), (5, 0)]
    assert de.segment_words([0, 1, 2, 3, 4, 5, 0], lex) == [0, 1, 2]
    assert de.segment_words([0, 1, 3, 3, 5, 0], lex) == [0, de.UNK, 2]
    assert de.segment_words([], lex) == []
    # a word prefix that does not complete is an error token
    assert de.segment_words([2, 3], lex) == [de.UNK]


def write_run(root, name, variant, n_iter, with_decode=True):
    run = root / name
    run.mkdir()
    (run / "manifest.json").write_text(json.dumps({"variant": variant}))
    with open(run / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "layer", "K", "purity", "nmi", "train_loss", "val_loss"])
        for i in range(1, n_iter + 1):
            w.writerow([i, 2, 20, 0.5, 0.3 + 0.1 * i, 1.0, 1.1])
    if with_decode:
        de.write_decode_results(run / "decode.csv", [
            ("u0", [1, 2], [1, 2]), ("u1", [1, 2, 3], [1, 3]), ("u2", [4, 5, 6, 7, 8], [4])])
    return run


def test_report_tables(tmp_path):
    run = write_run(tmp_path, "r1", "AV/MFCC->AV", 2)
    paths = de.report([run], tmp_path / "out")
    rows = list(csv.DictReader(open(paths["iterations.csv"])))
    assert len(rows) == 2
    buckets = list(csv.DictReader(open(paths["wer_by_length.csv"])))
    assert sum(int(b["count"]) for b in buckets) == 3
    var = list(csv.DictReader(open(paths["variants.csv"])))
    assert float(var[0]["wer"]) == pytest.approx(5 / 10)


def test_report_errors(tmp_path):
    with pytest.raises(ValueError):
        de.report([], tmp_path / "o")
    (tmp_path / "empty").mkdir()
    with pytest.raises(de.ReportError, match="metrics.csv"):
        de.report([tmp_path / "empty"], tmp_path / "o")


def test_report_accepts_finetune_run(tmp_path):
    ft = tmp_path / "lip"
    ft.mkdir()
    (ft / "finetune.json").write_text(json.dumps({"mode": "visual-only"}))
    de.write_decode_results(ft / "decode.csv", [("u0", [1, 2], [1])])
    paths = de.report([write_run(tmp_path, "r1", "AV/MFCC->AV", 1), ft], tmp_path / "out")
    var = list(csv.DictReader(open(paths["variants.csv"])))
    assert [v["variant"] for v in var] == ["AV/MFCC->AV", "finetune visual-only"]
    assert float(var[1]["wer"]) == pytest.approx(0.5)
    assert len(list(csv.DictReader(open(paths["iterations.csv"])))) == 1
