import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from c2srt.metrics import (PredictionMatrix, average_precision, evaluate, mean_average_precision,
                           topk_prf1)


def ref_ap(scores, truth):
    n = len(scores)
    pos = [i for i in range(n) if truth[i]]
    if not pos:
        return None

    def rank(i):
        return 1 + sum(1 for j in range(n) if scores[j] > scores[i] or (scores[j] == scores[i] and j < i))
    total = 0.0
    for i in pos:
        r = rank(i)
        hits = sum(1 for j in pos if rank(j) <= r)
        total += hits / r
    return total / len(pos)


def ref_prf(scores, truth, k):
    tp = npred = npos = 0
    for row, lab in zip(scores, truth):
        top = sorted(range(len(row)), key=lambda c: (-row[c], c))[:k]
        tp += sum(lab[c] for c in top)
        npred += k
        npos += sum(lab)
    p = tp / npred
    r = tp / npos if npos else 0.0
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return p, r, f


def random_matrix(rng):
    n, c = int(rng.integers(1, 9)), int(rng.integers(1, 7))
    scores = rng.integers(0, 4, size=(n, c)) / 3.0 if rng.random() < 0.4 else rng.random((n, c))
    truth = (rng.random((n, c)) < 0.4).astype(int)
    return scores, truth


def test_oracle_equivalence_many_matrices():
    rng = np.random.default_rng(3)
    for _ in range(200):
        scores, truth = random_matrix(rng)
        pm = PredictionMatrix(scores, truth, np.ones(scores.shape[1], bool))
        aps = [ref_ap(scores[:, c], truth[:, c]) for c in range(scores.shape[1])]
        valid = [a for a in aps if a is not None]
        if valid:
            assert abs(mean_average_precision(pm) - np.mean(valid)) <= 1e-9
        for k in range(1, scores.shape[1] + 1):
            got = topk_prf1(pm, k)
            want = ref_prf(scores, truth, k)
            assert abs(got.precision - want[0]) <= 1e-9
            assert abs(got.recall - want[1]) <= 1e-9
            assert abs(got.f1 - want[2]) <= 1e-9


def test_ap_worked_example():
    # ranking: 0.9(+) 0.8(-) 0.7(+) -> AP = (1/1 + 2/3) / 2
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1 + 2 / 3) / 2)
    assert average_precision([0.1, 0.2], [0, 0]) is None
    # tie: the lower index ranks first
    assert average_precision([0.5, 0.5], [0, 1]) == pytest.approx(0.5)


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=12), st.data())
def test_ap_bounds_and_perfect_ranking(scores, data):
    truth = data.draw(st.lists(st.integers(0, 1), min_size=len(scores), max_size=len(scores)))
    ap = average_precision(scores, truth)
    if sum(truth) == 0:
        assert ap is None
    else:
        assert 0 < ap <= 1 + 1e-12
        assert math.isclose(ap, ref_ap(scores, truth), abs_tol=1e-9)
        # scores that put every positive first can only do better
        assert average_precision([float(t) for t in truth], truth) >= ap - 1e-12


def test_perfect_scores_give_ap_one():
    truth = [0, 1, 0, 1, 1]
    assert average_precision([t + 0.0 for t in truth], truth) == pytest.approx(1.0)


def test_zsl_masks_seen_columns():
    scores = np.array([[0.9, 0.1, 0.8], [0.2, 0.7, 0.1]])
    truth = np.array([[1, 0, 0], [0, 1, 1]])
    rep = evaluate(scores, truth, n_seen=1, task="zsl", ks=(1,))
    # unseen columns 1 and 2 only
    want = np.mean([ref_ap(scores[:, 1], truth[:, 1]), ref_ap(scores[:, 2], truth[:, 2])])
    assert rep.mAP == pytest.approx(want)
    full = evaluate(scores, truth, n_seen=1, task="gzsl", ks=(1,))
    assert full.mAP == pytest.approx(np.mean([ref_ap(scores[:, c], truth[:, c]) for c in range(3)]))


def test_categories_without_positives_are_excluded(caplog):
    scores = np.array([[0.9, 0.1], [0.2, 0.7]])
    truth = np.array([[1, 0], [1, 0]])
    pm = PredictionMatrix(scores, truth, np.array([True, True]))
    assert mean_average_precision(pm) == pytest.approx(1.0)
    assert "excluded" in caplog.text


def test_recall_uses_true_positives():
    scores = np.array([[0.9, 0.8, 0.1]])
    truth = np.array([[1, 0, 1]])
    top = topk_prf1(PredictionMatrix(scores, truth, np.ones(3, bool)), 2)
    assert top.precision == 0.5 and top.recall == 0.5
    assert top.printed_recall == 1.0      # predictions / positives, audit only


def test_errors():
    with pytest.raises(ValueError):
        PredictionMatrix.for_task(np.zeros((2, 2)), np.zeros((2, 2)), 2, "zsl")
    with pytest.raises(ValueError):
        PredictionMatrix.for_task(np.zeros((2, 2)), np.zeros((2, 2)), 1, "fsl")
    with pytest.raises(ValueError):
        PredictionMatrix(np.zeros((2, 2)), np.full((2, 2), 2), np.ones(2, bool))
    with pytest.raises(ValueError):
        topk_prf1(PredictionMatrix(np.zeros((1, 2)), np.ones((1, 2)), np.ones(2, bool)), 3)


def test_report_layout():
    rep = evaluate(np.array([[0.3, 0.6, 0.2]]), np.array([[0, 1, 1]]), 1, "zsl", ks=(1, 2)).to_dict()
    assert set(rep) == {"task", "mAP", "perK", "debug"}
    assert set(rep["perK"]) == {"1", "2"} and set(rep["perK"]["1"]) == {"P", "R", "F1"}


@given(st.integers(0, 2**31))
def test_zsl_ignores_seen_columns_and_monotone_transforms(seed):
    r = np.random.default_rng(seed)
    scores = r.standard_normal((6, 5))
    truth = (r.random((6, 5)) < 0.5).astype(int)
    truth[0] = 1
    base = evaluate(scores, truth, 2, "zsl", ks=(1, 2)).to_dict()
    perturbed = scores.copy()
    perturbed[:, :2] = r.standard_normal((6, 2)) * 100
    assert evaluate(perturbed, truth, 2, "zsl", ks=(1, 2)).to_dict() == base
    assert evaluate(np.exp(3 * scores), truth, 2, "zsl", ks=(1, 2)).mAP == pytest.approx(base["mAP"], abs=1e-12)


def test_topk_extremes():
    truth = np.array([[1, 1, 0, 0], [0, 0, 1, 1]])
    pm = PredictionMatrix(truth.astype(float), truth, np.ones(4, bool))
    t = topk_prf1(pm, 2)
    assert (t.precision, t.recall, t.f1) == (1.0, 1.0, 1.0)
    t = topk_prf1(PredictionMatrix(1.0 - truth, truth, np.ones(4, bool)), 2)
    assert (t.precision, t.recall, t.f1) == (0.0, 0.0, 0.0)
