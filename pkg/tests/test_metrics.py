import numpy as np
import pytest

from simassoc.metrics import (MalformedTable, UndefinedMargin, evaluate, evaluate_many, idf1_from_overlap,
                              similarity_margin)

from oracles import brute_force_idf1

A = (0.25, 0.5, 0.2, 0.2)
B = (0.75, 0.5, 0.2, 0.2)


def _gt_two_objects(frames=3):
    return [(t, 1, A) for t in range(frames)] + [(t, 2, B) for t in range(frames)]


def test_perfect_tracking():
    gt = _gt_two_objects()
    rep = evaluate(gt, gt)
    assert (rep.idf1, rep.mota, rep.id_switches, rep.fp, rep.fn) == (1.0, 1.0, 0, 0, 0)


def test_mid_sequence_swap():
    gt = _gt_two_objects()
    # predicted ids 10/20 swap at frame 1 and stay swapped
    pred = [(0, 10, A), (0, 20, B), (1, 20, A), (1, 10, B), (2, 20, A), (2, 10, B)]
    rep = evaluate(pred, gt)
    assert rep.id_switches == 2
    # four candidate ID assignments: {1-10, 2-20} -> 2 frames, {1-20, 2-10} -> 4 frames
    idtp = 4
    assert rep.idtp == idtp
    assert rep.idf1 == pytest.approx(2 * idtp / (2 * idtp + 2 + 2))
    assert rep.mota == pytest.approx(1 - 2 / 6)
    assert rep.idf1 == pytest.approx(brute_force_idf1(pred, gt))


def test_misses_and_false_positives():
    gt = _gt_two_objects(2)
    pred = [(0, 1, A), (1, 1, A), (1, 9, (0.5, 0.9, 0.1, 0.1))]
    rep = evaluate(pred, gt)
    assert (rep.fn, rep.fp, rep.id_switches) == (2, 1, 0)
    assert rep.mota == pytest.approx(1 - 3 / 4)
    assert rep.idf1 == pytest.approx(2 * 2 / (4 + 1 + 2))


def test_low_overlap_is_not_a_match():
    gt = [(0, 1, A)]
    shifted = (A[0] + 0.15, A[1], A[2], A[3])  # IoU = 0.05 / 0.35
    rep = evaluate([(0, 1, shifted)], gt)
    assert (rep.fp, rep.fn, rep.idtp) == (1, 1, 0)


def test_duplicate_rows_rejected():
    with pytest.raises(MalformedTable):
        evaluate([(0, 1, A), (0, 1, B)], [(0, 1, A)])


def test_empty_tables():
    assert evaluate([], []).idf1 == 1.0
    rep = evaluate([], _gt_two_objects())
    assert rep.idf1 == 0.0 and rep.fn == 6


def _random_scenario(rng):
    n_gt = int(rng.integers(1, 6))
    frames = int(rng.integers(1, 6))
    centers = rng.uniform(0.1, 0.9, (n_gt, 2))
    gt, pred = [], []
    pool = [100, 101, 102, 103]  # plus the clutter id 999: at most 5 predicted trajectories
    labels = {}
    for t in range(frames):
        for g in range(n_gt):
            if rng.random() < 0.15:
                continue
            box = (centers[g, 0] + 0.01 * t, centers[g, 1], 0.08, 0.08)
            gt.append((t, g + 1, box))
            if rng.random() < 0.2:
                continue
            if g not in labels or rng.random() < 0.25:
                labels[g] = int(rng.choice(pool))
            jitter = rng.normal(0, 0.01, 2)
            pred.append((t, labels[g], (box[0] + jitter[0], box[1] + jitter[1], 0.08, 0.08)))
        if rng.random() < 0.3:
            pred.append((t, 999, tuple(rng.uniform(0.1, 0.9, 2)) + (0.08, 0.08)))
    # drop accidental duplicate (frame, id) pairs created by label reuse
    seen, clean = set(), []
    for row in pred:
        if (row[0], row[1]) not in seen:
            seen.add((row[0], row[1]))
            clean.append(row)
    return clean, gt


def test_idf1_equals_exhaustive_assignment():
    rng = np.random.default_rng(0)
    for _ in range(50):
        pred, gt = _random_scenario(rng)
        assert len({r[1] for r in pred}) <= 5 and len({r[1] for r in gt}) <= 5
        assert evaluate(pred, gt).idf1 == brute_force_idf1(pred, gt)


def test_idf1_invariant_to_relabeling():
    rng = np.random.default_rng(1)
    for _ in range(20):
        pred, gt = _random_scenario(rng)
        ids = sorted({r[1] for r in pred})
        perm = dict(zip(ids, rng.permutation([i + 5000 for i in ids])))
        relabeled = [(f, int(perm[i]), b) for f, i, b in pred]
        a, b = evaluate(pred, gt), evaluate(relabeled, gt)
        assert (a.idf1, a.mota, a.id_switches) == (b.idf1, b.mota, b.id_switches)


def test_idf1_from_overlap_edge_cases():
    assert idf1_from_overlap(np.zeros((0, 0)), 0, 0)[0] == 1.0
    assert idf1_from_overlap(np.array([[3, 1], [0, 2]]), 6, 6) == (pytest.approx(5 / 6), 5, 1, 1)


def test_evaluate_many_pools_counts():
    gt = _gt_two_objects()
    swapped = [(0, 10, A), (0, 20, B), (1, 20, A), (1, 10, B), (2, 20, A), (2, 10, B)]
    rep = evaluate_many({"a": (gt, gt), "b": (swapped, gt)})
    assert rep.idtp == 6 + 4 and rep.gt_count == 12 and rep.id_switches == 2
    assert rep.idf1 == pytest.approx(2 * 10 / (20 + 2 + 2))
    assert set(rep.per_sequence) == {"a", "b"}
    assert rep.to_csv().splitlines()[0].startswith("sequence,idf1")
    assert "OVERALL" in rep.format()


def test_similarity_margin():
    S = np.array([[1.0, 0.2, 0.9], [0.2, 1.0, 0.1], [0.9, 0.1, 1.0]])
    ids = np.array([1, 2, 1])
    mask = ids[:, None] == ids[None, :]
    pos, neg, gap = similarity_margin(S, mask)
    assert pos == pytest.approx((3 + 0.9 * 2) / 5)
    assert neg == pytest.approx(0.3 * 2 / 4)
    assert gap == pytest.approx(pos - neg)
    pos_x, _, _ = similarity_margin(S, mask, exclude_diagonal=True)
    assert pos_x == pytest.approx(0.9)
    with pytest.raises(UndefinedMargin):
        similarity_margin(np.ones((2, 2)), np.ones((2, 2), dtype=bool))
