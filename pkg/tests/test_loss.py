import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from simassoc.geometry import BBox, ConfigError, giou
from simassoc.loss import (LossWeights, crossclip_loss, embed_loss, focal_aux_loss, id_mask, refine_losses,
                           self_mask, spatial_loss, temporal_loss, total_loss)
from simassoc.net import SimPair

from oracles import naive_embed_loss, naive_focal

T = lambda x: torch.tensor(np.asarray(x, dtype=np.float64))
M = lambda x: torch.tensor(x, dtype=torch.bool)


def test_embed_loss_hand_values():
    assert float(embed_loss(T([[1.0, 1.0]]), M([[True, False]]))) == pytest.approx(math.log(2), abs=1e-12)
    assert float(embed_loss(T([[5.0, 0.0]]), M([[True, False]]))) == pytest.approx(math.log1p(math.exp(-5)),
                                                                                 abs=1e-12)
    assert float(embed_loss(T([[5.0, 0.0]]), M([[True, False]]))) == pytest.approx(0.006715, abs=1e-6)


def test_embed_loss_empty_sums():
    assert float(embed_loss(T([[3.0, -1.0]]), M([[True, True]]))) == 0.0
    assert float(embed_loss(T([[3.0, -1.0]]), M([[False, False]]))) == 0.0
    assert float(embed_loss(torch.zeros((0, 3), dtype=torch.float64), torch.zeros((0, 3), dtype=torch.bool))) == 0.0


def test_embed_loss_matches_naive_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        W = rng.normal(0, 5, (8, 8))
        mask = rng.random((8, 8)) < 0.3
        assert float(embed_loss(T(W), M(mask))) == pytest.approx(naive_embed_loss(W, mask), abs=1e-9)


def test_embed_loss_large_responses_stay_finite():
    W = T([[800.0, -800.0, 790.0]])
    val = float(embed_loss(W, M([[True, False, False]])))
    assert val == pytest.approx(math.log1p(math.exp(-10)), abs=1e-12)


def test_focal_hand_values():
    assert float(focal_aux_loss(T([[0.5]]), M([[True]]), 2.0)) == pytest.approx(0.25 * math.log(2), abs=1e-12)
    assert float(focal_aux_loss(T([[0.5]]), M([[False]]), 2.0)) == pytest.approx(0.173287, abs=1e-6)
    perfect = T([[1.0, 0.0], [0.0, 1.0]])
    assert float(focal_aux_loss(perfect, M([[True, False], [False, True]]), 2.0)) == 0.0


def test_focal_matches_naive():
    rng = np.random.default_rng(1)
    for _ in range(50):
        S = rng.uniform(0, 1, (5, 7))
        mask = rng.random((5, 7)) < 0.4
        for g in (0.0, 1.0, 2.0, 3.5):
            assert float(focal_aux_loss(T(S), M(mask), g)) == pytest.approx(naive_focal(S, mask, g), abs=1e-9)


def test_masks():
    assert id_mask([1, None, 2], [2, 1, None]).tolist() == [[False, True, False], [False, False, False],
                                                           [True, False, False]]
    assert self_mask([4, None, 7]).tolist() == [[True, False, False], [False, True, False], [False, False, True]]


def test_spatial_single_detection_and_additivity():
    pair = SimPair(T([[0.8]]), T([[2.0]]))
    one = float(spatial_loss([(pair, self_mask([3]))]))
    assert one == pytest.approx(-(0.2 ** 2) * math.log(0.8), abs=1e-12)
    two = float(spatial_loss([(pair, self_mask([3])), (pair, self_mask([3]))]))
    assert two == pytest.approx(2 * one, abs=1e-12)


def test_spatial_three_ids_hand_W():
    W = np.array([[4.0, 1.0, -2.0], [0.5, 3.0, 2.5], [-1.0, 0.0, 1.0]])
    S = np.array([[1.0, 0.2, 0.0], [0.1, 1.0, 0.6], [0.0, 0.0, 1.0]])
    mask = self_mask([1, 2, 3])
    # rows enumerated by hand: each row has a single positive on the diagonal
    embed = (math.log(1 + math.exp(1 - 4) + math.exp(-2 - 4))
             + math.log(1 + math.exp(0.5 - 3) + math.exp(2.5 - 3))
             + math.log(1 + math.exp(-1 - 1) + math.exp(0 - 1)))
    focal = -sum(s ** 2 * math.log(1 - s) for s in (0.2, 0.1, 0.6))
    got = float(spatial_loss([(SimPair(T(S), T(W)), mask)]))
    assert got == pytest.approx(embed + focal, abs=1e-12)


def test_temporal_cases():
    assert float(temporal_loss([])) == 0.0
    W = np.array([[2.0, -1.0], [0.0, 1.0]])
    S = np.array([[0.9, 0.2], [0.3, 0.7]])
    mask = id_mask([5, 6], [5, 6])
    embed = math.log(1 + math.exp(-1 - 2)) + math.log(1 + math.exp(0 - 1))
    focal = -(0.1 ** 2 * math.log(0.9) + 0.2 ** 2 * math.log(0.8) + 0.3 ** 2 * math.log(0.7)
              + 0.3 ** 2 * math.log(0.7))
    assert float(temporal_loss([(SimPair(T(S), T(W)), mask)])) == pytest.approx(embed + focal, abs=1e-12)
    # near-perfect separation drives the embed term to ~0
    big = SimPair(T([[1.0, 0.0]]), T([[50.0, -50.0]]))
    assert float(embed_loss(big.W, id_mask([1], [1, 2]))) < 1e-40


def test_temporal_false_positive_rows_are_pure_negatives():
    W = T([[3.0, 2.0]])
    S = T([[0.4, 0.3]])
    mask = id_mask([None], [1, 2])
    got = float(temporal_loss([(SimPair(S, W), mask)]))
    assert got == pytest.approx(-(0.4 ** 2 * math.log(0.6) + 0.3 ** 2 * math.log(0.7)), abs=1e-12)


def test_crossclip_cases():
    one = SimPair(T([[1.0]]), T([[7.0]]))
    assert float(crossclip_loss(one, id_mask([1], [1]))) == 0.0
    same = SimPair(torch.ones((2, 2), dtype=torch.float64), T([[1.0, 1.0], [1.0, 1.0]]))
    assert float(focal_aux_loss(same.S, id_mask([4, 4], [4, 4]))) == 0.0

    ids = [1, 1, 2, 2]
    S = np.array([[1.0, 0.8, 0.1, 0.0], [0.8, 1.0, 0.2, 0.1], [0.1, 0.2, 1.0, 0.9], [0.0, 0.1, 0.9, 1.0]])
    W = np.array([[3.0, 2.0, -1.0, 0.0], [2.0, 3.0, 0.5, -0.5], [-1.0, 0.5, 4.0, 3.0], [0.0, -0.5, 3.0, 4.0]])
    mask = id_mask(ids, ids).numpy()
    expected = 0.0
    for r in range(4):
        inner = sum(math.exp(W[r, q] - W[r, p]) for p in range(4) for q in range(4) if mask[r, p] and not mask[r, q])
        expected += math.log(1 + inner)
        for c in range(4):
            s = S[r, c]
            expected -= (1 - s) ** 2 * math.log(max(s, 1e-12)) if mask[r, c] else s ** 2 * math.log(1 - s)
    assert float(crossclip_loss(SimPair(T(S), T(W)), M(mask))) == pytest.approx(expected, abs=1e-12)


def test_refine_losses():
    gt = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.4, 0.1, 0.3]])
    l1, g = refine_losses(T(gt), T(gt))
    assert float(l1) == 0.0 and float(g) == pytest.approx(0.0, abs=1e-15)
    a = BBox(0.05, 0.05, 0.10, 0.10)
    b = BBox(0.10, 0.10, 0.10, 0.10)
    _, g = refine_losses(T([a.as_array()]), T([b.as_array()]))
    assert float(g) == pytest.approx(1 - giou(a, b), abs=1e-12)
    assert float(g) == pytest.approx(1.079365, abs=1e-6)
    shifted = gt.copy()
    shifted[:, 0] += 0.1
    l1, _ = refine_losses(T(shifted), T(gt))
    assert float(l1) == pytest.approx(0.1 / 4, abs=1e-12)
    with pytest.raises(ValueError):
        refine_losses(T(gt), T(gt[:1]))


def test_total_loss_weights():
    w = LossWeights()
    assert (w.spatial, w.temporal, w.crossclip, w.l1, w.giou) == (0.1, 2.0, 1.0, 0.5, 0.3)
    assert float(total_loss(0, 0, 0, 0, 0, w).total) == 0.0
    assert float(total_loss(1, 1, 1, 1, 1, w).total) == pytest.approx(3.9, abs=1e-12)
    doubled = LossWeights(0.2, 4.0, 2.0, 1.0, 0.6)
    comps = (0.3, 1.7, 2.2, 0.05, 0.4)
    assert float(total_loss(*comps, doubled).total) == pytest.approx(2 * float(total_loss(*comps, w).total))
    with pytest.raises(ConfigError):
        total_loss(1, 1, 1, 1, 1, LossWeights(spatial=-1.0))


@given(st.lists(st.floats(0, 5), min_size=5, max_size=5), st.integers(0, 4), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_total_loss_linear_in_each_weight(comps, which, scale):
    base = [0.1, 2.0, 1.0, 0.5, 0.3]
    bumped = list(base)
    bumped[which] *= scale
    a = float(total_loss(*comps, LossWeights(*base)).total)
    b = float(total_loss(*comps, LossWeights(*bumped)).total)
    assert b - a == pytest.approx((scale - 1) * base[which] * comps[which], abs=1e-9)


def test_losses_nonnegative_and_monotone_in_positives():
    rng = np.random.default_rng(3)
    for _ in range(20):
        W = rng.normal(0, 2, (6, 6))
        S = rng.uniform(0.01, 0.99, (6, 6))
        mask = rng.random((6, 6)) < 0.3
        mask[:, 0] = True
        mask[:, 1] = False
        e = float(embed_loss(T(W), M(mask)))
        f = float(focal_aux_loss(T(S), M(mask)))
        assert e >= 0 and f >= 0
        # directional finite difference along one positive entry
        h = 1e-6
        W2, S2 = W.copy(), S.copy()
        W2[0, 0] += h
        S2[0, 0] += h
        assert (float(embed_loss(T(W2), M(mask))) - e) / h < 0
        assert (float(focal_aux_loss(T(S2), M(mask))) - f) / h < 0


def _rel_err(a, n, floor=1e-6):
    return np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor))


@pytest.mark.parametrize("seed", range(5))
def test_loss_gradients_match_finite_differences(seed):
    from oracles import central_difference

    rng = np.random.default_rng(seed)
    W = rng.normal(0, 2, (5, 6))
    S = rng.uniform(0.05, 0.95, (5, 6))
    mask = rng.random((5, 6)) < 0.4
    for fn, x in ((lambda v: embed_loss(v, M(mask)), W), (lambda v: focal_aux_loss(v, M(mask)), S)):
        t = T(x).requires_grad_(True)
        fn(t).backward()
        num = central_difference(lambda v: float(fn(T(v.reshape(x.shape)))), x.ravel(), 1e-6)
        assert _rel_err(t.grad.numpy().ravel(), num) < 1e-4
    boxes = np.column_stack([rng.uniform(0.3, 0.7, (4, 2)), rng.uniform(0.1, 0.3, (4, 2))])
    gt = boxes + rng.normal(0, 0.03, boxes.shape)
    for k in (0, 1):
        t = T(boxes).requires_grad_(True)
        refine_losses(t, T(gt))[k].backward()
        num = central_difference(lambda v: float(refine_losses(T(v.reshape(4, 4)), T(gt))[k]), boxes.ravel(), 1e-7)
        assert _rel_err(t.grad.numpy().ravel(), num) < 1e-4
