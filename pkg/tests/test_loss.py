import numpy as np
import pytest

from minkunext.autodiff import Tape, Var
from minkunext.gradcheck import central_diff, max_rel_error
from minkunext.loss import LossConfig, tsap_loss, tsap_loss_tape


def _masks(b, pos_pairs, neg_pairs):
    pos = np.zeros((b, b), dtype=bool)
    neg = np.zeros((b, b), dtype=bool)
    for q, i in pos_pairs:
        pos[q, i] = True
    for q, i in neg_pairs:
        neg[q, i] = True
    return pos, neg


def smooth_ap_oracle(desc, pos, neg, tau):
    """Independent untruncated smooth-AP: direct transcription of the
    definition with P = all positives, plain python loops."""
    import math

    b = desc.shape[0]
    def g(x):
        return 1.0 / (1.0 + math.exp(-x / tau))

    def d(a, c):
        return math.sqrt(sum((desc[a, k] - desc[c, k]) ** 2 for k in range(desc.shape[1])))

    losses = []
    for q in range(b):
        p_set = [i for i in range(b) if pos[q, i] and i != q]
        if not p_set:
            continue
        n_set = [i for i in range(b) if neg[q, i] and i != q and not pos[q, i]]
        omega = p_set + n_set
        ap = 0.0
        for i in p_set:
            num = 1.0 + sum(g(d(q, i) - d(q, j)) for j in p_set if j != i)
            den = 1.0 + sum(g(d(q, i) - d(q, j)) for j in omega if j != i)
            ap += num / den
        losses.append(1.0 - ap / len(p_set))
    return sum(losses) / len(losses)


class TestLossIdentities:
    def test_single_positive_no_negatives_is_exactly_zero(self):
        desc = np.array([[0.0, 0.0], [1.0, 0.0]])
        pos, neg = _masks(2, [(0, 1)], [])
        loss, grad, ap = tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=2))
        assert loss == 0.0
        assert ap[0] == 1.0

    def test_equal_distance_positive_negative_is_one_third(self):
        desc = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
        pos, neg = _masks(3, [(0, 1)], [(0, 2)])
        loss, _, _ = tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=3))
        assert abs(loss - 1.0 / 3.0) <= 1e-12

    def test_well_separated_pair_is_nearly_zero(self):
        # positive at distance 0.1, negative at 0.5: G(-0.4 / 0.01) ~ 4e-18
        desc = np.array([[0.0], [0.1], [0.5]])
        pos, neg = _masks(3, [(0, 1)], [(0, 2)])
        loss, _, _ = tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=3))
        assert loss <= 1e-9

    def test_no_valid_query_rejected(self):
        desc = np.zeros((2, 3))
        pos, neg = _masks(2, [], [(0, 1), (1, 0)])
        with pytest.raises(ValueError, match="no valid query"):
            tsap_loss(desc, pos, neg, LossConfig(tau=0.01, k=4, batch_size=2))


class TestLossProperties:
    def test_range_and_ap_range(self):
        rng = np.random.default_rng(0)
        cfg = LossConfig(tau=0.05, k=3, batch_size=8)
        for _ in range(20):
            desc = rng.standard_normal((8, 4))
            group = rng.integers(0, 3, size=8)
            pos = (group[:, None] == group[None, :]) & ~np.eye(8, dtype=bool)
            neg = group[:, None] != group[None, :]
            loss, _, ap = tsap_loss(desc, pos, neg, cfg)
            assert 0.0 <= loss < 1.0
            valid = ~np.isnan(ap)
            assert ((ap[valid] > 0) & (ap[valid] <= 1)).all()

    def test_queries_without_positives_excluded(self):
        desc = np.array([[0.0], [0.3], [10.0]])
        pos, neg = _masks(3, [(0, 1), (1, 0)], [(2, 0), (2, 1)])
        _, _, ap = tsap_loss(desc, pos, neg, LossConfig(tau=0.1, k=2, batch_size=3))
        assert np.isnan(ap[2]) and not np.isnan(ap[0])

    def test_truncation_consistency_with_untruncated_oracle(self):
        # with k >= number of positives the loss equals the untruncated value
        rng = np.random.default_rng(1)
        cfg = LossConfig(tau=0.1, k=8, batch_size=8)
        for _ in range(10):
            desc = rng.standard_normal((8, 3))
            group = rng.integers(0, 3, size=8)
            pos = (group[:, None] == group[None, :]) & ~np.eye(8, dtype=bool)
            neg = group[:, None] != group[None, :]
            loss, _, _ = tsap_loss(desc, pos, neg, cfg)
            assert loss == pytest.approx(smooth_ap_oracle(desc, pos, neg, cfg.tau), abs=1e-12)

    def test_truncation_selects_nearest_positives(self):
        # one query, positives at distances 1 and 3, k = 1: only the nearer
        # one enters P, so a negative at distance 2 outranks nothing in the
        # numerator but dominates the far positive case
        desc = np.array([[0.0], [1.0], [3.0], [2.0]])
        pos, neg = _masks(4, [(0, 1), (0, 2)], [(0, 3)])
        cfg = LossConfig(tau=0.01, k=1, batch_size=4)
        loss, _, _ = tsap_loss(desc, pos, neg, cfg)
        # P = {1}; omega = {1, 3}; d_pos = 1 < d_neg = 2 -> AP = 1, loss = 0
        assert loss <= 1e-9

    def test_monotone_in_negative_distance(self):
        rng = np.random.default_rng(2)
        cfg = LossConfig(tau=0.2, k=2, batch_size=6)
        for _ in range(100):
            desc = rng.standard_normal((6, 3))
            pos = np.zeros((6, 6), dtype=bool)
            neg = np.zeros((6, 6), dtype=bool)
            pos[0, 1] = pos[0, 2] = True
            neg[0, 3] = neg[0, 4] = neg[0, 5] = True
            base, _, _ = tsap_loss(desc, pos, neg, cfg)
            # move negative 3 strictly farther from the query along their line
            moved = desc.copy()
            moved[3] = desc[0] + 1.7 * (desc[3] - desc[0])
            farther, _, _ = tsap_loss(moved, pos, neg, cfg)
            assert farther <= base + 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        cfg = LossConfig(tau=0.1, k=2, batch_size=6)
        desc = rng.standard_normal((6, 3))
        group = np.array([0, 0, 0, 1, 1, 1])
        pos = (group[:, None] == group[None, :]) & ~np.eye(6, dtype=bool)
        neg = group[:, None] != group[None, :]
        _, grad, _ = tsap_loss(desc, pos, neg, cfg)
        fd = central_diff(lambda v: tsap_loss(v, pos, neg, cfg)[0], desc)
        assert max_rel_error(grad, fd) <= 1e-4

    def test_tape_integration(self):
        rng = np.random.default_rng(4)
        cfg = LossConfig(tau=0.1, k=2, batch_size=4)
        desc = Var(rng.standard_normal((4, 2)))
        group = np.array([0, 0, 1, 1])
        pos = (group[:, None] == group[None, :]) & ~np.eye(4, dtype=bool)
        neg = group[:, None] != group[None, :]
        tape = Tape()
        loss = tsap_loss_tape(tape, desc, pos, neg, cfg)
        grads = tape.backward(loss)
        _, direct, _ = tsap_loss(desc.data, pos, neg, cfg)
        assert np.allclose(grads[desc], direct)
