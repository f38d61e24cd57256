import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dualdec import autodiff as ad
from dualdec import losses
from dualdec.autodiff import Tape, Tensor


# ---------------------------------------------------------------------------
# softmin


def test_softmin_gamma_zero_is_min():
    assert losses.softmin([3.0, 1.0, 2.0], 0.0) == 1.0


def test_softmin_pair_of_equal_values():
    # a - gamma*ln(2) for two equal entries
    assert losses.softmin([2.0, 2.0], 1.0) == pytest.approx(2.0 - math.log(2), abs=1e-12)
    assert losses.softmin([2.0, 2.0], 1.0) == pytest.approx(1.30685, abs=1e-5)


def test_softmin_spread_values():
    assert losses.softmin([0.0, 10.0], 1.0) == pytest.approx(-math.log1p(math.exp(-10.0)), abs=1e-15)
    assert losses.softmin([0.0, 10.0], 1.0) == pytest.approx(-4.54e-5, abs=1e-7)


def test_softmin_rejects_empty():
    with pytest.raises(ValueError):
        losses.softmin([], 1.0)


def test_softmin_ignores_infinities():
    assert losses.softmin([np.inf, 3.0, np.inf], 1.0) == pytest.approx(3.0)
    assert losses.softmin([np.inf, np.inf], 1.0) == np.inf


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(min_value=-50, max_value=50), min_size=1, max_size=8),
    st.floats(min_value=0.0, max_value=10.0),
)
def test_softmin_bounds(values, gamma):
    sm = losses.softmin(values, gamma)
    lo = min(values) - gamma * math.log(len(values))
    assert sm <= min(values) + 1e-12
    assert sm >= lo - 1e-9


# ---------------------------------------------------------------------------
# soft-DTW value against the path-enumeration oracle


def test_softdtw_single_cell():
    for gamma in (0.0, 0.5, 1.0, 10.0):
        assert losses.softdtw_value(np.array([[3.25]]), gamma) == pytest.approx(3.25)


def test_softdtw_hard_min_two_by_two():
    delta = np.array([[1.0, 9.0], [9.0, 1.0]])
    # three monotone paths cost 2 (diagonal), 11, 11
    assert losses.softdtw_value(delta, 0.0) == 2.0
    costs = sorted(float((p * delta).sum()) for p in losses.enumerate_alignments(2, 2))
    assert costs == [2.0, 11.0, 11.0]


def test_softdtw_rejects_nonfinite():
    with pytest.raises(ValueError):
        losses.softdtw_value(np.array([[1.0, np.inf]]), 1.0)


def test_softdtw_matches_enumeration_4x5():
    rng = np.random.default_rng(11)
    for _ in range(5):
        delta = rng.uniform(0.0, 4.0, size=(4, 5))
        dp = losses.softdtw_value(delta, 1.0)
        enum = losses.softdtw_by_enumeration(delta, 1.0)
        assert abs(dp - enum) <= 1e-9


def test_softdtw_equals_classic_dtw_at_gamma_zero():
    rng = np.random.default_rng(3)
    for _ in range(50):
        k, l = rng.integers(1, 6, size=2)
        delta = rng.uniform(0.0, 5.0, size=(k, l))
        hard = losses.softdtw_by_enumeration(delta, 0.0)
        assert losses.softdtw_value(delta, 0.0) == pytest.approx(hard, abs=1e-12)


def test_softdtw_monotone_in_gamma():
    rng = np.random.default_rng(5)
    for _ in range(10):
        delta = rng.uniform(0.0, 3.0, size=(3, 4))
        vals = [losses.softdtw_value(delta, g) for g in (0.0, 0.1, 0.5, 1.0, 5.0)]
        assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_softdtw_identical_sequences_zero_cost():
    rng = np.random.default_rng(9)
    steps = [Tensor(rng.uniform(size=(1, 6))) for _ in range(4)]
    val = losses.softdtw_agreement(steps, steps, gamma=0.0)
    assert val.item() == 0.0


# ---------------------------------------------------------------------------
# alignment enumeration oracle


@pytest.mark.parametrize("k,l,count", [(1, 1, 1), (2, 2, 3), (3, 3, 13)])
def test_alignment_counts(k, l, count):
    assert len(losses.enumerate_alignments(k, l)) == count


def test_alignment_counts_match_delannoy():
    for k in range(1, 6):
        for l in range(1, 6):
            assert len(losses.enumerate_alignments(k, l)) == losses.delannoy(k - 1, l - 1)


def test_alignment_bound_rejected():
    with pytest.raises(ValueError):
        losses.enumerate_alignments(8, 3)


def test_alignment_matrices_are_paths():
    for p in losses.enumerate_alignments(3, 4):
        assert p[0, 0] == 1 and p[-1, -1] == 1
        cells = np.argwhere(p > 0)
        for (r0, c0), (r1, c1) in zip(cells, cells[1:]):
            assert (r1 - r0, c1 - c0) in ((0, 1), (1, 0), (1, 1))


# ---------------------------------------------------------------------------
# cross-entropy


def test_cross_entropy_perfect_predictions():
    steps = [Tensor(np.array([[200.0, 0.0, 0.0]])), Tensor(np.array([[0.0, 200.0, 0.0]]))]
    ce = losses.cross_entropy(steps, [0, 1])
    assert ce.item() == pytest.approx(0.0, abs=1e-80)


def test_cross_entropy_uniform():
    steps = [Tensor(np.zeros((1, 4))) for _ in range(3)]
    ce = losses.cross_entropy(steps, [0, 3, 2])
    assert ce.item() == pytest.approx(math.log(4.0), abs=1e-12)


def test_cross_entropy_two_step_hand_case():
    # p(gold) = 0.5 then 0.25
    steps = [Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 4)))]
    ce = losses.cross_entropy(steps, [1, 2])
    assert ce.item() == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert ce.item() == pytest.approx(1.0397, abs=1e-4)


def test_cross_entropy_step_count_mismatch():
    with pytest.raises(ValueError):
        losses.cross_entropy([Tensor(np.zeros((1, 3)))], [0, 1])


def test_cross_entropy_clamps_and_flags(caplog):
    steps = [Tensor(np.array([[0.0, 1e6]]))]
    with caplog.at_level("WARNING"):
        ce = losses.cross_entropy(steps, [0])
    assert ce.item() == pytest.approx(-losses.LOG_PROB_FLOOR)
    assert "clamped" in caplog.text


# ---------------------------------------------------------------------------
# L2 agreement


def test_l2_agreement_identical_is_zero():
    rng = np.random.default_rng(2)
    steps = [Tensor(rng.uniform(size=(1, 5))) for _ in range(3)]
    twins = [Tensor(s.data.copy()) for s in steps]
    assert losses.l2_agreement(steps, twins).item() == 0.0


def test_l2_agreement_single_step_norm():
    f = [Tensor(np.array([[3.0, 4.0]]))]
    b = [Tensor(np.array([[0.0, 0.0]]))]
    assert losses.l2_agreement(f, b).item() == pytest.approx(5.0)


def test_l2_agreement_two_step_mean():
    f = [Tensor(np.array([[1.0, 0.0]])), Tensor(np.array([[0.0, 2.0]]))]
    b = [Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2)))]
    assert losses.l2_agreement(f, b).item() == pytest.approx(1.5)


def test_l2_agreement_rejects_unequal_lengths():
    f = [Tensor(np.zeros((1, 2)))] * 2
    b = [Tensor(np.zeros((1, 2)))] * 3
    with pytest.raises(ValueError):
        losses.l2_agreement(f, b)


# ---------------------------------------------------------------------------
# gradients


def test_l2_agreement_grad_check():
    rng = np.random.default_rng(21)

    def f(packed):
        fwd = [ad.narrow(packed, 0, k, 1) for k in range(4)]
        bwd = [ad.narrow(packed, 0, 4 + k, 1) for k in range(4)]
        return losses.l2_agreement(fwd, bwd)

    for _ in range(3):
        point = Tensor(rng.normal(size=(8, 8)))
        report = ad.grad_check(f, point, step=1e-5, tolerance=1e-6)
        assert report.ok, repr(report)


def test_softdtw_grad_check_on_cost_inputs():
    rng = np.random.default_rng(22)
    for _ in range(3):
        point = Tensor(rng.uniform(0.5, 3.0, size=(3, 4)))
        report = ad.grad_check(lambda t: losses.soft_dtw(t, 1.0), point, step=1e-5, tolerance=1e-5)
        assert report.ok, repr(report)


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0])
def test_softdtw_agreement_grad_check(gamma):
    rng = np.random.default_rng(int(gamma * 10))

    def f(packed):
        fwd = [ad.narrow(packed, 0, k, 1) for k in range(3)]
        bwd = [ad.narrow(packed, 0, 3 + k, 1) for k in range(5)]
        return losses.softdtw_agreement(fwd, bwd, gamma)

    for _ in range(3):
        point = Tensor(rng.normal(size=(8, 6)))
        report = ad.grad_check(f, point, step=1e-5, tolerance=1e-5)
        assert report.ok, repr(report)


def test_pairwise_sq_euclid_matches_loops():
    rng = np.random.default_rng(23)
    a, b = Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(4, 5)))
    d = losses.pairwise_sq_euclid(a, b)
    for i in range(3):
        for j in range(4):
            want = np.sum((a.data[i] - b.data[j]) ** 2)
            assert d.data[i, j] == pytest.approx(want, rel=1e-12)


# ---------------------------------------------------------------------------
# global loss


def test_combine_degenerate_weights_is_forward_ce():
    ce_f = Tensor(np.array([[2.7182818]]))
    ce_b = Tensor(np.array([[1.5]]))
    omega = Tensor(np.array([[9.0]]))
    bundle = losses.combine_losses(ce_f, ce_b, omega, alpha=1.0, lam=0.0)
    assert bundle.total.item() == ce_f.item()  # bit-exact


def test_combine_arithmetic():
    bundle = losses.combine_losses(
        Tensor([[2.0]]), Tensor([[4.0]]), Tensor([[10.0]]), alpha=0.9, lam=0.1
    )
    assert bundle.total.item() == pytest.approx(3.2, abs=1e-12)


def test_combine_decomposition_is_exact():
    rng = np.random.default_rng(31)
    for _ in range(10):
        a, b, w = (Tensor([[v]]) for v in rng.uniform(0.1, 5.0, size=3))
        alpha, lam = rng.uniform(0, 1), rng.uniform(0, 2)
        bundle = losses.combine_losses(a, b, w, alpha=alpha, lam=lam)
        ce_f, ce_b, omega, total = bundle.addends()
        assert total - (alpha * ce_f + (1 - alpha) * ce_b + lam * omega) == 0.0


def test_combine_rejects_bad_weights():
    s = lambda v: Tensor([[v]])
    with pytest.raises(ValueError):
        losses.combine_losses(s(1), s(1), s(1), alpha=1.5, lam=0.0)
    with pytest.raises(ValueError):
        losses.combine_losses(s(1), s(1), s(1), alpha=0.5, lam=-0.1)


def test_combine_gradients_flow_per_weights():
    ce_f = Tensor(np.array([[2.0]]))
    ce_b = Tensor(np.array([[4.0]]))
    omega = Tensor(np.array([[1.0]]))
    with Tape() as tape:
        bundle = losses.combine_losses(ce_f, ce_b, omega, alpha=1.0, lam=0.0)
        tape.backward(bundle.total)
    assert ce_f.grad[0, 0] == 1.0
    assert ce_b.grad[0, 0] == 0.0
    assert omega.grad[0, 0] == 0.0


# ---------------------------------------------------------------------------
# union vocabulary embedding


def test_union_vocab_maps():
    fwd_map, bwd_map = losses.union_vocab_maps(["a", "b", "c"], ["b", "c", "d"])
    assert fwd_map.shape == (3, 4) and bwd_map.shape == (3, 4)
    # shared units land on the same union column
    assert np.array_equal(fwd_map[1], bwd_map[0])
    assert np.array_equal(fwd_map[2], bwd_map[1])
    assert fwd_map.sum() == 3 and bwd_map.sum() == 3


def test_softdtw_agreement_with_union_maps():
    rng = np.random.default_rng(41)
    fwd = [Tensor(rng.uniform(size=(1, 3))) for _ in range(2)]
    bwd = [Tensor(rng.uniform(size=(1, 3))) for _ in range(3)]
    fwd_map, bwd_map = losses.union_vocab_maps(["a", "b", "c"], ["b", "c", "d"])
    val = losses.softdtw_agreement(fwd, bwd, 1.0, fwd_map=fwd_map, bwd_map=bwd_map)
    assert np.isfinite(val.item())
