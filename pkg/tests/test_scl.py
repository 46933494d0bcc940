import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vastopo.autograd import ParamStore, Tape, Tensor, grad_check
from vastopo.scl import (
    AnchorSet,
    MemoryBank,
    SclConfig,
    class_centers,
    memory_update,
    nearest_rank_percentile,
    scl_loss,
    select_anchors,
)

MODES = ("paper_literal", "with_positive")


def single_anchor(vec, c=1):
    return AnchorSet(
        features=Tensor(np.atleast_2d(vec)),
        rows=np.array([0]),
        voxels={c: np.array([0])},
        confidence={c: np.array([0.99])},
        threshold=0.5,
    )


def closed_case(mode):
    anchors = single_anchor([1.0, 0.0])
    centers = {1: Tensor([[1.0, 0.0]]), 2: Tensor([[0.0, 1.0]])}
    cfg = SclConfig(temperature=1.0, denominator_mode=mode)
    return scl_loss(Tape(), anchors, centers, None, None, cfg).item()


# -- anchors ---------------------------------------------------------------------


def test_percentile_worked_example():
    conf = np.arange(1, 101) / 100
    labels = np.ones(100, int)
    anchors = select_anchors(np.zeros((100, 2)), conf, labels, SclConfig(percentile=95))
    assert anchors.threshold == 0.95
    assert anchors.count() == 5
    assert sorted(anchors.confidence[1].tolist()) == [0.96, 0.97, 0.98, 0.99, 1.0]


def test_equal_confidences_give_no_anchors():
    anchors = select_anchors(np.zeros((10, 2)), np.full(10, 0.7), np.ones(10, int), SclConfig())
    assert anchors.count() == 0 and anchors.classes() == []


def test_background_is_never_an_anchor():
    conf = np.array([1.0, 0.2, 0.3, 0.4])
    labels = np.array([0, 1, 1, 2])
    anchors = select_anchors(np.zeros((4, 2)), conf, labels, SclConfig(percentile=50))
    assert anchors.threshold == 0.3
    assert anchors.voxels[2].tolist() == [3] and anchors.voxels[1].tolist() == []


def test_anchor_errors():
    with pytest.raises(ValueError):
        select_anchors(np.zeros((3, 2)), np.ones(3), np.zeros(3, int), SclConfig())
    with pytest.raises(ValueError):
        select_anchors(np.zeros((3, 2)), np.ones(4), np.ones(3, int), SclConfig())
    with pytest.raises(ValueError):
        nearest_rank_percentile([], 50)


@pytest.mark.parametrize("seed", range(10))
def test_anchor_count_matches_sort_oracle(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 300))
    conf = np.round(rng.random(n), 2)
    labels = rng.integers(0, 4, n)
    labels[0] = 1
    q = float(rng.uniform(1, 99))
    anchors = select_anchors(np.zeros((n, 3)), conf, labels, SclConfig(percentile=q))
    fg = sorted(conf[labels > 0])
    threshold = fg[max(math.ceil(q / 100 * len(fg)), 1) - 1]
    expected = sum(1 for c, l in zip(conf, labels) if l > 0 and c > threshold)
    assert anchors.threshold == threshold
    assert anchors.count() == expected


@given(seed=st.integers(0, 10**6), q1=st.floats(1, 99), q2=st.floats(1, 99))
def test_raising_percentile_never_adds_anchors(seed, q1, q2):
    rng = np.random.default_rng(seed)
    conf = rng.random(60)
    labels = rng.integers(1, 3, 60)
    lo, hi = sorted((q1, q2))
    a_lo = select_anchors(np.zeros((60, 2)), conf, labels, SclConfig(percentile=lo))
    a_hi = select_anchors(np.zeros((60, 2)), conf, labels, SclConfig(percentile=hi))
    assert a_hi.count() <= a_lo.count()


def test_anchor_rows_index_shared_features():
    feats = np.arange(6.0).reshape(3, 2)
    rows = np.array([0, 0, 1, 1, 2, 2])
    anchors = select_anchors(feats, [0.1, 0.2, 0.3, 0.4, 0.5, 0.9], np.ones(6, int), SclConfig(percentile=50), rows=rows)
    assert anchors.voxels[1].tolist() == [3, 4, 5]
    assert np.array_equal(anchors.vectors(1), feats[[1, 2, 2]])


# -- centers ---------------------------------------------------------------------


def test_one_voxel_per_class_center():
    f = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    centers, vessel = class_centers(Tape(), Tensor(f), [0, 1, 2])
    assert centers[1].data.tolist() == [[3.0, 4.0]]
    assert centers[2].data.tolist() == [[5.0, 6.0]]
    assert vessel is None


def test_identical_features_center():
    f = np.array([[0.1, 0.7], [0.1, 0.7]])
    centers, _ = class_centers(Tape(), Tensor(f), [1, 1])
    assert np.array_equal(centers[1].data, f[:1])


def test_centers_match_two_pass_oracle(rng):
    f = rng.normal(size=(200, 5))
    labels = rng.integers(0, 4, 200)
    vessel = rng.random(200) < 0.2
    centers, mu_v = class_centers(Tape(), Tensor(f), labels, vessel)
    for c in (1, 2, 3):
        members = [f[i] for i in range(200) if labels[i] == c]
        total = np.zeros(5)
        for row in members:
            total += row
        assert np.max(np.abs(centers[c].data[0] - total / len(members))) <= 1e-12
    assert np.max(np.abs(mu_v.data[0] - f[vessel].mean(axis=0))) <= 1e-12


def test_centers_through_row_map(rng):
    tok = rng.normal(size=(4, 3))
    rows = np.array([0, 1, 1, 2, 3, 3])
    labels = np.array([1, 1, 2, 2, 2, 0])
    centers, _ = class_centers(Tape(), Tensor(tok), labels, rows=rows)
    assert np.allclose(centers[2].data[0], (tok[1] + tok[2] + tok[3]) / 3, atol=1e-15)


def test_empty_vessel_mask_omits_vessel_center(caplog):
    caplog.set_level(logging.INFO, logger="vastopo.scl")
    _, vessel = class_centers(Tape(), Tensor(np.ones((3, 2))), [1, 1, 2], np.zeros(3, bool))
    assert vessel is None
    assert "vessel mask is empty" in caplog.text


# -- loss closed cases ------------------------------------------------------------------


def test_closed_case_paper_literal():
    # positive similarity 1 over a single negative at similarity 0
    assert abs(closed_case("paper_literal") - (-1.0)) <= 1e-10


def test_closed_case_with_positive():
    expected = math.log(1.0 + math.exp(-1.0))
    assert abs(closed_case("with_positive") - expected) <= 1e-10
    assert abs(closed_case("with_positive") - 0.31326168751822286) <= 1e-10


def test_orthogonal_anchor_gives_log_of_negative_count():
    anchors = single_anchor([0.0, 0.0, 1.0])
    centers = {1: Tensor([[1.0, 0.0, 0.0]]), 2: Tensor([[0.0, 1.0, 0.0]])}
    vessel = Tensor([[1.0, 1.0, 0.0]])
    bank = MemoryBank(4, "fifo")
    bank.insert(3, [-1.0, 0.0, 0.0], 0.9)
    loss = scl_loss(Tape(), anchors, centers, vessel, bank, SclConfig(temperature=0.3))
    assert abs(loss.item() - math.log(3)) <= 1e-10


def test_classes_without_anchors_are_skipped():
    feats = Tensor([[1.0, 0.0], [0.0, 1.0]])
    anchors = AnchorSet(feats, np.arange(2), {1: np.array([0]), 2: np.array([], int)},
                        {1: np.array([0.9]), 2: np.array([])}, 0.5)
    centers = {1: Tensor([[1.0, 0.0]]), 2: Tensor([[0.0, 1.0]])}
    cfg = SclConfig(temperature=1.0)
    assert scl_loss(Tape(), anchors, centers, None, None, cfg).item() == pytest.approx(-1.0, abs=1e-12)


@pytest.mark.parametrize("mode", MODES)
def test_loss_invariant_to_anchor_rescaling(rng, mode):
    f = rng.normal(size=(12, 4))
    labels = np.array([1, 2, 3] * 4)
    conf = rng.random(12)
    cfg = SclConfig(percentile=40, denominator_mode=mode)

    def value(feats):
        tape = Tape()
        t = Tensor(feats)
        anchors = select_anchors(t, conf, labels, cfg)
        centers, _ = class_centers(tape, Tensor(f), labels)
        return scl_loss(tape, anchors, centers, None, None, cfg).item(), anchors

    base, anchors = value(f)
    c = anchors.classes()[0]
    scaled = f.copy()
    scaled[anchors.voxels[c][0]] *= 2.0
    assert abs(value(scaled)[0] - base) <= 1e-10


@given(seed=st.integers(0, 10**6), n_neg=st.integers(1, 6), tau=st.floats(0.05, 2.0))
def test_with_positive_term_bounds(seed, n_neg, tau):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=3)
    negs = rng.normal(size=(n_neg, 3))
    # the upper bound needs the positive at least as similar as every negative
    pos = a + 0.01 * rng.normal(size=3)
    unit = lambda v: v / np.linalg.norm(v, axis=-1, keepdims=True)  # noqa: E731
    sims = unit(negs) @ unit(a)
    if sims.max() > unit(pos) @ unit(a):
        return
    centers = {1: Tensor(pos[None])}
    centers.update({k + 2: Tensor(negs[k][None]) for k in range(n_neg)})
    cfg = SclConfig(temperature=tau, denominator_mode="with_positive")
    loss = scl_loss(Tape(), single_anchor(a), centers, None, None, cfg).item()
    assert 0.0 <= loss <= math.log(1 + n_neg) + 1e-12


@given(seed=st.integers(0, 10**6), tau=st.floats(0.05, 2.0))
def test_with_positive_is_never_negative(seed, tau):
    rng = np.random.default_rng(seed)
    centers = {k: Tensor(rng.normal(size=(1, 3))) for k in (1, 2, 3)}
    cfg = SclConfig(temperature=tau, denominator_mode="with_positive")
    assert scl_loss(Tape(), single_anchor(rng.normal(size=3)), centers, None, None, cfg).item() >= 0.0


def test_with_positive_bound_needs_dominant_positive():
    # anchor closer to a negative than to its own center: the term exceeds log(1+|B|)
    centers = {1: Tensor([[-1.0, 0.0]]), 2: Tensor([[1.0, 0.0]])}
    cfg = SclConfig(temperature=1.0, denominator_mode="with_positive")
    loss = scl_loss(Tape(), single_anchor([1.0, 0.0]), centers, None, None, cfg).item()
    assert loss == pytest.approx(math.log(1 + math.exp(2.0)), abs=1e-12)
    assert loss > math.log(2)


def test_zero_norm_anchor_rejected():
    centers = {1: Tensor([[1.0, 0.0]]), 2: Tensor([[0.0, 1.0]])}
    with pytest.raises(FloatingPointError):
        scl_loss(Tape(), single_anchor([0.0, 0.0]), centers, None, None, SclConfig())


def test_loss_without_anchors_rejected():
    anchors = AnchorSet(Tensor(np.ones((1, 2))), np.arange(1), {1: np.array([], int)}, {1: np.array([])}, 1.0)
    with pytest.raises(ValueError, match="no class has anchors"):
        scl_loss(Tape(), anchors, {1: Tensor([[1.0, 0.0]])}, None, None, SclConfig())


def test_class_without_negatives_rejected():
    with pytest.raises(ValueError, match="no negatives"):
        scl_loss(Tape(), single_anchor([1.0, 0.0]), {1: Tensor([[1.0, 0.0]])}, None, None, SclConfig())


def _scl_problem(seed, mode):
    rng = np.random.default_rng(seed)
    params = ParamStore(seed)
    params.add("f", rng.normal(size=(30, 4)))
    labels = rng.integers(0, 4, 30)
    labels[:3] = [1, 2, 3]
    vessel = rng.random(30) < 0.3
    vessel[0] = True
    cfg = SclConfig(temperature=0.5, percentile=60, denominator_mode=mode)
    conf = rng.random(30)
    bank = MemoryBank(3, "cats")
    for c in (1, 2, 3):
        for _ in range(2):
            bank.insert(c, rng.normal(size=4), rng.random())
    anchors = select_anchors(params["f"], conf, labels, cfg)

    def loss(tape):
        picked = AnchorSet(params["f"], anchors.rows, anchors.voxels, anchors.confidence, anchors.threshold)
        centers, mu_v = class_centers(tape, params["f"], labels, vessel)
        return scl_loss(tape, picked, centers, mu_v, bank, cfg)

    return loss, params


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("seed", range(20))
def test_scl_gradients(seed, mode):
    loss, params = _scl_problem(seed, mode)
    assert grad_check(loss, params) <= 1e-5


# -- memory bank -------------------------------------------------------------------


def _fill(strategy, confs, capacity=2):
    bank = MemoryBank(capacity, strategy)
    for i, c in enumerate(confs):
        bank.insert(1, [float(i), 1.0], c)
    return bank


def test_fifo_hand_simulation():
    assert _fill("fifo", [0.9, 0.5, 0.7]).confidences(1) == [0.5, 0.7]


def test_cats_hand_simulation():
    assert sorted(_fill("cats", [0.9, 0.5, 0.7]).confidences(1)) == [0.7, 0.9]


@pytest.mark.parametrize("strategy", ["fifo", "cats"])
def test_insert_into_empty_bank(strategy):
    bank = MemoryBank(3, strategy)
    bank.insert(2, [1.0, 2.0], 0.4)
    assert len(bank) == 1 and bank.vectors(2).tolist() == [[1.0, 2.0]]


def test_cats_replaces_older_on_ties():
    bank = _fill("cats", [0.5, 0.5])
    bank.insert(1, [9.0, 9.0], 0.6)
    assert bank.vectors(1)[:, 0].tolist() == [9.0, 1.0]


def test_cats_discards_weaker_item():
    bank = _fill("cats", [0.8, 0.9])
    bank.insert(1, [5.0, 5.0], 0.8)
    assert sorted(bank.confidences(1)) == [0.8, 0.9] and 5.0 not in bank.vectors(1)


@given(confs=st.lists(st.floats(0, 1), min_size=1, max_size=40), capacity=st.integers(1, 6))
def test_cats_minimum_never_decreases_once_full(confs, capacity):
    bank = MemoryBank(capacity, "cats")
    last_min = None
    for i, c in enumerate(confs):
        bank.insert(0, [float(i)], c)
        if len(bank) == capacity:
            m = min(bank.confidences(0))
            assert last_min is None or m >= last_min
            last_min = m


@given(confs=st.lists(st.floats(0, 1), min_size=1, max_size=40), capacity=st.integers(1, 6))
def test_fifo_keeps_last_items_in_order(confs, capacity):
    bank = MemoryBank(capacity, "fifo")
    for i, c in enumerate(confs):
        bank.insert(0, [float(i)], c)
    assert bank.confidences(0) == confs[-capacity:]
    assert bank.vectors(0)[:, 0].tolist() == [float(i) for i in range(len(confs))][-capacity:]


def test_bank_dimension_mismatch():
    bank = MemoryBank(2, "fifo")
    bank.insert(1, [1.0, 2.0], 0.5)
    with pytest.raises(ValueError, match="dim"):
        bank.insert(1, [1.0, 2.0, 3.0], 0.5)


def test_negatives_exclude_own_class():
    bank = MemoryBank(2, "fifo")
    bank.insert(1, [1.0, 0.0], 0.5)
    bank.insert(2, [0.0, 1.0], 0.5)
    bank.insert(3, [1.0, 1.0], 0.5)
    assert bank.negatives(2).tolist() == [[1.0, 0.0], [1.0, 1.0]]


def test_memory_update_pushes_anchors_detached():
    feats = Tensor(np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]))
    anchors = select_anchors(feats, [0.1, 0.8, 0.9], [1, 2, 2], SclConfig(percentile=33))
    bank = memory_update(MemoryBank(4, "cats"), anchors)
    assert bank.vectors(2).tolist() == [[3.0, 4.0], [5.0, 6.0]]
    feats.data[1, 0] = 99.0
    assert bank.vectors(2)[0, 0] == 3.0


def test_bank_records_round_trip():
    bank = _fill("cats", [0.3, 0.8, 0.5, 0.9], capacity=3)
    bank.insert(4, [7.0, 7.0], 0.1)
    rec = bank.to_records()
    assert sorted(rec) == ["memo/1/0000", "memo/1/0001", "memo/1/0002", "memo/4/0000"]
    back = MemoryBank.from_records(rec, 3, "cats")
    for c in (1, 4):
        assert back.confidences(c) == bank.confidences(c)
        assert np.array_equal(back.vectors(c), bank.vectors(c))
    assert back.counter == bank.counter
