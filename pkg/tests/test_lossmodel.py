import random

import pytest
from hypothesis import given, strategies as st

from nclab.lossmodel import (LossError, LossEstimator, LossMatrix, antidote_loss, direct_loss,
                             draw, generation_sample, record_generation)
from nclab.topology import build_canonical

X = build_canonical("x")
RELAY = X.hyperarc("I>A2,B2")
S1, S2 = X.flow("S1"), X.flow("S2")
CODE = ("S1", "S2")


def lossy(**rates):
    return LossMatrix.for_links(X.topology.links, {tuple(k.split("_")): v for k, v in rates.items()})


def test_direct_loss_is_link_to_next_hop():
    loss = lossy(I_A2=0.3, I_B2=0.1)
    assert direct_loss(loss, RELAY, S1) == 0.3
    assert direct_loss(loss, RELAY, S2) == 0.1
    assert direct_loss(X.loss, RELAY, S1) == 0.0
    assert LossMatrix({}).rho("I", "A2") == 1.0
    with pytest.raises(LossError):
        direct_loss(loss, X.hyperarc("A1>I"), S2)


def test_antidote_loss():
    loss = lossy(A1_B2=0.25, B1_A2=0.4)
    # S2's next hop B2 needs S1's packets, overheard from A1
    assert antidote_loss(loss, RELAY, CODE, S2, S1) == 0.25
    assert antidote_loss(loss, RELAY, CODE, S1, S2) == 0.4
    assert antidote_loss(loss, RELAY, CODE, S1, S1) == 0.0
    gone = LossMatrix({k: v for k, v in loss.rates.items() if k != ("A1", "B2")})
    assert antidote_loss(gone, RELAY, CODE, S2, S1) == 1.0
    with pytest.raises(LossError):
        antidote_loss(loss, RELAY, ("S1",), S1, S2)


def test_antidote_from_own_origin_is_free():
    cross = build_canonical("cross")
    relay = [h for h in cross.hyperarcs if h.transmitter == "I"][0]
    loss = LossMatrix.for_links(cross.topology.links, {l: 0.5 for l in cross.topology.links})
    # S2 ends at A1, where S1 starts
    assert antidote_loss(loss, relay, ("S1", "S2"), cross.flow("S2"), cross.flow("S1")) == 0.0


def test_u_over_g_samples():
    assert generation_sample(15, 15) == 0.0
    assert generation_sample(16, 15) == 0.0
    assert generation_sample(12, 15) == pytest.approx(0.2)
    est = LossEstimator()
    assert record_generation(est, 18, 15, 15) == 0.0
    with pytest.raises(LossError):
        record_generation(est, 10, 11, 15)


def test_weighted_window_hand_value():
    est = LossEstimator()
    est.add(0.0)
    est.add(0.2)
    # 1/n weights with the newest first
    assert est.estimate() == pytest.approx((0.2 * 1 + 0.0 * 0.5) / 1.5)
    assert est.estimate() == pytest.approx(0.13333, abs=1e-4)


def test_window_holds_ten():
    est = LossEstimator()
    for _ in range(10):
        est.add(1.0)
    for _ in range(10):
        est.add(0.0)
    assert len(est) == 10
    assert est.estimate() == 0.0


@given(st.lists(st.floats(-0.5, 1.5, allow_nan=False), min_size=1, max_size=30))
def test_estimate_in_unit_interval(samples):
    est = LossEstimator()
    for s in samples:
        v = est.add(s)
        assert 0.0 <= v <= 1.0
    assert len(est) <= 10


@given(st.floats(0, 1))
def test_single_sample_is_estimate(s):
    est = LossEstimator()
    assert est.add(s) == pytest.approx(s)


@given(st.integers(1, 10), st.floats(0, 1))
def test_weights_normalised(n, v):
    # a constant window must return that constant for any length
    est = LossEstimator()
    for _ in range(n):
        est.add(v)
    assert est.estimate() == pytest.approx(v)


def test_draw_extremes():
    rng = random.Random(1)
    assert all(draw(rng, 0.0) for _ in range(1000))
    assert not any(draw(rng, 1.0) for _ in range(1000))


def test_draw_rate():
    rng = random.Random(7)
    lost = sum(not draw(rng, 0.3) for _ in range(100_000))
    assert abs(lost / 100_000 - 0.3) < 0.01


@given(st.integers(0, 2**32), st.floats(0, 1))
def test_draw_reproducible(seed, rho):
    a, b = random.Random(seed), random.Random(seed)
    assert [draw(a, rho) for _ in range(50)] == [draw(b, rho) for _ in range(50)]


def test_matrix_validation():
    with pytest.raises(LossError):
        LossMatrix({("A", "B"): 1.5})
    with pytest.raises(LossError):
        LossMatrix.for_links({("A", "B"): 1.0}, {("B", "C"): 0.1})
