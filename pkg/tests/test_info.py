import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dopf.errors import DimensionMismatch, EmptyInput, TooManyCombinations
from dopf.fixtures import five_node, five_node_profiles
from dopf.info import (MIReport, analyze, benchmark, combine, discretize, entropy_codes, estimate_mi, mi_codes,
                       select_comm_exhaustive, select_comm_greedy)
from dopf.opf import LabeledSet, OpfConfig, label_set
from dopf.scenarios import CHANNELS, ScenarioSet, synthesize

sklearn_metrics = pytest.importorskip("sklearn.metrics")


def sklearn_bits(x, y):
    return sklearn_metrics.mutual_info_score(x, y) / math.log(2.0)


# --------------------------------------------------------------------------
# analytic cases


def test_identity_on_four_buckets_is_two_bits():
    x = np.repeat(np.arange(4), 25)
    assert estimate_mi(x, x, k=4) == pytest.approx(2.0, abs=1e-9)


def test_exact_product_table_is_zero():
    x, y = np.meshgrid(np.arange(3), np.arange(5))
    assert mi_codes(x.ravel(), y.ravel()) == pytest.approx(0.0, abs=1e-12)


def test_two_by_two_table_by_hand():
    # counts [[2, 1], [1, 2]] over six samples
    x = np.array([0, 0, 0, 1, 1, 1])
    y = np.array([0, 0, 1, 0, 1, 1])
    hand = 2 * (2 / 6) * math.log2((2 / 6) / 0.25) + 2 * (1 / 6) * math.log2((1 / 6) / 0.25)
    assert mi_codes(x, y) == pytest.approx(hand, abs=1e-12)


def test_constant_column_carries_no_information():
    x = np.full(50, 3.7)
    y = np.random.default_rng(0).normal(size=50)
    assert estimate_mi(x, y) == 0.0
    d = discretize(x)
    assert d.cells == 1 and np.all(d.codes == 0)


def test_input_errors():
    with pytest.raises(EmptyInput):
        estimate_mi(np.zeros((0, 1)), np.zeros((0, 1)))
    with pytest.raises(DimensionMismatch):
        estimate_mi(np.zeros(5), np.zeros(6))
    with pytest.raises(EmptyInput):
        mi_codes([1], [1])


def test_bias_correction_is_opt_in():
    r = np.random.default_rng(1)
    x, y = r.integers(0, 5, 200), r.integers(0, 5, 200)
    plain = mi_codes(x, y)
    assert mi_codes(x, y, bias_correction=True) <= plain


# --------------------------------------------------------------------------
# discretization


@given(st.integers(2, 200), st.integers(1, 3), st.integers(1, 12), st.integers(0, 2**31))
def test_codes_in_range_and_edges_increasing(T, dims, k, seed):
    X = np.random.default_rng(seed).normal(size=(T, dims))
    d = discretize(X, k)
    assert d.codes.min() >= 0 and d.codes.max() < k**dims
    assert d.codes.max() < d.cells <= k**dims
    assert all(np.all(np.diff(e) > 0) for e in d.edges)
    assert np.all((d.columns >= 0) & (d.columns < k))


def test_equal_frequency_buckets_are_balanced():
    x = np.random.default_rng(2).normal(size=1000)
    counts = np.bincount(discretize(x, 4, method="frequency").codes)
    assert counts.min() >= 240 and counts.max() <= 260


# --------------------------------------------------------------------------
# properties over random tables


def _random_codes(seed):
    r = np.random.default_rng(seed)
    T = int(r.integers(2, 400))
    kx, ky = int(r.integers(1, 9)), int(r.integers(1, 9))
    x = r.integers(0, kx, T)
    # mix of dependent and independent pairs
    y = np.where(r.random(T) < r.random(), x % ky, r.integers(0, ky, T))
    return x, y


def test_bounds_on_1000_random_tables():
    for seed in range(1000):
        x, y = _random_codes(seed)
        mi = mi_codes(x, y)
        assert -1e-12 <= mi <= min(entropy_codes(x), entropy_codes(y)) + 1e-12
        assert mi == pytest.approx(sklearn_bits(x, y), abs=1e-9)


def test_adding_a_variable_never_lowers_mi_on_1000_tables():
    for seed in range(1000):
        x, y = _random_codes(seed)
        z = np.random.default_rng(seed + 10**6).integers(0, 4, x.size)
        joint = combine(discretize(x, 8), discretize(z, 4))
        assert mi_codes(joint.codes, y) >= mi_codes(discretize(x, 8).codes, y) - 1e-9


@given(st.integers(0, 2**31), st.integers(0, 2**31))
def test_permuting_samples_changes_nothing(seed, pseed):
    r = np.random.default_rng(seed)
    X = r.normal(size=(120, 2))
    Y = X[:, :1] ** 2 + 0.1 * r.normal(size=(120, 1))
    perm = np.random.default_rng(pseed).permutation(120)
    assert estimate_mi(X[perm], Y[perm]) == estimate_mi(X, Y)


@settings(max_examples=50)
@given(st.integers(0, 2**31))
def test_matches_sklearn_on_continuous_samples(seed):
    r = np.random.default_rng(seed)
    X = r.normal(size=300)
    Y = np.sin(X) + 0.3 * r.normal(size=300)
    dx, dy = discretize(X), discretize(Y)
    assert estimate_mi(X, Y) == pytest.approx(sklearn_bits(dx.codes, dy.codes), abs=1e-9)


# --------------------------------------------------------------------------
# benchmarks and selection on labeled data


def _labeled_from(net, disturb, labels):
    T = len(next(iter(labels.values())))
    data = np.zeros((T, len(net.buses), 3, len(CHANNELS)))
    for bid, col in disturb.items():
        data[:, net.index[bid], 0, 0] = col
    sc = ScenarioSet(tuple(b.id for b in net.buses), np.arange(T) * 15.0, data)
    nd = len(net.der_ids)
    uq = np.column_stack([labels.get(d, np.zeros(T)) for d in net.der_ids])
    return LabeledSet(sc, tuple(net.der_ids), np.zeros((T, nd)), uq, np.array(["optimal"] * T),
                      np.zeros(T), np.zeros(T), False)


def test_deterministic_label_gives_label_entropy():
    net = five_node()
    r = np.random.default_rng(3)
    d2 = r.uniform(0, 1, 500)
    u = (discretize(d2).codes % 3).astype(float)  # constant on every bucket of the local record
    lab = _labeled_from(net, {"2": d2}, {"2": u})
    gamma = benchmark(net, lab, "2")
    assert gamma == pytest.approx(entropy_codes(discretize(u).codes), abs=1e-12)


def test_shuffled_labels_carry_almost_nothing():
    net = five_node()
    r = np.random.default_rng(4)
    d2 = r.uniform(0, 1, 2000)
    u = d2**2
    lab = _labeled_from(net, {"2": d2}, {"2": r.permutation(u)})
    # plug-in bias for a 10x10 table is about (k-1)^2 / (2 T ln 2)
    assert benchmark(net, lab, "2") <= 3 * 81 / (2 * 2000 * math.log(2))
    assert benchmark(net, _labeled_from(net, {"2": d2}, {"2": u}), "2") > 2.0


def test_remote_copy_of_label_is_chosen():
    net = five_node()
    r = np.random.default_rng(5)
    u = r.uniform(0, 1, 400)
    noise = {b: r.uniform(0, 1, 400) for b in ("1", "2", "3")}
    lab = _labeled_from(net, {**noise, "4": u}, {"2": u})
    for fn in (select_comm_exhaustive, select_comm_greedy):
        assert fn(net, lab, "2", ["1", "3", "4"]).chosen == ("4",)


def test_constant_candidates_tie_to_smallest_ids():
    net = five_node()
    r = np.random.default_rng(6)
    d2 = r.uniform(0, 1, 300)
    lab = _labeled_from(net, {"2": d2}, {"2": d2 + 0.1 * r.normal(size=300)})
    ex = select_comm_exhaustive(net, lab, "2", ["4", "3", "1"], size=2)
    assert ex.chosen == ("1", "3")
    assert ex.mi == pytest.approx(benchmark(net, lab, "2"), abs=1e-12)
    assert select_comm_greedy(net, lab, "2", ["4", "3", "1"], size=1).chosen == ("1",)


def test_too_many_combinations():
    net = five_node()
    lab = _labeled_from(net, {}, {"2": np.arange(10.0)})
    with pytest.raises(TooManyCombinations):
        select_comm_exhaustive(net, lab, "2", ["0", "1", "3", "4"], size=2, max_combinations=5)


@pytest.fixture(scope="module")
def five_node_labels():
    net = five_node()
    sc = synthesize(net, five_node_profiles(), 300, seed=8)
    return net, label_set(net, sc, OpfConfig.case("1"))


def test_exhaustive_equals_greedy_for_one_pick(five_node_labels):
    net, lab = five_node_labels
    cands = [b.id for b in net.buses if not b.is_slack]
    for der in net.der_ids:
        ex = select_comm_exhaustive(net, lab, der, cands, size=1)
        gr = select_comm_greedy(net, lab, der, cands, size=1)
        assert ex.chosen == gr.chosen
        assert ex.mi == gr.mi


def test_second_pick_never_lowers_mi(five_node_labels):
    net, lab = five_node_labels
    cands = [b.id for b in net.buses if not b.is_slack]
    for der in net.der_ids:
        one = select_comm_greedy(net, lab, der, cands, size=1)
        two = select_comm_greedy(net, lab, der, cands, size=2)
        assert two.chosen[0] == one.chosen[0]
        assert two.mi >= one.mi - 1e-9
        assert one.mi >= benchmark(net, lab, der) - 1e-9


def test_report_round_trip(five_node_labels):
    net, lab = five_node_labels
    rep = analyze(net, lab, select=1)
    assert set(rep.gamma) == set(net.der_ids)
    assert all(0 <= rep.gamma[d] <= rep.entropy[d] + 1e-12 for d in rep.gamma)
    again = MIReport.from_json(rep.to_json())
    assert again.to_json() == rep.to_json()
    assert again.selections == rep.selections
