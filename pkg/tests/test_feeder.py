import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dopf.errors import (CapacityError, ConflictingRoles, DuplicateBusId, FeederError, MissingSlack,
                         NonPositiveResistance, NonTreeTopology, PhaseMismatch)
from dopf.feeder import (PARTITION_TABLE, SYMBOLS, Box, Branch, Bus, BusKind, Disk, Network, PvResidual,
                         StatePartition, load_network, parse_network, partition_state, phase_set,
                         save_network, serialize_network)
from dopf.fixtures import FEEDERS, IEEE13_PHASES, ieee13, two_bus

BUSES_2 = """id,kinds,phases,cap_model,cap_params,cap_q_phase,beta_s,beta_z
# smallest legal feeder
0,slack,a,none,,,,
1,load,a,none,,,,
"""
BRANCHES_2 = """from,to,phases,z_entries
0,1,a,aa:0.01:0.02
"""
HEADER_2 = '{"slack": "0", "s_base_kva": 1000, "v_base_kv": 12.47}'


def _net(buses, branches, slack="0"):
    return Network(buses, branches, slack=slack)


def _br(a, b, phases="a", r=0.01, x=0.02):
    k = len(phases)
    return Branch(a, b, phases, np.eye(k) * complex(r, x))


# --------------------------------------------------------------------------
# parsing


def test_two_bus_file():
    net = parse_network(BUSES_2, BRANCHES_2, HEADER_2)
    assert len(net.branches) == 1
    br = net.branches[0]
    assert (br.r, br.x) == (0.01, 0.02)
    part = net.bus("1").partition()
    assert set(part.u) == set()
    assert set(part.d) == {"p", "q"}
    assert set(part.x_end) == {"V", "delta"}
    assert net.y_min == pytest.approx(0.95**2) and net.y_max == pytest.approx(1.05**2)


def test_ieee13_structure():
    net = ieee13()
    assert len(net.buses) == 13
    widths = {len(br.phases) for br in net.branches}
    assert widths == {1, 2, 3}
    for bid, ph in IEEE13_PHASES.items():
        assert net.bus(bid).phases == ph


def test_ieee13_round_trips_through_files(tmp_path):
    net = ieee13()
    save_network(net, tmp_path)
    assert load_network(tmp_path) == net


@pytest.mark.parametrize("name", sorted(FEEDERS))
def test_bundled_fixtures_round_trip(name):
    net = FEEDERS[name][0]()
    docs = serialize_network(net)
    again = parse_network(docs["buses.csv"], docs["branches.csv"], docs["feeder.json"])
    assert again == net
    assert serialize_network(again) == docs


def test_parse_is_pure():
    a = parse_network(BUSES_2, BRANCHES_2, HEADER_2)
    b = parse_network(BUSES_2, BRANCHES_2, HEADER_2)
    assert a == b


def test_branch_phase_missing_at_endpoint():
    buses = "id,kinds,phases\n0,slack,abc\n1,load,ab\n"
    branches = "from,to,phases,z_entries\n0,1,abc,aa:0.01:0.02;bb:0.01:0.02;cc:0.01:0.02\n"
    with pytest.raises(PhaseMismatch):
        parse_network(buses, branches, HEADER_2)


def test_duplicate_bus():
    with pytest.raises(DuplicateBusId):
        _net([Bus("0", {"slack"}), Bus("1", {"load"}), Bus("1", {"load"})], [_br("0", "1"), _br("0", "1")])


def test_cycle_rejected():
    buses = [Bus("0", {"slack"}), Bus("1", {"load"}), Bus("2", {"load"})]
    with pytest.raises(NonTreeTopology):
        _net(buses, [_br("0", "1"), _br("1", "2"), _br("2", "0")])


def test_disconnected_rejected():
    buses = [Bus("0", {"slack"}), Bus("1", {"load"}), Bus("2", {"load"}), Bus("3", {"load"})]
    with pytest.raises(NonTreeTopology):
        _net(buses, [_br("0", "1"), _br("2", "3"), _br("3", "2")])


def test_unknown_endpoint():
    with pytest.raises(NonTreeTopology):
        _net([Bus("0", {"slack"}), Bus("1", {"load"})], [_br("0", "7")])


def test_missing_slack():
    with pytest.raises(MissingSlack):
        _net([Bus("0", {"load"}), Bus("1", {"load"})], [_br("0", "1")])
    with pytest.raises(MissingSlack):
        _net([Bus("0", {"slack"}), Bus("1", {"slack"})], [_br("0", "1")])


def test_nonpositive_resistance():
    with pytest.raises(NonPositiveResistance):
        _br("0", "1", r=0.0)


def test_voltage_bounds_order():
    with pytest.raises(FeederError):
        Network([Bus("0", {"slack"}), Bus("1", {"load"})], [_br("0", "1")], slack="0", y_min=1.1)


def test_beta_split_must_be_convex():
    with pytest.raises(FeederError):
        Bus("1", {"load"}, beta_s=0.7, beta_z=0.2)
    with pytest.raises(FeederError):
        Bus("1", {"load"}, capacitor=-0.1)


def test_empty_phase_set():
    with pytest.raises(FeederError):
        phase_set("")
    assert phase_set("cab") == "abc"


def test_comment_lines_ignored():
    net = parse_network("# c\n" + BUSES_2, "# c\n" + BRANCHES_2, HEADER_2)
    assert len(net.buses) == 2


# --------------------------------------------------------------------------
# state partition


def test_partition_pq_load():
    p = partition_state(Bus("1", {BusKind.PQ_LOAD}))
    assert p == StatePartition((), ("p", "q"), ("V", "delta"))


def test_partition_slack():
    p = partition_state(Bus("0", {BusKind.SLACK}))
    assert p == StatePartition(("V",), ("delta",), ("p", "q"))


def test_partition_composite_load_and_der():
    p = partition_state(Bus("1", {BusKind.PQ_LOAD, BusKind.PQ_GENERATION}, capacity=Disk(1.0)))
    assert set(p.u) == {"p", "q"}
    assert set(p.d) == {"p^c", "q^c"}
    assert set(p.x_end) == {"V", "delta"}


def test_partition_conflict_on_nondecomposable_symbol():
    table = dict(PARTITION_TABLE)
    table[BusKind.PQ_LOAD] = ((), ("V", "p", "q"), ("delta",))
    with pytest.raises(ConflictingRoles):
        partition_state(Bus("1", {BusKind.PQ_LOAD, BusKind.PV_GENERATION}), table)


@given(st.sets(st.sampled_from(list(BusKind)), min_size=1))
def test_partition_sets_disjoint_and_cover(kinds):
    kinds = set(kinds)
    p = partition_state(Bus("x", kinds))
    u, d, x = set(p.u), set(p.d), set(p.x_end)
    assert not (u & d or u & x or d & x)
    assert {StatePartition.base(s) for s in u | d | x} == set(SYMBOLS)
    if len(kinds) == 1:
        assert len(u) + len(d) + len(x) == 4


# --------------------------------------------------------------------------
# capacity sets

finite = st.floats(-3, 3, allow_nan=False)


def _cap_and_pg():
    disk = st.builds(Disk, st.floats(0.05, 2)).map(lambda c: (c, 0.0))
    box = st.tuples(st.floats(-2, 0), st.floats(0, 2), st.floats(-2, 0), st.floats(0, 2)).map(
        lambda t: (Box(*t), 0.0))
    pv = st.tuples(st.floats(0.05, 2), st.floats(0, 1)).map(lambda t: (PvResidual(t[0]), t[0] * t[1]))
    return st.one_of(disk, box, pv)


@given(_cap_and_pg(), finite, finite)
def test_projection_lands_in_set_and_is_idempotent(cap_pg, up, uq):
    cap, pg = cap_pg
    pp, pq = cap.project(up, uq, pg)
    assert cap.contains(pp, pq, pg, tol=1e-12)
    assert cap.project(pp, pq, pg) == pytest.approx((pp, pq), abs=1e-15)
    if cap.contains(up, uq, pg, tol=0.0):
        assert (pp, pq) == pytest.approx((up, uq), abs=1e-15)


@given(_cap_and_pg(), finite, finite, st.integers(0, 2**32 - 1))
def test_projection_is_nearest_point(cap_pg, up, uq, seed):
    # brute-force oracle: no sampled member of the set is closer than the projection
    cap, pg = cap_pg
    pp, pq = cap.project(up, uq, pg)
    d0 = math.hypot(up - pp, uq - pq)
    rng = np.random.default_rng(seed)
    for a, b in rng.uniform(-3, 3, size=(300, 2)):
        a, b = cap.project(a, b, pg)
        assert math.hypot(up - a, uq - b) >= d0 - 1e-12


def test_disk_radial_projection():
    assert Disk(0.5).project(0.6, 0.8) == pytest.approx((0.3, 0.4))


def test_capacity_invariants():
    with pytest.raises(FeederError):
        Disk(0.0)
    with pytest.raises(FeederError):
        Box(1, 0, 0, 1)
    with pytest.raises(FeederError):
        PvResidual(-1)
    with pytest.raises(CapacityError):
        PvResidual(0.1).q_limit(0.2)
    assert PvResidual(0.5).q_limit(0.3) == pytest.approx(0.4)


def test_slack_voltage_override_is_a_copy():
    net = two_bus()
    other = net.with_slack_voltage(0.97**2)
    assert other.y_slack == pytest.approx(0.9409) and net.y_slack == 1.0
    assert other.buses == net.buses
