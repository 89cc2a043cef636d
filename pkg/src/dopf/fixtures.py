"""Bundled test feeders and their scenario profiles.

``python -m dopf.fixtures OUTDIR`` writes every feeder in the text format
understood by ``feeder.load_network``.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .feeder import Box, Branch, Bus, BusKind, Disk, Network, PvResidual, save_network

LOAD = {BusKind.PQ_LOAD}
SLACK = {BusKind.SLACK}
DER = {BusKind.PQ_LOAD, BusKind.PQ_GENERATION}


def _line(a, b, r, x, phases="a"):
    return Branch(str(a), str(b), phases, ((complex(r, x),),))


def two_bus(s_max: float = 0.05) -> Network:
    buses = [Bus("0", SLACK), Bus("1", DER, capacity=Disk(s_max))]
    return Network(buses, [_line(0, 1, 0.01, 0.02)], slack="0", name="two-bus")


def two_bus_profiles() -> dict:
    return {"pv_fraction": 0.8, "buses": {"1": {"peak_p": 0.1, "pf": 0.9, "pv": True}}}


# 5 nodes: 0 - 1 - 2, 1 - 3 - 4; DERs at 2 and 4
def five_node() -> Network:
    buses = [Bus("0", SLACK), Bus("1", LOAD), Bus("2", DER, capacity=PvResidual(0.1)),
             Bus("3", LOAD), Bus("4", DER, capacity=PvResidual(0.1))]
    branches = [_line(0, 1, 0.01, 0.02), _line(1, 2, 0.02, 0.03), _line(1, 3, 0.015, 0.02),
                _line(3, 4, 0.02, 0.03)]
    return Network(buses, branches, slack="0", name="five-node")


def five_node_profiles() -> dict:
    return {"pv_fraction": 0.8, "s_over_p": 1.05,
            "buses": {"1": {"peak_p": 0.12, "pf": 0.92}, "2": {"peak_p": 0.1, "pf": 0.9, "pv": True},
                      "3": {"peak_p": 0.08, "pf": 0.95}, "4": {"peak_p": 0.1, "pf": 0.88, "pv": True}}}


# --------------------------------------------------------------------------
# synthetic 30-bus radial feeder

_TRUNK = list(range(0, 15))  # 0-1-...-14
_LATERALS = {3: [15, 16, 17], 6: [18, 19, 20, 21], 9: [22, 23, 24], 11: [25, 26], 13: [27, 28, 29]}
_CASE1_DERS = (4, 7, 10, 12, 14, 16, 20, 24, 26, 29)
_TRUNK_Z = (0.001, 0.0015)
_LATERAL_Z = (0.0015, 0.0015)


def _feeder30_branches():
    out = [_line(a, a + 1, *_TRUNK_Z) for a in _TRUNK[:-1]]
    for root, chain in _LATERALS.items():
        prev = root
        for j in chain:
            out.append(_line(prev, j, *_LATERAL_Z))
            prev = j
    return out


def _feeder30_peaks(seed: int = 7) -> dict[int, float]:
    rng = np.random.default_rng(seed)
    return {j: float(np.round(rng.uniform(0.025, 0.055), 4)) for j in range(1, 30)}


def feeder30(pv_fraction: float = 0.8, s_over_p: float = 1.05) -> Network:
    """Case-1 feeder: ten PV inverters with residual reactive capacity."""
    peaks = _feeder30_peaks()
    buses = [Bus("0", SLACK)]
    for j in range(1, 30):
        if j in _CASE1_DERS:
            s_max = round(s_over_p * pv_fraction * _der_peak(peaks[j]), 6)
            buses.append(Bus(str(j), DER, capacity=PvResidual(s_max)))
        else:
            buses.append(Bus(str(j), LOAD))
    return Network(buses, _feeder30_branches(), slack="0", name="feeder30-case1")


def _der_peak(p: float) -> float:
    # inverter buses aggregate more customers (and therefore more PV)
    return 3.0 * p


def feeder30_profiles(pv_fraction: float = 0.8) -> dict:
    peaks = _feeder30_peaks()
    rng = np.random.default_rng(11)
    buses = {}
    for j, p in peaks.items():
        pf = float(np.round(rng.uniform(0.97, 0.995), 3))
        if j in _CASE1_DERS:
            buses[str(j)] = {"peak_p": _der_peak(p), "pf": pf, "pv": True}
        else:
            buses[str(j)] = {"peak_p": p, "pf": pf}
    return {"pv_fraction": pv_fraction, "s_over_p": 1.05, "step_minutes": 15,
            "load_sigma": 0.1, "day_sigma": 0.1, "pv_noise": 0.03, "clear_prob": 0.4, "buses": buses}


# case 2: ten DERs on short spurs off trunk buses 3 and 4, heavy loads on a lateral at the far end
CASE2_DERS = tuple(range(15, 25))
CASE2_LOAD_CLUSTER = (25, 26, 27, 28, 29)


def _case2_branches():
    out = [_line(a, a + 1, *_TRUNK_Z) for a in _TRUNK[:-1]]
    out += [_line(3 if j < 20 else 4, j, *_LATERAL_Z) for j in CASE2_DERS]
    prev = 13
    for j in CASE2_LOAD_CLUSTER:
        out.append(_line(prev, j, *_LATERAL_Z))
        prev = j
    return out


def feeder30_case2(headroom: float = 1.5) -> Network:
    """Case-2 feeder: real-power-only DERs (box capacity) in one area, heavy loads in another.

    The DER fleet is sized so that its aggregate capacity exceeds the feeder's
    peak demand by ``headroom``.
    """
    prof = feeder30_case2_profiles()
    total = sum(v["peak_p"] for v in prof["buses"].values())
    per_der = round(headroom * total / len(CASE2_DERS), 6)
    buses = [Bus("0", SLACK)]
    for j in range(1, 30):
        if j in CASE2_DERS:
            buses.append(Bus(str(j), DER, capacity=Box(0.0, per_der, 0.0, 0.0)))
        else:
            buses.append(Bus(str(j), LOAD))
    return Network(buses, _case2_branches(), slack="0", name="feeder30-case2")


def feeder30_case2_profiles() -> dict:
    peaks = _feeder30_peaks()
    buses = {}
    for j, p in peaks.items():
        if j in CASE2_LOAD_CLUSTER:
            buses[str(j)] = {"peak_p": round(4.0 * p, 6), "pf": 0.95, "shape": "commercial"}
        else:
            buses[str(j)] = {"peak_p": round(0.25 * p, 6), "pf": 0.95}
    return {"pv_fraction": 0.0, "step_minutes": 15, "load_sigma": 0.03, "day_sigma": 0.03,
            "clear_prob": 0.4, "buses": buses}


# --------------------------------------------------------------------------
# IEEE 13-node test feeder

IEEE13_S_BASE_KVA = 5000.0
IEEE13_V_BASE_KV = 4.16
_Z_BASE = IEEE13_V_BASE_KV**2 * 1000.0 / IEEE13_S_BASE_KVA
_PHASE_KVA = IEEE13_S_BASE_KVA / 3.0

# upper triangles in ohm/mile, phase order as listed
_CONFIGS = {
    "601": ("abc", [[0.3465 + 1.0179j, 0.1560 + 0.5017j, 0.1580 + 0.4236j],
                    [0, 0.3375 + 1.0478j, 0.1535 + 0.3849j],
                    [0, 0, 0.3414 + 1.0348j]]),
    "602": ("abc", [[0.7526 + 1.1814j, 0.1580 + 0.4236j, 0.1560 + 0.5017j],
                    [0, 0.7475 + 1.1983j, 0.1535 + 0.3849j],
                    [0, 0, 0.7436 + 1.2112j]]),
    "603": ("bc", [[1.3294 + 1.3471j, 0.2066 + 0.4591j],
                   [0, 1.3238 + 1.3569j]]),
    "604": ("ac", [[1.3238 + 1.3569j, 0.2066 + 0.4591j],
                   [0, 1.3294 + 1.3471j]]),
    "605": ("c", [[1.3292 + 1.3475j]]),
    "606": ("abc", [[0.7982 + 0.4463j, 0.3192 + 0.0328j, 0.2849 - 0.0143j],
                    [0, 0.7891 + 0.4041j, 0.3192 + 0.0328j],
                    [0, 0, 0.7982 + 0.4463j]]),
    "607": ("a", [[1.3425 + 0.5124j]]),
}

_SEGMENTS = [  # from, to, feet, config
    ("650", "632", 2000, "601"), ("632", "633", 500, "602"), ("632", "645", 500, "603"),
    ("645", "646", 300, "603"), ("632", "671", 2000, "601"), ("671", "684", 300, "604"),
    ("671", "680", 1000, "601"), ("684", "652", 800, "607"), ("684", "611", 300, "605"),
    ("692", "675", 500, "606"),
]

IEEE13_PHASES = {"650": "abc", "632": "abc", "633": "abc", "634": "abc", "645": "bc", "646": "bc",
                 "671": "abc", "680": "abc", "684": "ac", "611": "c", "652": "a", "692": "abc",
                 "675": "abc"}

# spot loads: bus -> {phase: (kW, kvar)}, model "pq" | "z" | "i"
_LOADS = [
    ("634", "pq", {"a": (160, 110), "b": (120, 90), "c": (120, 90)}),
    ("645", "pq", {"b": (170, 125)}),
    ("646", "z", {"b": (115, 66), "c": (115, 66)}),      # delta b-c leg split over both phases
    ("652", "z", {"a": (128, 86)}),
    ("671", "pq", {"a": (385, 220), "b": (385, 220), "c": (385, 220)}),
    ("675", "pq", {"a": (485, 190), "b": (68, 60), "c": (290, 212)}),
    ("692", "i", {"c": (85, 75.5), "a": (85, 75.5)}),    # delta c-a leg split over both phases
    ("611", "i", {"c": (170, 80)}),
    ("632", "pq", {"a": (8.5, 5), "b": (33, 19), "c": (58.5, 34)}),   # half of the 632-671 distributed load
    ("671", "pq", {"a": (8.5, 5), "b": (33, 19), "c": (58.5, 34)}),
]
_CAPACITORS = {"675": {"a": 200, "b": 200, "c": 200}, "611": {"c": 100}}
_BETA_Z = {"pq": 0.0, "z": 1.0, "i": 0.5}  # constant current approximated half power, half impedance

IEEE13_DERS = ("633", "634", "671", "675", "680", "692")


def _config_z(code: str, feet: float) -> tuple[str, np.ndarray]:
    phases, upper = _CONFIGS[code]
    Z = np.array(upper, dtype=complex)
    Z = np.triu(Z) + np.triu(Z, 1).T
    return phases, Z * (feet / 5280.0) / _Z_BASE


def ieee13_loads() -> dict[str, dict[str, tuple[float, float, str]]]:
    """Nominal per-phase loads in pu: bus -> phase -> (p, q, model)."""
    out: dict[str, dict[str, list]] = {}
    for bus, model, per in _LOADS:
        for ph, (kw, kvar) in per.items():
            slot = out.setdefault(bus, {}).setdefault(ph, [0.0, 0.0, model])
            slot[0] += kw / _PHASE_KVA
            slot[1] += kvar / _PHASE_KVA
    return {b: {ph: tuple(v) for ph, v in d.items()} for b, d in out.items()}


def ieee13(u_max: float = 0.1, y_slack: float = 1.03**2, cap_scale: float = 1.0) -> Network:
    """IEEE 13-node feeder (regulator replaced by a stiff slack, transformer by a line).

    ``cap_scale`` scales the shunt capacitors, e.g. together with the demand
    when studying how model error behaves at light loading.
    """
    loads = ieee13_loads()
    buses = []
    for bid, phases in IEEE13_PHASES.items():
        kinds = SLACK if bid == "650" else (DER if bid in IEEE13_DERS else LOAD)
        bz = [0.0, 0.0, 0.0]
        for ph, (_, _, model) in loads.get(bid, {}).items():
            bz["abc".index(ph)] = _BETA_Z[model]
        cap = [0.0, 0.0, 0.0]
        for ph, kvar in _CAPACITORS.get(bid, {}).items():
            cap["abc".index(ph)] = cap_scale * kvar / _PHASE_KVA
        buses.append(Bus(bid, kinds, phases=phases, capacity=Disk(u_max) if bid in IEEE13_DERS else None,
                         capacitor=tuple(cap), beta_s=tuple(1.0 - b for b in bz), beta_z=tuple(bz)))
    branches = []
    for a, b, feet, code in _SEGMENTS:
        phases, Z = _config_z(code, feet)
        branches.append(Branch(a, b, phases, tuple(map(tuple, Z))))
    # transformer XFM-1: 500 kVA, z = 1.1 + j2 % on its own base
    zt = complex(0.011, 0.02) * IEEE13_S_BASE_KVA / 500.0
    branches.append(Branch("633", "634", "abc", tuple(tuple(zt if i == j else 0j for j in range(3))
                                                      for i in range(3))))
    # closed switch
    zs = complex(1e-6, 1e-6)
    branches.append(Branch("671", "692", "abc", tuple(tuple(zs if i == j else 0j for j in range(3))
                                                      for i in range(3))))
    return Network(buses, branches, slack="650", s_base_kva=IEEE13_S_BASE_KVA,
                   v_base_kv=IEEE13_V_BASE_KV, y_min=0.9**2, y_max=1.05**2, y_slack=y_slack,
                   name="ieee13")


def ieee13_demand(network: Network, scale: float = 1.0, phase_scale=(1.0, 1.0, 1.0)) -> np.ndarray:
    """(n, 3) complex demand for the nominal loads, optionally scaled per phase."""
    d = np.zeros((len(network.buses), 3), complex)
    for bid, per in ieee13_loads().items():
        i = network.index[bid]
        for ph, (p, q, _) in per.items():
            k = "abc".index(ph)
            d[i, k] += scale * phase_scale[k] * complex(p, q)
    return d


def ieee13_profiles(phase_scale=(1.0, 1.0, 1.0), scale: float = 1.0) -> dict:
    buses = {}
    for bid, per in ieee13_loads().items():
        peak_p = {ph: scale * phase_scale["abc".index(ph)] * p for ph, (p, _, _) in per.items()}
        peak_q = {ph: scale * phase_scale["abc".index(ph)] * q for ph, (_, q, _) in per.items()}
        buses[bid] = {"peak_p": peak_p, "peak_q": peak_q}
    return {"pv_fraction": 0.0, "step_minutes": 15, "load_sigma": 0.08, "day_sigma": 0.1,
            "phase_sigma": 0.05, "buses": buses}


FEEDERS = {
    "two_bus": (two_bus, two_bus_profiles),
    "five_node": (five_node, five_node_profiles),
    "feeder30": (feeder30, feeder30_profiles),
    "feeder30_case2": (feeder30_case2, feeder30_case2_profiles),
    "ieee13": (ieee13, ieee13_profiles),
}


def write_all(outdir: str | Path) -> None:
    import json
    outdir = Path(outdir)
    for name, (build, profiles) in FEEDERS.items():
        save_network(build(), outdir / name)
        (outdir / name / "profiles.json").write_text(json.dumps(profiles(), indent=1, sort_keys=True) + "\n")


if __name__ == "__main__":
    write_all(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).parent / "data")
