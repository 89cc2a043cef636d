"""Centralized optimal power flow and scenario labelling.

Single-phase: second-order cone relaxation of the branch-flow model.
Three-phase: voltage balancing over the linear unbalanced model.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import conic
from .errors import CapacityError, ConfigValidation, MissingPhaseData
from .feeder import PHASES, Box, Disk, Network, PvResidual
from .powerflow import linear_model, bus_phase

log = logging.getLogger(__name__)

EXACTNESS_TOL = 1e-6


@dataclass(frozen=True)
class OpfConfig:
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    rho: float = 0.01
    y_ref: float | None = None
    y_min: float | None = None
    y_max: float | None = None
    channels: tuple[str, ...] = ("p", "q")
    exclude_inexact: bool = True
    tol: float = 1e-8

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma", "rho"):
            if getattr(self, name) < 0:
                raise ConfigValidation(f"{name} must be nonnegative")
        if not set(self.channels) <= {"p", "q"} or not self.channels:
            raise ConfigValidation(f"channels {self.channels} must be a nonempty subset of ('p', 'q')")
        object.__setattr__(self, "channels", tuple(c for c in ("p", "q") if c in self.channels))

    @property
    def exactness_guaranteed(self) -> bool:
        """The relaxation argument needs a loss term that is strictly increasing in current."""
        return self.alpha > 0

    @classmethod
    def case(cls, name) -> "OpfConfig":
        name = str(name)
        if name == "1":
            return cls(alpha=1.0, beta=2e-4, gamma=0.0, channels=("q",))
        if name == "2":
            return cls(alpha=1.0, beta=0.0, gamma=1e3, channels=("p",))
        if name == "3ph":
            return cls(alpha=0.0, beta=0.0, gamma=0.0, rho=0.01)
        raise ConfigValidation(f"unknown case preset {name!r}")

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma, "rho": self.rho,
                "y_ref": self.y_ref, "y_min": self.y_min, "y_max": self.y_max,
                "channels": list(self.channels), "exclude_inexact": self.exclude_inexact, "tol": self.tol}

    @classmethod
    def from_dict(cls, d: dict) -> "OpfConfig":
        d = dict(d)
        if "channels" in d:
            d["channels"] = tuple(d["channels"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigValidation(f"unknown OPF settings {sorted(unknown)}")
        return cls(**d)


@dataclass
class OPFSolution:
    status: str
    der_ids: tuple[str, ...]
    u_p: np.ndarray  # (n_der,) or (n_der, 3)
    u_q: np.ndarray
    y: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray | None
    objective: float
    exactness_gap: np.ndarray | None = None
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status in ("optimal", "inexact")

    @property
    def max_gap(self) -> float:
        if self.exactness_gap is None or self.exactness_gap.size == 0:
            return 0.0
        return float(np.max(self.exactness_gap))


# --------------------------------------------------------------------------
# single phase


class _Layout:
    """Column offsets of the single-phase decision vector."""

    def __init__(self, n: int, nb: int, nd: int):
        self.y = np.arange(n)
        self.P = n + np.arange(nb)
        self.Q = n + nb + np.arange(nb)
        self.ell = n + 2 * nb + np.arange(nb)
        self.up = n + 3 * nb + np.arange(nd)
        self.uq = n + 3 * nb + nd + np.arange(nd)
        self.size = n + 3 * nb + 2 * nd


class _Rows:
    """Accumulates constraint rows for a ``ConicProblem``."""

    def __init__(self, nvar: int):
        self.nvar = nvar
        self.A, self.b = [], []
        self.G, self.h, self.cones = [], [], []

    def eq(self, coeffs: dict[int, float], rhs: float) -> None:
        row = np.zeros(self.nvar)
        for k, v in coeffs.items():
            row[k] += v
        self.A.append(row)
        self.b.append(rhs)

    def cone(self, cone, rows: list[tuple[dict[int, float], float]]) -> None:
        """Add ``h - G x`` in ``cone``, each row given as (coeffs of ``s``, constant)."""
        for coeffs, const in rows:
            g = np.zeros(self.nvar)
            for k, v in coeffs.items():
                g[k] -= v
            self.G.append(g)
            self.h.append(const)
        self.cones.append(cone)

    def le(self, coeffs: dict[int, float], rhs: float) -> None:
        """``coeffs . x <= rhs``."""
        self.cone(conic.NonNeg(1), [({k: -v for k, v in coeffs.items()}, rhs)])

    def problem(self, P, q) -> conic.ConicProblem:
        A = np.array(self.A) if self.A else np.zeros((0, self.nvar))
        G = np.array(self.G) if self.G else np.zeros((0, self.nvar))
        return conic.ConicProblem(P, q, A, np.array(self.b), G, np.array(self.h), _merge(self.cones))


def _merge(cones) -> list:
    out = []
    for c in cones:
        if isinstance(c, conic.NonNeg) and out and isinstance(out[-1], conic.NonNeg):
            out[-1] = conic.NonNeg(out[-1].dim + c.dim)
        else:
            out.append(c)
    return out


def _bounds(network: Network, config: OpfConfig) -> tuple[float, float, float]:
    y_ref = network.y_ref if config.y_ref is None else config.y_ref
    y_min = network.y_min if config.y_min is None else config.y_min
    y_max = network.y_max if config.y_max is None else config.y_max
    return y_ref, y_min, y_max


def _add_capacity(rows: _Rows, bus, up: int, uq: int, p_g: float, channels) -> None:
    cap = bus.capacity
    if "p" not in channels:
        rows.eq({up: 1.0}, 0.0)
    if "q" not in channels:
        rows.eq({uq: 1.0}, 0.0)
    if isinstance(cap, Disk):
        rows.cone(conic.Soc(3), [({}, cap.s_max), ({up: 1.0}, 0.0), ({uq: 1.0}, 0.0)])
    elif isinstance(cap, Box):
        for var, lo, hi, ch in ((up, cap.p_min, cap.p_max, "p"), (uq, cap.q_min, cap.q_max, "q")):
            if ch not in channels:
                continue
            if hi - lo <= 1e-12:
                rows.eq({var: 1.0}, 0.5 * (lo + hi))
            else:
                rows.le({var: 1.0}, hi)
                rows.le({var: -1.0}, -lo)
    elif isinstance(cap, PvResidual):
        if "p" in channels:
            rows.eq({up: 1.0}, 0.0)
        if "q" in channels:
            qlim = cap.q_limit(p_g)
            if qlim <= 1e-12:
                rows.eq({uq: 1.0}, 0.0)
            else:
                rows.le({uq: 1.0}, qlim)
                rows.le({uq: -1.0}, qlim)


def build_opf_1ph(network: Network, scenario, config: OpfConfig) -> tuple[conic.ConicProblem, _Layout]:
    """Relaxed branch-flow OPF for one scenario."""
    n, nb = len(network.buses), len(network.branches)
    ders = network.der_indices
    lay = _Layout(n, nb, len(ders))
    y_ref, y_min, y_max = _bounds(network, config)
    rows = _Rows(lay.size)
    ph = [bus_phase(network, i) for i in range(n)]
    data = scenario.data
    pc = np.array([data[i, ph[i], 0] for i in range(n)])
    qc = np.array([data[i, ph[i], 1] - network.buses[i].capacitor[ph[i]] for i in range(n)])
    pg = np.array([data[i, ph[i], 2] for i in range(n)])
    der_pos = {i: k for k, i in enumerate(ders)}
    root = network.slack_index
    rows.eq({lay.y[root]: 1.0}, network.y_slack)
    for k, (m, j) in enumerate(network.branch_ends):
        br = network.branches[k]
        r, x = br.r, br.x
        cp = {lay.P[k]: 1.0, lay.ell[k]: -r}
        cq = {lay.Q[k]: 1.0, lay.ell[k]: -x}
        for c in network.children[j]:
            cp[lay.P[network.branch_of[c]]] = -1.0
            cq[lay.Q[network.branch_of[c]]] = -1.0
        if j in der_pos:
            cp[lay.up[der_pos[j]]] = 1.0
            cq[lay.uq[der_pos[j]]] = 1.0
        rows.eq(cp, pc[j] - pg[j])
        rows.eq(cq, qc[j])
        rows.eq({lay.y[m]: 1.0, lay.y[j]: -1.0, lay.P[k]: -2 * r, lay.Q[k]: -2 * x,
                 lay.ell[k]: r * r + x * x}, 0.0)
    for i in range(n):
        if i == root:
            continue
        rows.le({lay.y[i]: 1.0}, y_max)
        rows.le({lay.y[i]: -1.0}, -y_min)
    for k, (m, _) in enumerate(network.branch_ends):
        # (l + y_m, 2P, 2Q, l - y_m) in SOC  <=>  l * y_m >= P^2 + Q^2
        rows.cone(conic.Soc(4), [({lay.ell[k]: 1.0, lay.y[m]: 1.0}, 0.0), ({lay.P[k]: 2.0}, 0.0),
                                 ({lay.Q[k]: 2.0}, 0.0), ({lay.ell[k]: 1.0, lay.y[m]: -1.0}, 0.0)])
    for k, i in enumerate(ders):
        bus = network.buses[i]
        if isinstance(bus.capacity, PvResidual) and pg[i] > bus.capacity.s_max * (1 + 1e-12):
            raise CapacityError(f"bus {bus.id}: generation {pg[i]:.4g} exceeds rating {bus.capacity.s_max:.4g}")
        _add_capacity(rows, bus, lay.up[k], lay.uq[k], pg[i], config.channels)

    P = np.zeros((lay.size, lay.size))
    q = np.zeros(lay.size)
    r_vec = np.array([br.r for br in network.branches])
    q[lay.ell] += config.alpha * r_vec
    if config.beta:
        P[lay.y, lay.y] += 2 * config.beta
        q[lay.y] += -2 * config.beta * y_ref
    if config.gamma:
        top = [k for k, (m, _) in enumerate(network.branch_ends) if m == root]
        for cols in (lay.P[top], lay.Q[top]):
            P[np.ix_(cols, cols)] += 2 * config.gamma
    return rows.problem(P, q), lay


def objective_constant(network: Network, config: OpfConfig) -> float:
    """Constant dropped from the conic objective (the ``y_ref**2`` part of the voltage term)."""
    y_ref, _, _ = _bounds(network, config)
    return config.beta * len(network.buses) * y_ref**2


def objective_value(network: Network, config: OpfConfig, y, P, Q, ell) -> float:
    """Weighted losses + voltage deviation + substation power, from any branch-flow state."""
    y_ref, _, _ = _bounds(network, config)
    r_vec = np.array([br.r for br in network.branches])
    top = [k for k, (m, _) in enumerate(network.branch_ends) if m == network.slack_index]
    p0, q0 = float(np.sum(np.asarray(P)[top])), float(np.sum(np.asarray(Q)[top]))
    return float(config.alpha * r_vec @ np.asarray(ell) + config.beta * np.sum((np.asarray(y) - y_ref) ** 2)
                 + config.gamma * (p0**2 + q0**2))


def solve_opf_1ph(network: Network, scenario, config: OpfConfig) -> OPFSolution:
    prob, lay = build_opf_1ph(network, scenario, config)
    sol = conic.solve(prob, conic.Settings(tol=config.tol))
    x = sol.x
    y, P, Q, ell = x[lay.y], x[lay.P], x[lay.Q], x[lay.ell]
    ups = np.array([m for m, _ in network.branch_ends])
    gap = ell - (P**2 + Q**2) / y[ups]
    status = sol.status.value
    if sol.optimal and np.max(gap, initial=0.0) > EXACTNESS_TOL:
        status = "inexact"
    obj = sol.objective + objective_constant(network, config)
    up, uq = _channels(config, x[lay.up], x[lay.uq])
    return OPFSolution(status, tuple(network.der_ids), up, uq, y, P, Q, ell, float(obj), gap, sol.iterations)


def _channels(config: OpfConfig, up, uq):
    # disabled channels are pinned by equality rows; report them as exact zeros
    up = up.copy() if "p" in config.channels else np.zeros_like(up)
    uq = uq.copy() if "q" in config.channels else np.zeros_like(uq)
    return up, uq


# --------------------------------------------------------------------------
# three phase


class _Layout3:
    def __init__(self, network: Network):
        lm = linear_model(network)
        self.lm = lm
        nn, nb = len(lm.node_ph), len(lm.branch_ph)
        self.der_ph = [(i, ph) for i in network.der_indices for (j, ph) in lm.node_ph if j == i]
        nd = len(self.der_ph)
        self.y = np.arange(nn)
        self.P = nn + np.arange(nb)
        self.Q = nn + nb + np.arange(nb)
        self.up = nn + 2 * nb + np.arange(nd)
        self.uq = nn + 2 * nb + nd + np.arange(nd)
        self.size = nn + 2 * nb + 2 * nd


def _layout3(network: Network) -> _Layout3:
    cached = network.__dict__.get("_opf_layout3")
    if cached is None:
        cached = _Layout3(network)
        network.__dict__["_opf_layout3"] = cached
    return cached


def build_opf_3ph(network: Network, scenario, config: OpfConfig, d=None, g=None):
    """Voltage-balancing program over the linear unbalanced model.

    ``d``/``g`` default to the scenario's (p_c + j q_c) and p_g channels.
    """
    if network.single_phase:
        raise MissingPhaseData("three-phase OPF needs a multi-phase feeder")
    lay = _layout3(network)
    lm = lay.lm
    if d is None:
        d = scenario.data[:, :, 0] + 1j * scenario.data[:, :, 1]
        g = scenario.data[:, :, 2]
    g = np.zeros(d.shape) if g is None else np.real(g)
    _, y_min, y_max = _bounds(network, config)
    rows = _Rows(lay.size)
    bs = np.array([b.beta_s for b in network.buses])
    bz = np.array([b.beta_z for b in network.buses])
    cap = np.array([b.capacitor for b in network.buses])
    der_col = {key: k for k, key in enumerate(lay.der_ph)}
    root = network.slack_index
    for (i, ph), r in lm.node_pos.items():
        if i == root:
            rows.eq({lay.y[r]: 1.0}, network.y_slack)
    for (k, ph), col in lm.branch_pos.items():
        _, j = network.branch_ends[k]
        nr = lm.node_pos[(j, ph)]
        cp = {lay.P[col]: 1.0, lay.y[nr]: -bz[j, ph] * d[j, ph].real}
        cq = {lay.Q[col]: 1.0, lay.y[nr]: -bz[j, ph] * d[j, ph].imag}
        for c in network.children[j]:
            kc = network.branch_of[c]
            if (kc, ph) in lm.branch_pos:
                cp[lay.P[lm.branch_pos[(kc, ph)]]] = -1.0
                cq[lay.Q[lm.branch_pos[(kc, ph)]]] = -1.0
        if (j, ph) in der_col:
            cp[lay.up[der_col[(j, ph)]]] = 1.0
            cq[lay.uq[der_col[(j, ph)]]] = 1.0
        rows.eq(cp, bs[j, ph] * d[j, ph].real - g[j, ph])
        rows.eq(cq, bs[j, ph] * d[j, ph].imag - cap[j, ph])
    for j in network.order[1:]:
        k, m = network.branch_of[j], network.parent[j]
        mats = lm.mats[k]
        phs = network.branches[k].phases
        for a, pa in enumerate(phs):
            ia = PHASES.index(pa)
            coeffs = {lay.y[lm.node_pos[(m, ia)]]: 1.0, lay.y[lm.node_pos[(j, ia)]]: -1.0}
            for b, pb in enumerate(phs):
                col = lm.branch_pos[(k, PHASES.index(pb))]
                coeffs[lay.P[col]] = coeffs.get(lay.P[col], 0.0) - 2 * mats.M[a, b]
                coeffs[lay.Q[col]] = coeffs.get(lay.Q[col], 0.0) + 2 * mats.N[a, b]
            rows.eq(coeffs, 0.0)
    for (i, ph), r in lm.node_pos.items():
        if i != root:
            rows.le({lay.y[r]: 1.0}, y_max)
            rows.le({lay.y[r]: -1.0}, -y_min)
    for k, (i, ph) in enumerate(lay.der_ph):
        bus = network.buses[i]
        u_max = _phase_limit(bus.capacity)
        if "p" not in config.channels:
            rows.eq({lay.up[k]: 1.0}, 0.0)
        if "q" not in config.channels:
            rows.eq({lay.uq[k]: 1.0}, 0.0)
        rows.cone(conic.Soc(3), [({}, u_max), ({lay.up[k]: 1.0}, 0.0), ({lay.uq[k]: 1.0}, 0.0)])

    P = np.zeros((lay.size, lay.size))
    by_node: dict[int, list[int]] = {}
    for (i, ph), r in lm.node_pos.items():
        by_node.setdefault(i, []).append(r)
    for cols in by_node.values():
        for a in cols:
            for b in cols:
                if a == b:
                    continue
                # ordered pair (a, b): (y_a - y_b)^2 = 1/2 x' [2 v v'] x
                P[a, a] += 2.0
                P[b, b] += 2.0
                P[a, b] -= 2.0
                P[b, a] -= 2.0
    u = np.concatenate([lay.up, lay.uq])
    P[u, u] += 2 * config.rho
    return rows.problem(P, np.zeros(lay.size)), lay


def _phase_limit(cap) -> float:
    if isinstance(cap, Disk):
        return cap.s_max
    if isinstance(cap, PvResidual):
        return cap.s_max
    if isinstance(cap, Box):
        return max(abs(cap.p_min), abs(cap.p_max), abs(cap.q_min), abs(cap.q_max))
    raise MissingPhaseData("controllable bus without a capacity model")


def imbalance_objective(network: Network, y: np.ndarray) -> float:
    """Sum over buses and ordered phase pairs of squared magnitude differences."""
    total = 0.0
    for row in np.asarray(y):
        v = row[np.isfinite(row)]
        diff = v[:, None] - v[None, :]
        total += float(np.sum(diff**2))
    return total


def max_phase_gap(y: np.ndarray) -> float:
    """Largest inter-phase |y^a - y^b| over all buses."""
    gaps = [np.ptp(row[np.isfinite(row)]) for row in np.asarray(y) if np.isfinite(row).sum() > 1]
    return float(max(gaps, default=0.0))


def solve_opf_3ph(network: Network, scenario, config: OpfConfig, d=None, g=None) -> OPFSolution:
    prob, lay = build_opf_3ph(network, scenario, config, d, g)
    sol = conic.solve(prob, conic.Settings(tol=config.tol))
    lm = lay.lm
    nd = len(network.der_indices)
    u_p = np.full((nd, 3), np.nan)
    u_q = np.full((nd, 3), np.nan)
    row_of = {i: k for k, i in enumerate(network.der_indices)}
    x = sol.x
    xp, xq = _channels(config, x[lay.up], x[lay.uq])
    for k, (i, ph) in enumerate(lay.der_ph):
        u_p[row_of[i], ph] = xp[k]
        u_q[row_of[i], ph] = xq[k]
    return OPFSolution(sol.status.value, tuple(network.der_ids), u_p, u_q,
                       lm.scatter_nodes(x[lay.y]), lm.scatter_branches(x[lay.P]),
                       lm.scatter_branches(x[lay.Q]), None, float(sol.objective), None, sol.iterations)


# --------------------------------------------------------------------------
# labelling


@dataclass
class LabeledSet:
    scenarios: object  # ScenarioSet
    der_ids: tuple[str, ...]
    u_p: np.ndarray  # (T, n_der) or (T, n_der, 3)
    u_q: np.ndarray
    status: np.ndarray
    exactness_gap: np.ndarray  # (T,) max branch gap (0 for three phase)
    objective: np.ndarray
    three_phase: bool = False

    def __len__(self) -> int:
        return len(self.status)

    @property
    def usable(self) -> np.ndarray:
        """Mask of scenarios whose label may be used for training."""
        return np.isin(self.status, ("optimal",))

    def summary(self) -> dict:
        vals, counts = np.unique(self.status, return_counts=True)
        return {"count": len(self), "status": {str(v): int(c) for c, v in zip(counts, vals)},
                "max_exactness_gap": float(np.max(self.exactness_gap, initial=0.0))}

    def subset(self, idx) -> "LabeledSet":
        if isinstance(idx, str):
            idx = self.scenarios.indices(idx)
        idx = np.asarray(idx, dtype=int)
        return replace(self, scenarios=self.scenarios.subset(idx), u_p=self.u_p[idx], u_q=self.u_q[idx],
                       status=self.status[idx], exactness_gap=self.exactness_gap[idx],
                       objective=self.objective[idx])


def _solve_one(args):
    network, scenario, config = args
    try:
        if network.single_phase:
            return solve_opf_1ph(network, scenario, config)
        return solve_opf_3ph(network, scenario, config)
    except CapacityError as exc:
        log.warning("scenario t=%s: %s", scenario.t, exc)
        return None


def label_set(network: Network, scenarios, config: OpfConfig, jobs: int = 1) -> LabeledSet:
    """One OPF per scenario; results are collected in scenario order."""
    tasks = [(network, sc, config) for sc in scenarios]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            sols = list(pool.map(_solve_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        sols = [_solve_one(t) for t in tasks]
    three = not network.single_phase
    nd = len(network.der_indices)
    shape = (len(sols), nd, 3) if three else (len(sols), nd)
    u_p, u_q = np.full(shape, np.nan), np.full(shape, np.nan)
    status = np.empty(len(sols), dtype=object)
    gap = np.zeros(len(sols))
    obj = np.full(len(sols), np.nan)
    for t, s in enumerate(sols):
        if s is None:
            status[t] = "capacity_error"
            continue
        status[t] = s.status
        u_p[t], u_q[t] = s.u_p, s.u_q
        gap[t] = s.max_gap
        obj[t] = s.objective
    labeled = LabeledSet(scenarios, tuple(network.der_ids), u_p, u_q, status, gap, obj, three)
    bad = {k: v for k, v in labeled.summary()["status"].items() if k != "optimal"}
    if bad:
        log.info("labelling finished with non-optimal statuses %s", bad)
    return labeled


def _fmt(v: float) -> str:
    return "" if not math.isfinite(v) else repr(float(v))


def labels_to_csv(labeled: LabeledSet, network: Network) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    header = ["t", "bus", "u_p", "u_q"] + (["phase"] if labeled.three_phase else []) + \
             ["status", "exactness_gap", "objective"]
    w.writerow(header)
    times = labeled.scenarios.times
    for t in range(len(labeled)):
        for k, bid in enumerate(labeled.der_ids):
            tail = [labeled.status[t], _fmt(labeled.exactness_gap[t]), _fmt(labeled.objective[t])]
            if labeled.three_phase:
                for ph in network.bus(bid).phases:
                    j = PHASES.index(ph)
                    w.writerow([_fmt(times[t]), bid, _fmt(labeled.u_p[t, k, j]), _fmt(labeled.u_q[t, k, j]), ph]
                               + tail)
            else:
                w.writerow([_fmt(times[t]), bid, _fmt(labeled.u_p[t, k]), _fmt(labeled.u_q[t, k])] + tail)
    return out.getvalue()


def labels_from_csv(text: str, network: Network, scenarios) -> LabeledSet:
    rows = list(csv.DictReader(io.StringIO(text)))
    three = "phase" in (rows[0].keys() if rows else [])
    der_ids = tuple(network.der_ids)
    pos = {b: k for k, b in enumerate(der_ids)}
    t_index = {float(t): i for i, t in enumerate(scenarios.times)}
    T, nd = len(scenarios), len(der_ids)
    shape = (T, nd, 3) if three else (T, nd)
    u_p, u_q = np.full(shape, np.nan), np.full(shape, np.nan)
    status = np.array(["missing"] * T, dtype=object)
    gap, obj = np.zeros(T), np.full(T, np.nan)

    def num(s):
        return float(s) if s != "" else np.nan

    for r in rows:
        t = t_index[float(r["t"])]
        k = pos[r["bus"]]
        idx = (t, k, PHASES.index(r["phase"])) if three else (t, k)
        u_p[idx], u_q[idx] = num(r["u_p"]), num(r["u_q"])
        status[t] = r["status"]
        gap[t], obj[t] = num(r["exactness_gap"]), num(r["objective"])
    return LabeledSet(scenarios, der_ids, u_p, u_q, status, np.nan_to_num(gap), obj, three)


def der_capacity_ok(network: Network, labeled: LabeledSet, tol: float = 1e-8) -> bool:
    """Every optimal single-phase label satisfies its DER capacity model."""
    pg = labeled.scenarios.channel("p_g")
    for k, i in enumerate(network.der_indices):
        cap = network.buses[i].capacity
        ph = bus_phase(network, i)
        for t in np.flatnonzero(labeled.usable):
            if not cap.contains(labeled.u_p[t, k], labeled.u_q[t, k], pg[t, i, ph], tol):
                return False
    return True

