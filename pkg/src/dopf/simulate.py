"""Replay control modes through the nonlinear power flow and compare them.

Every mode produces DER set points for each scenario; the set points are
saturated to capacity, applied, and the resulting branch-flow state is
scored with the same weighted objective the centralized OPF minimizes.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import NoConvergence, SplitMismatch
from .feeder import PHASES, Network
from .opf import OpfConfig, label_set, max_phase_gap, objective_value, solve_opf_3ph
from .policy import PolicyModel, local_inputs, predict, saturate
from .powerflow import losses, phase_loads, net_load_1ph, solve_3ph, solve_distflow, substation_power
from .scenarios import CHANNELS

log = logging.getLogger(__name__)

LTC_SETPOINT = 0.97**2
VIOLATION_TOL = 1e-6


# --------------------------------------------------------------------------
# control modes


@dataclass(frozen=True)
class NoControl:
    name: str = "no_control"


@dataclass(frozen=True)
class ConstantPF:
    """Reactive injection proportional to PV output at a fixed (generating) power factor."""

    pf: float = 0.9
    name: str = "constant_pf"

    def __post_init__(self):
        if not 0.0 < self.pf <= 1.0:
            raise ValueError("power factor must lie in (0, 1]")


@dataclass(frozen=True)
class Decentralized:
    policies: Mapping[str, PolicyModel] = field(default_factory=dict, compare=False)
    name: str = "decentralized"


@dataclass(frozen=True)
class CentralizedOPF:
    """Per-scenario OPF set points; ``labels`` reuses an existing labelling of the same scenarios."""

    labels: object = field(default=None, compare=False)
    name: str = "centralized"


@dataclass(frozen=True)
class DecentralizedWithLTC:
    policies: Mapping[str, PolicyModel] = field(default_factory=dict, compare=False)
    y_slack: float = LTC_SETPOINT
    name: str = "decentralized_ltc"


ControlMode = NoControl | ConstantPF | Decentralized | CentralizedOPF | DecentralizedWithLTC


def _capacities(network: Network):
    return [network.buses[i].capacity for i in network.der_indices]


def _der_pg(network: Network, scenarios) -> np.ndarray:
    """(T, n_der) local PV output on each DER's phase."""
    cols = [PHASES.index(network.buses[i].phases[0]) for i in network.der_indices]
    return scenarios.data[:, network.der_indices, cols, CHANNELS.index("p_g")]


def _policy_setpoints(network: Network, scenarios, policies: Mapping[str, PolicyModel]):
    T, nd = len(scenarios), len(network.der_indices)
    missing = [d for d in network.der_ids if d not in policies]
    if missing:
        raise KeyError(f"no policy for DERs {missing}")
    pg = _der_pg(network, scenarios)
    u_p, u_q = np.zeros((T, nd)), np.zeros((T, nd))
    for k, der in enumerate(network.der_ids):
        pol = policies[der]
        u_p[:, k], u_q[:, k] = predict(pol, local_inputs(network, scenarios, der, pol.base), pg[:, k])
    return u_p, u_q


def setpoints(network: Network, scenarios, mode, config: OpfConfig | None = None, jobs: int = 1):
    """(u_p, u_q, extra) arrays of shape (T, n_der) for ``mode``; already saturated."""
    T, nd = len(scenarios), len(network.der_indices)
    extra: dict = {}
    if isinstance(mode, NoControl):
        return np.zeros((T, nd)), np.zeros((T, nd)), extra
    if isinstance(mode, ConstantPF):
        pg = _der_pg(network, scenarios)
        ratio = math.tan(math.acos(mode.pf))
        u_p, u_q = np.zeros((T, nd)), pg * ratio
        for k, cap in enumerate(_capacities(network)):
            u_p[:, k], u_q[:, k] = saturate(cap, u_p[:, k], u_q[:, k], pg[:, k])
        return u_p, u_q, extra
    if isinstance(mode, (Decentralized, DecentralizedWithLTC)):
        u_p, u_q = _policy_setpoints(network, scenarios, mode.policies)
        return u_p, u_q, extra
    if isinstance(mode, CentralizedOPF):
        labeled = mode.labels
        if labeled is None:
            labeled = label_set(network, scenarios, config or OpfConfig(), jobs=jobs)
        elif not np.array_equal(labeled.scenarios.times, scenarios.times):
            raise SplitMismatch("labels were computed for different scenarios")
        extra["opf_objective"] = labeled.objective
        extra["opf_status"] = labeled.status
        extra["exactness_gap"] = labeled.exactness_gap
        return np.nan_to_num(labeled.u_p), np.nan_to_num(labeled.u_q), extra
    raise TypeError(f"unknown control mode {mode!r}")


# --------------------------------------------------------------------------
# run reports


@dataclass
class RunReport:
    mode: str
    times: np.ndarray
    status: np.ndarray  # "ok" | "diverged"
    objective: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray
    p_sub: np.ndarray
    q_sub: np.ndarray
    loss: np.ndarray
    violations: np.ndarray  # count of buses outside the voltage band per timestep
    u_p: np.ndarray
    u_q: np.ndarray
    der_ids: tuple[str, ...]
    total_load: np.ndarray
    n_bus: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def violation_rate(self) -> float:
        """Fraction of (bus, timestep) pairs outside the voltage band (slack excluded)."""
        ok = self.status == "ok"
        denom = max(1, int(ok.sum()) * (self.n_bus - 1))
        return float(self.violations[ok].sum() / denom)

    def summary(self, central: "RunReport | None" = None) -> dict:
        ok = self.status == "ok"
        out = {
            "mode": self.mode, "timesteps": len(self), "diverged": int((~ok).sum()),
            "objective_mean": _mean(self.objective[ok]), "loss_total": float(np.sum(self.loss[ok])),
            "y_min": _min(self.y_min[ok]), "y_max": _max(self.y_max[ok]),
            "violation_rate": self.violation_rate,
            "substation_p_share_max": _max(np.abs(self.p_sub[ok]) / np.maximum(self.total_load[ok], 1e-12)),
        }
        if central is not None:
            g = objective_gap(self, central)
            g = g[np.isfinite(g)]
            out["gap_mean_percent"] = _mean(g)
            out["gap_max_percent"] = _max(g)
        return out


def _mean(v) -> float | None:
    return float(np.mean(v)) if len(v) else None


def _max(v) -> float | None:
    return float(np.max(v)) if len(v) else None


def _min(v) -> float | None:
    return float(np.min(v)) if len(v) else None


def objective_gap(report: RunReport, central: RunReport) -> np.ndarray:
    """Per-timestep gap in percent of the centralized objective (absolute where it is ~0)."""
    _check_same(report, central)
    base = central.objective
    diff = report.objective - base
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = 100.0 * diff / np.abs(base)
    return np.where(np.abs(base) < 1e-9, diff, rel)


def run(network: Network, scenarios, mode, config: OpfConfig | None = None, jobs: int = 1) -> RunReport:
    """Apply ``mode`` on every scenario of a single-phase feeder and solve the nonlinear flow."""
    config = config or OpfConfig()
    u_p, u_q, extra = setpoints(network, scenarios, mode, config, jobs)
    net = network.with_slack_voltage(mode.y_slack) if isinstance(mode, DecentralizedWithLTC) else network
    y_lo = network.y_min if config.y_min is None else config.y_min
    y_hi = network.y_max if config.y_max is None else config.y_max
    T = len(scenarios)
    cols = {k: np.full(T, np.nan) for k in ("objective", "y_min", "y_max", "p_sub", "q_sub", "loss")}
    viol = np.zeros(T, dtype=int)
    status = np.array(["ok"] * T, dtype=object)
    root = network.slack_index
    pc_col = scenarios.data[:, :, :, CHANNELS.index("p_c")].sum(axis=2)
    total_load = pc_col.sum(axis=1)
    ys = []
    for t in range(T):
        sc = scenarios[t]
        p, q = net_load_1ph(net, sc, u_p[t], u_q[t])
        try:
            res = solve_distflow(net, p, q)
        except NoConvergence as exc:
            log.warning("t=%s: %s", sc.t, exc)
            status[t] = "diverged"
            ys.append(np.full(len(network.buses), np.nan))
            continue
        ys.append(res.y)
        cols["objective"][t] = objective_value(net, config, res.y, res.P, res.Q, res.ell)
        others = np.delete(res.y, root)
        cols["y_min"][t], cols["y_max"][t] = others.min(), others.max()
        cols["p_sub"][t], cols["q_sub"][t] = substation_power(net, res)
        cols["loss"][t] = losses(net, res)
        viol[t] = int(np.sum((others < y_lo - VIOLATION_TOL) | (others > y_hi + VIOLATION_TOL)))
    extra["y"] = np.array(ys)
    return RunReport(mode.name, np.asarray(scenarios.times), status, cols["objective"], cols["y_min"],
                     cols["y_max"], cols["p_sub"], cols["q_sub"], cols["loss"], viol, u_p, u_q,
                     tuple(network.der_ids), total_load, len(network.buses), extra)


def _check_same(a: RunReport, b: RunReport) -> None:
    if len(a) != len(b) or not np.array_equal(a.times, b.times):
        raise SplitMismatch(f"reports {a.mode!r} and {b.mode!r} cover different scenarios")


def compare(reports: Mapping[str, RunReport], order=("decentralized", "constant_pf", "no_control"),
            tol: float = 1e-12) -> dict:
    """Aggregate table plus loss-ordering statistics across reports over the same scenarios."""
    reps = list(reports.values())
    for r in reps[1:]:
        _check_same(reps[0], r)
    central = reports.get("centralized")
    table = {name: r.summary(central) for name, r in reports.items()}
    diffs = {}
    names = list(reports)
    for a, b in zip(names, names[1:]):
        diffs[f"{a}-{b}"] = {
            "objective_max_abs": float(np.nanmax(np.abs(reports[a].objective - reports[b].objective))),
            "loss_max_abs": float(np.nanmax(np.abs(reports[a].loss - reports[b].loss))),
        }
    ordering = {}
    present = [m for m in order if m in reports]
    for a, b in zip(present, present[1:]):
        ordering[f"{a}<={b}"] = float(np.mean(reports[a].loss <= reports[b].loss + tol))
    if len(present) >= 2:
        chain = np.ones(len(reps[0]), bool)
        for a, b in zip(present, present[1:]):
            chain &= reports[a].loss <= reports[b].loss + tol
        ordering["chain"] = float(np.mean(chain))
    return {"modes": table, "differences": diffs, "loss_ordering": ordering}


# --------------------------------------------------------------------------
# three-phase balancing


@dataclass
class BalanceReport:
    mode: str
    times: np.ndarray
    gap_before: np.ndarray  # max inter-phase |y^a - y^b| with no control
    gap_after: np.ndarray
    status: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def reduction(self) -> np.ndarray:
        """Per-timestep relative gap reduction (1 = fully balanced)."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.gap_before > 1e-12, 1.0 - self.gap_after / self.gap_before, 0.0)

    def summary(self) -> dict:
        ok = self.status == "ok"
        return {"mode": self.mode, "timesteps": len(self.times), "diverged": int((~ok).sum()),
                "gap_before_max": _max(self.gap_before[ok]), "gap_after_max": _max(self.gap_after[ok]),
                "reduction_mean": _mean(self.reduction[ok]), "reduction_min": _min(self.reduction[ok])}


def run_3ph_balance(network: Network, scenarios, controller="central", config: OpfConfig | None = None
                    ) -> BalanceReport:
    """Inter-phase voltage gap before and after control on a multi-phase feeder.

    ``controller`` is ``"central"`` (per-scenario balancing OPF), ``"none"``, or a
    mapping of per-phase policies.
    """
    config = config or OpfConfig.case("3ph")
    T, n = len(scenarios), len(network.buses)
    before, after = np.full(T, np.nan), np.full(T, np.nan)
    status = np.array(["ok"] * T, dtype=object)
    if isinstance(controller, Mapping):
        ups, uqs = {}, {}
        for der, pol in controller.items():
            ups[der], uqs[der] = predict(pol, local_inputs(network, scenarios, der, pol.base))
    for t in range(T):
        sc = scenarios[t]
        d, g, _ = phase_loads(network, sc)
        u = np.zeros((n, 3), complex)
        if isinstance(controller, Mapping):
            for der in controller:
                i = network.index[der]
                u[i] = np.nan_to_num(ups[der][t]) + 1j * np.nan_to_num(uqs[der][t])
        elif controller == "central":
            sol = solve_opf_3ph(network, sc, config, d=d, g=g)
            if not sol.optimal:
                status[t] = sol.status
                continue
            for k, i in enumerate(network.der_indices):
                u[i] = np.nan_to_num(sol.u_p[k]) + 1j * np.nan_to_num(sol.u_q[k])
        elif controller != "none":
            raise ValueError(f"unknown controller {controller!r}")
        try:
            before[t] = max_phase_gap(solve_3ph(network, d, g).y)
            after[t] = max_phase_gap(solve_3ph(network, d, g, u).y)
        except NoConvergence as exc:
            log.warning("t=%s: %s", sc.t, exc)
            status[t] = "diverged"
    name = "policies" if isinstance(controller, Mapping) else str(controller)
    return BalanceReport(name, np.asarray(scenarios.times), before, after, status)


# --------------------------------------------------------------------------
# output files


def _num(v) -> str:
    return "" if v is None or not np.isfinite(v) else repr(float(v))


def report_csv(reports: Mapping[str, RunReport]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mode", "t", "status", "objective", "y_min", "y_max", "p_sub", "q_sub", "loss", "violations"])
    for name, r in reports.items():
        for t in range(len(r)):
            w.writerow([name, _num(r.times[t]), r.status[t], _num(r.objective[t]), _num(r.y_min[t]),
                        _num(r.y_max[t]), _num(r.p_sub[t]), _num(r.q_sub[t]), _num(r.loss[t]),
                        int(r.violations[t])])
    return out.getvalue()


def _wide(reports: Mapping[str, RunReport], attrs: tuple[str, ...]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    first = next(iter(reports.values()))
    w.writerow(["t"] + [f"{name}_{a}" for name in reports for a in attrs])
    for t in range(len(first)):
        w.writerow([_num(first.times[t])] + [_num(getattr(r, a)[t]) for r in reports.values() for a in attrs])
    return out.getvalue()


def control_csv(reports: Mapping[str, RunReport]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["mode", "t", "der", "u_p", "u_q"])
    for name, r in reports.items():
        for t in range(len(r)):
            for k, der in enumerate(r.der_ids):
                w.writerow([name, _num(r.times[t]), der, _num(r.u_p[t, k]), _num(r.u_q[t, k])])
    return out.getvalue()


def write_outputs(reports: Mapping[str, RunReport], outdir, extra_summary: Mapping | None = None) -> dict:
    """Write run_report.csv, summary.json and the plot-data CSVs; returns the summary."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    summary = compare(reports) if reports else {}
    if extra_summary:
        summary.update(extra_summary)
    files = {
        "run_report.csv": report_csv(reports),
        "plot_voltage.csv": _wide(reports, ("y_min", "y_max")),
        "plot_losses.csv": _wide(reports, ("loss",)),
        "plot_substation.csv": _wide(reports, ("p_sub", "q_sub")),
        "plot_control.csv": control_csv(reports),
    } if reports else {}
    for name, text in files.items():
        (outdir / name).write_text(text)
    (outdir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary
