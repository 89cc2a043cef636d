"""Power-flow solvers.

* ``solve_distflow``: single-phase branch-flow fixed point (backward/forward sweep).
* ``solve_3ph``: unbalanced three-phase current-injection backward/forward sweep.
* ``eval_lindist3flow``: the lossless linear unbalanced model, with ``build_lindist_mats``
  giving its per-branch sensitivity matrices.

Sign conventions: branch flows point away from the slack; nodal load ``s`` is
consumption-positive, and a DER set point ``u`` is an injection, so it enters
the nodal load with a minus sign.  Squared magnitudes ``y`` are per unit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NoConvergence, PhaseMismatch
from .feeder import PHASES, Network

ALPHA = complex(-0.5, np.sqrt(3) / 2)
GAMMA = np.array([[1, ALPHA, ALPHA**2],
                  [ALPHA**2, 1, ALPHA],
                  [ALPHA, ALPHA**2, 1]], dtype=complex)
NOMINAL_ANGLES = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])


@dataclass
class PfResult:
    """Power-flow solution.

    Single-phase results carry 1-d arrays; three-phase ones carry ``(n, 3)``
    arrays with NaN on phases that do not exist at a bus or branch.
    """

    y: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    ell: np.ndarray | None = None
    V: np.ndarray | None = None
    theta: np.ndarray | None = None
    iterations: int = 0
    residual: float = 0.0
    method: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def three_phase(self) -> bool:
        return self.y.ndim == 2


# --------------------------------------------------------------------------
# single phase


def bus_phase(network: Network, i: int) -> int:
    return PHASES.index(network.buses[i].phases[0])


def net_load_1ph(network: Network, scenario, u_p=None, u_q=None) -> tuple[np.ndarray, np.ndarray]:
    """Consumption-positive net nodal (p, q) for one scenario of a single-phase feeder.

    ``u_p``/``u_q`` are DER injections ordered like ``network.der_indices``.
    """
    n = len(network.buses)
    ph = [bus_phase(network, i) for i in range(n)]
    rows = np.arange(n)
    d = scenario.data
    p = d[rows, ph, 0] - d[rows, ph, 2]
    cap = np.array([network.buses[i].capacitor[ph[i]] for i in range(n)])
    q = d[rows, ph, 1] - cap
    ders = network.der_indices
    if u_p is not None:
        p[ders] -= np.asarray(u_p, dtype=float)
    if u_q is not None:
        q[ders] -= np.asarray(u_q, dtype=float)
    return p, q


def solve_distflow(network: Network, p: np.ndarray, q: np.ndarray, y0: float | None = None,
                   tol: float = 1e-10, max_sweeps: int = 100) -> PfResult:
    """Branch-flow fixed point for net nodal consumption ``p``, ``q`` (per bus, pu).

    Flows ``P``, ``Q`` are sending-end values on the branch feeding each
    downstream bus; ``ell`` is the squared current referred to the sending-end
    voltage.
    """
    y0 = network.y_slack if y0 is None else y0
    n = len(network.buses)
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    order, parent, branch_of = network.order, network.parent, network.branch_of
    root = order[0]
    r = np.zeros(n)
    x = np.zeros(n)
    for j in order[1:]:
        br = network.branches[branch_of[j]]
        r[j], x[j] = br.r, br.x
    kids = network.children
    P = np.zeros(n)
    Q = np.zeros(n)
    ell = np.zeros(n)
    y = np.full(n, float(y0))
    down = order[::-1][:-1]
    for sweep in range(1, max_sweeps + 1):
        P_new = np.zeros(n)
        Q_new = np.zeros(n)
        for j in down:
            P_new[j] = r[j] * ell[j] + p[j] + sum(P_new[k] for k in kids[j])
            Q_new[j] = x[j] * ell[j] + q[j] + sum(Q_new[k] for k in kids[j])
        y_new = y.copy()
        y_new[root] = y0
        for j in order[1:]:
            m = parent[j]
            y_new[j] = y_new[m] - 2 * (r[j] * P_new[j] + x[j] * Q_new[j]) + (r[j] ** 2 + x[j] ** 2) * ell[j]
        if np.any(y_new <= 0) or not np.all(np.isfinite(y_new)):
            raise NoConvergence("voltage collapsed during the branch-flow sweep")
        ell_new = np.zeros(n)
        for j in order[1:]:
            ell_new[j] = (P_new[j] ** 2 + Q_new[j] ** 2) / y_new[parent[j]]
        change = max(np.abs(P_new - P).max(), np.abs(Q_new - Q).max(),
                     np.abs(y_new - y).max(), np.abs(ell_new - ell).max())
        P, Q, y, ell = P_new, Q_new, y_new, ell_new
        if change < tol:
            break
    else:
        raise NoConvergence(f"branch-flow sweep did not converge in {max_sweeps} sweeps")
    # re-index flows per branch
    nb = len(network.branches)
    Pb, Qb, lb = np.zeros(nb), np.zeros(nb), np.zeros(nb)
    for j in order[1:]:
        k = branch_of[j]
        Pb[k], Qb[k], lb[k] = P[j], Q[j], ell[j]
    return PfResult(y=y, P=Pb, Q=Qb, ell=lb, iterations=sweep, residual=change, method="distflow")


def substation_power(network: Network, result: PfResult) -> tuple[float, float]:
    """Total (P, Q) leaving the slack bus (summed over phases)."""
    P = Q = 0.0
    for k, (m, _) in enumerate(network.branch_ends):
        if m == network.slack_index:
            P += float(np.nansum(result.extra.get("P_send", result.P)[k]))
            Q += float(np.nansum(result.extra.get("Q_send", result.Q)[k]))
    return P, Q


def losses(network: Network, result: PfResult) -> float:
    """Total real power loss ``sum r * ell`` (single phase) or sending minus receiving (three phase)."""
    if result.ell is not None:
        r = np.array([br.r for br in network.branches])
        return float(r @ result.ell)
    return float(np.nansum(result.extra["P_send"]) - np.nansum(result.P))


# --------------------------------------------------------------------------
# three phase helpers


def phase_loads(network: Network, scenario, u=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(demand ``d``, generation ``g``, injection ``u``) as (n, 3) complex arrays."""
    d = scenario.data[:, :, 0] + 1j * scenario.data[:, :, 1]
    g = scenario.data[:, :, 2].astype(complex)
    uu = np.zeros_like(d) if u is None else np.asarray(u, dtype=complex)
    return d, g, uu


def _supplied(network: Network) -> list[str]:
    """Phases energised at each bus: all slack phases, else the feeding branch's phases."""
    out = []
    for i, b in enumerate(network.buses):
        k = network.branch_of[i]
        out.append(b.phases if k < 0 else network.branches[k].phases)
    return out


def _check_phases(network: Network, *arrays) -> None:
    sup = _supplied(network)
    for arr in arrays:
        for i, ph in enumerate(sup):
            absent = [j for j in range(3) if PHASES[j] not in ph]
            if absent and np.any(np.abs(arr[i, absent]) > 0):
                raise PhaseMismatch(f"bus {network.buses[i].id} has load on an unsupplied phase")


def _nodal(network: Network, y: np.ndarray, d, g, u) -> np.ndarray:
    bs = np.array([b.beta_s for b in network.buses])
    bz = np.array([b.beta_z for b in network.buses])
    cap = np.array([b.capacitor for b in network.buses])
    return (bs + bz * y) * d - g - u - 1j * cap


def slack_phasors(y0: float) -> np.ndarray:
    return np.sqrt(y0) * np.exp(1j * NOMINAL_ANGLES)


def solve_3ph(network: Network, d, g=None, u=None, y0: float | None = None,
              tol: float = 1e-10, max_iters: int = 100, damping: float = 1.0) -> PfResult:
    """Unbalanced backward/forward sweep with voltage-dependent loads.

    ``d`` demand, ``g`` uncontrolled generation and ``u`` controlled injection,
    each an (n, 3) complex array (pu per phase).
    """
    y0 = network.y_slack if y0 is None else y0
    n = len(network.buses)
    d = np.asarray(d, dtype=complex)
    g = np.zeros((n, 3), complex) if g is None else np.asarray(g, dtype=complex)
    u = np.zeros((n, 3), complex) if u is None else np.asarray(u, dtype=complex)
    _check_phases(network, d, g, u)
    sup = _supplied(network)
    mask = np.array([[PHASES[j] in sup[i] for j in range(3)] for i in range(n)])
    order, parent, branch_of, kids = network.order, network.parent, network.branch_of, network.children
    Z3 = [br.Z3() for br in network.branches]
    V = np.where(mask, slack_phasors(y0)[None, :], 0.0)
    I = np.zeros((n, 3), complex)  # current into each bus through its feeding branch
    for it in range(1, max_iters + 1):
        y = np.abs(V) ** 2
        s = np.where(mask, _nodal(network, y, d, g, u), 0.0)
        inj = np.zeros((n, 3), complex)
        np.divide(s, V, out=inj, where=mask)
        inj = np.conj(inj)
        for j in order[::-1][:-1]:
            I[j] = inj[j] + sum((I[k] for k in kids[j]), np.zeros(3, complex))
            I[j][~mask[j]] = 0.0
        V_new = V.copy()
        for j in order[1:]:
            m = parent[j]
            V_new[j] = np.where(mask[j], V_new[m] - Z3[branch_of[j]] @ I[j], 0.0)
        change = float(np.abs(V_new - V).max())
        V = V + damping * (V_new - V) if damping != 1.0 else V_new
        if not np.all(np.isfinite(V)):
            raise NoConvergence("three-phase sweep diverged")
        if change < tol:
            break
    else:
        raise NoConvergence(f"three-phase sweep did not converge in {max_iters} iterations")
    nb = len(network.branches)
    S_recv = np.full((nb, 3), np.nan, complex)
    S_send = np.full((nb, 3), np.nan, complex)
    for j in order[1:]:
        k = branch_of[j]
        bm = np.array([PHASES[i] in network.branches[k].phases for i in range(3)])
        S_recv[k, bm] = V[j, bm] * np.conj(I[j, bm])
        S_send[k, bm] = V[parent[j], bm] * np.conj(I[j, bm])
    y = np.where(mask, np.abs(V) ** 2, np.nan)
    theta = np.where(mask, np.angle(V), np.nan)
    Vout = np.where(mask, V, np.nan)
    return PfResult(y=y, P=S_recv.real, Q=S_recv.imag, V=Vout, theta=theta, iterations=it,
                    residual=change, method="3ph-sweep",
                    extra={"P_send": S_send.real, "Q_send": S_send.imag, "I": I.copy()})


def power_mismatch(network: Network, result: PfResult, d, g=None, u=None) -> float:
    """Largest per-phase complex power imbalance over all non-slack buses."""
    n = len(network.buses)
    g = np.zeros((n, 3), complex) if g is None else g
    u = np.zeros((n, 3), complex) if u is None else u
    V = np.nan_to_num(result.V)
    s = _nodal(network, np.abs(V) ** 2, d, g, u)
    worst = 0.0
    recv = result.P + 1j * result.Q
    send = result.extra["P_send"] + 1j * result.extra["Q_send"]
    for j in network.order[1:]:
        k = network.branch_of[j]
        phases = [PHASES.index(p) for p in network.branches[k].phases]
        out = s[j, phases].copy()
        for c in network.children[j]:
            out += np.nan_to_num(send[network.branch_of[c], phases])
        worst = max(worst, float(np.abs(recv[k, phases] - out).max()))
    return worst


def hmn_diagnostic(network: Network, result: PfResult, branch: int) -> np.ndarray:
    """Neglected higher-order term ``|V_m - V_n|^2`` per phase on one branch (0 where absent)."""
    m, n = network.branch_ends[branch]
    out = np.zeros(3)
    idx = [PHASES.index(p) for p in network.branches[branch].phases]
    dv = result.V[m, idx] - result.V[n, idx]
    out[idx] = (dv * np.conj(dv)).real
    return out


# --------------------------------------------------------------------------
# linear unbalanced model


@dataclass(frozen=True)
class LinDistMats:
    phases: str
    M: np.ndarray
    N: np.ndarray

    def embed(self) -> tuple[np.ndarray, np.ndarray]:
        M3, N3 = np.zeros((3, 3)), np.zeros((3, 3))
        idx = [PHASES.index(p) for p in self.phases]
        M3[np.ix_(idx, idx)] = self.M
        N3[np.ix_(idx, idx)] = self.N
        return M3, N3


def build_lindist_mats(Z: np.ndarray, phases: str) -> LinDistMats:
    """Sensitivity matrices from the balanced-ratio matrix and the conjugate impedance."""
    idx = [PHASES.index(p) for p in phases]
    G = GAMMA[np.ix_(idx, idx)]
    prod = G * np.conj(np.asarray(Z, dtype=complex))
    return LinDistMats(phases, prod.real, prod.imag)


class LinearModel:
    """Affine maps from nodal (P, Q) loads to node squared voltages and angles.

    Node-phases and branch-phases are enumerated once; flows are the subtree
    sums of nodal loads, voltages the path sums of branch drops.
    """

    def __init__(self, network: Network):
        self.network = network
        sup = _supplied(network)
        self.node_ph = [(i, PHASES.index(p)) for i in range(len(network.buses)) for p in sup[i]]
        self.node_pos = {k: r for r, k in enumerate(self.node_ph)}
        self.branch_ph = [(k, PHASES.index(p)) for k, br in enumerate(network.branches) for p in br.phases]
        self.branch_pos = {k: r for r, k in enumerate(self.branch_ph)}
        self.mats = [build_lindist_mats(br.Z, br.phases) for br in network.branches]
        nn, nb = len(self.node_ph), len(self.branch_ph)
        # flow = C @ nodal load
        C = np.zeros((nb, nn))
        for (k, ph), row in self.branch_pos.items():
            _, down = network.branch_ends[k]
            for j in self._subtree(down):
                if (j, ph) in self.node_pos:
                    C[row, self.node_pos[(j, ph)]] = 1.0
        # y = y0 + YP @ P + YQ @ Q ; theta = theta0 + TP @ P + TQ @ Q
        YP, YQ = np.zeros((nn, nb)), np.zeros((nn, nb))
        TP, TQ = np.zeros((nn, nb)), np.zeros((nn, nb))
        for j in network.order[1:]:
            k, m = network.branch_of[j], network.parent[j]
            lm = self.mats[k]
            br_phases = network.branches[k].phases
            for a, pa in enumerate(br_phases):
                r = self.node_pos[(j, PHASES.index(pa))]
                rm = self.node_pos[(m, PHASES.index(pa))]
                YP[r], YQ[r], TP[r], TQ[r] = YP[rm], YQ[rm], TP[rm], TQ[rm]
                for b, pb in enumerate(br_phases):
                    col = self.branch_pos[(k, PHASES.index(pb))]
                    YP[r, col] -= 2 * lm.M[a, b]
                    YQ[r, col] += 2 * lm.N[a, b]
                    TP[r, col] += lm.N[a, b]
                    TQ[r, col] += lm.M[a, b]
        self.C, self.YP, self.YQ, self.TP, self.TQ = C, YP, YQ, TP, TQ
        self.theta0 = np.array([NOMINAL_ANGLES[ph] for _, ph in self.node_ph])

    def _subtree(self, root: int) -> list[int]:
        out, stack = [], [root]
        while stack:
            j = stack.pop()
            out.append(j)
            stack.extend(self.network.children[j])
        return out

    def gather(self, arr: np.ndarray) -> np.ndarray:
        return np.array([arr[i, ph] for i, ph in self.node_ph])

    def scatter_nodes(self, vec: np.ndarray) -> np.ndarray:
        out = np.full((len(self.network.buses), 3), np.nan)
        for (i, ph), v in zip(self.node_ph, vec):
            out[i, ph] = v
        return out

    def scatter_branches(self, vec: np.ndarray) -> np.ndarray:
        out = np.full((len(self.network.branches), 3), np.nan)
        for (k, ph), v in zip(self.branch_ph, vec):
            out[k, ph] = v
        return out


def linear_model(network: Network) -> LinearModel:
    """Per-network cached ``LinearModel`` (networks are immutable)."""
    cached = network.__dict__.get("_linear_model")
    if cached is None:
        cached = LinearModel(network)
        network.__dict__["_linear_model"] = cached
    return cached


def eval_lindist3flow(network: Network, d, g=None, u=None, y0: float | None = None,
                      tol: float = 1e-10) -> PfResult:
    """Evaluate the linear unbalanced model.

    Voltage-dependent load terms make the model affine in ``y``; that affine
    fixed point is solved directly rather than by iteration.
    """
    y0 = network.y_slack if y0 is None else y0
    n = len(network.buses)
    d = np.asarray(d, dtype=complex)
    g = np.zeros((n, 3), complex) if g is None else np.asarray(g, dtype=complex)
    u = np.zeros((n, 3), complex) if u is None else np.asarray(u, dtype=complex)
    _check_phases(network, d, g, u)
    lm = linear_model(network)
    bs = lm.gather(np.array([b.beta_s for b in network.buses]))
    bz = lm.gather(np.array([b.beta_z for b in network.buses]))
    cap = lm.gather(np.array([b.capacitor for b in network.buses]))
    dv, gv, uv = lm.gather(d), lm.gather(g), lm.gather(u)
    const = bs * dv - gv - uv - 1j * cap  # load independent of y
    slope = bz * dv                          # load per unit y
    Ay_P = lm.YP @ lm.C
    Ay_Q = lm.YQ @ lm.C
    rhs = y0 + Ay_P @ const.real + Ay_Q @ const.imag
    K = np.eye(len(lm.node_ph)) - Ay_P * slope.real[None, :] - Ay_Q * slope.imag[None, :]
    try:
        y = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError as exc:
        raise NoConvergence("voltage-dependent load system is singular") from exc
    s = const + slope * y
    resid = float(np.abs(y - (y0 + Ay_P @ s.real + Ay_Q @ s.imag)).max(initial=0.0))
    if resid > tol:
        raise NoConvergence(f"linear model residual {resid:.2e}")
    P = lm.C @ s.real
    Q = lm.C @ s.imag
    theta = lm.theta0 + lm.TP @ P + lm.TQ @ Q
    return PfResult(y=lm.scatter_nodes(y), P=lm.scatter_branches(P), Q=lm.scatter_branches(Q),
                    theta=lm.scatter_nodes(theta), iterations=1, residual=resid, method="lindist3flow",
                    extra={"P_send": lm.scatter_branches(P), "Q_send": lm.scatter_branches(Q)})
