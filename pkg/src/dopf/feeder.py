"""Radial feeder model: buses, branches, state partition and the text file format.

A feeder lives in a directory with three files:

``buses.csv``
    ``id,kinds,phases,cap_model,cap_params,cap_q_phase,beta_s,beta_z``
``branches.csv``
    ``from,to,phases,z_entries`` where ``z_entries`` is ``;``-separated
    ``<phase><phase>:r:x`` items (per-unit).
``feeder.json``
    bases, voltage bounds, slack id, reference and slack squared voltage.

All electrical quantities are per-unit.  Lines starting with ``#`` are
ignored in the CSV files.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Mapping, Union

import numpy as np

from .errors import (
    CapacityError,
    ConflictingRoles,
    DuplicateBusId,
    FeederError,
    MissingSlack,
    NonPositiveResistance,
    NonTreeTopology,
    PhaseMismatch,
)

PHASES = "abc"


def phase_set(text: str) -> str:
    """Canonical phase string (ordered subset of ``abc``)."""
    letters = set(text.strip().lower())
    if not letters or not letters <= set(PHASES):
        raise PhaseMismatch(f"invalid phase set {text!r}")
    return "".join(p for p in PHASES if p in letters)


class BusKind(str, Enum):
    SLACK = "slack"
    PQ_LOAD = "load"
    PQ_GENERATION = "pqgen"
    PV_GENERATION = "pvgen"


# kind -> (u, d, x_end) over the nodal symbols V, delta, p, q
PARTITION_TABLE: dict[BusKind, tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]] = {
    BusKind.PQ_GENERATION: (("p", "q"), (), ("V", "delta")),
    BusKind.PQ_LOAD: ((), ("p", "q"), ("V", "delta")),
    BusKind.PV_GENERATION: (("p", "V"), (), ("q", "delta")),
    BusKind.SLACK: (("V",), ("delta",), ("p", "q")),
}
SYMBOLS = ("V", "delta", "p", "q")
# symbols whose net value may be split into a controllable and an uncontrollable part
DECOMPOSABLE = ("p", "q")


@dataclass(frozen=True)
class StatePartition:
    u: tuple[str, ...]
    d: tuple[str, ...]
    x_end: tuple[str, ...]

    @staticmethod
    def base(symbol: str) -> str:
        return symbol.split("^")[0]

    def check(self) -> None:
        if set(self.u) & set(self.d) or set(self.u) & set(self.x_end) or set(self.d) & set(self.x_end):
            raise ConflictingRoles(f"partition sets overlap: {self}")
        bases = {self.base(s) for s in self.u + self.d + self.x_end}
        if bases != set(SYMBOLS):
            raise ConflictingRoles(f"partition does not cover V, delta, p, q: {self}")
        if {self.base(s) for s in self.u + self.d} & set(self.x_end):
            raise ConflictingRoles(f"endogenous symbol also exogenous: {self}")


def _ordered(symbols) -> tuple[str, ...]:
    rank = {s: i for i, s in enumerate(SYMBOLS)}
    return tuple(sorted(symbols, key=lambda s: (rank[StatePartition.base(s)], s)))


def partition_state(bus: "Bus", table: Mapping = PARTITION_TABLE) -> StatePartition:
    """Split the nodal variables of ``bus`` into controllable, disturbance and endogenous sets.

    Partitions of the individual roles are merged; a symbol that is controllable
    for any role stays in ``u``.  When that symbol is also a disturbance of
    another role and is a power quantity, its uncontrollable component is kept
    in ``d`` as ``p^c`` / ``q^c``.
    """
    if not bus.kinds:
        raise ConflictingRoles(f"bus {bus.id} has no kind")
    u: set[str] = set()
    d: set[str] = set()
    for kind in bus.kinds:
        ku, kd, _ = table[kind]
        u.update(ku)
        d.update(kd)
    merged_d = set()
    for s in d:
        if s in u:
            if s not in DECOMPOSABLE:
                raise ConflictingRoles(f"bus {bus.id}: {s} is both controlled and a disturbance")
            merged_d.add(f"{s}^c")
        else:
            merged_d.add(s)
    covered = u | {StatePartition.base(s) for s in merged_d}
    x_end = set(SYMBOLS) - covered
    part = StatePartition(_ordered(u), _ordered(merged_d), _ordered(x_end))
    part.check()
    return part


# --------------------------------------------------------------------------
# capacity models


@dataclass(frozen=True)
class Disk:
    """Four-quadrant inverter: ``up**2 + uq**2 <= s_max**2``."""

    s_max: float
    name = "disk"

    def __post_init__(self):
        if not self.s_max > 0:
            raise FeederError("disk capacity needs s_max > 0")

    def params(self) -> tuple[float, ...]:
        return (self.s_max,)

    def contains(self, up: float, uq: float, p_g: float = 0.0, tol: float = 1e-8) -> bool:
        return math.hypot(up, uq) <= self.s_max + tol

    def project(self, up: float, uq: float, p_g: float = 0.0) -> tuple[float, float]:
        mag = math.hypot(up, uq)
        if mag <= self.s_max:
            return up, uq
        scale = self.s_max / mag
        return up * scale, uq * scale


@dataclass(frozen=True)
class Box:
    """Decoupled real/reactive limits."""

    p_min: float
    p_max: float
    q_min: float
    q_max: float
    name = "box"

    def __post_init__(self):
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise FeederError("box capacity needs p_min <= p_max and q_min <= q_max")

    def params(self) -> tuple[float, ...]:
        return (self.p_min, self.p_max, self.q_min, self.q_max)

    def contains(self, up: float, uq: float, p_g: float = 0.0, tol: float = 1e-8) -> bool:
        return (self.p_min - tol <= up <= self.p_max + tol
                and self.q_min - tol <= uq <= self.q_max + tol)

    def project(self, up: float, uq: float, p_g: float = 0.0) -> tuple[float, float]:
        return (min(max(up, self.p_min), self.p_max),
                min(max(uq, self.q_min), self.q_max))


@dataclass(frozen=True)
class PvResidual:
    """Reactive power only, from the rating left over after PV real output.

    ``|uq| <= sqrt(s_max**2 - p_g**2)`` and ``up == 0``.
    """

    s_max: float
    name = "pv_residual"

    def __post_init__(self):
        if not self.s_max > 0:
            raise FeederError("pv_residual capacity needs s_max > 0")

    def params(self) -> tuple[float, ...]:
        return (self.s_max,)

    def q_limit(self, p_g: float) -> float:
        if p_g > self.s_max * (1 + 1e-12):
            raise CapacityError(f"PV output {p_g} exceeds inverter rating {self.s_max}")
        return math.sqrt(max(self.s_max**2 - p_g**2, 0.0))

    def contains(self, up: float, uq: float, p_g: float = 0.0, tol: float = 1e-8) -> bool:
        return abs(up) <= tol and abs(uq) <= self.q_limit(p_g) + tol

    def project(self, up: float, uq: float, p_g: float = 0.0) -> tuple[float, float]:
        lim = self.q_limit(p_g)
        return 0.0, min(max(uq, -lim), lim)


CapacityModel = Union[Disk, Box, PvResidual]
CAPACITY_MODELS = {"disk": Disk, "box": Box, "pv_residual": PvResidual}


# --------------------------------------------------------------------------
# network elements


def _per_phase(values, default: float) -> tuple[float, float, float]:
    if values is None:
        return (default,) * 3
    if isinstance(values, Mapping):
        return tuple(float(values.get(p, default)) for p in PHASES)
    if isinstance(values, (int, float)):
        return (float(values),) * 3
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise FeederError("per-phase values need exactly three entries")
    return out


@dataclass(frozen=True)
class Bus:
    id: str
    kinds: frozenset
    phases: str = "a"
    capacity: CapacityModel | None = None
    capacitor: tuple[float, float, float] = (0.0, 0.0, 0.0)
    beta_s: tuple[float, float, float] = (1.0, 1.0, 1.0)
    beta_z: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "kinds", frozenset(BusKind(k) for k in self.kinds))
        object.__setattr__(self, "phases", phase_set(self.phases))
        # absent phases carry the defaults so equal buses compare equal
        for name, default in (("capacitor", 0.0), ("beta_s", 1.0), ("beta_z", 0.0)):
            vals = _per_phase(getattr(self, name), default)
            object.__setattr__(self, name, tuple(v if p in self.phases else default for p, v in zip(PHASES, vals)))
        if not self.kinds:
            raise FeederError(f"bus {self.id} needs at least one kind")
        if any(c < 0 for c in self.capacitor):
            raise FeederError(f"bus {self.id}: negative capacitor")
        for bs, bz in zip(self.beta_s, self.beta_z):
            if abs(bs + bz - 1.0) > 1e-9 or bs < 0 or bz < 0:
                raise FeederError(f"bus {self.id}: beta_s + beta_z must equal 1")

    @property
    def controllable(self) -> bool:
        return self.capacity is not None

    @property
    def is_slack(self) -> bool:
        return BusKind.SLACK in self.kinds

    def partition(self) -> StatePartition:
        return partition_state(self)


@dataclass(frozen=True)
class Branch:
    from_bus: str
    to_bus: str
    phases: str
    z: tuple  # square nested tuple of complex, ordered like ``phases``

    def __post_init__(self):
        object.__setattr__(self, "from_bus", str(self.from_bus))
        object.__setattr__(self, "to_bus", str(self.to_bus))
        object.__setattr__(self, "phases", phase_set(self.phases))
        zz = np.atleast_2d(np.asarray(self.z, dtype=complex))
        k = len(self.phases)
        if zz.shape != (k, k):
            raise FeederError(f"branch {self.from_bus}-{self.to_bus}: impedance shape {zz.shape} "
                              f"does not match phases {self.phases}")
        if np.any(zz.real.diagonal() <= 0):
            raise NonPositiveResistance(f"branch {self.from_bus}-{self.to_bus}")
        object.__setattr__(self, "z", tuple(tuple(complex(v) for v in row) for row in zz))

    @property
    def Z(self) -> np.ndarray:
        return np.array(self.z, dtype=complex)

    @property
    def r(self) -> float:
        return self.z[0][0].real

    @property
    def x(self) -> float:
        return self.z[0][0].imag

    def Z3(self) -> np.ndarray:
        """Impedance embedded in a 3x3 matrix (zeros on absent phases)."""
        out = np.zeros((3, 3), dtype=complex)
        idx = [PHASES.index(p) for p in self.phases]
        out[np.ix_(idx, idx)] = self.Z
        return out


@dataclass(frozen=True)
class Network:
    buses: tuple
    branches: tuple
    slack: str
    s_base_kva: float = 1000.0
    v_base_kv: float = 12.47
    y_min: float = 0.95**2
    y_max: float = 1.05**2
    y_ref: float = 1.0
    y_slack: float = 1.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "slack", str(self.slack))
        self._validate()

    def _validate(self) -> None:
        ids = [b.id for b in self.buses]
        seen = set()
        for i in ids:
            if i in seen:
                raise DuplicateBusId(f"duplicate bus id {i!r}")
            seen.add(i)
        slacks = [b.id for b in self.buses if b.is_slack]
        if not slacks or self.slack not in seen:
            raise MissingSlack(f"slack bus {self.slack!r} not found")
        if len(slacks) != 1 or slacks[0] != self.slack:
            raise MissingSlack(f"exactly one slack bus required, found {slacks}")
        if not 0 < self.y_min < self.y_ref < self.y_max:
            raise FeederError("voltage bounds must satisfy 0 < y_min < y_ref < y_max")
        by_id = {b.id: b for b in self.buses}
        for br in self.branches:
            for end in (br.from_bus, br.to_bus):
                if end not in by_id:
                    raise NonTreeTopology(f"branch references unknown bus {end!r}")
                if not set(br.phases) <= set(by_id[end].phases):
                    raise PhaseMismatch(f"branch {br.from_bus}-{br.to_bus} phases {br.phases} "
                                        f"not present at bus {end} ({by_id[end].phases})")
        if len(self.branches) != len(self.buses) - 1:
            raise NonTreeTopology(f"{len(self.branches)} branches for {len(self.buses)} buses")
        if len(self.order) != len(self.buses):
            raise NonTreeTopology("network is not connected")

    # -- topology -------------------------------------------------------

    @cached_property
    def index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def _tree(self):
        n = len(self.buses)
        adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
        for k, br in enumerate(self.branches):
            i, j = self.index[br.from_bus], self.index[br.to_bus]
            adj[i].append((j, k))
            adj[j].append((i, k))
        root = self.index[self.slack]
        parent = [-1] * n
        branch_of = [-1] * n
        order = [root]
        visited = {root}
        queue = deque([root])
        while queue:
            i = queue.popleft()
            for j, k in sorted(adj[i]):
                if j in visited:
                    continue
                visited.add(j)
                parent[j] = i
                branch_of[j] = k
                order.append(j)
                queue.append(j)
        return order, parent, branch_of

    @property
    def order(self) -> list[int]:
        """Bus indices in breadth-first order from the slack."""
        return self._tree[0]

    @property
    def parent(self) -> list[int]:
        return self._tree[1]

    @property
    def branch_of(self) -> list[int]:
        """Index of the branch feeding each bus (-1 for the slack)."""
        return self._tree[2]

    @cached_property
    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in self.buses]
        for j in self.order[1:]:
            kids[self.parent[j]].append(j)
        return kids

    @cached_property
    def branch_ends(self) -> list[tuple[int, int]]:
        """(upstream, downstream) bus index per branch."""
        ends = [(-1, -1)] * len(self.branches)
        for j in self.order[1:]:
            ends[self.branch_of[j]] = (self.parent[j], j)
        return ends

    @property
    def slack_index(self) -> int:
        return self.index[self.slack]

    @cached_property
    def der_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.buses) if b.controllable]

    @property
    def der_ids(self) -> list[str]:
        return [self.buses[i].id for i in self.der_indices]

    @property
    def single_phase(self) -> bool:
        return all(len(b.phases) == 1 for b in self.buses) and all(len(br.phases) == 1 for br in self.branches)

    def bus(self, bus_id: str) -> Bus:
        return self.buses[self.index[str(bus_id)]]

    def partitions(self) -> dict[str, StatePartition]:
        return {b.id: partition_state(b) for b in self.buses}

    def with_slack_voltage(self, y_slack: float) -> "Network":
        from dataclasses import replace
        return replace(self, y_slack=y_slack)


# --------------------------------------------------------------------------
# text format


def _rows(text: str) -> list[dict[str, str]]:
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    return list(csv.DictReader(lines))


def _parse_phase_values(text: str) -> dict[str, float] | float | None:
    text = (text or "").strip()
    if not text:
        return None
    if ":" not in text:
        return float(text)
    out = {}
    for item in text.split(";"):
        if not item.strip():
            continue
        ph, val = item.split(":")
        out[phase_set(ph)] = float(val)
    return out


def _parse_capacity(model: str, params: str) -> CapacityModel | None:
    model = (model or "none").strip().lower()
    if model in ("", "none"):
        return None
    if model not in CAPACITY_MODELS:
        raise FeederError(f"unknown capacity model {model!r}")
    values = [float(v) for v in params.split(";") if v.strip()]
    return CAPACITY_MODELS[model](*values)


def _parse_z(phases: str, text: str) -> np.ndarray:
    k = len(phases)
    z = np.full((k, k), np.nan, dtype=complex)
    for item in text.split(";"):
        if not item.strip():
            continue
        pair, r, x = item.split(":")
        pair = pair.strip().lower()
        if len(pair) != 2 or pair[0] not in phases or pair[1] not in phases:
            raise PhaseMismatch(f"impedance entry {pair!r} not within branch phases {phases}")
        z[phases.index(pair[0]), phases.index(pair[1])] = complex(float(r), float(x))
    for i in range(k):
        for j in range(k):
            if np.isnan(z[i, j]):
                if np.isnan(z[j, i]):
                    if i == j:
                        raise FeederError(f"missing self impedance for phase {phases[i]}")
                    z[i, j] = 0.0
                else:
                    z[i, j] = z[j, i]
    return z


def parse_network(buses_csv: str, branches_csv: str, feeder_json: str) -> Network:
    """Build a validated :class:`Network` from the three feeder documents."""
    header = json.loads(feeder_json)
    buses = []
    for row in _rows(buses_csv):
        buses.append(Bus(
            id=row["id"].strip(),
            kinds=frozenset(k.strip() for k in row["kinds"].split("|") if k.strip()),
            phases=row.get("phases") or "a",
            capacity=_parse_capacity(row.get("cap_model", ""), row.get("cap_params", "")),
            capacitor=_parse_phase_values(row.get("cap_q_phase", "")),
            beta_s=_parse_phase_values(row.get("beta_s", "")),
            beta_z=_parse_phase_values(row.get("beta_z", "")),
        ))
    branches = []
    for row in _rows(branches_csv):
        phases = phase_set(row.get("phases") or "a")
        branches.append(Branch(row["from"].strip(), row["to"].strip(), phases,
                               _parse_z(phases, row["z_entries"])))
    keys = ("s_base_kva", "v_base_kv", "y_min", "y_max", "y_ref", "y_slack")
    return Network(buses, branches, slack=header["slack"], name=header.get("name", ""),
                   **{k: float(header[k]) for k in keys if k in header})


def load_network(path: str | Path) -> Network:
    path = Path(path)
    return parse_network((path / "buses.csv").read_text(encoding="utf-8"),
                         (path / "branches.csv").read_text(encoding="utf-8"),
                         (path / "feeder.json").read_text(encoding="utf-8"))


def _fmt_phase_values(bus: Bus, values: tuple[float, float, float]) -> str:
    own = [values[PHASES.index(p)] for p in bus.phases]
    if all(v == own[0] for v in own):
        return repr(own[0])
    return ";".join(f"{p}:{values[PHASES.index(p)]!r}" for p in bus.phases)


def serialize_network(net: Network) -> dict[str, str]:
    """Inverse of :func:`parse_network`; returns the three documents keyed by file name."""
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["id", "kinds", "phases", "cap_model", "cap_params", "cap_q_phase", "beta_s", "beta_z"])
    for b in net.buses:
        kinds = "|".join(sorted(k.value for k in b.kinds))
        cap_model = b.capacity.name if b.capacity else "none"
        cap_params = ";".join(repr(v) for v in b.capacity.params()) if b.capacity else ""
        caps = ";".join(f"{p}:{b.capacitor[PHASES.index(p)]!r}" for p in b.phases
                        if b.capacitor[PHASES.index(p)] != 0)
        w.writerow([b.id, kinds, b.phases, cap_model, cap_params, caps,
                    _fmt_phase_values(b, b.beta_s), _fmt_phase_values(b, b.beta_z)])
    buses_csv = out.getvalue()

    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["from", "to", "phases", "z_entries"])
    for br in net.branches:
        items = []
        for i, pi in enumerate(br.phases):
            for j, pj in enumerate(br.phases):
                z = br.z[i][j]
                items.append(f"{pi}{pj}:{z.real!r}:{z.imag!r}")
        w.writerow([br.from_bus, br.to_bus, br.phases, ";".join(items)])
    branches_csv = out.getvalue()

    header = {"name": net.name, "slack": net.slack, "s_base_kva": net.s_base_kva,
              "v_base_kv": net.v_base_kv, "y_min": net.y_min, "y_max": net.y_max,
              "y_ref": net.y_ref, "y_slack": net.y_slack}
    return {"buses.csv": buses_csv, "branches.csv": branches_csv,
            "feeder.json": json.dumps(header, indent=2) + "\n"}


def save_network(net: Network, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, text in serialize_network(net).items():
        (path / name).write_text(text, encoding="utf-8")
