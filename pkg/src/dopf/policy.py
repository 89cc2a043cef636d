"""Per-DER feedforward policies fitted by stepwise least squares.

Each DER output channel gets its own scalar linear model over a quadratic
feature expansion of local disturbance variables: every base variable,
every pairwise product and every square, z-scored with training statistics.
Terms enter and leave by the Bayesian information criterion.  Predictions
are projected onto the DER's capacity set before use.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import DimensionMismatch, MissingBaseVariable
from .feeder import CAPACITY_MODELS, PHASES, Box, Disk, Network, PvResidual
from .scenarios import CHANNELS

log = logging.getLogger(__name__)

ENTER_THRESHOLD = 2.0
EXIT_THRESHOLD = 0.0
RIDGE = 1e-10

DEFAULT_BASE = {
    "1": ("p_c", "p_g", "q_avail"),
    "2": ("p_c", "hour_sin", "hour_cos", "hour_sin2", "hour_cos2"),
    "3ph": ("p_c", "q_c"),
}


# --------------------------------------------------------------------------
# local inputs


_HOUR = re.compile(r"hour_(sin|cos)(\d*)")


def _split_name(name: str) -> tuple[str, str | None]:
    base, _, ph = name.partition(".")
    return base, (ph or None)


def local_inputs(network: Network, scenarios, bus_id: str, names: Sequence[str]) -> dict[str, np.ndarray]:
    """Base-variable columns for one bus.

    Names are scenario channels (``p_c``, ``q_c``, ``p_g``, ``s_cap``), ``q_avail``
    (reactive headroom ``sqrt(s_cap**2 - p_g**2)``), ``hour_sin``/``hour_cos`` (``hour_sin2`` etc. for higher harmonics),
    or any extra scenario channel.  A ``.a``/``.b``/``.c`` suffix selects a phase;
    without one, channels are summed over the bus phases.
    """
    i = network.index[bus_id]
    phases = network.buses[i].phases
    out = {}
    for name in names:
        base, ph = _split_name(name)
        cols = [PHASES.index(ph)] if ph else [PHASES.index(p) for p in phases]

        def chan(c):
            return scenarios.data[:, i, cols, CHANNELS.index(c)].sum(axis=1)

        if base in CHANNELS:
            out[name] = chan(base)
        elif base == "q_avail":
            s_cap = scenarios.data[:, i, cols, CHANNELS.index("s_cap")]
            p_g = scenarios.data[:, i, cols, CHANNELS.index("p_g")]
            out[name] = np.sqrt(np.maximum(s_cap**2 - p_g**2, 0.0)).sum(axis=1)
        elif _HOUR.fullmatch(base):
            m = _HOUR.fullmatch(base)
            ang = 2.0 * math.pi * int(m.group(2) or 1) * np.asarray(scenarios.other["hour"]) / 24.0
            out[name] = np.sin(ang) if m.group(1) == "sin" else np.cos(ang)
        elif base in scenarios.other:
            out[name] = np.asarray(scenarios.other[base], dtype=float)
        else:
            raise MissingBaseVariable(name)
    return out


def default_base(network: Network, bus_id: str, case: str) -> tuple[str, ...]:
    names = DEFAULT_BASE[str(case)]
    if network.single_phase:
        return names
    return tuple(f"{n}.{ph}" for ph in network.bus(bus_id).phases for n in names)


# --------------------------------------------------------------------------
# features


@dataclass(frozen=True)
class FeatureMap:
    base: tuple[str, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    zero_variance: tuple[bool, ...]

    @property
    def names(self) -> list[str]:
        b = self.base
        return (list(b) + [f"{x}*{y}" for x, y in itertools.combinations(b, 2)]
                + [f"{x}^2" for x in b])

    def __len__(self) -> int:
        return feature_count(len(self.base))

    def raw(self, X: np.ndarray) -> np.ndarray:
        return expand(X)

    def transform(self, X: np.ndarray) -> np.ndarray:
        F = expand(X)
        return (F - np.asarray(self.mean)) / np.asarray(self.std)


def feature_count(b: int) -> int:
    return 2 * b + b * (b - 1) // 2


def expand(X: np.ndarray) -> np.ndarray:
    """Columns [linear..., pairwise products in lexicographic pair order..., squares...]."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    b = X.shape[1]
    if b == 0:
        raise MissingBaseVariable("at least one base variable is required")
    pairs = [X[:, i] * X[:, j] for i, j in itertools.combinations(range(b), 2)]
    return np.column_stack([X] + pairs + [X**2]) if pairs else np.column_stack([X, X**2])


def build_features(X: np.ndarray, base: Sequence[str], train=None) -> tuple[np.ndarray, FeatureMap]:
    """Standardized feature matrix; mean and spread come from the ``train`` rows only."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != len(base):
        raise DimensionMismatch(f"{X.shape[1]} columns for {len(base)} base variables")
    F = expand(X)
    rows = F if train is None else F[np.asarray(train)]
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    scale = np.maximum(np.abs(mean), 1.0)
    zero = std <= 1e-12 * scale
    std = np.where(zero, 1.0, std)
    fmap = FeatureMap(tuple(base), tuple(map(float, mean)), tuple(map(float, std)), tuple(map(bool, zero)))
    return (F - mean) / std, fmap


# --------------------------------------------------------------------------
# stepwise regression


@dataclass(frozen=True)
class Fit:
    selected: tuple[int, ...]
    intercept: float
    coef: tuple[float, ...]
    rss: float
    bic: float
    r2: float
    n: int


def _ols(Phi: np.ndarray, y: np.ndarray, cols: Sequence[int]) -> tuple[np.ndarray, float]:
    X = np.column_stack([np.ones(len(y)), Phi[:, list(cols)]])
    beta, _, rank, _ = np.linalg.lstsq(X, y, rcond=None)
    if rank < X.shape[1]:
        log.info("singular design with %d columns (rank %d); ridge %.0e applied", X.shape[1], rank, RIDGE)
        beta = np.linalg.solve(X.T @ X + RIDGE * np.eye(X.shape[1]), X.T @ y)
    r = y - X @ beta
    return beta, float(r @ r)


def bic(rss: float, n: int, p: int, floor: float = 0.0) -> float:
    """``n ln(RSS/n) + (p + 1) ln n`` with RSS floored so exact fits compare equal."""
    return n * math.log(max(rss, floor, 1e-300) / n) + (p + 1) * math.log(n)


def stepwise_fit(Phi: np.ndarray, y: np.ndarray, selectable=None, n_linear: int | None = None,
                 enter: float = ENTER_THRESHOLD, exit: float = EXIT_THRESHOLD, max_steps: int | None = None) -> Fit:
    """Bidirectional stepwise least squares driven by BIC.

    Starts from the first ``n_linear`` columns (the linear base terms), then
    alternates adding the column that lowers BIC most (when by more than
    ``enter``) and dropping the column whose removal lowers BIC most (when
    by more than ``exit``).
    """
    Phi = np.asarray(Phi, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    n, F = Phi.shape
    if y.size != n:
        raise DimensionMismatch("labels and features have different row counts")
    if n < F + 2:
        log.warning("only %d rows for %d candidate features", n, F)
    ok = np.ones(F, bool) if selectable is None else np.asarray(selectable, bool)
    if n_linear is None:
        n_linear = F
    floor = n * (1e-12 * max(1.0, float(np.sqrt(np.mean(y**2))))) ** 2

    def score(cols):
        _, rss = _ols(Phi, y, cols)
        return bic(rss, n, len(cols), floor)

    current = [j for j in range(n_linear) if ok[j]]
    best = score(current)
    max_steps = max_steps or 4 * F + 10
    for _ in range(max_steps):
        changed = False
        trial = [(score(current + [j]), j) for j in range(F) if ok[j] and j not in current]
        if trial:
            val, j = min(trial)
            if best - val > enter:
                current.append(j)
                best = val
                changed = True
        if current:
            trial = [(score([c for c in current if c != j]), j) for j in current]
            val, j = min(trial)
            if best - val > exit:
                current.remove(j)
                best = val
                changed = True
        if not changed:
            break
    current.sort()
    beta, rss = _ols(Phi, y, current)
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - rss / tss if tss > 0 else (1.0 if rss <= floor else 0.0)
    return Fit(tuple(current), float(beta[0]), tuple(map(float, beta[1:])), rss, bic(rss, n, len(current), floor),
               float(r2), n)


# --------------------------------------------------------------------------
# policies


@dataclass(frozen=True)
class ChannelModel:
    """Scalar model ``intercept + coef . features[selected]`` for one output."""

    output: str  # "u_p" / "u_q", with ".a" etc. per phase on multi-phase DERs
    features: FeatureMap
    fit: Fit

    def predict(self, X: np.ndarray) -> np.ndarray:
        Phi = self.features.transform(X)
        return self.fit.intercept + Phi[:, list(self.fit.selected)] @ np.asarray(self.fit.coef)

    def normalized_coefficients(self) -> dict[str, float]:
        names = self.features.names
        return {names[j]: c for j, c in zip(self.fit.selected, self.fit.coef)}

    def raw_coefficients(self) -> tuple[float, dict[str, float]]:
        """Intercept and coefficients on the unstandardized features."""
        mean, std = np.asarray(self.features.mean), np.asarray(self.features.std)
        names = self.features.names
        coefs, b0 = {}, self.fit.intercept
        for j, c in zip(self.fit.selected, self.fit.coef):
            coefs[names[j]] = c / std[j]
            b0 -= c * mean[j] / std[j]
        return b0, coefs


def capacity_spec(cap) -> dict:
    return {"model": cap.name, "params": list(cap.params())}


def capacity_from_spec(spec: Mapping):
    return CAPACITY_MODELS[spec["model"]](*spec["params"])


@dataclass(frozen=True)
class PolicyModel:
    der: str
    base: tuple[str, ...]
    phases: str  # "" for single-phase feeders
    capacity: dict
    models: dict[str, ChannelModel] = field(default_factory=dict)

    def outputs(self, phase: str | None = None) -> tuple[str, str]:
        sfx = f".{phase}" if phase else ""
        return f"u_p{sfx}", f"u_q{sfx}"

    def _matrix(self, inputs: Mapping[str, np.ndarray]) -> np.ndarray:
        missing = [b for b in self.base if b not in inputs]
        if missing:
            raise MissingBaseVariable(", ".join(missing))
        return np.column_stack([np.atleast_1d(np.asarray(inputs[b], dtype=float)) for b in self.base])

    def predict_raw(self, inputs: Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        """Unsaturated (u_p, u_q); shape (T,) or (T, 3) on multi-phase DERs."""
        X = self._matrix(inputs)
        T = X.shape[0]

        def channel(name):
            m = self.models.get(name)
            return m.predict(X) if m is not None else np.zeros(T)

        if not self.phases:
            return channel("u_p"), channel("u_q")
        up, uq = np.full((T, 3), np.nan), np.full((T, 3), np.nan)
        for ph in self.phases:
            k = PHASES.index(ph)
            op, oq = self.outputs(ph)
            up[:, k], uq[:, k] = channel(op), channel(oq)
        return up, uq


def saturate(cap, up: np.ndarray, uq: np.ndarray, p_g=None) -> tuple[np.ndarray, np.ndarray]:
    """Project each (u_p, u_q) pair onto ``cap``."""
    up, uq = np.asarray(up, dtype=float), np.asarray(uq, dtype=float)
    pg = np.zeros(up.shape) if p_g is None else np.broadcast_to(np.asarray(p_g, dtype=float), up.shape)
    if isinstance(cap, Disk):
        mag = np.hypot(up, uq)
        scale = np.where(mag > cap.s_max, cap.s_max / np.maximum(mag, 1e-300), 1.0)
        return up * scale, uq * scale
    if isinstance(cap, Box):
        return np.clip(up, cap.p_min, cap.p_max), np.clip(uq, cap.q_min, cap.q_max)
    if isinstance(cap, PvResidual):
        lim = np.array([cap.q_limit(v) for v in pg.ravel()]).reshape(pg.shape)
        return np.zeros_like(up), np.clip(uq, -lim, lim)
    raise TypeError(f"unsupported capacity model {cap!r}")


def outside(cap, up: np.ndarray, uq: np.ndarray, p_g=None, tol: float = 1e-6) -> np.ndarray:
    """Mask of (u_p, u_q) pairs outside ``cap`` by more than ``tol``."""
    sp, sq = saturate(cap, up, uq, p_g)
    return np.hypot(np.asarray(up) - sp, np.asarray(uq) - sq) > tol


def phase_capacity(policy: PolicyModel):
    cap = capacity_from_spec(policy.capacity)
    if policy.phases:
        # each phase of a multi-phase DER is limited to a disk of the per-phase rating
        lim = cap.s_max if hasattr(cap, "s_max") else max(abs(v) for v in cap.params())
        return Disk(lim)
    return cap


def predict(policy: PolicyModel, inputs: Mapping[str, np.ndarray], p_g=None) -> tuple[np.ndarray, np.ndarray]:
    """Feedforward set points from local disturbances only, saturated to capacity.

    ``p_g`` is the local PV output, needed by the residual-capacity model.
    """
    up, uq = policy.predict_raw(inputs)
    cap = phase_capacity(policy)
    if policy.phases:
        sp, sq = saturate(cap, np.nan_to_num(up), np.nan_to_num(uq))
        mask = np.isnan(up)
        sp[mask], sq[mask] = np.nan, np.nan
        return sp, sq
    return saturate(cap, up, uq, p_g)


# --------------------------------------------------------------------------
# training and evaluation


def _label_columns(labeled, k: int, phases: str, channels) -> dict[str, np.ndarray]:
    out = {}
    for ch in channels:
        arr = labeled.u_p if ch == "p" else labeled.u_q
        if phases:
            for ph in phases:
                out[f"u_{ch}.{ph}"] = arr[:, k, PHASES.index(ph)]
        else:
            out[f"u_{ch}"] = arr[:, k]
    return out


def train(network: Network, labeled, base: Mapping[str, Sequence[str]] | Sequence[str], channels=("p", "q"),
          rows=None, enter: float = ENTER_THRESHOLD, exit: float = EXIT_THRESHOLD) -> dict[str, PolicyModel]:
    """Fit one policy per DER on ``rows`` (default: usable labels of the train split)."""
    if rows is None:
        rows = np.flatnonzero(labeled.usable)
        if labeled.scenarios.split is not None:
            rows = np.intersect1d(rows, labeled.scenarios.indices("train"))
    rows = np.asarray(rows, dtype=int)
    policies = {}
    for k, der in enumerate(labeled.der_ids):
        names = tuple(base[der] if isinstance(base, Mapping) else base)
        bus = network.bus(der)
        phases = "" if network.single_phase else bus.phases
        X = np.column_stack(list(local_inputs(network, labeled.scenarios, der, names).values()))
        Phi, fmap = build_features(X[rows], names)
        selectable = ~np.asarray(fmap.zero_variance)
        models = {}
        for out, y in _label_columns(labeled, k, phases, channels).items():
            fit = stepwise_fit(Phi, y[rows], selectable, n_linear=len(names), enter=enter, exit=exit)
            models[out] = ChannelModel(out, fmap, fit)
        policies[der] = PolicyModel(der, names, phases, capacity_spec(bus.capacity), models)
    return policies


@dataclass(frozen=True)
class Evaluation:
    der: str
    mse_raw: float
    mse_saturated: float
    r2: float
    violation_rate: float
    n: int


def evaluate(network: Network, policies: Mapping[str, PolicyModel], labeled, rows=None,
             tol: float = 1e-6) -> dict[str, Evaluation]:
    """Per-DER test metrics; violations count raw predictions outside capacity."""
    if rows is None:
        rows = np.flatnonzero(labeled.usable)
        if labeled.scenarios.split is not None:
            rows = np.intersect1d(rows, labeled.scenarios.indices("test"))
    rows = np.asarray(rows, dtype=int)
    out = {}
    for k, der in enumerate(labeled.der_ids):
        pol = policies[der]
        i = network.index[der]
        inputs = {n: v[rows] for n, v in local_inputs(network, labeled.scenarios, der, pol.base).items()}
        p_g = labeled.scenarios.data[rows, i, PHASES.index(network.buses[i].phases[0]), CHANNELS.index("p_g")]
        up, uq = pol.predict_raw(inputs)
        sp, sq = predict(pol, inputs, None if pol.phases else p_g)
        tp, tq = labeled.u_p[rows, k], labeled.u_q[rows, k]
        mask = np.isfinite(tp)
        err_raw = np.concatenate([(up - tp)[mask], (uq - tq)[mask]])
        err_sat = np.concatenate([(sp - tp)[mask], (sq - tq)[mask]])
        truth = np.concatenate([tp[mask], tq[mask]])
        tss = float(np.sum((truth - truth.mean()) ** 2)) if truth.size else 0.0
        sse = float(np.sum(err_raw**2))
        r2 = 1.0 - sse / tss if tss > 0 else (1.0 if sse <= 1e-24 else 0.0)
        cap = phase_capacity(pol)
        if pol.phases:
            viol = outside(cap, np.nan_to_num(up), np.nan_to_num(uq), tol=tol)[np.isfinite(up).all(axis=1)]
        else:
            viol = outside(cap, up, uq, p_g, tol)
        out[der] = Evaluation(der, float(np.mean(err_raw**2)) if err_raw.size else 0.0,
                              float(np.mean(err_sat**2)) if err_sat.size else 0.0, float(r2),
                              float(np.mean(viol)) if viol.size else 0.0, int(rows.size))
    return out


# --------------------------------------------------------------------------
# persistence


def policies_to_json(policies: Mapping[str, PolicyModel]) -> str:
    recs = []
    for der in policies:
        pol = policies[der]
        for name, m in pol.models.items():
            fm, fit = m.features, m.fit
            recs.append({
                "der": der, "output": name, "phases": pol.phases, "base": list(pol.base),
                "capacity": pol.capacity,
                "features": {"names": fm.names, "mean": list(fm.mean), "std": list(fm.std),
                             "zero_variance": list(fm.zero_variance)},
                "selected": list(fit.selected), "selected_names": [fm.names[j] for j in fit.selected],
                "intercept": fit.intercept, "coefficients": list(fit.coef),
                "diagnostics": {"rss": fit.rss, "bic": fit.bic, "r2": fit.r2, "n": fit.n},
            })
    return json.dumps({"policies": recs}, indent=1) + "\n"


def policies_from_json(text: str) -> dict[str, PolicyModel]:
    doc = json.loads(text)
    grouped: dict[str, dict] = {}
    for r in doc["policies"]:
        fm = FeatureMap(tuple(r["base"]), tuple(r["features"]["mean"]), tuple(r["features"]["std"]),
                        tuple(r["features"]["zero_variance"]))
        d = r["diagnostics"]
        fit = Fit(tuple(r["selected"]), r["intercept"], tuple(r["coefficients"]), d["rss"], d["bic"], d["r2"],
                  d["n"])
        g = grouped.setdefault(r["der"], {"base": tuple(r["base"]), "phases": r["phases"],
                                          "capacity": r["capacity"], "models": {}})
        g["models"][r["output"]] = ChannelModel(r["output"], fm, fit)
    return {der: PolicyModel(der, g["base"], g["phases"], g["capacity"], g["models"]) for der, g in grouped.items()}
