"""Mutual-information benchmarks for local reconstructability of OPF labels.

Continuous samples are discretized into buckets per dimension and the
mutual information is the plug-in estimate over the empirical joint
histogram, in bits.  Joint histograms are stored sparsely: only occupied
cells are counted, so many-dimensional variables are cheap as long as the
number of samples is moderate.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyInput, InfoError, TooManyCombinations
from .feeder import Network
from .scenarios import CHANNELS

DEFAULT_BUCKETS = 10
MAX_COMBINATIONS = 10_000


@dataclass(frozen=True)
class DiscretizedVar:
    """Bucket codes of a (T, dims) sample matrix; ``codes`` are compact joint cell ids."""

    edges: tuple[np.ndarray, ...]
    columns: np.ndarray  # (T, dims) per-dimension bucket index
    codes: np.ndarray  # (T,) joint code in [0, cells)
    cells: int

    @property
    def buckets(self) -> tuple[int, ...]:
        return tuple(len(e) - 1 for e in self.edges)


def _edges(x: np.ndarray, k: int, method: str) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi - lo <= 1e-12 * max(1.0, abs(lo), abs(hi)):
        # degenerate range: one bucket around the constant
        return np.array([lo - 0.5, lo + 0.5])
    if method == "width":
        return np.linspace(lo, hi, k + 1)
    if method == "frequency":
        e = np.unique(np.quantile(x, np.linspace(0.0, 1.0, k + 1)))
        return e if e.size >= 2 else np.array([lo, hi])
    raise InfoError(f"unknown discretization method {method!r}")


def discretize(samples, k: int = DEFAULT_BUCKETS, method: str = "width") -> DiscretizedVar:
    """Bucket every column of ``samples`` (equal-width by default, or equal-frequency)."""
    X = np.asarray(samples, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInput("need a nonempty (T, dims) sample array")
    if k < 1:
        raise InfoError("bucket count must be positive")
    if not np.all(np.isfinite(X)):
        raise InfoError("samples contain non-finite values")
    edges, cols = [], np.zeros(X.shape, dtype=np.int64)
    for j in range(X.shape[1]):
        e = _edges(X[:, j], k, method)
        edges.append(e)
        cols[:, j] = np.clip(np.searchsorted(e[1:-1], X[:, j], side="right"), 0, len(e) - 2)
    codes, cells = _joint(cols)
    return DiscretizedVar(tuple(edges), cols, codes, cells)


def _joint(cols: np.ndarray) -> tuple[np.ndarray, int]:
    if cols.shape[1] == 0:
        return np.zeros(cols.shape[0], dtype=np.int64), 1
    uniq, inv = np.unique(cols, axis=0, return_inverse=True)
    return inv.ravel().astype(np.int64), uniq.shape[0]


def combine(*variables: DiscretizedVar) -> DiscretizedVar:
    """Joint variable of several discretized variables over the same samples."""
    if not variables:
        raise EmptyInput("nothing to combine")
    T = variables[0].columns.shape[0]
    if any(v.columns.shape[0] != T for v in variables):
        raise DimensionMismatch("variables have different sample counts")
    cols = np.hstack([v.columns for v in variables])
    codes, cells = _joint(cols)
    return DiscretizedVar(tuple(e for v in variables for e in v.edges), cols, codes, cells)


def _entropy_counts(counts: np.ndarray, T: int) -> float:
    p = counts / T
    return float(-np.sum(p * np.log2(p)))


def mi_codes(x: np.ndarray, y: np.ndarray, bias_correction: bool = False) -> float:
    """Plug-in mutual information (bits) between two integer code vectors."""
    x = np.asarray(x, dtype=np.int64).ravel()
    y = np.asarray(y, dtype=np.int64).ravel()
    if x.size != y.size:
        raise DimensionMismatch(f"sample counts differ: {x.size} vs {y.size}")
    T = x.size
    if T < 2:
        raise EmptyInput("need at least two samples")
    _, cx = np.unique(x, return_counts=True)
    _, cy = np.unique(y, return_counts=True)
    _, cxy = np.unique(np.stack([x, y], axis=1), axis=0, return_counts=True)
    mi = _entropy_counts(cx, T) + _entropy_counts(cy, T) - _entropy_counts(cxy, T)
    if bias_correction:
        # Miller-Madow: each entropy gains (occupied cells - 1) / (2T ln 2)
        mi += (cx.size + cy.size - cxy.size - 1) / (2.0 * T * math.log(2.0))
    return max(mi, 0.0)


def entropy_codes(x: np.ndarray) -> float:
    x = np.asarray(x).ravel()
    if x.size == 0:
        raise EmptyInput("no samples")
    _, c = np.unique(x, return_counts=True)
    return max(_entropy_counts(c, x.size), 0.0)


def estimate_mi(X, Y, k: int = DEFAULT_BUCKETS, method: str = "width",
                bias_correction: bool = False) -> float:
    """Mutual information in bits between sample arrays ``X`` and ``Y`` (rows are samples)."""
    X, Y = np.asarray(X, dtype=float), np.asarray(Y, dtype=float)
    if X.size == 0 or Y.size == 0:
        raise EmptyInput("empty sample array")
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatch(f"sample counts differ: {X.shape[0]} vs {Y.shape[0]}")
    return mi_codes(discretize(X, k, method).codes, discretize(Y, k, method).codes, bias_correction)


# --------------------------------------------------------------------------
# labelled data


def bus_disturbance(scenarios, bus: int, network: Network | None = None) -> np.ndarray:
    """(T, columns) local disturbance record of one bus: every channel on every present phase."""
    if network is not None:
        phases = [("abc").index(ph) for ph in network.buses[bus].phases]
    else:
        phases = [0, 1, 2]
    block = scenarios.data[:, bus, phases, :]
    return block.reshape(block.shape[0], len(phases) * len(CHANNELS))


def der_labels(labeled, k: int) -> np.ndarray:
    """(T, columns) optimal set points of DER number ``k`` (all phases flattened)."""
    u = np.stack([labeled.u_p[:, k], labeled.u_q[:, k]], axis=-1)
    u = u.reshape(u.shape[0], -1)
    return u[:, np.all(np.isfinite(u), axis=0)]


class _Cache:
    """Discretized local records and labels over the usable rows of a labeled set."""

    def __init__(self, network: Network, labeled, k: int, method: str):
        self.network, self.k, self.method = network, k, method
        self.rows = np.flatnonzero(labeled.usable)
        if self.rows.size < 2:
            raise EmptyInput("fewer than two usable labels")
        self.labeled = labeled
        self._bus: dict[str, DiscretizedVar] = {}

    def bus(self, bid: str) -> DiscretizedVar:
        if bid not in self._bus:
            i = self.network.index[bid]
            X = bus_disturbance(self.labeled.scenarios, i, self.network)[self.rows]
            self._bus[bid] = discretize(X, self.k, self.method)
        return self._bus[bid]

    def label(self, der: str) -> DiscretizedVar:
        k = self.labeled.der_ids.index(der)
        return discretize(der_labels(self.labeled, k)[self.rows], self.k, self.method)


def benchmark(network: Network, labeled, der: str, k: int = DEFAULT_BUCKETS,
              method: str = "width") -> float:
    """I(d_i; u_i*) in bits for DER ``der`` over the usable labels."""
    c = _Cache(network, labeled, k, method)
    return mi_codes(c.bus(der).codes, c.label(der).codes)


def _id_key(bid: str):
    return (0, int(bid), "") if bid.isdigit() else (1, 0, bid)


def _set_key(ids: Iterable[str]):
    return tuple(_id_key(b) for b in sorted(ids, key=_id_key))


@dataclass(frozen=True)
class Selection:
    der: str
    chosen: tuple[str, ...]  # in pick order for greedy, sorted for exhaustive
    mi: float  # I(u_i*; d_i, d_S)
    method: str


def _check_candidates(der: str, candidates: Sequence[str]) -> list[str]:
    cands = sorted(set(map(str, candidates)) - {der}, key=_id_key)
    if not cands:
        raise EmptyInput("no communication candidates")
    return cands


def _joint_mi(c: _Cache, u: DiscretizedVar, der: str, extra: Sequence[str]) -> float:
    x = combine(c.bus(der), *(c.bus(b) for b in extra))
    return mi_codes(x.codes, u.codes)


def select_comm_exhaustive(network: Network, labeled, der: str, candidates: Sequence[str], size: int = 1,
                           k: int = DEFAULT_BUCKETS, method: str = "width",
                           max_combinations: int = MAX_COMBINATIONS, _cache: _Cache | None = None) -> Selection:
    """Best set of ``size`` remote buses by joint MI; ties go to the smallest id set."""
    cands = _check_candidates(der, candidates)
    size = min(size, len(cands))
    n_comb = math.comb(len(cands), size)
    if n_comb > max_combinations:
        raise TooManyCombinations(f"{n_comb} subsets of size {size}; use the greedy selection")
    c = _cache or _Cache(network, labeled, k, method)
    u = c.label(der)
    best, best_mi = (), -np.inf
    for combo in itertools.combinations(cands, size):
        mi = _joint_mi(c, u, der, combo)
        if mi > best_mi + 1e-12:
            best, best_mi = combo, mi
    return Selection(der, tuple(sorted(best, key=_id_key)), float(max(best_mi, 0.0)), "exhaustive")


def select_comm_greedy(network: Network, labeled, der: str, candidates: Sequence[str], size: int = 1,
                       k: int = DEFAULT_BUCKETS, method: str = "width", _cache: _Cache | None = None) -> Selection:
    """Add the remote bus with the largest joint MI one at a time."""
    cands = _check_candidates(der, candidates)
    c = _cache or _Cache(network, labeled, k, method)
    u = c.label(der)
    chosen: list[str] = []
    mi = mi_codes(c.bus(der).codes, u.codes)
    for _ in range(min(size, len(cands))):
        best, best_mi = None, -np.inf
        for b in cands:
            if b in chosen:
                continue
            val = _joint_mi(c, u, der, chosen + [b])
            if val > best_mi + 1e-12:
                best, best_mi = b, val
        chosen.append(best)
        mi = best_mi
    return Selection(der, tuple(chosen), float(max(mi, 0.0)), "greedy")


@dataclass
class MIReport:
    gamma: dict[str, float]
    entropy: dict[str, float]
    selections: dict[str, Selection] = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "settings": self.settings,
            "ders": {
                d: {"gamma_bits": self.gamma[d], "label_entropy_bits": self.entropy[d],
                    **({"selection": asdict(self.selections[d])} if d in self.selections else {})}
                for d in self.gamma
            },
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MIReport":
        doc = json.loads(text)
        gamma, ent, sel = {}, {}, {}
        for d, rec in doc["ders"].items():
            gamma[d] = rec["gamma_bits"]
            ent[d] = rec["label_entropy_bits"]
            if "selection" in rec:
                s = rec["selection"]
                sel[d] = Selection(s["der"], tuple(s["chosen"]), s["mi"], s["method"])
        return cls(gamma, ent, sel, doc["settings"])


def analyze(network: Network, labeled, k: int = DEFAULT_BUCKETS, method: str = "width", select: int = 0,
            greedy: bool = True, candidates: Sequence[str] | None = None) -> MIReport:
    """Benchmark every DER and, when ``select`` > 0, choose its communication set."""
    if candidates is None:
        candidates = [b.id for b in network.buses if not b.is_slack]
    cache = _Cache(network, labeled, k, method)
    gamma, ent, sel = {}, {}, {}
    for der in labeled.der_ids:
        u = cache.label(der)
        gamma[der] = mi_codes(cache.bus(der).codes, u.codes)
        ent[der] = entropy_codes(u.codes)
        if select > 0 and set(map(str, candidates)) - {der}:
            fn = select_comm_greedy if greedy else select_comm_exhaustive
            sel[der] = fn(network, labeled, der, candidates, select, k, method, _cache=cache)
    settings = {"buckets": k, "method": method, "select": select, "greedy": greedy,
                "estimator": "plug-in", "samples": int(cache.rows.size)}
    return MIReport(gamma, ent, sel, settings)
