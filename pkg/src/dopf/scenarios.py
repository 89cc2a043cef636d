"""Scenario sets: ingest measured time series, synthesize profiles, split.

A scenario is the exogenous disturbance at one timestep: for every bus and
phase the uncontrollable consumption ``p_c, q_c``, PV generation ``p_g`` and
the inverter rating ``s_cap`` (all per-unit), plus optional extra channels
such as the hour of day.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadFractions,
    CapacityError,
    InvalidFraction,
    NegativeLoad,
    NonUniformTimestep,
    ScenarioError,
    UnknownBus,
)
from .feeder import PHASES, Box, Disk, Network, PvResidual

log = logging.getLogger(__name__)

CHANNELS = ("p_c", "q_c", "p_g", "s_cap")
SPLITS = ("train", "test", "validation")
DEFAULT_FRACTIONS = (0.7, 0.15, 0.15)


@dataclass(frozen=True)
class Scenario:
    t: float
    data: np.ndarray  # (n_bus, 3, 4)
    other: Mapping[str, float]

    def value(self, bus: int, channel: str, phase: str = "a") -> float:
        return float(self.data[bus, PHASES.index(phase), CHANNELS.index(channel)])

    def channel(self, name: str) -> np.ndarray:
        """(n_bus, 3) array of one channel."""
        return self.data[:, :, CHANNELS.index(name)]


@dataclass(frozen=True)
class ScenarioSet:
    bus_ids: tuple[str, ...]
    times: np.ndarray  # minutes
    data: np.ndarray  # (T, n_bus, 3, 4)
    other: Mapping[str, np.ndarray] = field(default_factory=dict)
    split: np.ndarray | None = None
    provenance: str = "synthetic"
    step_minutes: float = 15.0
    zero_filled: int = 0

    def __post_init__(self):
        data = np.array(self.data, dtype=float)
        if data.ndim != 4 or data.shape[2:] != (3, len(CHANNELS)) or data.shape[1] != len(self.bus_ids):
            raise ScenarioError(f"scenario data has shape {data.shape}")
        if np.any(data < 0):
            raise NegativeLoad("scenario channels must be nonnegative")
        data.flags.writeable = False
        times = np.array(self.times, dtype=float)
        times.flags.writeable = False
        other = {}
        for k, v in dict(self.other).items():
            arr = np.array(v, dtype=float)
            arr.flags.writeable = False
            other[k] = arr
        if "hour" not in other:
            hour = np.mod(times / 60.0, 24.0)
            hour.flags.writeable = False
            other["hour"] = hour
        object.__setattr__(self, "bus_ids", tuple(str(b) for b in self.bus_ids))
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "other", other)
        if self.split is not None:
            split = np.array(self.split, dtype=object)
            if split.shape != (len(times),) or not set(split) <= set(SPLITS):
                raise BadFractions("split labels must cover every scenario")
            split.flags.writeable = False
            object.__setattr__(self, "split", split)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, i: int) -> Scenario:
        return Scenario(float(self.times[i]), self.data[i], {k: float(v[i]) for k, v in self.other.items()})

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def channel(self, name: str) -> np.ndarray:
        """(T, n_bus, 3) view of one channel."""
        return self.data[:, :, :, CHANNELS.index(name)]

    def indices(self, label: str) -> np.ndarray:
        if self.split is None:
            raise BadFractions("scenario set has not been split")
        return np.flatnonzero(self.split == label)

    def subset(self, idx: Sequence[int] | str) -> "ScenarioSet":
        if isinstance(idx, str):
            idx = self.indices(idx)
        idx = np.asarray(idx, dtype=int)
        return replace(self, times=self.times[idx], data=self.data[idx],
                       other={k: v[idx] for k, v in self.other.items()},
                       split=None if self.split is None else self.split[idx])

    def with_split(self, labels) -> "ScenarioSet":
        return replace(self, split=np.asarray(labels, dtype=object))

    def to_csv(self, network: Network | None = None) -> str:
        """Long-format ``scenarios.csv`` text (with a ``phase`` column for multi-phase feeders)."""
        three_phase = network is not None and not network.single_phase
        phases_of = ({b.id: b.phases for b in network.buses} if network is not None
                     else {b: "a" for b in self.bus_ids})
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["t", "bus"] + (["phase"] if three_phase else []) + list(CHANNELS))
        for ti in range(len(self)):
            t = _fmt_time(self.times[ti])
            for bi, bid in enumerate(self.bus_ids):
                for ph in phases_of[bid]:
                    vals = self.data[ti, bi, PHASES.index(ph)]
                    w.writerow([t, bid] + ([ph] if three_phase else []) + [repr(float(v)) for v in vals])
        return out.getvalue()


def _fmt_time(t: float) -> str:
    return str(int(t)) if float(t).is_integer() else repr(float(t))


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        stamp = datetime.fromisoformat(text)
        return (stamp - datetime(1970, 1, 1, tzinfo=stamp.tzinfo)).total_seconds() / 60.0


# --------------------------------------------------------------------------
# ingest


def ingest(text: str, network: Network, provenance: str = "ingested") -> ScenarioSet:
    """Parse a long-format time series into one scenario per timestamp.

    Missing (timestamp, bus, phase) records and empty cells are zero-filled;
    the number of filled records is kept in ``zero_filled`` and logged.
    """
    lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows:
        raise ScenarioError("no scenario rows")
    times = sorted({_parse_time(r["t"]) for r in rows})
    if len(times) > 1:
        steps = np.diff(times)
        if np.max(np.abs(steps - steps[0])) > 1e-9 * max(1.0, abs(steps[0])):
            raise NonUniformTimestep(f"time steps vary between {steps.min()} and {steps.max()}")
        step = float(steps[0])
    else:
        step = 15.0
    t_index = {t: i for i, t in enumerate(times)}
    bus_ids = [b.id for b in network.buses]
    data = np.zeros((len(times), len(bus_ids), 3, len(CHANNELS)))
    seen = np.zeros((len(times), len(bus_ids), 3), dtype=bool)
    cells_filled = 0
    for r in rows:
        bus = r["bus"].strip()
        if bus not in network.index:
            raise UnknownBus(f"unknown bus {bus!r}")
        ph = (r.get("phase") or "a").strip().lower()
        if ph not in network.bus(bus).phases:
            raise UnknownBus(f"bus {bus!r} has no phase {ph!r}")
        ti, bi, pi = t_index[_parse_time(r["t"])], network.index[bus], PHASES.index(ph)
        for ci, ch in enumerate(CHANNELS):
            cell = (r.get(ch) or "").strip()
            if not cell:
                cells_filled += 1
                continue
            v = float(cell)
            if v < 0:
                raise NegativeLoad(f"{ch}={v} at t={r['t']} bus={bus}")
            data[ti, bi, pi, ci] = v
        seen[ti, bi, pi] = True
    expected = np.zeros(seen.shape, dtype=bool)
    for bi, b in enumerate(network.buses):
        for ph in b.phases:
            expected[:, bi, PHASES.index(ph)] = True
    missing = int(np.sum(expected & ~seen))
    if missing or cells_filled:
        log.warning("zero-filled %d missing records and %d empty cells", missing, cells_filled)
    return ScenarioSet(tuple(bus_ids), np.array(times), data, provenance=provenance,
                       step_minutes=step, zero_filled=missing)


# --------------------------------------------------------------------------
# synthesis


def _raw_load_shape(h):
    base = 0.35
    morning = 0.25 * np.exp(-0.5 * ((h - 7.5) / 1.5) ** 2)
    midday = 0.15 * np.exp(-0.5 * ((h - 13.0) / 3.0) ** 2)
    evening = 0.65 * np.exp(-0.5 * ((h - 19.0) / 2.5) ** 2)
    return base + morning + midday + evening


def _raw_commercial(h):
    return 1.0 / (1.0 + np.exp(-(h - 8.0) / 1.5)) / (1.0 + np.exp((h - 18.0) / 1.5))


_LOAD_PEAK = float(_raw_load_shape(np.linspace(0.0, 24.0, 24 * 60 + 1)).max())
_COMMERCIAL_PEAK = float(_raw_commercial(np.linspace(0.0, 24.0, 24 * 60 + 1)).max())


def load_shape(hour: np.ndarray) -> np.ndarray:
    """Residential diurnal load shape with its evening peak scaled to 1."""
    return _raw_load_shape(np.asarray(hour, dtype=float)) / _LOAD_PEAK


def commercial_shape(hour: np.ndarray) -> np.ndarray:
    """Business-hours plateau from about 8:00 to 18:00 over a 0.3 night floor, peak 1."""
    return 0.3 + 0.7 * _raw_commercial(np.asarray(hour, dtype=float)) / _COMMERCIAL_PEAK


LOAD_SHAPES = {"residential": load_shape, "commercial": commercial_shape}


def pv_shape(hour: np.ndarray) -> np.ndarray:
    """Clear-sky bell between 6:00 and 18:00, exactly 1 at noon."""
    h = np.asarray(hour, dtype=float)
    return np.where((h > 6.0) & (h < 18.0), np.sin(np.pi * (h - 6.0) / 12.0), 0.0) ** 1.5


def _phase_values(spec, phases: str, default: float = 0.0) -> dict[str, float]:
    if spec is None:
        return {p: default for p in phases}
    if isinstance(spec, Mapping):
        return {p: float(spec.get(p, 0.0)) for p in phases}
    # a scalar total is spread evenly over the bus phases
    return {p: float(spec) / len(phases) for p in phases}


def synthesize(network: Network, profiles: Mapping, count: int, seed: int) -> ScenarioSet:
    """Generate ``count`` consecutive timesteps of synthetic load and PV.

    ``profiles`` keys: ``step_minutes`` (15), ``pv_fraction`` (0.8), ``s_over_p``
    (1.05), ``load_sigma`` (0.1, per-step lognormal), ``day_sigma`` (0.1,
    daily load level), ``phase_sigma`` (0, daily per-phase imbalance factor),
    ``pv_noise`` (0.03), ``clear_prob`` (0.4) and ``buses``: a map from bus id to
    ``{"peak_p": float | {phase: float}, "pf": float, "peak_q": ..., "pv": bool}``
    with optional per-bus ``shape`` (``residential`` or ``commercial``) and
    ``load_sigma``.
    """
    pv_fraction = float(profiles.get("pv_fraction", 0.8))
    if not 0.0 <= pv_fraction <= 2.0:
        raise InvalidFraction(f"PV fraction {pv_fraction} outside [0, 2]")
    step = float(profiles.get("step_minutes", 15.0))
    s_over_p = float(profiles.get("s_over_p", 1.05))
    load_sigma = float(profiles.get("load_sigma", 0.1))
    day_sigma = float(profiles.get("day_sigma", 0.1))
    phase_sigma = float(profiles.get("phase_sigma", 0.0))
    pv_noise = float(profiles.get("pv_noise", 0.03))
    clear_prob = float(profiles.get("clear_prob", 0.4))
    bus_cfg = {str(k): v for k, v in profiles.get("buses", {}).items()}
    for bid in bus_cfg:
        if bid not in network.index:
            raise UnknownBus(f"profile references unknown bus {bid!r}")

    rng = np.random.default_rng(seed)
    n_bus = len(network.buses)
    times = np.arange(count) * step + float(profiles.get("start_minute", 0.0))
    hour = np.mod(times / 60.0, 24.0)
    day = np.floor(times / (24 * 60.0)).astype(int)
    n_days = int(day.max()) + 1 if count else 0

    day_level = rng.lognormal(0.0, day_sigma, n_days) if n_days else np.zeros(0)
    clear = np.where(rng.random(n_days) < clear_prob, 1.0, rng.uniform(0.2, 1.0, n_days))
    phase_level = rng.lognormal(0.0, phase_sigma, (n_days, 3)) if phase_sigma > 0 else np.ones((n_days, 3))
    shapes = {name: fn(hour) for name, fn in LOAD_SHAPES.items()}
    pshape = pv_shape(hour)

    data = np.zeros((count, n_bus, 3, len(CHANNELS)))
    for bi, bus in enumerate(network.buses):
        cfg = bus_cfg.get(bus.id)
        if cfg is None:
            continue
        peak_p = _phase_values(cfg.get("peak_p"), bus.phases)
        pf = float(cfg.get("pf", 0.9))
        ratio = math.tan(math.acos(pf))
        peak_q = (_phase_values(cfg["peak_q"], bus.phases) if "peak_q" in cfg
                  else {p: v * ratio for p, v in peak_p.items()})
        shape = cfg.get("shape", "residential")
        if shape not in shapes:
            raise ScenarioError(f"bus {bus.id}: unknown load shape {shape!r}")
        lshape = shapes[shape]
        noise = rng.lognormal(0.0, float(cfg.get("load_sigma", load_sigma)), (count, 3))
        for ph in bus.phases:
            pi = PHASES.index(ph)
            level = day_level[day] * phase_level[day, pi] * lshape * noise[:, pi]
            level = np.minimum(level, 1.0)
            data[:, bi, pi, 0] = peak_p[ph] * level
            data[:, bi, pi, 1] = peak_q[ph] * level
        total_peak = sum(peak_p.values())
        if cfg.get("pv", False):
            pv_peak = pv_fraction * total_peak
            cloud = np.minimum(clear[day] * rng.lognormal(0.0, pv_noise, count), 1.0)
            p_g = pv_peak * pshape * cloud
            if isinstance(bus.capacity, PvResidual) and np.any(p_g > bus.capacity.s_max * (1 + 1e-12)):
                raise CapacityError(f"bus {bus.id}: PV peak exceeds inverter rating")
            for ph in bus.phases:
                data[:, bi, PHASES.index(ph), 2] = p_g / len(bus.phases)
        s_cap = _rating(bus.capacity, s_over_p * pv_fraction * total_peak if cfg.get("pv", False) else None)
        for ph in bus.phases:
            data[:, bi, PHASES.index(ph), 3] = s_cap
    return ScenarioSet(tuple(b.id for b in network.buses), times, data, provenance="synthetic",
                       step_minutes=step)


def _rating(capacity, pv_rating: float | None) -> float:
    if isinstance(capacity, PvResidual):
        return pv_rating if pv_rating is not None else capacity.s_max
    if isinstance(capacity, Disk):
        return capacity.s_max
    if isinstance(capacity, Box):
        return max(abs(capacity.p_min), abs(capacity.p_max))
    return 0.0


# --------------------------------------------------------------------------
# split


def split(scenarios: ScenarioSet, fractions: Sequence[float] = DEFAULT_FRACTIONS, seed: int = 0) -> ScenarioSet:
    """Label scenarios train/test/validation by a seeded permutation and contiguous slicing."""
    fr = np.asarray(fractions, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise BadFractions(f"fractions {tuple(fractions)} must be three nonnegative values summing to 1")
    n = len(scenarios)
    n_train = int(round(fr[0] * n))
    n_test = min(int(round(fr[1] * n)), n - n_train)
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    labels[perm[:n_train]] = "train"
    labels[perm[n_train:n_train + n_test]] = "test"
    labels[perm[n_train + n_test:]] = "validation"
    return scenarios.with_split(labels)
