"""Well data: raw series, steady-state compression, cleaning, fractions, splits.

Raw series are held column-wise (:class:`RawSeries`); steady-state points are
:class:`SteadySample` objects and batches of them are :class:`SampleTable`
column dictionaries.

The steady-state detector here is a plain rolling standard-deviation test
on choke opening and upstream pressure.  It is a documented stand-in, not a
reproduction of any commercial squashing method.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import DomainError, StructuralError
from .kernels import steady_flags
from .physics import CvCurve, FluidState, PhysicalConstants, choke_oil_rate, cv_interp

RAW_HEADER = ("timestamp", "p1_bar", "p2_bar", "T1_K", "T2_K", "choke_frac", "qg_sm3h", "qo_sm3h", "qw_sm3h")
RAW_FIELDS = ("timestamp", "p1", "p2", "T1", "T2", "z", "q_g", "q_o", "q_w")
DAY = 86400.0


@dataclass(frozen=True)
class RawRecord:
    timestamp: float
    p1: float
    p2: float
    T1: float
    T2: float
    z: float
    q_g: float
    q_o: float
    q_w: float


@dataclass
class RawSeries:
    """Column-wise raw measurements of one well."""

    timestamp: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    T1: np.ndarray
    T2: np.ndarray
    z: np.ndarray
    q_g: np.ndarray
    q_o: np.ndarray
    q_w: np.ndarray

    def __post_init__(self):
        for name in RAW_FIELDS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = self.timestamp.shape[0]
        if any(getattr(self, f).shape != (n,) for f in RAW_FIELDS):
            raise StructuralError("raw series columns must be 1-d and of equal length")
        if n > 1 and np.any(np.diff(self.timestamp) <= 0):
            raise StructuralError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.timestamp.shape[0]

    @classmethod
    def from_records(cls, records: Iterable[RawRecord]) -> "RawSeries":
        rows = [[getattr(r, f) for f in RAW_FIELDS] for r in records]
        cols = np.array(rows, dtype=np.float64).reshape(-1, len(RAW_FIELDS)).T
        return cls(*cols)

    def records(self) -> list[RawRecord]:
        cols = [getattr(self, f) for f in RAW_FIELDS]
        return [RawRecord(*(float(c[i]) for c in cols)) for i in range(len(self))]


@dataclass
class SteadySample:
    """One steady operating point: interval bounds and channel means.

    ``w_g``/``w_o`` are instantaneous fractions from this sample's rates;
    ``w_g_sched``/``w_o_sched`` are the periodically updated values.
    """

    t_start: float
    t_end: float
    p1: float
    p2: float
    T1: float
    T2: float
    z: float
    q_g: float
    q_o: float
    q_w: float
    n_records: int = 0
    w_g: float = math.nan
    w_o: float = math.nan
    w_g_sched: float = math.nan
    w_o_sched: float = math.nan

    @property
    def y(self) -> float:
        return self.q_o


SAMPLE_FIELDS = tuple(f.name for f in fields(SteadySample))


class SampleTable(dict):
    """Column arrays for a batch of steady samples (keys as in :class:`SteadySample`)."""

    @property
    def n_rows(self) -> int:
        return int(next(iter(self.values())).shape[0]) if dict.__len__(self) else 0

    def take(self, idx) -> "SampleTable":
        return SampleTable({k: v[idx] for k, v in self.items()})

    @property
    def y(self) -> np.ndarray:
        return self["q_o"]


def as_table(samples: Sequence[SteadySample]) -> SampleTable:
    return SampleTable({f: np.array([getattr(s, f) for s in samples], dtype=np.float64) for f in SAMPLE_FIELDS})


# --------------------------------------------------------------------------
# steady-state compression


def squash(series: RawSeries, window: int = 8, threshold: float = 0.004, channels=("z", "p1")):
    """Compress a raw series into steady-state samples.

    A record ``i`` closes a steady window when the population std of each
    channel over records ``i-window+1..i`` is below ``threshold`` times the
    channel scale (median absolute value).  Maximal unions of steady windows
    become intervals; each yields one sample holding the mean of every
    channel.  Returns ``(samples, report)``.
    """
    if window < 2:
        raise StructuralError("window must be at least 2")
    n = len(series)
    report = {"records": n, "samples": 0, "steady_records": 0}
    if n == 0:
        raise StructuralError("squash needs at least one record")
    X = np.vstack([getattr(series, c) for c in channels])
    scale = np.median(np.abs(X), axis=1)
    scale = np.where(scale > 0.0, scale, 1.0)
    flags = steady_flags(X, window, threshold * scale)

    samples = []
    prev_end = -1
    edges = np.flatnonzero(np.diff(np.concatenate(([0], flags.view(np.int8), [0]))))
    for first, stop in zip(edges[::2], edges[1::2]):
        start = max(first - window + 1, prev_end + 1)
        end = stop - 1
        if end - start + 1 < window:
            continue
        sl = slice(start, end + 1)
        means = {f: float(np.mean(getattr(series, f)[sl])) for f in RAW_FIELDS[1:]}
        samples.append(SteadySample(float(series.timestamp[start]), float(series.timestamp[end]), n_records=end - start + 1, **means))
        prev_end = end
    report["samples"] = len(samples)
    report["steady_records"] = int(sum(s.n_records for s in samples))
    return samples, report


# --------------------------------------------------------------------------
# cleaning and fractions

CLEAN_RULES = ("nonfinite", "p1_range", "p2_gt_p1", "z_range", "negative_rate", "no_flow")


def clean(samples: Sequence[SteadySample], p_max: float = 500.0, q_tol: float = 1.0):
    """Drop implausible samples; clamp small negative oil rates to zero.

    Each dropped sample is tagged with the first rule it breaks, checked in
    the order of ``CLEAN_RULES``.  Returns ``(kept, report)`` where the report
    holds per-rule counts, the ``(index, rule)`` rejections and the number
    of clamped oil rates.
    """
    kept, rejected = [], []
    clamped = 0
    for i, s in enumerate(samples):
        rule = None
        vals = (s.p1, s.p2, s.T1, s.T2, s.z, s.q_g, s.q_o, s.q_w)
        if not all(math.isfinite(v) for v in vals):
            rule = "nonfinite"
        elif not 0.0 < s.p1 <= p_max:
            rule = "p1_range"
        elif s.p2 > s.p1:
            rule = "p2_gt_p1"
        elif not 0.0 <= s.z <= 1.0:
            rule = "z_range"
        elif s.q_o < -q_tol or s.q_g < 0.0 or s.q_w < 0.0:
            rule = "negative_rate"
        elif s.q_g <= 0.0 and s.q_o <= 0.0 and s.q_w <= 0.0:
            rule = "no_flow"
        if rule is not None:
            rejected.append((i, rule))
            continue
        if s.q_o < 0.0:
            s = replace(s, q_o=0.0)
            clamped += 1
        kept.append(s)
    counts = {r: 0 for r in CLEAN_RULES}
    for _, r in rejected:
        counts[r] += 1
    return kept, {"counts": counts, "rejected": rejected, "clamped": clamped, "kept": len(kept)}


def mass_fractions(q_g, q_o, q_w, rho_g_st: float, rho_o_st: float, rho_w_st: float):
    """Phase mass fractions ``(w_g, w_o, w_w)`` from standard-condition rates."""
    q_g, q_o, q_w = (np.asarray(q, dtype=np.float64) for q in (q_g, q_o, q_w))
    if min(rho_g_st, rho_o_st, rho_w_st) <= 0:
        raise DomainError("mass_fractions", "standard densities must be positive", (rho_g_st, rho_o_st, rho_w_st))
    if np.any(q_g < 0) or np.any(q_o < 0) or np.any(q_w < 0):
        raise DomainError("mass_fractions", "negative rate", (q_g, q_o, q_w))
    m_g, m_o, m_w = rho_g_st * q_g, rho_o_st * q_o, rho_w_st * q_w
    total = m_g + m_o + m_w
    if np.any(total <= 0):
        raise DomainError("mass_fractions", "all rates zero", (q_g, q_o, q_w))
    return m_g / total, m_o / total, m_w / total


def with_fractions(samples: Sequence[SteadySample], constants: PhysicalConstants) -> list[SteadySample]:
    if not samples:
        return []
    t = as_table(samples)
    w_g, w_o, _ = mass_fractions(t["q_g"], t["q_o"], t["q_w"], constants.rho_g_st, constants.rho_o_st, constants.rho_w_st)
    return [replace(s, w_g=float(g), w_o=float(o)) for s, g, o in zip(samples, w_g, w_o)]


def schedule_fractions(samples: Sequence[SteadySample], period_days: float = 30.0, lookback: int = 20) -> list[SteadySample]:
    """Assign periodically refreshed mass fractions.

    Updates happen at ``t0 + k * period`` for ``k >= 1`` (``t0`` = end time of
    the first sample).  An update averages the instantaneous fractions of the
    latest ``min(lookback, available)`` samples ending before it, and holds
    until the next update.  Samples before the first update carry the first
    update's value.  Sample time is the interval end.
    """
    if not samples:
        return []
    t = np.array([s.t_end for s in samples])
    if np.any(np.diff(t) < 0):
        raise StructuralError("samples must be time-ordered")
    w_g = np.array([s.w_g for s in samples])
    w_o = np.array([s.w_o for s in samples])
    period = period_days * DAY
    epoch = np.floor((t - t[0]) / period).astype(int)
    out = []
    cache: dict[int, tuple[float, float]] = {}
    for s, k in zip(samples, epoch):
        k_upd = max(int(k), 1)
        if k_upd not in cache:
            t_upd = t[0] + k_upd * period
            avail = int(np.searchsorted(t, t_upd, side="left"))
            lo = max(0, avail - lookback)
            cache[k_upd] = (float(np.mean(w_g[lo:avail])), float(np.mean(w_o[lo:avail])))
        g, o = cache[k_upd]
        out.append(replace(s, w_g_sched=g, w_o_sched=o))
    return out


# --------------------------------------------------------------------------
# splits


@dataclass
class WellDataset:
    """Samples of one well with fit/val/test labels."""

    well_id: str
    samples: list[SteadySample]
    labels: list[str] = field(default_factory=list)

    def table(self, *labels: str) -> SampleTable:
        chosen = [s for s, l in zip(self.samples, self.labels) if l in labels]
        return as_table(chosen)

    def counts(self) -> dict[str, int]:
        return {l: self.labels.count(l) for l in ("fit", "val", "test")}


def split(dataset, train_frac: float = 0.75, val_frac: float = 0.15, well_id: str = "well") -> WellDataset:
    """Chronological split: first ``floor(0.75 n)`` train, the rest test.

    The latest ``floor(0.15 * n_train)`` training samples form the validation set.
    """
    if isinstance(dataset, WellDataset):
        well_id, samples = dataset.well_id, list(dataset.samples)
    else:
        samples = list(dataset)
    n = len(samples)
    if n < 8:
        raise StructuralError(f"split needs at least 8 samples, got {n}")
    samples.sort(key=lambda s: s.t_start)
    n_train = int(math.floor(train_frac * n))
    n_val = int(math.floor(val_frac * n_train))
    labels = ["fit"] * (n_train - n_val) + ["val"] * n_val + ["test"] * (n - n_train)
    return WellDataset(well_id, samples, labels)


def region_split(dataset, train_z=(0.2, 0.6), test_z=(0.8, 1.0), val_frac: float = 0.15,
                 well_id: str = "well") -> WellDataset:
    """Split by choke opening instead of time, for extrapolation studies.

    Samples with ``z`` in ``train_z`` train (the latest ``floor(0.15 n_train)``
    of them validate), samples with ``z`` in ``test_z`` test, the rest are dropped.
    """
    if isinstance(dataset, WellDataset):
        well_id, samples = dataset.well_id, list(dataset.samples)
    else:
        samples = list(dataset)
    samples.sort(key=lambda s: s.t_start)
    train = [s for s in samples if train_z[0] <= s.z <= train_z[1]]
    test = [s for s in samples if test_z[0] <= s.z <= test_z[1]]
    if len(train) < 2 or not test:
        raise StructuralError("region split leaves an empty training or test set")
    n_val = int(math.floor(val_frac * len(train)))
    labels = ["fit"] * (len(train) - n_val) + ["val"] * n_val + ["test"] * len(test)
    return WellDataset(well_id, train + test, labels)


SPLITS = ("chronological", "extrapolation")


# --------------------------------------------------------------------------
# synthetic wells


@dataclass
class SynthSpec:
    """Generator settings for one synthetic well.

    ``n_points`` operating points are visited in sequence; each holds for a
    random number of records in ``steady_records`` and is reached through
    ``transient_records`` ramp records.  ``rel_noise`` is a multiplicative
    error per operating point on the metered rates (common to all phases);
    ``record_noise`` adds independent per-record sensor noise.
    """

    n_points: int = 1500
    days: float = 1248.0
    start_time: float = 1.6e9
    steady_records: tuple = (12, 30)
    transient_records: int = 3
    z_range: tuple = (0.1, 1.0)
    min_dz: float = 0.08
    p1_range: tuple = (60.0, 140.0)
    p2_range: tuple = (20.0, 55.0)
    T1_range: tuple = (330.0, 370.0)
    water_cut: tuple = (0.15, 0.55)
    gas_frac: tuple = (0.04, 0.12)
    rho_o: float = 800.0
    rho_w: float = 1025.0
    a: float = 1.1
    cv_z: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    cv_values: tuple = (0.0, 14.0, 33.0, 55.0, 78.0, 100.0)
    constants: PhysicalConstants = field(default_factory=PhysicalConstants)
    rel_noise: float = 0.05
    record_noise: dict = field(default_factory=lambda: {"p": 5e-4, "T": 0.1, "z": 5e-4, "q": 2e-3})

    def validate(self) -> None:
        if self.n_points < 1 or self.days <= 0:
            raise StructuralError("need at least one operating point over a positive span")
        lo, hi = self.steady_records
        if not 2 <= lo <= hi:
            raise StructuralError("steady_records must satisfy 2 <= lo <= hi")
        if self.p2_range[1] >= self.p1_range[0]:
            raise StructuralError("infeasible spec: p2 can reach or exceed p1")
        if not 0.0 <= self.z_range[0] < self.z_range[1] <= 1.0:
            raise StructuralError("z_range must lie inside [0, 1]")
        if self.z_range[1] - self.z_range[0] <= self.min_dz:
            raise StructuralError("z_range too narrow for min_dz")
        if min(self.p1_range[0], self.p2_range[0], self.T1_range[0]) <= 0:
            raise StructuralError("pressures and temperatures must be positive")
        if max(self.water_cut) + max(self.gas_frac) >= 1.0 or min(self.water_cut) < 0 or min(self.gas_frac) < 0:
            raise StructuralError("fraction ranges leave no oil")

    @property
    def cv_curve(self) -> CvCurve:
        return CvCurve(np.array(self.cv_z), np.array(self.cv_values), self.a)

    def truth(self) -> dict:
        return {
            "rho_o": self.rho_o,
            "rho_w": self.rho_w,
            "a": self.a,
            "cv_z": list(self.cv_z),
            "cv_values": list(self.cv_values),
            "constants": asdict(self.constants),
            "rel_noise": self.rel_noise,
        }


def synth_operating_points(spec: SynthSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Noise-free operating points with their true oil rates."""
    n = spec.n_points
    z = np.empty(n)
    z[0] = rng.uniform(*spec.z_range)
    for i in range(1, n):
        while True:
            cand = rng.uniform(*spec.z_range)
            if abs(cand - z[i - 1]) >= spec.min_dz:
                break
        z[i] = cand
    life = np.linspace(0.0, 1.0, n)
    p1 = rng.uniform(*spec.p1_range, size=n)
    p2 = rng.uniform(*spec.p2_range, size=n)
    T1 = rng.uniform(*spec.T1_range, size=n)
    # Joule-Thomson cooling across the choke
    T2 = T1 - 0.25 * (p1 - p2) - rng.uniform(0.0, 2.0, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    wc = spec.water_cut[0] + (spec.water_cut[1] - spec.water_cut[0]) * (life + 0.1 * np.sin(6 * np.pi * life + phase[0])) / 1.1
    wg_mid = 0.5 * (spec.gas_frac[0] + spec.gas_frac[1])
    wg_amp = 0.5 * (spec.gas_frac[1] - spec.gas_frac[0])
    w_g = wg_mid + wg_amp * np.sin(4 * np.pi * life + phase[1])
    w_w = np.clip(wc, min(spec.water_cut), max(spec.water_cut))
    w_o = 1.0 - w_g - w_w
    state = FluidState(p1, p2, T1, z, w_g, w_o)
    state.validate()
    cv = cv_interp(z, spec.cv_curve)
    q_o = choke_oil_rate(state, cv, spec.constants, spec.rho_o, spec.rho_w)
    c = spec.constants
    m_total = q_o * c.rho_o_st / w_o
    return {
        "p1": p1, "p2": p2, "T1": T1, "T2": T2, "z": z, "w_g": w_g, "w_o": w_o,
        "q_o": q_o, "q_g": w_g * m_total / c.rho_g_st, "q_w": w_w * m_total / c.rho_w_st,
    }


def synth_generate(spec: SynthSpec, seed: int):
    """Simulate one well; returns ``(RawSeries, truth dict)``.

    The truth dict carries the generator parameters plus the noise-free
    operating points (``points``) for closed-loop checks.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    pts = synth_operating_points(spec, rng)
    n = spec.n_points
    lo, hi = spec.steady_records
    lengths = rng.integers(lo, hi + 1, size=n)
    point_err = 1.0 + spec.rel_noise * rng.standard_normal(n)
    T = spec.transient_records
    total = int(lengths.sum() + T * (n - 1))
    dt = max(1.0, math.floor(spec.days * DAY / total))
    cols = {f: np.empty(total) for f in RAW_FIELDS[1:]}
    owner = np.empty(total, dtype=np.int64)
    pos = 0
    keys = ("p1", "p2", "T1", "T2", "z", "q_g", "q_o", "q_w")
    for i in range(n):
        if i > 0 and T > 0:
            frac = np.arange(1, T + 1) / (T + 1)
            for k in keys:
                prev = pts[k][i - 1] * (point_err[i - 1] if k.startswith("q") else 1.0)
                cur = pts[k][i] * (point_err[i] if k.startswith("q") else 1.0)
                cols[k][pos : pos + T] = prev + (cur - prev) * frac
            owner[pos : pos + T] = -1
            pos += T
        L = int(lengths[i])
        for k in keys:
            cols[k][pos : pos + L] = pts[k][i] * (point_err[i] if k.startswith("q") else 1.0)
        owner[pos : pos + L] = i
        pos += L
    rn = spec.record_noise
    if any(v > 0 for v in rn.values()):
        for k in ("p1", "p2"):
            cols[k] *= 1.0 + rn.get("p", 0.0) * rng.standard_normal(total)
        for k in ("T1", "T2"):
            cols[k] += rn.get("T", 0.0) * rng.standard_normal(total)
        cols["z"] = np.clip(cols["z"] + rn.get("z", 0.0) * rng.standard_normal(total), 0.0, 1.0)
        common = 1.0 + rn.get("q", 0.0) * rng.standard_normal(total)
        for k in ("q_g", "q_o", "q_w"):
            cols[k] *= common
        # keep p2 below p1 after sensor noise
        cols["p2"] = np.minimum(cols["p2"], cols["p1"])
    ts = spec.start_time + dt * np.arange(total)
    series = RawSeries(ts, **cols)
    truth = spec.truth()
    truth.update({"seed": seed, "n_records": total, "dt_s": dt})
    truth["points"] = {k: v.tolist() for k, v in pts.items()}
    return series, truth


# --------------------------------------------------------------------------
# CSV I/O


def _fmt(x: float) -> str:
    return repr(float(x))


def write_raw_csv(path, series: RawSeries) -> None:
    cols = [getattr(series, f) for f in RAW_FIELDS]
    buf = io.StringIO()
    buf.write(",".join(RAW_HEADER) + "\n")
    for row in zip(*(c.tolist() for c in cols)):
        buf.write(",".join(map(repr, row)) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_raw_csv(path) -> RawSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != RAW_HEADER:
            raise StructuralError(f"{path}: header must be exactly {','.join(RAW_HEADER)}")
        rows = [[float(v) for v in row] for row in reader if row]
    data = np.array(rows, dtype=np.float64).reshape(-1, len(RAW_HEADER))
    return RawSeries(*data.T)


SAMPLE_CSV_FIELDS = ("split",) + SAMPLE_FIELDS


def write_samples_csv(path, dataset: WellDataset) -> None:
    buf = io.StringIO()
    buf.write(",".join(SAMPLE_CSV_FIELDS) + "\n")
    for label, s in zip(dataset.labels, dataset.samples):
        vals = [label] + [str(s.n_records) if f == "n_records" else _fmt(getattr(s, f)) for f in SAMPLE_FIELDS]
        buf.write(",".join(vals) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_samples_csv(path, well_id: str | None = None) -> WellDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SAMPLE_CSV_FIELDS:
            raise StructuralError(f"{path}: unexpected sample table header")
        labels, samples = [], []
        for row in reader:
            labels.append(row.pop("split"))
            kw = {f: (int(row[f]) if f == "n_records" else float(row[f])) for f in SAMPLE_FIELDS}
            samples.append(SteadySample(**kw))
    return WellDataset(well_id or Path(path).stem, samples, labels)


def write_truth(path, truth: dict) -> None:
    Path(path).write_text(json.dumps(truth, indent=1) + "\n", encoding="utf-8")


def preprocess(series: RawSeries, constants: PhysicalConstants, *, window=8, threshold=0.004, p_max=500.0,
               q_tol=1.0, period_days=30.0, lookback=20, well_id="well", split_mode="chronological"):
    """squash -> clean -> fractions -> schedule -> split; returns ``(WellDataset, report)``."""
    if split_mode not in SPLITS:
        raise ValueError(f"split_mode must be one of {SPLITS}")
    samples, sq = squash(series, window, threshold)
    kept, cl = clean(samples, p_max, q_tol)
    kept = schedule_fractions(with_fractions(kept, constants), period_days, lookback)
    ds = split(kept, well_id=well_id) if split_mode == "chronological" else region_split(kept, well_id=well_id)
    return ds, {"squash": sq, "clean": {k: v for k, v in cl.items() if k != "rejected"}}
