"""Error metrics, cumulative deviation tables and boxplot statistics."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

import numpy as np

from .autodiff import StructuralError

# slack on the relative-deviation comparison so that exact hits are not lost to rounding
CDP_REL_TOL = 1e-12


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).ravel()
    y_hat = np.asarray(y_hat, dtype=np.float64).ravel()
    if y.shape != y_hat.shape:
        raise StructuralError(f"length mismatch: {y.shape[0]} measurements, {y_hat.shape[0]} estimates")
    if y.size == 0:
        raise StructuralError("empty input")
    return y, y_hat


def rmse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.sqrt(np.mean((y - y_hat) ** 2)))


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


@dataclass
class CdpTable:
    deviation: np.ndarray
    percentage: np.ndarray
    n_included: int
    n_excluded: int

    def at(self, d: int) -> float:
        return float(self.percentage[int(np.searchsorted(self.deviation, d))])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("deviation,percentage\n")
        for d, p in zip(self.deviation.tolist(), self.percentage.tolist()):
            buf.write(f"{d},{p!r}\n")
        return buf.getvalue()


def cdp(y, y_hat, max_dev: int = 50) -> CdpTable:
    """Percentage of samples whose relative deviation is within ``d`` percent, for ``d = 0..max_dev``.

    Samples with a zero measurement have no relative deviation; they are
    left out and counted in ``n_excluded``.
    """
    y, y_hat = _pair(y, y_hat)
    keep = y != 0.0
    if not np.any(keep):
        raise StructuralError("every measurement is zero; relative deviation undefined")
    rel = np.abs(y_hat[keep] - y[keep]) / np.abs(y[keep])
    d = np.arange(int(max_dev) + 1)
    hits = (rel[None, :] <= d[:, None] / 100.0 + CDP_REL_TOL).sum(axis=1)
    return CdpTable(d, 100.0 * hits / rel.size, int(rel.size), int((~keep).sum()))


@dataclass
class BoxStats:
    median: float
    q1: float
    q3: float
    whisker_low: float
    whisker_high: float
    outliers: list[float] = field(default_factory=list)

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def rows(self, label: str = "all", outlier_labels: Sequence[str] | None = None) -> list[tuple[str, str, float]]:
        out = [(label, s, getattr(self, s)) for s in ("median", "q1", "q3", "whisker_low", "whisker_high")]
        for i, v in enumerate(self.outliers):
            out.append((outlier_labels[i] if outlier_labels else label, "outlier", v))
        return out


def boxplot_stats(values) -> BoxStats:
    """Quartiles by linear interpolation of order statistics; Tukey 1.5 IQR whiskers."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise StructuralError("boxplot of an empty set")
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0], method="linear")
    iqr = q3 - q1
    lo_fence, hi_fence = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    inside = v[(v >= lo_fence) & (v <= hi_fence)]
    outliers = sorted(float(x) for x in v[(v < lo_fence) | (v > hi_fence)])
    return BoxStats(float(med), float(q1), float(q3), float(inside.min()), float(inside.max()), outliers)


def box_outlier_labels(values: Mapping[str, float], stats: BoxStats) -> list[str]:
    by_value = {}
    for k, v in values.items():
        by_value.setdefault(float(v), k)
    return [by_value[v] for v in stats.outliers]


def boxplot_csv(values: Mapping[str, float]) -> str:
    """``well,stat,value`` table for per-well metric values."""
    stats = boxplot_stats(list(values.values()))
    buf = io.StringIO()
    buf.write("well,stat,value\n")
    for w, s, v in stats.rows("all", box_outlier_labels(values, stats)):
        buf.write(f"{w},{s},{v!r}\n")
    return buf.getvalue()


@dataclass
class MetricReport:
    """Per-well errors on one split plus cross-well aggregates and the pooled CDP."""

    kind: str
    split: str
    rmse: dict[str, float]
    mae: dict[str, float]
    cdp: CdpTable

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for name, vals in (("rmse", self.rmse), ("mae", self.mae)):
            v = np.array(list(vals.values()))
            out[name] = {"mean": float(v.mean()), "median": float(np.median(v))}
        return out

    def box(self, metric: str) -> BoxStats:
        return boxplot_stats(list(getattr(self, metric).values()))


def metric_report(kind: str, split: str, per_well: Mapping[str, tuple]) -> MetricReport:
    """``per_well`` maps well id to ``(y, y_hat)`` arrays."""
    if not per_well:
        raise StructuralError("no wells to report")
    wells = sorted(per_well)
    r = {w: rmse(*per_well[w]) for w in wells}
    m = {w: mae(*per_well[w]) for w in wells}
    y = np.concatenate([np.asarray(per_well[w][0], dtype=np.float64) for w in wells])
    yh = np.concatenate([np.asarray(per_well[w][1], dtype=np.float64) for w in wells])
    return MetricReport(kind, split, r, m, cdp(y, yh))


# --------------------------------------------------------------------------
# reference series

GOLDEN_CDP_SAMPLES = 3770


def _golden_rows(name: str) -> list[dict]:
    text = resources.files("grayvfm").joinpath("golden", name).read_text(encoding="utf-8")
    return list(csv.DictReader(io.StringIO(text)))


def reference_cdp_series() -> dict[str, np.ndarray]:
    """Published cumulative-deviation percentages for d = 0..49, per model kind."""
    rows = _golden_rows("cdp_reference.csv")
    return {k: np.array([float(r[k]) for r in rows]) for k in ("m", "h", "dd")}


def reference_box_summary() -> dict[tuple[str, str], BoxStats]:
    """Published boxplot summaries keyed by ``(kind, metric)``."""
    acc: dict[tuple[str, str], dict] = {}
    for r in _golden_rows("box_reference.csv"):
        d = acc.setdefault((r["kind"], r["metric"]), {"outliers": []})
        if r["stat"] == "outlier":
            d["outliers"].append(float(r["value"]))
        else:
            d[r["stat"]] = float(r["value"])
    return {k: BoxStats(**v) for k, v in acc.items()}


def golden_cdp_samples(kind: str, n_total: int = GOLDEN_CDP_SAMPLES):
    """Measurement/estimate pairs whose deviations reproduce a published CDP series.

    Each series step ``d-1 -> d`` becomes that many samples at ``d - 0.5``
    percent deviation; samples beyond the last step sit at 75 percent.
    """
    pct = reference_cdp_series()[kind]
    counts = np.rint(pct * n_total / 100.0).astype(int)
    if not np.allclose(counts, pct * n_total / 100.0, atol=1e-6):
        raise StructuralError(f"series {kind} is not a whole-sample count over {n_total}")
    dev = []
    for d in range(1, counts.size):
        dev += [d - 0.5] * int(counts[d] - counts[d - 1])
    dev += [75.0] * int(n_total - counts[-1])
    dev = np.array(dev)
    y = np.full(dev.size, 100.0)
    return y, y * (1.0 + dev / 100.0)


def render_cdp_golden(kind: str) -> CdpTable:
    y, y_hat = golden_cdp_samples(kind)
    return cdp(y, y_hat, max_dev=49)


def render_box_golden(kind: str, metric: str) -> str:
    """``well,stat,value`` rendering of a published box summary."""
    stats = reference_box_summary()[(kind, metric)]
    buf = io.StringIO()
    buf.write("well,stat,value\n")
    for w, s, v in stats.rows("all"):
        buf.write(f"{w},{s},{v!r}\n")
    return buf.getvalue()


def tukey_outlier(value: float, stats: BoxStats) -> bool:
    return value < stats.q1 - 1.5 * stats.iqr or value > stats.q3 + 1.5 * stats.iqr


def fmt_pct(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.3f}"
