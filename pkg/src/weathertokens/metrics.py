"""Forecast verification: point metrics, horizon profiles, baselines and comparison reports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import _atomic_write, hour_of_day, iso_hour
from .errors import ConfigError, DataError, DegenerateError
from .tensor import DimensionError

log = logging.getLogger(__name__)

METRIC_ROWS = ("RMSE", "MAE", "R2", "CVRMSE", "NRMSE")


def _pair(pred, actual) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise DimensionError(f"prediction length {p.size} differs from actual length {a.size}")
    if p.size == 0:
        raise DimensionError("metrics need at least one value")
    return p, a


def rmse(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.sqrt(np.mean((p - a) ** 2)))


def mae(pred, actual) -> float:
    p, a = _pair(pred, actual)
    return float(np.mean(np.abs(p - a)))


def r_squared(pred, actual) -> float:
    """1 - SS_res / SS_tot, with SS_tot centred on the mean of ``actual``."""
    p, a = _pair(pred, actual)
    ss_tot = float(np.sum((a - a.mean()) ** 2))
    if ss_tot == 0.0:
        raise DegenerateError("R^2 undefined: actual values have zero variance")
    return 1.0 - float(np.sum((p - a) ** 2)) / ss_tot


def cvrmse(pred, actual) -> float:
    """RMSE as a percentage of the mean actual value."""
    p, a = _pair(pred, actual)
    m = a.mean()
    if m <= 0:
        raise DegenerateError("CVRMSE undefined: mean of actual values is not positive")
    return 100.0 * rmse(p, a) / m


def nrmse(pred, actual) -> float:
    """RMSE as a percentage of the actual range."""
    p, a = _pair(pred, actual)
    span = a.max() - a.min()
    if span <= 0:
        raise DegenerateError("NRMSE undefined: actual values have zero range")
    return 100.0 * rmse(p, a) / span


def improvement_pct(model_metric: float, baseline_metric: float) -> float:
    """Relative error reduction of the model over the baseline, in percent."""
    if baseline_metric <= 0:
        raise DegenerateError("improvement undefined for a non-positive baseline metric")
    return 100.0 * (baseline_metric - model_metric) / baseline_metric


def skill_gain_pct(model_score: float, baseline_score: float) -> float | None:
    """Relative increase of a higher-is-better score (R^2); None when the baseline is not positive."""
    if baseline_score <= 0:
        return None
    return 100.0 * (model_score - baseline_score) / baseline_score


@dataclass
class HorizonProfile:
    mae: np.ndarray
    rmse: np.ndarray
    counts: np.ndarray


def horizon_profile(pred, actual, mask=None) -> HorizonProfile:
    """Per-lead-hour MAE and RMSE over N x horizon prediction/actual matrices.

    ``mask`` (same shape, boolean) excludes entries; hours with no entries
    get NaN.
    """
    try:
        p = np.asarray(pred, dtype=np.float64)
        a = np.asarray(actual, dtype=np.float64)
    except ValueError:
        raise DimensionError("ragged prediction/actual sequences") from None
    if p.ndim == 1:
        p, a = p[None], a[None]
    if p.ndim != 2 or p.shape != a.shape:
        raise DimensionError(f"horizon_profile needs equal N x horizon matrices, got {p.shape} and {a.shape}")
    m = np.ones(p.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if m.shape != p.shape:
        raise DimensionError("mask shape differs from predictions")
    err = np.where(m, p - a, 0.0)
    counts = m.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        prof_mae = np.abs(err).sum(axis=0) / counts
        prof_rmse = np.sqrt((err * err).sum(axis=0) / counts)
    return HorizonProfile(prof_mae, prof_rmse, counts)


@dataclass
class MetricsReport:
    rmse_mw: float
    mae_mw: float
    r2: float
    cvrmse_pct: float
    nrmse_pct: float
    horizon_mae: np.ndarray
    horizon_rmse: np.ndarray
    sample_count: int
    target_min: float
    target_max: float
    target_mean: float
    target_std: float

    def row(self, name: str) -> float:
        return {"RMSE": self.rmse_mw, "MAE": self.mae_mw, "R2": self.r2,
                "CVRMSE": self.cvrmse_pct, "NRMSE": self.nrmse_pct}[name]


def metrics_report(pred, actual) -> MetricsReport:
    """Aggregate and per-lead-hour statistics for N x horizon MW matrices."""
    p = np.asarray(pred, dtype=np.float64)
    a = np.asarray(actual, dtype=np.float64)
    if p.ndim == 1:
        p, a = p[None], a[None]
    prof = horizon_profile(p, a)
    return MetricsReport(
        rmse_mw=rmse(p, a), mae_mw=mae(p, a), r2=r_squared(p, a),
        cvrmse_pct=cvrmse(p, a), nrmse_pct=nrmse(p, a),
        horizon_mae=prof.mae, horizon_rmse=prof.rmse, sample_count=p.shape[0],
        target_min=float(a.min()), target_max=float(a.max()),
        target_mean=float(a.mean()), target_std=float(a.std()),
    )


# ---------------------------------------------------------------------------
# baselines


@dataclass
class BaselineForecast:
    kind: str
    table: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __call__(self, hours) -> np.ndarray:
        if self.kind != "climatology":
            raise ConfigError("only climatology baselines are table driven")
        return self.table[hour_of_day(hours)]


def fit_climatology(train_hours, train_values) -> BaselineForecast:
    """Mean training value for each of the 24 hours of the day."""
    h = hour_of_day(train_hours)
    v = np.asarray(train_values, dtype=np.float64)
    if h.shape != v.shape or v.size == 0:
        raise ConfigError("climatology needs equal-length, non-empty training hours and values")
    counts = np.bincount(h, minlength=24)
    if np.any(counts == 0):
        missing = ", ".join(str(i) for i in np.flatnonzero(counts == 0))
        raise ConfigError(f"training data lacks hour(s) of day: {missing}")
    return BaselineForecast("climatology", np.bincount(h, weights=v, minlength=24) / counts)


def climatology_forecast(train_hours, train_values, eval_hours) -> np.ndarray:
    return fit_climatology(train_hours, train_values)(eval_hours)


def persistence_forecast(history_hours, history_values, eval_hours, issue_hours, missing: str = "raise") -> np.ndarray:
    """Value observed on the day before issue, at the same hour of day.

    ``issue_hours`` gives, per evaluated hour, the forecast start hour; the
    reference is ``day(issue) - 24h + hour_of_day(t)``. Hours without history
    raise DataError, or become NaN with ``missing="nan"``.
    """
    hist_h = np.asarray(history_hours, dtype=np.int64)
    hist_v = np.asarray(history_values, dtype=np.float64)
    t = np.asarray(eval_hours, dtype=np.int64)
    issue = np.broadcast_to(np.asarray(issue_hours, dtype=np.int64), t.shape)
    ref = issue - np.mod(issue, 24) - 24 + hour_of_day(t)
    pos = np.minimum(np.searchsorted(hist_h, ref), max(hist_h.size - 1, 0))
    found = hist_h[pos] == ref if hist_h.size else np.zeros(t.shape, dtype=bool)
    if missing == "nan":
        return np.where(found, hist_v[pos] if hist_h.size else np.nan, np.nan)
    if not found.all():
        raise DataError(f"persistence baseline lacks history at {iso_hour(int(ref[~found].ravel()[0]))}")
    return hist_v[pos]


# ---------------------------------------------------------------------------
# comparison report


@dataclass
class ComparisonReport:
    model: MetricsReport
    baseline: MetricsReport
    improvements: dict[str, float | None]
    segments: dict[str, tuple[MetricsReport, MetricsReport]] = field(default_factory=dict)

    def table_rows(self) -> list[tuple[str, float, float, float | None]]:
        return [(name, self.model.row(name), self.baseline.row(name), self.improvements[name]) for name in METRIC_ROWS]

    def report_csv(self) -> str:
        lines = ["metric,model,baseline,improvement_pct"]
        for name, m, b, imp in self.table_rows():
            lines.append(f"{name},{m:.6f},{b:.6f},{'' if imp is None else f'{imp:.4f}'}")
        return "\n".join(lines) + "\n"

    def horizon_csv(self) -> str:
        lines = ["lead_hour,model_mae,baseline_mae,model_rmse,baseline_rmse"]
        for h in range(self.model.horizon_mae.size):
            lines.append(
                f"{h},{self.model.horizon_mae[h]:.6f},{self.baseline.horizon_mae[h]:.6f},"
                f"{self.model.horizon_rmse[h]:.6f},{self.baseline.horizon_rmse[h]:.6f}"
            )
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path, title: str = "") -> list[Path]:
        from .plots import line_plot_svg

        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.csv", out / "horizon.csv", out / "horizon_mae.svg", out / "horizon_rmse.svg"]
        _atomic_write(written[0], self.report_csv())
        _atomic_write(written[1], self.horizon_csv())
        lead = np.arange(self.model.horizon_mae.size)
        for path, key in ((written[2], "mae"), (written[3], "rmse")):
            svg = line_plot_svg(
                lead,
                {"model": getattr(self.model, f"horizon_{key}"), "baseline": getattr(self.baseline, f"horizon_{key}")},
                title=f"{title} hourly {key.upper()}".strip(), xlabel="lead hour", ylabel=f"{key.upper()} [MW]",
            )
            _atomic_write(path, svg)
        if self.segments:
            lines = ["segment,metric,model,baseline,improvement_pct"]
            for seg, (m, b) in self.segments.items():
                for name in METRIC_ROWS:
                    imp = _improvement_for(name, m.row(name), b.row(name))
                    lines.append(f"{seg},{name},{m.row(name):.6f},{b.row(name):.6f},{'' if imp is None else f'{imp:.4f}'}")
            written.append(out / "segments.csv")
            _atomic_write(written[-1], "\n".join(lines) + "\n")
        return written


def _improvement_for(name: str, model_value: float, baseline_value: float) -> float | None:
    if name == "R2":
        return skill_gain_pct(model_value, baseline_value)
    if baseline_value <= 0:
        return 0.0 if model_value == baseline_value else None
    return improvement_pct(model_value, baseline_value)


def compare_report(
    model_preds,
    baseline_preds,
    actuals,
    segment_mask: Sequence[int] | None = None,
    hours=None,
) -> ComparisonReport:
    """Side-by-side metrics for N x horizon MW matrices.

    ``segment_mask`` labels each lead hour (e.g. 0 = first day, 1 = second
    day) to additionally report per-segment metrics. When ``hours`` is given,
    NaN entries in either forecast are reported as misaligned timestamps.
    """
    m = np.asarray(model_preds, dtype=np.float64)
    b = np.asarray(baseline_preds, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if m.ndim == 1:
        m, b, a = m[None], b[None], a[None]
    if not (m.shape == b.shape == a.shape):
        raise DataError(f"misaligned series: model {m.shape}, baseline {b.shape}, actual {a.shape}")
    bad = ~(np.isfinite(m) & np.isfinite(b) & np.isfinite(a))
    if bad.any():
        if hours is not None:
            missing = sorted({iso_hour(int(h)) for h in np.asarray(hours)[bad]})
            raise DataError(f"{len(missing)} timestamp(s) missing from a forecast, first {missing[0]}: {', '.join(missing[:5])}")
        raise DataError(f"{int(bad.sum())} missing value(s) in aligned series")
    model_rep = metrics_report(m, a)
    base_rep = metrics_report(b, a)
    improvements = {name: _improvement_for(name, model_rep.row(name), base_rep.row(name)) for name in METRIC_ROWS}
    segments = {}
    if segment_mask is not None:
        labels = np.asarray(segment_mask)
        if labels.shape != (m.shape[1],):
            raise DimensionError("segment mask must label every lead hour")
        for lab in np.unique(labels):
            sel = labels == lab
            segments[str(lab)] = (metrics_report(m[:, sel], a[:, sel]), metrics_report(b[:, sel], a[:, sel]))
    return ComparisonReport(model_rep, base_rep, improvements, segments)
