"""Gridded weather ingestion, normalisation, capacity handling and sample assembly.

Timestamps are integer UTC epoch hours throughout (``hours since
1970-01-01T00:00Z``); :func:`to_epoch_hour` and :func:`iso_hour` convert to
and from ISO-8601 strings.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, CorruptionError, DataError, DegenerateError, FormatError

log = logging.getLogger(__name__)

VARIABLE_SETS: dict[str, tuple[str, ...]] = {
    "wind": ("u10", "v10"),
    "solar": ("radiation", "cloud", "temperature"),
}
CHANNEL_UNITS = {"u10": "m/s", "v10": "m/s", "radiation": "W/m2", "cloud": "1", "temperature": "K"}

TRAIN_YEARS = tuple(range(2017, 2023))
VALIDATION_YEARS = (2023,)
TEST_YEARS = (2024,)

WGRD_MAGIC = b"WGRD"
WGRD_VERSION = 1
_WGRD_HEADER = struct.Struct("<4sHHIIIQ")
_NAME_BYTES = 16

STATS_VERSION = 1


# ---------------------------------------------------------------------------
# time helpers

_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def to_epoch_hour(ts: str | datetime) -> int:
    """ISO-8601 timestamp (naive = UTC) on a whole hour -> epoch hour."""
    if isinstance(ts, str):
        text = ts.strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ValueError(f"timestamp {ts.isoformat()} is not on a whole hour")
    seconds = (ts - _EPOCH).total_seconds()
    return int(seconds // 3600)


def iso_hour(hour: int) -> str:
    return np.datetime_as_string(np.datetime64(int(hour), "h"), unit="h") + ":00:00Z"


def year_of(hour: int | np.ndarray) -> int | np.ndarray:
    years = np.asarray(hour, dtype="datetime64[h]").astype("datetime64[Y]").astype(int) + 1970
    return int(years) if np.ndim(years) == 0 else years


def hour_of_day(hours) -> np.ndarray:
    return np.mod(np.asarray(hours, dtype=np.int64), 24)


def day_start(hours) -> np.ndarray:
    h = np.asarray(hours, dtype=np.int64)
    return h - np.mod(h, 24)


# ---------------------------------------------------------------------------
# grid series and the WGRD format


@dataclass
class GridSeries:
    """Hourly stack of multi-channel weather maps, ``fields`` is T x C x H x W."""

    start_hour: int
    fields: np.ndarray
    channels: tuple[str, ...]

    def __post_init__(self):
        self.fields = np.asarray(self.fields, dtype=np.float32)
        self.channels = tuple(self.channels)
        if self.fields.ndim != 4:
            raise DataError(f"grid fields must be T x C x H x W, got shape {self.fields.shape}")
        if self.fields.shape[1] != len(self.channels):
            raise DataError(f"{self.fields.shape[1]} channels in data, {len(self.channels)} names declared")
        if len(set(self.channels)) != len(self.channels):
            raise DataError(f"duplicate channel names {self.channels}")
        for name in self.channels:
            if not name.isascii() or len(name.encode()) > _NAME_BYTES or not name:
                raise DataError(f"channel name {name!r} must be 1-{_NAME_BYTES} ASCII bytes")

    @property
    def times(self) -> np.ndarray:
        return self.start_hour + np.arange(self.fields.shape[0], dtype=np.int64)

    @property
    def end_hour(self) -> int:
        """Last covered hour (inclusive)."""
        return self.start_hour + self.fields.shape[0] - 1

    @property
    def units(self) -> tuple[str, ...]:
        return tuple(CHANNEL_UNITS.get(c, "") for c in self.channels)

    @property
    def variables(self) -> str:
        return variable_set_of(self.channels)

    def __len__(self) -> int:
        return self.fields.shape[0]


def variable_set_of(channels: Sequence[str]) -> str:
    for name, chans in VARIABLE_SETS.items():
        if tuple(channels) == chans:
            return name
    raise ConfigError(f"channels {tuple(channels)} match no known variable set {dict(VARIABLE_SETS)}")


def write_grid_file(series: GridSeries, path: str | Path) -> None:
    t, c, h, w = series.fields.shape
    header = _WGRD_HEADER.pack(WGRD_MAGIC, WGRD_VERSION, c, t, h, w, int(series.start_hour))
    names = b"".join(n.encode("ascii").ljust(_NAME_BYTES, b"\0") for n in series.channels)
    payload = np.ascontiguousarray(series.fields, dtype="<f4").tobytes()
    _atomic_write(Path(path), header + names + payload)


def load_grid_file(path: str | Path) -> GridSeries:
    raw = Path(path).read_bytes()
    if len(raw) < _WGRD_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the WGRD header")
    magic, version, c, t, h, w, start = _WGRD_HEADER.unpack_from(raw, 0)
    if magic != WGRD_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {WGRD_MAGIC!r}")
    if version != WGRD_VERSION:
        raise FormatError(f"{path}: unsupported WGRD version {version}")
    offset = _WGRD_HEADER.size
    names_end = offset + c * _NAME_BYTES
    expected = t * c * h * w
    if names_end > len(raw) or expected * 4 > len(raw) - names_end:
        raise CorruptionError(
            f"{path}: header declares {t}x{c}x{h}x{w} values but payload holds "
            f"{max(len(raw) - names_end, 0) // 4}"
        )
    if len(raw) - names_end != expected * 4:
        raise CorruptionError(f"{path}: {len(raw) - names_end - expected * 4} trailing bytes after payload")
    names = tuple(
        raw[offset + i * _NAME_BYTES: offset + (i + 1) * _NAME_BYTES].rstrip(b"\0").decode("ascii")
        for i in range(c)
    )
    fields = np.frombuffer(raw, dtype="<f4", count=expected, offset=names_end).reshape(t, c, h, w)
    return GridSeries(start_hour=int(start), fields=fields.astype(np.float32), channels=names)


def _atomic_write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        tmp.write_text(data, encoding="utf-8", newline="\n")
    else:
        tmp.write_bytes(data)
    tmp.replace(path)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# normalisation statistics


@dataclass
class NormalizationStats:
    channels: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    period_start: int
    period_end: int
    convention: str = "population"

    def __post_init__(self):
        self.channels = tuple(self.channels)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if np.any(self.std <= 0):
            raise DegenerateError("normalisation std must be positive for every channel")

    def to_text(self) -> str:
        lines = [
            f"# weathertokens normalization stats v{STATS_VERSION}",
            f"convention={self.convention}",
            f"source_start={iso_hour(self.period_start)}",
            f"source_end={iso_hour(self.period_end)}",
            "channel,mean,std",
        ]
        lines += [f"{c},{m!r},{s!r}" for c, m, s in zip(self.channels, self.mean.tolist(), self.std.tolist())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NormalizationStats":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("# weathertokens normalization stats v"):
            raise FormatError("not a normalization stats file")
        version = int(lines[0].rsplit("v", 1)[1])
        if version != STATS_VERSION:
            raise FormatError(f"unsupported stats version {version}")
        meta = dict(ln.split("=", 1) for ln in lines[1:4])
        rows = [ln.split(",") for ln in lines[5:]]
        return cls(
            channels=tuple(r[0] for r in rows),
            mean=[float(r[1]) for r in rows],
            std=[float(r[2]) for r in rows],
            period_start=to_epoch_hour(meta["source_start"]),
            period_end=to_epoch_hour(meta["source_end"]),
            convention=meta["convention"],
        )

    def save(self, path: str | Path) -> None:
        _atomic_write(Path(path), self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "NormalizationStats":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def compute_norm_stats(
    collection: Iterable[GridSeries], train_years: Sequence[int] = TRAIN_YEARS
) -> NormalizationStats:
    """Per-channel mean and population std over training-year frames only.

    Frames dated outside ``train_years`` are ignored, so the result does not
    depend on whether validation/test data are part of ``collection``.
    """
    years = set(int(y) for y in train_years)
    chunks: list[tuple[int, np.ndarray]] = []
    channels = None
    for series in collection:
        if channels is None:
            channels = series.channels
        elif series.channels != channels:
            raise ConfigError(f"channel mismatch: {series.channels} vs {channels}")
        keep = np.isin(year_of(series.times), list(years))
        if keep.any():
            idx = np.flatnonzero(keep)
            chunks.append((int(series.times[idx[0]]), series.fields[idx]))
    if not chunks:
        raise ConfigError(f"no frames fall within the training years {sorted(years)}")
    chunks.sort(key=lambda item: item[0])
    c = chunks[0][1].shape[1]
    count = 0
    total = np.zeros(c)
    for _, f in chunks:
        total += f.astype(np.float64).sum(axis=(0, 2, 3))
        count += f.shape[0] * f.shape[2] * f.shape[3]
    mean = total / count
    sq = np.zeros(c)
    for _, f in chunks:
        d = f.astype(np.float64) - mean[None, :, None, None]
        sq += (d * d).sum(axis=(0, 2, 3))
    std = np.sqrt(sq / count)
    bad = [channels[i] for i in np.flatnonzero(std <= 1e-12 * np.maximum(1.0, np.abs(mean)))]
    if bad:
        raise DegenerateError(f"zero-variance channel(s) in training data: {', '.join(bad)}")
    start = chunks[0][0]
    end = max(t0 + f.shape[0] - 1 for t0, f in chunks)
    return NormalizationStats(channels, mean, std, start, end)


def normalize_fields(fields, stats: NormalizationStats, channels: Sequence[str] | None = None) -> np.ndarray:
    """(x - mean) / std per channel; channel axis is -3."""
    if isinstance(fields, GridSeries):
        channels, fields = fields.channels, fields.fields
    arr = np.asarray(fields)
    if channels is not None and tuple(channels) != stats.channels:
        raise ConfigError(f"stats channels {stats.channels} do not match series channels {tuple(channels)}")
    if arr.shape[-3] != len(stats.channels):
        raise ConfigError(f"{arr.shape[-3]} channels in data, stats cover {len(stats.channels)}")
    m = stats.mean[:, None, None]
    s = stats.std[:, None, None]
    return ((arr - m) / s).astype(np.float32)


def denormalize_fields(fields, stats: NormalizationStats) -> np.ndarray:
    arr = np.asarray(fields, dtype=np.float64)
    return (arr * stats.std[:, None, None] + stats.mean[:, None, None]).astype(np.float32)


# ---------------------------------------------------------------------------
# hourly power series, capacity


@dataclass
class HourlySeries:
    """Sparse hourly series keyed by epoch hour (strictly increasing)."""

    hours: np.ndarray
    values: np.ndarray
    kind: str = "production"

    def __post_init__(self):
        self.hours = np.asarray(self.hours, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.hours.shape != self.values.shape or self.hours.ndim != 1:
            raise DataError("hours and values must be equal-length vectors")
        if self.hours.size > 1 and np.any(np.diff(self.hours) <= 0):
            raise DataError("hourly series timestamps must be strictly increasing")

    def __len__(self) -> int:
        return self.hours.size

    def lookup(self, hours) -> tuple[np.ndarray, np.ndarray]:
        """Values at ``hours`` and a boolean mask of which hours were present."""
        hours = np.asarray(hours, dtype=np.int64)
        if not self.hours.size:
            return np.full(hours.shape, np.nan), np.zeros(hours.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(self.hours, hours), self.hours.size - 1)
        found = self.hours[pos] == hours
        return np.where(found, self.values[pos], np.nan), found


@dataclass
class CapacitySeries:
    """Installed capacity from yearly anchors, linearly interpolated per hour."""

    anchor_hours: np.ndarray
    anchor_mw: np.ndarray

    def __post_init__(self):
        self.anchor_hours = np.asarray(self.anchor_hours, dtype=np.int64)
        self.anchor_mw = np.asarray(self.anchor_mw, dtype=np.float64)

    def at(self, hours, strict: bool = False) -> np.ndarray:
        """Capacity at ``hours``; constant beyond the end anchors.

        With ``strict`` an hour before the first anchor is an error rather
        than a constant extrapolation.
        """
        h = np.asarray(hours, dtype=np.int64)
        if strict and np.any(h < self.anchor_hours[0]):
            first = int(h[h < self.anchor_hours[0]].min())
            raise DataError(f"capacity not defined at {iso_hour(first)} (first anchor {iso_hour(self.anchor_hours[0])})")
        return np.interp(h.astype(np.float64), self.anchor_hours.astype(np.float64), self.anchor_mw)

    @property
    def hours(self) -> np.ndarray:
        return np.arange(self.anchor_hours[0], self.anchor_hours[-1] + 1, dtype=np.int64)

    @property
    def hourly(self) -> np.ndarray:
        return self.at(self.hours)


def interpolate_capacity(anchors) -> CapacitySeries:
    """Build a :class:`CapacitySeries` from (timestamp, MW) anchors or an HourlySeries."""
    if isinstance(anchors, HourlySeries):
        hours, mw = anchors.hours, anchors.values
    else:
        pairs = [(a if isinstance(a, (int, np.integer)) else to_epoch_hour(a), float(v)) for a, v in anchors]
        hours = np.array([p[0] for p in pairs], dtype=np.int64)
        mw = np.array([p[1] for p in pairs])
    if hours.size < 2:
        raise DataError("capacity interpolation needs at least two anchors")
    if np.any(np.diff(hours) <= 0):
        raise DataError("capacity anchors must have strictly increasing timestamps")
    if np.any(mw <= 0):
        bad = int(hours[np.argmax(mw <= 0)])
        raise DataError(f"non-positive capacity anchor at {iso_hour(bad)}")
    return CapacitySeries(hours, mw)


def normalize_target(production_mw, capacity_mw, tolerance: float = 1e-6) -> tuple[np.ndarray, int]:
    """Production / capacity clipped to [0, 1], plus the number of clipped values.

    Values exceeding capacity by no more than ``tolerance`` (relative) are
    treated as rounding and clipped silently.
    """
    prod = np.asarray(production_mw, dtype=np.float64)
    cap = np.asarray(capacity_mw, dtype=np.float64)
    if np.any(cap <= 0):
        raise DataError("capacity must be positive to normalise production")
    frac = prod / cap
    out_of_range = int(np.count_nonzero((frac > 1.0 + tolerance) | (frac < -tolerance)))
    if out_of_range:
        log.warning("%d production value(s) outside [0, capacity] clipped", out_of_range)
    return np.clip(frac, 0.0, 1.0), out_of_range


# ---------------------------------------------------------------------------
# CSV import/export

CSV_HEADER = ("timestamp_utc", "value_mw")


def import_entsoe_csv(path: str | Path, kind: str = "production") -> HourlySeries:
    """Read a ``timestamp_utc,value_mw`` file into an hourly MW series."""
    if kind not in ("production", "forecast", "capacity"):
        raise ConfigError(f"unknown series kind {kind!r}")
    hours: list[int] = []
    values: list[float] = []
    seen: dict[int, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                if len(row) != 2:
                    raise ValueError(f"expected 2 columns, got {len(row)}")
                hour = to_epoch_hour(row[0])
                value = float(row[1])
            except ValueError as exc:
                raise DataError(f"{path}: line {lineno}: cannot parse {row!r} ({exc})") from None
            if not np.isfinite(value):
                raise DataError(f"{path}: line {lineno}: non-finite value")
            if hour in seen:
                raise DataError(f"{path}: line {lineno}: duplicate timestamp {iso_hour(hour)} (first at line {seen[hour]})")
            if kind == "capacity" and value <= 0:
                raise DataError(f"{path}: line {lineno}: capacity must be positive")
            if value < 0:
                raise DataError(f"{path}: line {lineno}: negative {kind} value {value}")
            seen[hour] = lineno
            hours.append(hour)
            values.append(value)
    order = np.argsort(hours, kind="stable")
    return HourlySeries(np.array(hours, dtype=np.int64)[order], np.array(values)[order], kind=kind)


def write_entsoe_csv(path: str | Path, hours, values, header: Sequence[str] = CSV_HEADER) -> None:
    rows = [",".join(header)]
    rows += [f"{iso_hour(h)},{v:.6f}" for h, v in zip(np.asarray(hours).tolist(), np.asarray(values).tolist())]
    _atomic_write(Path(path), "\n".join(rows) + "\n")


# ---------------------------------------------------------------------------
# samples and splits


@dataclass
class ForecastSample:
    start_hour: int
    weather: np.ndarray  # horizon x C x H x W (normalised when stats were given)
    target: np.ndarray  # horizon capacity fractions in [0, 1]
    production_mw: np.ndarray
    capacity_mw: np.ndarray

    @property
    def hours(self) -> np.ndarray:
        return self.start_hour + np.arange(self.target.size, dtype=np.int64)

    @property
    def year(self) -> int:
        return year_of(self.start_hour)


@dataclass
class AssemblyReport:
    candidates: int = 0
    dropped: list[tuple[int, str]] = field(default_factory=list)
    clipped_targets: int = 0


def _merge_contiguous(grids: Sequence[GridSeries]) -> list[GridSeries]:
    merged: list[GridSeries] = []
    for g in sorted(grids, key=lambda s: s.start_hour):
        if merged and merged[-1].channels != g.channels:
            raise ConfigError(f"channel mismatch between grid files: {merged[-1].channels} vs {g.channels}")
        if merged and g.start_hour <= merged[-1].end_hour:
            raise DataError(f"overlapping grid files at {iso_hour(g.start_hour)}")
        if merged and g.start_hour == merged[-1].end_hour + 1:
            prev = merged.pop()
            g = GridSeries(prev.start_hour, np.concatenate([prev.fields, g.fields]), prev.channels)
        merged.append(g)
    return merged


def assemble_samples(
    grids: Sequence[GridSeries],
    production: HourlySeries,
    capacity: CapacitySeries,
    horizon: int = 45,
    start_hour: int = 3,
    stats: NormalizationStats | None = None,
) -> tuple[list[ForecastSample], AssemblyReport]:
    """One sample per day whose ``horizon``-hour window starting at ``start_hour``
    fits inside a contiguous weather block; windows with any missing target hour
    are dropped (never imputed) and recorded in the report."""
    report = AssemblyReport()
    samples: list[ForecastSample] = []
    for block in _merge_contiguous(grids):
        first_day = int(day_start(block.start_hour))
        last_start = block.end_hour - horizon + 1
        for day in range(first_day, last_start + 1, 24):
            t0 = day + start_hour
            if t0 < block.start_hour or t0 > last_start:
                continue
            report.candidates += 1
            hours = t0 + np.arange(horizon, dtype=np.int64)
            prod, found = production.lookup(hours)
            if not found.all():
                missing = iso_hour(int(hours[np.argmin(found)]))
                report.dropped.append((t0, f"missing target hour {missing}"))
                log.info("dropping sample %s: missing target hour %s", iso_hour(t0), missing)
                continue
            cap = capacity.at(hours)
            target, clipped = normalize_target(prod, cap)
            report.clipped_targets += clipped
            weather = block.fields[t0 - block.start_hour: t0 - block.start_hour + horizon]
            if stats is not None:
                weather = normalize_fields(weather, stats, block.channels)
            samples.append(ForecastSample(t0, np.array(weather, dtype=np.float32), target, prod, cap))
    return samples, report


@dataclass
class DatasetSplit:
    train: list[ForecastSample] = field(default_factory=list)
    validation: list[ForecastSample] = field(default_factory=list)
    test: list[ForecastSample] = field(default_factory=list)
    unassigned: list[ForecastSample] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        return {k: len(getattr(self, k)) for k in ("train", "validation", "test", "unassigned")}

    def get(self, name: str) -> list[ForecastSample]:
        if name not in ("train", "validation", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)


def split_by_year(
    samples: Iterable[ForecastSample],
    train_years: Sequence[int] = TRAIN_YEARS,
    validation_years: Sequence[int] = VALIDATION_YEARS,
    test_years: Sequence[int] = TEST_YEARS,
) -> DatasetSplit:
    split = DatasetSplit()
    for s in samples:
        y = s.year
        if y in train_years:
            split.train.append(s)
        elif y in validation_years:
            split.validation.append(s)
        elif y in test_years:
            split.test.append(s)
        else:
            log.warning("sample starting %s lies outside the split years", iso_hour(s.start_hour))
            split.unassigned.append(s)
    log.info("split counts: %s", split.counts())
    return split


def stack_samples(samples: Sequence[ForecastSample]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays: weather N x T x C x H x W and targets N x T."""
    if not samples:
        raise ConfigError("cannot stack an empty sample collection")
    return (np.stack([s.weather for s in samples]).astype(np.float32),
            np.stack([s.target for s in samples]).astype(np.float32))


# ---------------------------------------------------------------------------
# dataset directories


@dataclass
class Dataset:
    grids: list[GridSeries]
    production: HourlySeries
    capacity: CapacitySeries
    variables: str
    files: list[Path]


def load_dataset_dir(directory: str | Path) -> Dataset:
    """Load ``*.wgrd`` grids plus ``production.csv`` and ``capacity.csv``."""
    directory = Path(directory)
    grid_files = sorted(directory.glob("*.wgrd"))
    if not grid_files:
        raise DataError(f"{directory}: no .wgrd files found")
    for name in ("production.csv", "capacity.csv"):
        if not (directory / name).is_file():
            raise DataError(f"{directory}: missing {name}")
    grids = [load_grid_file(p) for p in grid_files]
    variables = {g.variables for g in grids}
    if len(variables) != 1:
        raise DataError(f"{directory}: grid files mix variable sets {sorted(variables)}")
    production = import_entsoe_csv(directory / "production.csv", "production")
    capacity = interpolate_capacity(import_entsoe_csv(directory / "capacity.csv", "capacity"))
    files = grid_files + [directory / "production.csv", directory / "capacity.csv"]
    return Dataset(grids, production, capacity, variables.pop(), files)
