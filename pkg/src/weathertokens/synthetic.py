"""Seeded synthetic weather maps with a known field-to-power oracle.

Fields are random Fourier features (Gaussian spectrum, wavelengths no
shorter than the length scale) whose coefficients follow an hourly AR(1)
process, plus a spatially uniform AR(1) component per channel. Targets are
computed from spatial means by the oracle functions below, so they are
learnable through the encoder's global average pooling.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    VARIABLE_SETS,
    GridSeries,
    file_digest,
    hour_of_day,
    interpolate_capacity,
    to_epoch_hour,
    write_entsoe_csv,
    write_grid_file,
)
from .errors import ConfigError

RATED_WIND_SPEED = 12.0  # m/s
REFERENCE_IRRADIANCE = 1000.0  # W/m2
REFERENCE_TEMPERATURE = 298.15  # K
PERSISTENCE = 0.9

# first calendar day of each split block
BLOCK_STARTS = {"train": "2017-01-01T00:00", "validation": "2023-01-01T00:00", "test": "2024-01-01T00:00"}
MAX_TRAIN_DAYS = 6 * 365

DEFAULT_CAPACITY = {
    "wind": [(f"{y}-01-01T00:00", 1000.0 + 25.0 * (y - 2017)) for y in range(2017, 2026)],
    "solar": [(f"{y}-01-01T00:00", 700.0 + 60.0 * (y - 2017)) for y in range(2017, 2026)],
}


@dataclass(frozen=True)
class SyntheticConfig:
    seed: int = 0
    days: int = 60
    grid: tuple[int, int] = (16, 16)
    variables: str = "wind"
    length_scale: float = 4.0
    diurnal_amplitude: float = 1.0
    n_modes: int = 48
    train_days: int | None = None
    validation_days: int | None = None
    test_days: int | None = None

    def __post_init__(self):
        h, w = self.grid
        if h < 4 or w < 4:
            raise ConfigError(f"grid {h}x{w} below the minimum of 4x4")
        if self.days < 1:
            raise ConfigError("days must be >= 1")
        if self.variables not in VARIABLE_SETS:
            raise ConfigError(f"variables must be one of {sorted(VARIABLE_SETS)}")
        if self.length_scale <= 0:
            raise ConfigError("length_scale must be positive")
        if self.n_modes < 1:
            raise ConfigError("n_modes must be >= 1")
        train, val, test = self.split_days()
        if min(train, val, test) < 0 or train + val + test != self.days:
            raise ConfigError("split day counts must be non-negative and sum to days")
        if train > MAX_TRAIN_DAYS:
            raise ConfigError(f"at most {MAX_TRAIN_DAYS} training days fit the 2017-2022 calendar")
        if max(val, test) > 364:
            raise ConfigError("validation/test blocks must fit inside one calendar year")

    def split_days(self) -> tuple[int, int, int]:
        """Sample days per block: defaults to an 80/10/10 split of ``days``."""
        if self.train_days is not None or self.validation_days is not None or self.test_days is not None:
            return (self.train_days or 0, self.validation_days or 0, self.test_days or 0)
        held = round(self.days * 0.1) if self.days >= 3 else 0
        return self.days - 2 * held, held, held


def _ar1(rng: np.random.Generator, n: int, shape: tuple[int, ...], phi: float = PERSISTENCE) -> np.ndarray:
    out = np.empty((n, *shape))
    out[0] = rng.standard_normal(shape)
    noise = rng.standard_normal((n - 1, *shape)) * np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        out[t] = phi * out[t - 1] + noise[t - 1]
    return out


def smooth_field(rng: np.random.Generator, hours: int, grid: tuple[int, int], length_scale: float, n_modes: int) -> np.ndarray:
    """Unit-variance random Fourier field, hours x H x W, AR(1) in time."""
    h, w = grid
    k = rng.standard_normal((n_modes, 2)) / length_scale
    kmax = 2 * np.pi / length_scale
    too_short = np.linalg.norm(k, axis=1) > kmax
    while too_short.any():
        k[too_short] = rng.standard_normal((int(too_short.sum()), 2)) / length_scale
        too_short = np.linalg.norm(k, axis=1) > kmax
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    phase = k[:, 0:1] * yy.reshape(1, -1) + k[:, 1:2] * xx.reshape(1, -1)  # modes x HW
    basis = np.concatenate([np.cos(phase), np.sin(phase)]) / np.sqrt(n_modes)
    coeffs = _ar1(rng, hours, (2 * n_modes,))
    return (coeffs @ basis).reshape(hours, h, w)


def daylight_factor(hours) -> np.ndarray:
    """Half-sine between 06 and 18 UTC, exactly zero otherwise."""
    hod = hour_of_day(hours).astype(np.float64)
    day = (hod > 6) & (hod < 18)
    return np.where(day, np.sin(np.pi * (hod - 6.0) / 12.0), 0.0)


def generate_fields(config: SyntheticConfig, start_hour: int | None = None, hours: int | None = None, block: int = 0) -> GridSeries:
    """Weather maps for one contiguous block; identical arguments give identical output."""
    if start_hour is None:
        start_hour = to_epoch_hour(BLOCK_STARTS["train"])
    if hours is None:
        hours = (config.days + 1) * 24
    rng = np.random.default_rng([config.seed, block])
    times = start_hour + np.arange(hours, dtype=np.int64)
    hod = hour_of_day(times).astype(np.float64)
    grid = tuple(config.grid)
    amp = config.diurnal_amplitude

    def component(spatial_sd: float, uniform_sd: float) -> np.ndarray:
        local = smooth_field(rng, hours, grid, config.length_scale, config.n_modes)
        uniform = _ar1(rng, hours, ())
        return uniform_sd * uniform[:, None, None] + spatial_sd * local

    if config.variables == "wind":
        diurnal = 1.5 * amp * np.cos(2 * np.pi * (hod - 15.0) / 24.0)
        u = component(3.0, 5.0) + diurnal[:, None, None]
        v = component(3.0, 5.0)
        fields = np.stack([u, v], axis=1)
    else:
        light = daylight_factor(times)
        clear = np.clip(0.9 + 0.1 * component(1.0, 0.5), 0.0, 1.0)
        radiation = REFERENCE_IRRADIANCE * light[:, None, None] * clear
        cloud = 1.0 / (1.0 + np.exp(-(component(1.0, 1.5) - 0.5)))
        temperature = 291.0 + component(1.5, 4.0) + 6.0 * amp * np.sin(2 * np.pi * (hod - 9.0) / 24.0)[:, None, None]
        fields = np.stack([radiation, cloud, temperature], axis=1)
    return GridSeries(int(start_hour), fields.astype(np.float32), VARIABLE_SETS[config.variables])


def oracle_wind_power(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Capacity fraction per hour from T x H x W wind components (cube law up to rated speed)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    speed = np.sqrt(u * u + v * v).mean(axis=(-2, -1))
    return np.clip((speed / RATED_WIND_SPEED) ** 3, 0.0, 1.0)


def oracle_solar_power(radiation: np.ndarray, cloud: np.ndarray, temperature: np.ndarray) -> np.ndarray:
    """Capacity fraction per hour from irradiance, cloud fraction and temperature maps."""
    r = np.asarray(radiation, dtype=np.float64).mean(axis=(-2, -1))
    c = np.asarray(cloud, dtype=np.float64).mean(axis=(-2, -1))
    t = np.asarray(temperature, dtype=np.float64).mean(axis=(-2, -1))
    frac = (r / REFERENCE_IRRADIANCE) * (1.0 - 0.75 * c ** 3) * (1.0 - 0.004 * np.maximum(0.0, t - REFERENCE_TEMPERATURE))
    return np.clip(frac, 0.0, 1.0)


def oracle_power(series: GridSeries) -> np.ndarray:
    f = series.fields
    if series.variables == "wind":
        return oracle_wind_power(f[:, 0], f[:, 1])
    return oracle_solar_power(f[:, 0], f[:, 1], f[:, 2])


@dataclass
class GeneratedDataset:
    directory: Path
    grid_files: list[Path]
    production_csv: Path
    capacity_csv: Path

    def digests(self) -> dict[str, str]:
        paths = [*self.grid_files, self.production_csv, self.capacity_csv]
        return {p.name: file_digest(p) for p in paths}


def generate_dataset(config: SyntheticConfig, out_dir: str | Path, capacity_anchors=None) -> GeneratedDataset:
    """Write one WGRD file per split block plus production and capacity CSVs.

    Training days start on 2017-01-01, validation on 2023-01-01 and test on
    2024-01-01; each block of n sample days covers n + 1 calendar days so the
    last 45-hour window is complete.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    anchors = capacity_anchors or DEFAULT_CAPACITY[config.variables]
    capacity = interpolate_capacity(anchors)
    grid_files: list[Path] = []
    prod_hours: list[np.ndarray] = []
    prod_mw: list[np.ndarray] = []
    for block, (name, n_days) in enumerate(zip(("train", "validation", "test"), config.split_days())):
        if n_days == 0:
            continue
        start = to_epoch_hour(BLOCK_STARTS[name])
        series = generate_fields(config, start_hour=start, hours=(n_days + 1) * 24, block=block)
        path = out / f"{config.variables}_{name}.wgrd"
        write_grid_file(series, path)
        grid_files.append(path)
        prod_hours.append(series.times)
        prod_mw.append(oracle_power(series) * capacity.at(series.times))
    production_csv = out / "production.csv"
    capacity_csv = out / "capacity.csv"
    write_entsoe_csv(production_csv, np.concatenate(prod_hours), np.concatenate(prod_mw))
    write_entsoe_csv(capacity_csv, capacity.anchor_hours, capacity.anchor_mw)
    return GeneratedDataset(out, grid_files, production_csv, capacity_csv)
