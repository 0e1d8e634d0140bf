"""Building-level consumption data.

CSV ingestion, min-max normalization, sliding-window sample construction,
chronological train/test splitting, daily-mean summaries for clustering, and
a deterministic synthetic population generator for desk-scale runs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestError

logger = logging.getLogger(__name__)

INTERVAL_MINUTES = 15
SAMPLES_PER_DAY = 96
DEFAULT_SUMMARY_DAYS = 273
DEFAULT_LOOKBACK = 8
DEFAULT_HORIZON = 4
DEFAULT_TRAIN_FRACTION = 0.75

_SYNTH_START = datetime(2018, 1, 1, tzinfo=timezone.utc)


@dataclass(frozen=True)
class ConsumptionSeries:
    """One building's raw kWh readings on a uniform 15-minute grid."""

    building_id: str
    start: datetime
    values: np.ndarray
    interval_minutes: int = INTERVAL_MINUTES

    def __post_init__(self):
        if self.interval_minutes != INTERVAL_MINUTES:
            raise DataError(
                f"series '{self.building_id}': interval must be "
                f"{INTERVAL_MINUTES} minutes, got {self.interval_minutes}"
            )
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1 or vals.size == 0:
            raise DataError(f"series '{self.building_id}': empty value sequence")
        if not np.all(np.isfinite(vals)):
            raise DataError(f"series '{self.building_id}': non-finite reading")
        if np.any(vals < 0.0):
            raise DataError(f"series '{self.building_id}': negative kWh reading")
        object.__setattr__(self, "values", vals)

    def __len__(self):
        return self.values.size

    @property
    def full_days(self) -> int:
        return self.values.size // SAMPLES_PER_DAY


@dataclass(frozen=True)
class NormParams:
    """Min-max scaling bounds fitted on a building's full series."""

    min_kwh: float
    max_kwh: float

    def __post_init__(self):
        if not (math.isfinite(self.min_kwh) and math.isfinite(self.max_kwh)):
            raise DataError("normalization bounds must be finite")
        if self.max_kwh < self.min_kwh:
            raise DataError("normalization max below min")

    @property
    def span(self) -> float:
        return self.max_kwh - self.min_kwh

    def normalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if self.span == 0.0:
            return np.zeros_like(values)
        return (values - self.min_kwh) / self.span

    def denormalize(self, values: np.ndarray) -> np.ndarray:
        # span == 0 collapses every output to min_kwh, inverting the
        # all-zeros encoding used for constant series.
        return np.asarray(values, dtype=np.float64) * self.span + self.min_kwh


@dataclass(frozen=True)
class WindowedDataset:
    """Normalized (input window, target window) sample pairs for one client.

    Row i covers series offsets [i, i+lookback) as input and
    [i+lookback, i+lookback+horizon) as target; rows advance with stride 1.
    """

    building_id: str
    inputs: np.ndarray
    targets: np.ndarray
    norm: NormParams

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        targets = np.asarray(self.targets, dtype=np.float64)
        if inputs.ndim != 2 or targets.ndim != 2:
            raise DataError(f"dataset '{self.building_id}': windows must be 2-D")
        if inputs.shape[0] != targets.shape[0]:
            raise DataError(
                f"dataset '{self.building_id}': input rows {inputs.shape[0]} "
                f"!= target rows {targets.shape[0]}"
            )
        for name, arr in (("inputs", inputs), ("targets", targets)):
            if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
                raise DataError(
                    f"dataset '{self.building_id}': {name} outside [0, 1]"
                )
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "targets", targets)

    @property
    def n_samples(self) -> int:
        return self.inputs.shape[0]

    @property
    def lookback(self) -> int:
        return self.inputs.shape[1]

    @property
    def horizon(self) -> int:
        return self.targets.shape[1]

    def rows(self, start: int, stop: int) -> "WindowedDataset":
        return WindowedDataset(
            building_id=self.building_id,
            inputs=self.inputs[start:stop],
            targets=self.targets[start:stop],
            norm=self.norm,
        )


@dataclass(frozen=True)
class SummaryVector:
    """Per-building daily-mean kWh over the clustering period."""

    building_id: str
    daily_means: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.daily_means, dtype=np.float64)
        if means.ndim != 1 or means.size == 0:
            raise DataError(f"summary '{self.building_id}': empty vector")
        if not np.all(np.isfinite(means)) or np.any(means < 0.0):
            raise DataError(f"summary '{self.building_id}': invalid entries")
        object.__setattr__(self, "daily_means", means)

    def __len__(self):
        return self.daily_means.size


def _parse_timestamp(text: str, row: int) -> datetime:
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    try:
        ts = datetime.fromisoformat(text)
    except ValueError as exc:
        raise IngestError(f"bad timestamp {text!r}: {exc}", row=row) from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def ingest_csv(path) -> ConsumptionSeries:
    """Parse one building's ``timestamp,kwh`` CSV into a ConsumptionSeries.

    Timestamps must be ISO-8601, strictly increasing at exact 15-minute
    spacing; readings must be finite and non-negative. Violations raise
    IngestError naming the offending data row (1-based, header excluded).
    """
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"input file not found: {path}")
    step = timedelta(minutes=INTERVAL_MINUTES)
    values: list[float] = []
    prev_ts: datetime | None = None
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: no header line")
        cols = [c.strip().lower() for c in header]
        if cols[:2] != ["timestamp", "kwh"]:
            raise IngestError(f"{path}: header must be 'timestamp,kwh', got {header!r}")
        for row_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) < 2:
                raise IngestError(f"{path}: expected 'timestamp,kwh'", row=row_no)
            ts = _parse_timestamp(row[0], row_no)
            try:
                kwh = float(row[1])
            except ValueError:
                raise IngestError(
                    f"{path}: bad kWh value {row[1]!r}", row=row_no
                ) from None
            if not math.isfinite(kwh):
                raise IngestError(f"{path}: non-finite kWh value", row=row_no)
            if kwh < 0.0:
                raise IngestError(f"{path}: negative kWh value {kwh}", row=row_no)
            if prev_ts is not None:
                delta = ts - prev_ts
                if delta == timedelta(0):
                    raise IngestError(f"{path}: duplicate timestamp {ts}", row=row_no)
                if delta != step:
                    raise IngestError(
                        f"{path}: expected {prev_ts + step}, got {ts}", row=row_no
                    )
            elif values:
                raise IngestError(f"{path}: internal ordering fault", row=row_no)
            if prev_ts is None:
                start = ts
            prev_ts = ts
            values.append(kwh)
    if not values:
        raise IngestError(f"{path}: no samples")
    return ConsumptionSeries(
        building_id=path.stem, start=start, values=np.asarray(values)
    )


def minmax_normalize(series: ConsumptionSeries) -> tuple[np.ndarray, NormParams]:
    """Scale a series into [0, 1]; constant series map to all zeros."""
    norm = NormParams(float(series.values.min()), float(series.values.max()))
    return norm.normalize(series.values), norm


def make_windows(values: np.ndarray, lookback: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Slide a (lookback + horizon) window with stride 1 over a sequence.

    Returns (inputs, targets) with max(0, len - lookback - horizon + 1) rows.
    """
    if lookback < 1 or horizon < 1:
        raise ValueError("lookback and horizon must be >= 1")
    values = np.asarray(values, dtype=np.float64)
    width = lookback + horizon
    n = max(0, values.size - width + 1)
    if n == 0:
        return (
            np.empty((0, lookback), dtype=np.float64),
            np.empty((0, horizon), dtype=np.float64),
        )
    windows = np.lib.stride_tricks.sliding_window_view(values, width)
    return windows[:, :lookback].copy(), windows[:, lookback:].copy()


def windowed_dataset(
    series: ConsumptionSeries,
    lookback: int = DEFAULT_LOOKBACK,
    horizon: int = DEFAULT_HORIZON,
) -> WindowedDataset:
    """Normalize a series and window it into supervised samples."""
    normalized, norm = minmax_normalize(series)
    inputs, targets = make_windows(normalized, lookback, horizon)
    return WindowedDataset(
        building_id=series.building_id, inputs=inputs, targets=targets, norm=norm
    )


def train_test_split(
    ds: WindowedDataset, train_fraction: float = DEFAULT_TRAIN_FRACTION
) -> tuple[WindowedDataset, WindowedDataset]:
    """Chronological split: first floor(n * fraction) rows train, rest test."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(math.floor(ds.n_samples * train_fraction))
    train = ds.rows(0, n_train)
    test = ds.rows(n_train, ds.n_samples)
    if train.n_samples == 0 or test.n_samples == 0:
        logger.warning(
            "split of '%s' left an empty side (train=%d, test=%d)",
            ds.building_id,
            train.n_samples,
            test.n_samples,
        )
    return train, test


def consumption_summary(
    series: ConsumptionSeries, period_days: int = DEFAULT_SUMMARY_DAYS
) -> SummaryVector:
    """Daily-mean kWh vector over the first ``period_days`` days."""
    if period_days < 1:
        raise ValueError("period_days must be >= 1")
    needed = period_days * SAMPLES_PER_DAY
    if len(series) < needed:
        raise DataError(
            f"summary for '{series.building_id}' needs {period_days} days "
            f"({needed} samples); only {series.full_days} full days "
            f"({len(series)} samples) available"
        )
    blocks = series.values[:needed].reshape(period_days, SAMPLES_PER_DAY)
    return SummaryVector(
        building_id=series.building_id, daily_means=blocks.mean(axis=1)
    )


def daily_means(series: ConsumptionSeries) -> np.ndarray:
    """Daily-mean kWh for every complete day available in the series."""
    days = series.full_days
    if days == 0:
        return np.empty(0, dtype=np.float64)
    blocks = series.values[: days * SAMPLES_PER_DAY].reshape(days, SAMPLES_PER_DAY)
    return blocks.mean(axis=1)


@dataclass(frozen=True)
class ClientClassSpec:
    """One synthetic consumer class: shared shape, per-client seeded variation."""

    base_kwh: float
    n_clients: int
    amplitude: float = 0.0
    week_factor: float = 0.0
    noise_sigma: float = 0.0
    scale_jitter: float = 0.0
    name: str = ""

    def __post_init__(self):
        if self.base_kwh <= 0.0:
            raise ConfigError(f"class '{self.name}': base_kwh must be positive")
        if self.n_clients < 1:
            raise ConfigError(f"class '{self.name}': n_clients must be >= 1")
        if self.amplitude < 0.0 or self.noise_sigma < 0.0:
            raise ConfigError(f"class '{self.name}': negative amplitude or sigma")
        if not 0.0 <= self.scale_jitter < 1.0:
            raise ConfigError(f"class '{self.name}': scale_jitter must be in [0, 1)")


_CLASS_KEYS = {
    "base_kwh",
    "n_clients",
    "amplitude",
    "week_factor",
    "noise_sigma",
    "scale_jitter",
    "name",
}


@dataclass(frozen=True)
class GeneratorConfig:
    """Synthetic population: sinusoidal daily shape, weekly modulation, noise."""

    classes: tuple[ClientClassSpec, ...]
    days: int = 30
    seed: int = 0

    def __post_init__(self):
        if not self.classes:
            raise ConfigError("generator needs at least one client class")
        if self.days < 1:
            raise ConfigError("generator days must be >= 1")
        if self.seed < 0:
            raise ConfigError("generator seed must be non-negative")
        named = tuple(
            cls if cls.name else _with_name(cls, f"class{i}")
            for i, cls in enumerate(self.classes)
        )
        names = [cls.name for cls in named]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate class names: {names}")
        object.__setattr__(self, "classes", named)

    @staticmethod
    def from_dict(raw: dict) -> "GeneratorConfig":
        if not isinstance(raw, dict):
            raise ConfigError("generator config must be an object")
        unknown = set(raw) - {"classes", "days", "seed"}
        if unknown:
            raise ConfigError(f"unknown generator keys: {sorted(unknown)}")
        classes_raw = raw.get("classes")
        if not isinstance(classes_raw, list) or not classes_raw:
            raise ConfigError("generator config needs a non-empty 'classes' list")
        classes = []
        for i, item in enumerate(classes_raw):
            if not isinstance(item, dict):
                raise ConfigError(f"class entry {i} must be an object")
            unknown = set(item) - _CLASS_KEYS
            if unknown:
                raise ConfigError(f"unknown class keys: {sorted(unknown)}")
            if "base_kwh" not in item or "n_clients" not in item:
                raise ConfigError(f"class entry {i} needs base_kwh and n_clients")
            classes.append(ClientClassSpec(**item))
        return GeneratorConfig(
            classes=tuple(classes),
            days=int(raw.get("days", 30)),
            seed=int(raw.get("seed", 0)),
        )


def _with_name(cls: ClientClassSpec, name: str) -> ClientClassSpec:
    return ClientClassSpec(
        base_kwh=cls.base_kwh,
        n_clients=cls.n_clients,
        amplitude=cls.amplitude,
        week_factor=cls.week_factor,
        noise_sigma=cls.noise_sigma,
        scale_jitter=cls.scale_jitter,
        name=name,
    )


def synth_population(
    config: GeneratorConfig, seed: int | None = None
) -> list[tuple[ConsumptionSeries, str]]:
    """Generate one deterministic series per client; returns (series, class tag).

    Client j of class c draws from an rng seeded by (seed, c, j), so the
    population is reproducible and independent of generation order.
    """
    base_seed = config.seed if seed is None else seed
    if base_seed < 0:
        raise ConfigError("seed must be non-negative")
    n = config.days * SAMPLES_PER_DAY
    t = np.arange(n, dtype=np.float64)
    day_wave = np.sin(2.0 * np.pi * t / SAMPLES_PER_DAY)
    week_wave = np.sin(2.0 * np.pi * t / (SAMPLES_PER_DAY * 7))
    population: list[tuple[ConsumptionSeries, str]] = []
    for ci, cls in enumerate(config.classes):
        shape = cls.base_kwh + cls.amplitude * day_wave * (
            1.0 + cls.week_factor * week_wave
        )
        for j in range(cls.n_clients):
            rng = np.random.default_rng(np.random.SeedSequence([base_seed, ci, j]))
            scale = 1.0 + cls.scale_jitter * rng.uniform(-1.0, 1.0)
            noise = rng.normal(0.0, cls.noise_sigma, size=n)
            values = np.maximum(scale * shape + noise, 0.0)
            series = ConsumptionSeries(
                building_id=f"{cls.name}-{j:03d}", start=_SYNTH_START, values=values
            )
            population.append((series, cls.name))
    return population


@dataclass(frozen=True)
class ManifestEntry:
    """One building listed in a dataset manifest."""

    building_id: str
    file: str
    state: str = ""


def write_series_csv(series: ConsumptionSeries, path) -> None:
    path = Path(path)
    step = timedelta(minutes=series.interval_minutes)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["timestamp", "kwh"])
        ts = series.start
        for v in series.values:
            writer.writerow([ts.isoformat(), repr(float(v))])
            ts = ts + step


def write_population(
    population: list[tuple[ConsumptionSeries, str]], out_dir
) -> Path:
    """Write one CSV per building plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for series, state in sorted(population, key=lambda p: p[0].building_id):
        fname = f"{series.building_id}.csv"
        write_series_csv(series, out_dir / fname)
        entries.append(
            {"building_id": series.building_id, "file": fname, "state": state}
        )
    manifest_path = out_dir / "manifest.json"
    with manifest_path.open("w") as fh:
        json.dump({"buildings": entries}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def load_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        with path.open() as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path}: invalid JSON ({exc})") from None
    buildings = raw.get("buildings")
    if not isinstance(buildings, list):
        raise DataError(f"manifest {path}: missing 'buildings' list")
    entries = []
    seen = set()
    for item in buildings:
        if not isinstance(item, dict) or "building_id" not in item or "file" not in item:
            raise DataError(f"manifest {path}: entries need building_id and file")
        bid = str(item["building_id"])
        if bid in seen:
            raise DataError(f"manifest {path}: duplicate building_id '{bid}'")
        seen.add(bid)
        entries.append(
            ManifestEntry(
                building_id=bid, file=str(item["file"]), state=str(item.get("state", ""))
            )
        )
    return sorted(entries, key=lambda e: e.building_id)


def load_population(manifest_path) -> list[tuple[ConsumptionSeries, str]]:
    """Ingest every building referenced by a manifest (paths relative to it)."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    population = []
    for entry in load_manifest(manifest_path):
        series = ingest_csv(base / entry.file)
        if series.building_id != entry.building_id:
            series = ConsumptionSeries(
                building_id=entry.building_id,
                start=series.start,
                values=series.values,
            )
        population.append((series, entry.state))
    return population
