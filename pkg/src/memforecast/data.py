"""Series ingestion, normalization, splitting and rolling-window sampling."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, IngestionError

STD_FLOOR = 1e-8
# cardinalities of (month, day, weekday, hour); month and day are 1-based
CALENDAR_SIZES = (13, 32, 7, 24)


@dataclass(frozen=True)
class SeriesTable:
    timestamps: tuple[datetime, ...]
    values: np.ndarray
    feature_names: tuple[str, ...]
    target_index: int = 0

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise IngestionError(f"values must be 2-D, got shape {values.shape}")
        if len(self.timestamps) != values.shape[0]:
            raise IngestionError(f"{len(self.timestamps)} timestamps for {values.shape[0]} rows")
        if values.shape[1] < 1 or len(self.feature_names) != values.shape[1]:
            raise IngestionError("feature_names must name every column (d_f >= 1)")
        if not 0 <= self.target_index < values.shape[1]:
            raise IngestionError(f"target_index {self.target_index} out of range")
        ts = self.timestamps
        for a, b in zip(ts, ts[1:]):
            if b <= a:
                raise IngestionError(f"timestamps must be strictly increasing ({a} then {b})")
        if len(ts) > 2:
            step = ts[1] - ts[0]
            for k in range(2, len(ts)):
                if ts[k] - ts[k - 1] != step:
                    raise IngestionError(f"irregular spacing at row {k}: {ts[k - 1]} -> {ts[k]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "timestamps", tuple(self.timestamps))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def target_name(self) -> str:
        return self.feature_names[self.target_index]

    def marks(self) -> np.ndarray:
        return np.array([calendar_features(ts) for ts in self.timestamps], dtype=np.int64).reshape(-1, 4)

    def with_values(self, values: np.ndarray) -> "SeriesTable":
        return SeriesTable(self.timestamps, values, self.feature_names, self.target_index)

    def segment(self, start: int, stop: int) -> "SeriesTable":
        return SeriesTable(self.timestamps[start:stop], self.values[start:stop], self.feature_names,
                           self.target_index)


def _parse_time(text: str) -> datetime:
    text = text.strip()
    try:
        return datetime.fromisoformat(text)
    except ValueError:
        return datetime.strptime(text, "%Y-%m-%d %H:%M:%S")


def load_csv(path: str | Path, datetime_column: str = "date", target_column: str | None = None) -> SeriesTable:
    """Read a header-first CSV; every column except the datetime one is a feature."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        if datetime_column not in header:
            raise IngestionError(f"{path}: datetime column {datetime_column!r} not in header")
        t_col = header.index(datetime_column)
        feat_cols = [i for i in range(len(header)) if i != t_col]
        names = [header[i] for i in feat_cols]
        if not names:
            raise IngestionError(f"{path}: no feature columns")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            try:
                stamps.append(_parse_time(row[t_col]))
            except ValueError:
                raise IngestionError(f"{path}: row {lineno}: unparsable datetime {row[t_col]!r}") from None
            vals = []
            for i in feat_cols:
                try:
                    v = float(row[i])
                except ValueError:
                    raise IngestionError(f"{path}: row {lineno}: non-numeric value {row[i]!r} "
                                         f"in column {header[i]!r}") from None
                if not math.isfinite(v):
                    raise IngestionError(f"{path}: row {lineno}: missing/non-finite value in {header[i]!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise IngestionError(f"{path}: no data rows")
    order = sorted(range(len(stamps)), key=lambda k: stamps[k])
    for a, b in zip(order, order[1:]):
        if stamps[a] == stamps[b]:
            raise IngestionError(f"{path}: duplicate timestamp {stamps[a]} (row {max(a, b) + 2})")
    if target_column is None:
        target_index = len(names) - 1
    elif target_column in names:
        target_index = names.index(target_column)
    else:
        raise IngestionError(f"{path}: target column {target_column!r} not found")
    values = np.array([rows[k] for k in order], dtype=np.float64)
    return SeriesTable(tuple(stamps[k] for k in order), values, tuple(names), target_index)


def write_csv(table: SeriesTable, path: str | Path, datetime_column: str = "date") -> None:
    """Write in the ingestion format (floats with 17 significant digits)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([datetime_column, *table.feature_names])
        for ts, row in zip(table.timestamps, table.values):
            w.writerow([ts.strftime("%Y-%m-%d %H:%M:%S"), *(f"{v:.17g}" for v in row)])
    tmp.replace(path)


@dataclass(frozen=True)
class Normalizer:
    means: np.ndarray
    stds: np.ndarray

    @classmethod
    def fit(cls, table: SeriesTable) -> "Normalizer":
        return cls(table.values.mean(axis=0), np.maximum(table.values.std(axis=0), STD_FLOOR))

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.means) / self.stds

    def denormalize(self, z: np.ndarray) -> np.ndarray:
        return z * self.stds + self.means

    def apply(self, table: SeriesTable) -> SeriesTable:
        return table.with_values(self.normalize(table.values))


def split(table: SeriesTable, ratios: Sequence[float] = (0.6, 0.2, 0.2),
          min_len: int = 1) -> tuple[SeriesTable, SeriesTable, SeriesTable]:
    """Chronological train/val/test split with boundaries at floor(N * cumulative ratio)."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three positives summing to 1, got {ratios}")
    n = len(table)
    # tolerance absorbs float error in the cumulative sum (0.7 + 0.1 < 0.8)
    b1 = math.floor(n * ratios[0] + 1e-9)
    b2 = math.floor(n * (ratios[0] + ratios[1]) + 1e-9)
    parts = (table.segment(0, b1), table.segment(b1, b2), table.segment(b2, n))
    for name, part in zip(("train", "val", "test"), parts):
        if len(part) < min_len:
            raise ConfigurationError(f"{name} split has {len(part)} rows, needs at least {min_len}")
    return parts


@dataclass(frozen=True)
class WindowSpec:
    encoder_len: int
    decoder_len: int
    pred_len: int
    stride: int = 1

    def __post_init__(self):
        for k in ("encoder_len", "decoder_len", "pred_len", "stride"):
            if getattr(self, k) < 1:
                raise ConfigurationError(f"{k} must be positive")
        if self.decoder_len > self.encoder_len:
            raise ConfigurationError("decoder_len must not exceed encoder_len")

    @property
    def window_size(self) -> int:
        return self.encoder_len + self.pred_len


@dataclass(frozen=True)
class WindowSample:
    enc_input: np.ndarray
    dec_input: np.ndarray
    target: np.ndarray
    enc_marks: np.ndarray
    dec_marks: np.ndarray
    start: int = 0
    timestamps: tuple[datetime, ...] = field(default=(), repr=False)


def count_windows(n_points: int, spec: WindowSpec) -> int:
    """Number of window starts 0, S, 2S, ... that fit in ``n_points`` rows.

    This is floor((N - S_w) / S) + 1, which equals (N - S_w + 1) / S whenever
    S = 1 but not in general (N=100, S_w=10, S=2 gives 46, not 45).
    """
    sw = spec.window_size
    if n_points < sw:
        return 0
    return (n_points - sw) // spec.stride + 1


def iter_windows(table: SeriesTable, spec: WindowSpec,
                 normalizer: Normalizer | None = None) -> Iterator[WindowSample]:
    values = table.values if normalizer is None else normalizer.normalize(table.values)
    marks = table.marks()
    L, Ld, Lp = spec.encoder_len, spec.decoder_len, spec.pred_len
    for i in range(count_windows(len(table), spec)):
        s = i * spec.stride
        enc = values[s:s + L]
        yield WindowSample(
            enc_input=enc,
            dec_input=enc[L - Ld:],
            target=values[s + L:s + L + Lp],
            enc_marks=marks[s:s + L],
            dec_marks=marks[s + L - Ld:s + L + Lp],
            start=s,
            timestamps=table.timestamps[s + L:s + L + Lp],
        )


def similarity(encoder_len: int, stride: int) -> float:
    """Fraction of encoder rows shared by two consecutive windows."""
    if encoder_len < 1:
        raise ConfigurationError("encoder_len must be >= 1")
    return max(0.0, (encoder_len - stride) / encoder_len)


def calendar_features(ts: datetime) -> tuple[int, int, int, int]:
    """(month, day-of-month, weekday with Monday=0, hour)."""
    return ts.month, ts.day, ts.weekday(), ts.hour


def synth_components(n_points: int, d_f: int, seed: int, trend: float = 0.2) -> dict[str, np.ndarray]:
    """Noiseless building blocks of :func:`synth_generate`, each [n_points x d_f]."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_points, dtype=np.float64)[:, None]
    daily_amp = rng.uniform(0.5, 1.5, d_f)
    daily_phase = rng.uniform(0, 2 * np.pi, d_f)
    weekly_amp = rng.uniform(0.2, 0.8, d_f)
    weekly_phase = rng.uniform(0, 2 * np.pi, d_f)
    loading = rng.uniform(-1.0, 1.0, d_f)
    slope = rng.uniform(-1.0, 1.0, d_f) * trend / max(n_points - 1, 1)
    offset = rng.normal(0.0, 1.0, d_f)
    return {
        "offset": np.broadcast_to(offset, (n_points, d_f)).copy(),
        "daily": daily_amp * np.sin(2 * np.pi * t / 24.0 + daily_phase),
        "weekly": weekly_amp * np.sin(2 * np.pi * t / 168.0 + weekly_phase),
        # shared latent cycle couples the channels
        "latent": 0.5 * loading * np.sin(2 * np.pi * t / 24.0 + 0.5),
        "trend": slope * t,
    }


def synth_generate(n_points: int = 2000, d_f: int = 3, seed: int = 0, noise: float = 0.1,
                   trend: float = 0.2, start: datetime = datetime(2020, 1, 1)) -> SeriesTable:
    """Hourly multivariate series: daily + weekly sinusoids, linear trend, noise.

    All features load on a shared latent 24h sinusoid, so the channels are
    correlated.  ``trend`` is the total drift over the series; the noise is
    drawn from a stream independent of the signal parameters.
    """
    if n_points < 1:
        raise ConfigurationError("n_points must be >= 1")
    parts = synth_components(n_points, d_f, seed, trend)
    values = parts["offset"] + parts["daily"] + parts["weekly"] + parts["latent"] + parts["trend"]
    if noise > 0:
        values = values + noise * np.random.default_rng([seed, 1]).standard_normal(values.shape)
    stamps = tuple(start + timedelta(hours=int(k)) for k in range(n_points))
    names = tuple(f"x{k}" for k in range(d_f - 1)) + ("target",)
    return SeriesTable(stamps, values, names, d_f - 1)
