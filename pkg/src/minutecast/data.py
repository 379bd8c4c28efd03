"""Minute-bar OHLCV ingestion, calendar features, chronological splitting,
train-statistics normalization, and sliding-window extraction.

CSV schema: header ``datetime,open,high,low,close,volume,turnover_ratio``,
one bar per row, datetimes formatted ``YYYY-MM-DD HH:MM`` and strictly
increasing. Files are never silently re-sorted; out-of-order input is an
error the caller has to resolve upstream.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .errors import (
    AlignmentError,
    CapacityError,
    ConfigError,
    DataError,
    DegenerateFeatureError,
    IntegrityError,
    OrderingError,
    ParseError,
)

FEATURES = ("open", "high", "low", "close", "volume", "turnover_ratio")
CLOSE = FEATURES.index("close")
CSV_HEADER = ("datetime",) + FEATURES
DT_FORMAT = "%Y-%m-%d %H:%M"
BAR_INTERVALS = ("1min", "5min")

# stamp array columns
STAMP_FIELDS = ("year_index", "month", "day_of_week", "hour", "minute")


@dataclass(frozen=True)
class TimeStamp:
    """Calendar decomposition of one bar's datetime."""

    year_index: int
    month: int
    day_of_week: int
    hour: int
    minute: int


def extract_time_features(dt: datetime, base_year: int) -> TimeStamp:
    """Deterministic calendar decomposition; Monday is day_of_week 0."""
    return TimeStamp(dt.year - base_year, dt.month, dt.weekday(), dt.hour, dt.minute)


def stamps_array(datetimes, base_year: int) -> np.ndarray:
    out = np.empty((len(datetimes), 5), dtype=np.int64)
    for i, dt in enumerate(datetimes):
        out[i] = (dt.year - base_year, dt.month, dt.weekday(), dt.hour, dt.minute)
    return out


@dataclass
class RawSeries:
    """A dated OHLCV+turnover series with precomputed calendar stamps."""

    symbol: str
    bar_interval: str
    datetimes: tuple
    values: np.ndarray  # [N, 6] in FEATURES order
    stamps: np.ndarray  # [N, 5] in STAMP_FIELDS order
    base_year: int

    def __len__(self):
        return len(self.datetimes)

    @classmethod
    def build(cls, symbol, bar_interval, datetimes, values) -> "RawSeries":
        if bar_interval not in BAR_INTERVALS:
            raise ConfigError(
                f"bar_interval must be one of {BAR_INTERVALS}, got {bar_interval!r}"
            )
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != len(FEATURES):
            raise DataError(f"expected [N, 6] values, got shape {values.shape}")
        if len(datetimes) != len(values):
            raise AlignmentError(
                f"{len(datetimes)} datetimes vs {len(values)} value rows"
            )
        for i in range(1, len(datetimes)):
            if datetimes[i] <= datetimes[i - 1]:
                raise OrderingError(
                    f"datetimes not strictly increasing at row {i}: "
                    f"{datetimes[i - 1]} then {datetimes[i]}"
                )
        if (values[:, :4] <= 0).any():
            row = int(np.argwhere((values[:, :4] <= 0).any(axis=1))[0, 0])
            raise DataError(f"non-positive price at row {row}")
        if (values[:, 4] < 0).any():
            row = int(np.argwhere(values[:, 4] < 0)[0, 0])
            raise DataError(f"negative volume at row {row}")
        base_year = min(dt.year for dt in datetimes)
        return cls(
            symbol=symbol,
            bar_interval=bar_interval,
            datetimes=tuple(datetimes),
            values=values,
            stamps=stamps_array(datetimes, base_year),
            base_year=base_year,
        )

    def slice_rows(self, start: int, stop: int) -> "RawSeries":
        """Contiguous sub-series; keeps the parent's year anchor."""
        return RawSeries(
            symbol=self.symbol,
            bar_interval=self.bar_interval,
            datetimes=self.datetimes[start:stop],
            values=self.values[start:stop],
            stamps=self.stamps[start:stop],
            base_year=self.base_year,
        )


def load_csv(path, symbol: str | None = None, bar_interval: str = "1min") -> RawSeries:
    """Parse and validate a bar file; errors carry 1-based line numbers."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    datetimes, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise ParseError(
                f"{path}: header {header!r} does not match {','.join(CSV_HEADER)}",
                line=1,
            )
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ParseError(
                    f"{path}:{line_no}: expected {len(CSV_HEADER)} fields, got {len(row)}",
                    line=line_no,
                )
            try:
                dt = datetime.strptime(row[0].strip(), DT_FORMAT)
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: {exc}", line=line_no) from None
            if any(v <= 0 for v in vals[:4]):
                raise ParseError(
                    f"{path}:{line_no}: non-positive price {min(vals[:4])}",
                    line=line_no,
                )
            if vals[4] < 0:
                raise ParseError(
                    f"{path}:{line_no}: negative volume {vals[4]}", line=line_no
                )
            if datetimes and dt <= datetimes[-1]:
                raise OrderingError(
                    f"{path}:{line_no}: datetime {row[0]!r} not after previous row"
                )
            datetimes.append(dt)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows", line=2)
    return RawSeries.build(symbol or path.stem, bar_interval, datetimes, np.array(rows))


@dataclass(frozen=True)
class SplitSpec:
    fractions: tuple = (0.7, 0.1, 0.2)

    def __post_init__(self):
        if len(self.fractions) != 3 or abs(sum(self.fractions) - 1.0) > 1e-12:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(series: RawSeries, spec: SplitSpec = SplitSpec()):
    """Chronological (train, val, test) segments.

    Train and validation sizes are round-half-up of their fractions; test
    takes the remainder, so the three segments partition the series.
    """
    n = len(series)
    n_train = _round_half_up(spec.fractions[0] * n)
    n_val = _round_half_up(spec.fractions[1] * n)
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise CapacityError(f"series of {n} rows is too short to split")
    return (
        series.slice_rows(0, n_train),
        series.slice_rows(n_train, n_train + n_val),
        series.slice_rows(n_train + n_val, n),
    )


@dataclass
class NormStats:
    """Per-feature z-score statistics, computed on the training segment only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_values(cls, values: np.ndarray) -> "NormStats":
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        if (std <= 0).any():
            bad = FEATURES[int(np.argwhere(std <= 0)[0, 0])]
            raise DegenerateFeatureError(f"feature {bad!r} has zero variance")
        return cls(mean=mean, std=std)

    def normalize(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def denormalize(self, values: np.ndarray, feature: str = "close") -> np.ndarray:
        i = FEATURES.index(feature)
        return values * self.std[i] + self.mean[i]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(mean=np.array(d["mean"]), std=np.array(d["std"]))


@dataclass
class Window:
    """One aligned (encoder, guiding token, future stamps, target) sample."""

    enc_values: np.ndarray  # [seq_len, 6], normalized
    enc_stamps: np.ndarray  # [seq_len, 5]
    token_values: np.ndarray  # [token_len, 6] == trailing rows of enc_values
    future_stamps: np.ndarray  # [pred_len, 5]
    target: np.ndarray  # [pred_len, 1], normalized close
    start: int


@dataclass
class WindowBatch:
    """Stacked windows ready for one forward pass."""

    enc_values: np.ndarray  # [B, seq_len, 6]
    enc_stamps: np.ndarray  # [B, seq_len, 5]
    token_values: np.ndarray  # [B, token_len, 6]
    future_stamps: np.ndarray  # [B, pred_len, 5]
    targets: np.ndarray  # [B, pred_len, 1]
    starts: np.ndarray  # [B]

    @classmethod
    def from_windows(cls, windows) -> "WindowBatch":
        if not windows:
            raise CapacityError("cannot batch zero windows")
        return cls(
            enc_values=np.stack([w.enc_values for w in windows]),
            enc_stamps=np.stack([w.enc_stamps for w in windows]),
            token_values=np.stack([w.token_values for w in windows]),
            future_stamps=np.stack([w.future_stamps for w in windows]),
            targets=np.stack([w.target for w in windows]),
            starts=np.array([w.start for w in windows]),
        )

    def __len__(self):
        return len(self.starts)


def make_windows(values: np.ndarray, stamps: np.ndarray, cfg, stride: int = 1):
    """Sliding windows over an already-normalized segment.

    Window count at stride 1 is ``len - (seq_len + pred_len) + 1``; windows
    never leave the segment, so split boundaries are never straddled.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    n = len(values)
    span = cfg.seq_len + cfg.pred_len
    if n < span:
        raise CapacityError(f"segment of {n} rows is shorter than window span {span}")
    windows = []
    for start in range(0, n - span + 1, stride):
        enc_end = start + cfg.seq_len
        windows.append(
            Window(
                enc_values=values[start:enc_end],
                enc_stamps=stamps[start:enc_end],
                token_values=values[enc_end - cfg.token_len : enc_end],
                future_stamps=stamps[enc_end : start + span],
                target=values[enc_end : start + span, CLOSE : CLOSE + 1],
                start=start,
            )
        )
    return windows


@dataclass
class DatasetBundle:
    """A dataset prepared for experiments: splits, stats, and window sets."""

    name: str
    symbol: str
    bar_interval: str
    stats: NormStats
    train_segment: RawSeries
    val_segment: RawSeries
    test_segment: RawSeries
    train_windows: list
    val_windows: list
    test_windows: list


def prepare_dataset(
    series: RawSeries,
    cfg,
    name: str | None = None,
    stride: int = 1,
    val_stride: int | None = None,
    test_stride: int | None = None,
    split_spec: SplitSpec = SplitSpec(),
    stats: NormStats | None = None,
) -> DatasetBundle:
    """Split, normalize with train-only statistics, and window a series.

    Passing ``stats`` overrides the train-segment statistics (used by the
    transfer harness to normalize a target series with source statistics).
    """
    train_seg, val_seg, test_seg = split(series, split_spec)
    stats = stats if stats is not None else NormStats.from_values(train_seg.values)

    def build(seg, s):
        return make_windows(stats.normalize(seg.values), seg.stamps, cfg, stride=s)

    return DatasetBundle(
        name=name or series.symbol,
        symbol=series.symbol,
        bar_interval=series.bar_interval,
        stats=stats,
        train_segment=train_seg,
        val_segment=val_seg,
        test_segment=test_seg,
        train_windows=build(train_seg, stride),
        val_windows=build(val_seg, val_stride or stride),
        test_windows=build(test_seg, test_stride or stride),
    )


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    symbol: str
    bar_interval: str
    path: Path
    expected_rows: int | None = None


def load_manifest(path) -> list:
    """Parse a dataset manifest (JSON list under key "datasets")."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "datasets" not in doc:
        raise ParseError(f"{path}: expected an object with a 'datasets' list")
    entries = []
    for i, item in enumerate(doc["datasets"]):
        unknown = set(item) - {"name", "symbol", "bar_interval", "path", "expected_rows"}
        if unknown:
            raise ConfigError(f"{path}: dataset {i} has unknown keys {sorted(unknown)}")
        for key in ("name", "symbol", "bar_interval", "path"):
            if key not in item:
                raise ParseError(f"{path}: dataset {i} missing key {key!r}")
        entries.append(
            ManifestEntry(
                name=item["name"],
                symbol=item["symbol"],
                bar_interval=item["bar_interval"],
                path=(path.parent / item["path"]).resolve(),
                expected_rows=item.get("expected_rows"),
            )
        )
    if not entries:
        raise ParseError(f"{path}: manifest lists no datasets")
    return entries


def load_manifest_entry(entry: ManifestEntry) -> RawSeries:
    series = load_csv(entry.path, symbol=entry.symbol, bar_interval=entry.bar_interval)
    if entry.expected_rows is not None and len(series) != entry.expected_rows:
        raise IntegrityError(
            f"{entry.name}: expected {entry.expected_rows} rows, file has {len(series)}"
        )
    return series
