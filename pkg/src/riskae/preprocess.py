"""Seven-step preprocessing of raw irregular readings.

The raw stream of (account, month, kWh) readings becomes a fixed-length
normalized matrix:

  1. build an account x month consumption matrix over the horizon
     (missing months hold a negative sentinel; absurdly large readings
     are dropped by the outlier cap),
  2. join the verified-loss labels,
  3. spread each reading over its measurement interval as an average
     monthly consumption,
  4. row-normalize each series to relative proportions,
  5. drop all-zero series and series shorter than the minimum length,
  6. prune/zero-pad everything to the target length (most recent steps
     are kept when pruning),
  7. min-max scale each column of the stacked matrix to [0, 1].

Every step is deterministic; the pipeline records per-stage counts so
input accounts can be reconciled against survivors and removals.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, PipelineError, ZeroSumError

MISSING = -1.0
SOURCES = ("manual", "telemeter_lv", "telemeter_mv")

DATASET_FORMAT_VERSION = 1


def parse_month(text: str) -> int:
    """Absolute month number for a 'YYYY-MM' string (year*12 + month-1)."""
    parts = text.strip().split("-")
    if len(parts) != 2 or not parts[0].isdigit() or not parts[1].isdigit():
        raise DataError(f"bad month {text!r}, expected YYYY-MM")
    year, month = int(parts[0]), int(parts[1])
    if not 1 <= month <= 12:
        raise DataError(f"bad month {text!r}, month must be 01..12")
    return year * 12 + (month - 1)


def format_month(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


@dataclass(frozen=True)
class Horizon:
    """Inclusive month range covered by the consumption matrix."""

    start: str = "2018-01"
    end: str = "2022-12"

    @property
    def start_index(self) -> int:
        return parse_month(self.start)

    @property
    def n_months(self) -> int:
        n = parse_month(self.end) - self.start_index + 1
        if n < 1:
            raise DataError(f"empty horizon {self.start}..{self.end}")
        return n

    def column(self, month_text: str) -> int | None:
        """Column index for a month, or None when outside the horizon."""
        idx = parse_month(month_text) - self.start_index
        if 0 <= idx < self.n_months:
            return idx
        return None


@dataclass
class RawReading:
    account_id: str
    month: str
    value_kwh: float
    source: str = "manual"


@dataclass
class PipelineConfig:
    horizon: Horizon = field(default_factory=Horizon)
    outlier_cap: float = 1e6
    min_len: int = 7
    target_len: int = 58
    strict: bool = False

    def fingerprint_dict(self) -> dict:
        return {
            "horizon_start": self.horizon.start,
            "horizon_end": self.horizon.end,
            "outlier_cap": self.outlier_cap,
            "min_len": self.min_len,
            "target_len": self.target_len,
        }


@dataclass
class ConsumptionMatrix:
    """One row per account over the horizon months; MISSING marks gaps."""

    matrix: np.ndarray
    account_ids: list
    dropped_outliers: int = 0
    skipped_malformed: int = 0


def read_readings_csv(path, strict: bool = False):
    """Yield RawReading records from a csv with header account_id,date,value_kwh,source.

    Malformed rows raise DataError in strict mode, otherwise they are
    skipped and reported through the returned generator's side channel
    (collect with ingest_readings, which counts them).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["account_id", "date", "value_kwh", "source"]:
            raise DataError(f"{path}: expected header account_id,date,value_kwh,source")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            try:
                if len(row) != 4:
                    raise DataError(f"expected 4 fields, got {len(row)}")
                account, month, value, source = (cell.strip() for cell in row)
                if not account:
                    raise DataError("empty account_id")
                parse_month(month)
                value = float(value)
                if not np.isfinite(value) or value < 0:
                    raise DataError(f"bad value_kwh {value!r}")
                if source not in SOURCES:
                    raise DataError(f"unknown source {source!r}")
                yield RawReading(account, month, value, source)
            except (DataError, ValueError) as exc:
                if strict:
                    raise DataError(f"{path}:{lineno}: {exc}") from exc
                yield DataError(f"{path}:{lineno}: {exc}")


def read_labels(path) -> set:
    """Account ids of verified non-technical-loss accounts, one per line."""
    labels = set()
    with open(path) as fh:
        for line in fh:
            account = line.strip()
            if account:
                labels.add(account)
    return labels


def ingest_readings(records, horizon: Horizon | None = None,
                    outlier_cap: float = 1e6, strict: bool = False) -> ConsumptionMatrix:
    """Step 1: account x month matrix; readings above the cap are dropped.

    Duplicate readings in one month are summed. Accounts are ordered by id
    so downstream results never depend on input order.
    """
    if outlier_cap <= 0:
        raise DataError(f"outlier_cap must be positive, got {outlier_cap}")
    horizon = horizon or Horizon()
    per_account: dict[str, dict[int, float]] = {}
    dropped = 0
    skipped = 0
    for rec in records:
        if isinstance(rec, DataError):
            skipped += 1
            continue
        cells = per_account.setdefault(rec.account_id, {})
        if rec.value_kwh > outlier_cap:
            dropped += 1
            continue
        col = horizon.column(rec.month)
        if col is None:
            dropped += 1
            continue
        cells[col] = cells.get(col, 0.0) + rec.value_kwh

    account_ids = sorted(per_account)
    matrix = np.full((len(account_ids), horizon.n_months), MISSING)
    for row, account in enumerate(account_ids):
        for col, value in per_account[account].items():
            matrix[row, col] = value
    return ConsumptionMatrix(matrix, account_ids, dropped, skipped)


def interval_average(row: np.ndarray) -> np.ndarray:
    """Step 3: average monthly consumption per measurement interval.

    Each measured value is spread evenly over the months since the
    previous measurement (the first interval starts at the horizon
    start). The series ends at the last measured month; accounts with no
    measurements yield an empty series.
    """
    measured = np.flatnonzero(row >= 0)
    if measured.size == 0:
        return np.empty(0)
    series = np.empty(measured[-1] + 1)
    prev = -1
    for col in measured:
        span = col - prev
        series[prev + 1 : col + 1] = row[col] / span
        prev = col
    return series


def row_normalize(series: np.ndarray) -> np.ndarray:
    """Step 4: divide a series by its own sum, yielding proportions."""
    series = np.asarray(series, dtype=np.float64)
    if series.size == 0:
        raise ZeroSumError("cannot normalize an empty series")
    total = np.sum(series)
    if total <= 0:
        raise ZeroSumError("cannot normalize a series with zero total")
    return series / total


def clean_filter(series_set: list, min_len: int = 7) -> tuple[list, dict]:
    """Step 5: drop all-zero series and series shorter than min_len."""
    kept = []
    counts = {"zero": 0, "short": 0}
    for series in series_set:
        if series.size and not np.any(series):
            counts["zero"] += 1
        elif series.size < min_len:
            counts["short"] += 1
        else:
            kept.append(series)
    return kept, counts


def pad_prune(series: np.ndarray, target_len: int = 58) -> np.ndarray:
    """Step 6: keep the most recent target_len steps or zero-pad the tail."""
    if series.size >= target_len:
        return series[series.size - target_len :]
    out = np.zeros(target_len)
    out[: series.size] = series
    return out


@dataclass
class MinMaxScaler:
    """Per-column affine map onto [0, 1]; constant columns map to 0."""

    col_min: np.ndarray
    col_max: np.ndarray


def minmax_fit(matrix: np.ndarray) -> MinMaxScaler:
    if matrix.size == 0:
        raise DataError("cannot fit a scaler on an empty dataset")
    return MinMaxScaler(matrix.min(axis=0), matrix.max(axis=0))


def minmax_transform(scaler: MinMaxScaler, matrix: np.ndarray) -> np.ndarray:
    if matrix.shape[1] != scaler.col_min.shape[0]:
        raise DataError(
            f"column count {matrix.shape[1]} does not match fitted scaler "
            f"({scaler.col_min.shape[0]})"
        )
    span = scaler.col_max - scaler.col_min
    safe = np.where(span > 0, span, 1.0)
    out = (matrix - scaler.col_min) / safe
    return np.where(span > 0, out, 0.0)


@dataclass
class NormalizedDataset:
    """Fixed-length normalized series plus account index and label flags."""

    matrix: np.ndarray
    account_ids: np.ndarray
    labels: np.ndarray
    scaler: MinMaxScaler
    config_fingerprint: str
    stage_counts: dict

    @property
    def n_series(self) -> int:
        return self.matrix.shape[0]

    def fingerprint(self) -> str:
        """Content hash covering the matrix, index, labels and config."""
        digest = hashlib.sha256()
        digest.update(self.config_fingerprint.encode())
        digest.update("".join(self.account_ids.tolist()).encode())
        digest.update(self.labels.astype(np.uint8).tobytes())
        digest.update(np.ascontiguousarray(self.matrix, dtype="<f8").tobytes())
        return digest.hexdigest()


def save_dataset(dataset: NormalizedDataset, path) -> None:
    np.savez(
        path,
        format_version=np.array(DATASET_FORMAT_VERSION),
        matrix=dataset.matrix,
        account_ids=np.array(dataset.account_ids, dtype="U"),
        labels=dataset.labels,
        col_min=dataset.scaler.col_min,
        col_max=dataset.scaler.col_max,
        config_fingerprint=np.array(dataset.config_fingerprint),
        stage_counts=np.array(json.dumps(dataset.stage_counts, sort_keys=True)),
    )


def load_dataset(path) -> NormalizedDataset:
    try:
        with np.load(path, allow_pickle=False) as data:
            if "format_version" not in data:
                raise DataError(f"{path}: missing format_version")
            version = int(data["format_version"])
            if version != DATASET_FORMAT_VERSION:
                raise DataError(f"{path}: unsupported dataset version {version}")
            return NormalizedDataset(
                matrix=data["matrix"],
                account_ids=data["account_ids"],
                labels=data["labels"],
                scaler=MinMaxScaler(data["col_min"], data["col_max"]),
                config_fingerprint=str(data["config_fingerprint"]),
                stage_counts=json.loads(str(data["stage_counts"])),
            )
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset {path}: {exc}") from exc


def run_pipeline(records, labels: set, config: PipelineConfig | None = None) -> NormalizedDataset:
    """Steps 1-7 end to end over a reading stream.

    `records` is an iterable of RawReading (DataError items from lenient
    csv parsing are counted and skipped). Returns the normalized dataset;
    raises PipelineError when nothing survives cleaning.
    """
    config = config or PipelineConfig()
    ingested = ingest_readings(records, config.horizon, config.outlier_cap, config.strict)

    survivors = []
    counts = {
        "accounts": len(ingested.account_ids),
        "dropped_readings": ingested.dropped_outliers,
        "malformed_readings": ingested.skipped_malformed,
        "removed_empty": 0,
        "removed_zero": 0,
        "removed_short": 0,
    }
    for row_idx, account in enumerate(ingested.account_ids):
        series = interval_average(ingested.matrix[row_idx])
        if series.size == 0:
            counts["removed_empty"] += 1
            continue
        if not np.any(series > 0):
            counts["removed_zero"] += 1
            continue
        survivors.append((account, row_normalize(series)))

    kept, clean_counts = clean_filter([s for _, s in survivors], config.min_len)
    counts["removed_zero"] += clean_counts["zero"]
    counts["removed_short"] += clean_counts["short"]
    kept_accounts = [a for (a, s) in survivors if s.size >= config.min_len]
    counts["series"] = len(kept)
    if not kept:
        raise PipelineError("no series survived cleaning")

    matrix = np.stack([pad_prune(s, config.target_len) for s in kept])
    scaler = minmax_fit(matrix)
    scaled = minmax_transform(scaler, matrix)

    account_ids = np.array(kept_accounts, dtype="U")
    label_flags = np.array([a in labels for a in kept_accounts], dtype=bool)
    fingerprint = json.dumps(config.fingerprint_dict(), sort_keys=True)
    return NormalizedDataset(scaled, account_ids, label_flags, scaler, fingerprint, counts)
