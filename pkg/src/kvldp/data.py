"""Dataset generation, CSV ingestion and ground-truth statistics.

A dataset is stored in CSR-like form: `offsets[u]:offsets[u+1]` slices the
flat `keys`/`values` arrays into user u's records. Keys are dense integers
1..d and values are pre-scaled to [-1, 1].
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import KVRecord, UserRecordSet


@dataclass
class Dataset:
    offsets: np.ndarray  # (n+1,) int64
    keys: np.ndarray  # (records,) int64, in 1..d
    values: np.ndarray  # (records,) float64, in [-1, 1]
    d: int

    _possession: np.ndarray | None = None
    _value_matrix: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.offsets) - 1

    @property
    def n_records(self) -> int:
        return len(self.keys)

    def record_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def user_records(self, user_id: int) -> UserRecordSet:
        lo, hi = self.offsets[user_id], self.offsets[user_id + 1]
        records = tuple(
            KVRecord(int(k), float(v)) for k, v in zip(self.keys[lo:hi], self.values[lo:hi])
        )
        return UserRecordSet(user_id=user_id, records=records)

    def _ensure_lookup(self) -> None:
        # Dense (n, d) lookup used by PrivKVM's dictionary-wide sampling.
        if self._possession is None:
            possession = np.zeros((self.n, self.d), dtype=bool)
            value_matrix = np.zeros((self.n, self.d), dtype=np.float64)
            user_ids = np.repeat(np.arange(self.n), self.record_counts())
            possession[user_ids, self.keys - 1] = True
            value_matrix[user_ids, self.keys - 1] = self.values
            self._possession = possession
            self._value_matrix = value_matrix

    def lookup(self, sampled_keys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-user possession flag and value for one sampled key per user."""
        self._ensure_lookup()
        rows = np.arange(self.n)
        cols = np.asarray(sampled_keys) - 1
        return self._possession[rows, cols], self._value_matrix[rows, cols]


@dataclass
class DatasetStats:
    f: np.ndarray  # (d,) true frequencies
    m: np.ndarray  # (d,) true means, nan where f == 0
    n: int
    d: int
    n_records: int
    p90_records_per_user: float


def from_records(user_keys: list[np.ndarray], user_values: list[np.ndarray], d: int) -> Dataset:
    counts = np.array([len(k) for k in user_keys], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)))
    keys = np.concatenate(user_keys) if user_keys else np.empty(0, dtype=np.int64)
    values = np.concatenate(user_values) if user_values else np.empty(0, dtype=np.float64)
    return Dataset(offsets=offsets, keys=keys.astype(np.int64), values=values, d=d)


def generate_synthetic(
    n: int,
    d: int,
    key_sigma: float = 15.0,
    value_sigma: float = 1.0,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> Dataset:
    """Gaussian synthetic data: one KV pair per user, keys bell-shaped over
    the center of 1..d, values clamped to [-1, 1]."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    center = (d + 1) // 2
    keys = np.clip(np.rint(rng.normal(0.0, key_sigma, n)).astype(np.int64) + center, 1, d)
    values = np.clip(rng.normal(0.0, value_sigma, n), -1.0, 1.0)
    offsets = np.arange(n + 1, dtype=np.int64)
    return Dataset(offsets=offsets, keys=keys, values=values, d=d)


def generate_zipf_synthetic(
    n: int,
    d: int,
    exponent: float = 1.2,
    value_sigma: float = 1.0,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
) -> Dataset:
    """Zipf-like synthetic data: one pair per user, P(key = k) ~ k^-exponent."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    weights = np.arange(1, d + 1, dtype=np.float64) ** -exponent
    weights /= weights.sum()
    keys = rng.choice(np.arange(1, d + 1), size=n, p=weights).astype(np.int64)
    values = np.clip(rng.normal(0.0, value_sigma, n), -1.0, 1.0)
    offsets = np.arange(n + 1, dtype=np.int64)
    return Dataset(offsets=offsets, keys=keys, values=values, d=d)


def scale_values(raw: np.ndarray, value_min: float, value_max: float) -> np.ndarray:
    """Order-preserving linear map of [min, max] onto [-1, 1]."""
    if value_max <= value_min:
        raise ValueError("value_max must exceed value_min")
    return 2.0 * (raw - value_min) / (value_max - value_min) - 1.0


def load_csv(
    path: str | Path,
    user_col: str = "user",
    key_col: str = "key",
    value_col: str = "value",
    value_min: float | None = None,
    value_max: float | None = None,
) -> tuple[Dataset, dict]:
    """Load a CSV of (user, key, value) rows into a Dataset.

    String keys are mapped to 1..d in first-seen order; duplicate
    (user, key) rows keep the last value; values are linearly scaled to
    [-1, 1] using the given bounds or, when omitted, the observed range.
    Returns the dataset and a sidecar dict with n, d, scaling and key map.
    """
    path = Path(path)
    key_map: dict[str, int] = {}
    per_user: dict[str, dict[int, float]] = {}
    user_order: list[str] = []
    raw_lo, raw_hi = math.inf, -math.inf
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            user = row[user_col]
            raw_key = row[key_col]
            try:
                raw_value = float(row[value_col])
            except (TypeError, ValueError) as exc:
                raise ValueError(f"non-numeric value {row[value_col]!r} for user {user}") from exc
            raw_lo, raw_hi = min(raw_lo, raw_value), max(raw_hi, raw_value)
            if raw_key not in key_map:
                key_map[raw_key] = len(key_map) + 1
            if user not in per_user:
                per_user[user] = {}
                user_order.append(user)
            per_user[user][key_map[raw_key]] = raw_value
    if not per_user:
        raise ValueError(f"{path} contains no data rows")

    # Auto-scaling uses the file's full raw range, including rows later
    # superseded by a duplicate (user, key).
    if value_min is None:
        value_min = raw_lo
    if value_max is None:
        value_max = raw_hi
    if value_max <= value_min:
        raise ValueError("degenerate value range; pass explicit value_min/value_max")

    user_keys, user_values = [], []
    for user in user_order:
        recs = per_user[user]
        ks = np.fromiter(recs.keys(), dtype=np.int64, count=len(recs))
        vs = scale_values(np.fromiter(recs.values(), dtype=np.float64, count=len(recs)),
                          value_min, value_max)
        order = np.argsort(ks)
        user_keys.append(ks[order])
        user_values.append(vs[order])

    dataset = from_records(user_keys, user_values, d=len(key_map))
    sidecar = {
        "n": dataset.n,
        "d": dataset.d,
        "value_min": value_min,
        "value_max": value_max,
        "key_map": key_map,
    }
    return dataset, sidecar


def save_dataset(dataset: Dataset, path: str | Path, sidecar: dict | None = None) -> None:
    """Persist as a sorted CSV of already-scaled values plus a JSON sidecar."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user", "key", "value"])
        for u in range(dataset.n):
            lo, hi = dataset.offsets[u], dataset.offsets[u + 1]
            for k, v in zip(dataset.keys[lo:hi], dataset.values[lo:hi]):
                writer.writerow([u, int(k), repr(float(v))])
    meta = {
        "n": dataset.n,
        "d": dataset.d,
        "value_min": -1.0,
        "value_max": 1.0,
        "key_map": {},
    }
    if sidecar:
        meta.update(sidecar)
        meta["n"] = dataset.n
        meta["d"] = dataset.d
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_dataset(path: str | Path) -> Dataset:
    """Load a dataset previously written by save_dataset (values are taken
    as already scaled)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    per_user: dict[int, tuple[list[int], list[float]]] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            u = int(row["user"])
            per_user.setdefault(u, ([], []))
            per_user[u][0].append(int(row["key"]))
            per_user[u][1].append(float(row["value"]))
    user_keys = [np.array(per_user[u][0], dtype=np.int64) for u in sorted(per_user)]
    user_values = [np.array(per_user[u][1], dtype=np.float64) for u in sorted(per_user)]
    return from_records(user_keys, user_values, d=int(meta["d"]))


def true_stats(dataset: Dataset) -> DatasetStats:
    """Exact per-key frequency and mean; the mean is nan for unheld keys."""
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    counts = np.bincount(dataset.keys, minlength=dataset.d + 1)[1:].astype(np.float64)
    sums = np.bincount(dataset.keys, weights=dataset.values, minlength=dataset.d + 1)[1:]
    f = counts / dataset.n
    with np.errstate(invalid="ignore", divide="ignore"):
        m = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    p90 = float(np.percentile(dataset.record_counts(), 90))
    return DatasetStats(
        f=f, m=m, n=dataset.n, d=dataset.d,
        n_records=dataset.n_records, p90_records_per_user=p90,
    )
