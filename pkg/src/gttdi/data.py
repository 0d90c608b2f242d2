"""Containers for traffic observations, road structure, and dataset splits."""

from __future__ import annotations

import csv
import datetime as dt
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"GTTD"
CACHE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIII")

DIRECTIONS = ("N", "S", "E", "W")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TrafficSeriesTensor:
    """Values and observation mask shaped (D*M, S, N/M).

    Missing entries hold 0 in ``values`` and ``False`` in ``mask``.
    ``days`` lists the calendar day index of each day block, in order.
    ``role`` tags which split the tensor came from; "mixed" after concatenating
    different splits.
    """

    values: np.ndarray
    mask: np.ndarray
    slices_per_day: int = 1
    interval_minutes: int = 5
    days: tuple[int, ...] = ()
    units: str = "flow"
    role: str | None = None

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise DataError(f"values shape {self.values.shape} != mask shape {self.mask.shape}")
        if self.values.ndim != 3:
            raise DataError(f"expected a 3-D (samples, sensors, points) array, got {self.values.shape}")
        if self.values.shape[0] % self.slices_per_day:
            raise DataError("sample count is not a multiple of slices_per_day")
        if not self.days:
            object.__setattr__(self, "days", tuple(range(self.n_days)))
        if len(self.days) != self.n_days:
            raise DataError(f"{len(self.days)} day indices for {self.n_days} days")
        if self.units == "flow" and np.any(self.values[self.mask] < 0):
            raise DataError("observed flow values must be non-negative")

    @property
    def n_days(self) -> int:
        return self.values.shape[0] // self.slices_per_day

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.values.shape[1]

    @property
    def slice_len(self) -> int:
        return self.values.shape[2]

    @property
    def points_per_day(self) -> int:
        return self.slice_len * self.slices_per_day

    def day_index(self, sample: int) -> int:
        return self.days[sample // self.slices_per_day]

    def slice_index(self, sample: int) -> int:
        """Zero-based position of the slice within its day."""
        return sample % self.slices_per_day

    def daily(self) -> tuple[np.ndarray, np.ndarray]:
        return unslice(self.values, self.slices_per_day), unslice(self.mask, self.slices_per_day)

    def with_mask(self, mask: np.ndarray) -> "TrafficSeriesTensor":
        mask = np.asarray(mask, dtype=bool)
        return replace(self, values=np.where(mask, self.values, 0.0), mask=mask)

    def select_days(self, positions, role: str | None = None) -> "TrafficSeriesTensor":
        """Sub-tensor holding the day blocks at the given positions."""
        positions = list(positions)
        m = self.slices_per_day
        rows = np.concatenate([np.arange(p * m, (p + 1) * m) for p in positions]) if positions \
            else np.zeros(0, dtype=int)
        return replace(self, values=self.values[rows], mask=self.mask[rows],
                       days=tuple(self.days[p] for p in positions), role=role)


def concat_days(parts: list[TrafficSeriesTensor]) -> TrafficSeriesTensor:
    roles = {p.role for p in parts}
    first = parts[0]
    return replace(first,
                   values=np.concatenate([p.values for p in parts]),
                   mask=np.concatenate([p.mask for p in parts]),
                   days=tuple(d for p in parts for d in p.days),
                   role=roles.pop() if len(roles) == 1 else "mixed")


def reslice(daily: np.ndarray, m: int) -> np.ndarray:
    """(D, S, N) -> (D*M, S, N/M); sample d*M + j holds points [j*N/M, (j+1)*N/M)."""
    if m < 1:
        raise DataError(f"slice count must be >= 1, got {m}")
    d, s, n = daily.shape
    if n % m:
        raise DataError(f"{m} slices do not divide {n} points per day")
    length = n // m
    return daily.reshape(d, s, m, length).transpose(0, 2, 1, 3).reshape(d * m, s, length)


def unslice(sliced: np.ndarray, m: int) -> np.ndarray:
    k, s, length = sliced.shape
    if m < 1 or k % m:
        raise DataError(f"{k} samples cannot be grouped into days of {m} slices")
    return sliced.reshape(k // m, m, s, length).transpose(0, 2, 1, 3).reshape(k // m, s, m * length)


def from_daily(values: np.ndarray, mask: np.ndarray | None, m: int, **kw) -> TrafficSeriesTensor:
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    values = np.where(mask, values, 0.0)
    return TrafficSeriesTensor(reslice(values, m), reslice(mask, m), slices_per_day=m, **kw)


def reslice_tensor(t: TrafficSeriesTensor, m: int) -> TrafficSeriesTensor:
    values, mask = t.daily()
    return replace(t, values=reslice(values, m), mask=reslice(mask, m), slices_per_day=m)


# ---------------------------------------------------------------- splits

@dataclass(frozen=True)
class DatasetSplit:
    train_days: tuple[int, ...]
    val_days: tuple[int, ...]
    test_days: tuple[int, ...]

    def __post_init__(self):
        sets = [set(self.train_days), set(self.val_days), set(self.test_days)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise DataError("split day sets overlap")


def split_counts(n_days: int, ratios=(0.7, 0.1, 0.2)) -> tuple[int, int, int]:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"split ratios must sum to 1, got {ratios}")
    if n_days < 3:
        raise DataError(f"need at least 3 days to split, got {n_days}")
    n_train = int(np.floor(ratios[0] * n_days + 1e-9))
    n_test = int(np.floor(ratios[2] * n_days + 1e-9))
    n_train, n_test = max(n_train, 1), max(n_test, 1)
    n_val = n_days - n_train - n_test
    if n_val < 1:
        n_train -= 1 - n_val
        n_val = 1
    return n_train, n_val, n_test


def split_by_days(t: TrafficSeriesTensor, ratios=(0.7, 0.1, 0.2)):
    """Contiguous temporal split: first block train, middle validation, last test."""
    n_train, n_val, n_test = split_counts(t.n_days, ratios)
    pos = np.arange(t.n_days)
    parts = (pos[:n_train], pos[n_train:n_train + n_val], pos[n_train + n_val:])
    split = DatasetSplit(*(tuple(t.days[p] for p in part) for part in parts))
    train, val, test = (t.select_days(p, role) for p, role in zip(parts, ("train", "val", "test")))
    return train, val, test, split


# ---------------------------------------------------------------- normalization

@dataclass(frozen=True)
class MinMaxScaler:
    lo: float
    hi: float

    @classmethod
    def fit(cls, t: TrafficSeriesTensor) -> "MinMaxScaler":
        obs = t.values[t.mask]
        if obs.size == 0:
            raise DataError("cannot fit a scaler without observed values")
        lo, hi = float(obs.min()), float(obs.max())
        return cls(lo, hi if hi > lo else lo + 1.0)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (x - self.lo) / (self.hi - self.lo)

    def inverse(self, x: np.ndarray) -> np.ndarray:
        return x * (self.hi - self.lo) + self.lo


# ---------------------------------------------------------------- road network

@dataclass(frozen=True)
class Sensor:
    sensor_id: str
    road_id: str
    position: tuple[float, ...]
    direction: str


@dataclass(frozen=True)
class RoadNetwork:
    sensors: tuple[Sensor, ...]
    segments: tuple[tuple[str, str], ...] = ()
    start_date: str = "2013-01-01"
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        ids = [s.sensor_id for s in self.sensors]
        if len(set(ids)) != len(ids):
            raise DataError("sensor ids are not unique")
        self._index.update({sid: i for i, sid in enumerate(ids)})
        for a, b in self.segments:
            for sid in (a, b):
                if sid not in self._index:
                    raise DataError(f"segment references unknown sensor '{sid}'")
        for s in self.sensors:
            if s.direction not in DIRECTIONS:
                raise DataError(f"sensor {s.sensor_id}: unknown direction '{s.direction}'")

    def index(self, sensor_id: str) -> int:
        try:
            return self._index[sensor_id]
        except KeyError:
            raise DataError(f"unknown sensor '{sensor_id}'") from None

    @property
    def sensor_ids(self) -> list[str]:
        return [s.sensor_id for s in self.sensors]

    def road_order(self) -> dict[str, int]:
        """1-based ordinal of each sensor along its road, by position."""
        order = {}
        roads: dict[str, list[Sensor]] = {}
        for s in self.sensors:
            roads.setdefault(s.road_id, []).append(s)
        for members in roads.values():
            members.sort(key=lambda s: (tuple(s.position), s.sensor_id))
            for rank, s in enumerate(members, 1):
                order[s.sensor_id] = rank
        return order

    def calendar(self, day: int) -> tuple[int, int, int]:
        """(month 1-12, day-of-month, weekday 0=Monday) of a day index."""
        date = dt.date.fromisoformat(self.start_date) + dt.timedelta(days=int(day))
        return date.month, date.day, date.weekday()

    def to_json(self) -> dict:
        return {
            "start_date": self.start_date,
            "sensors": [{"sensor_id": s.sensor_id, "road_id": s.road_id,
                         "position": list(s.position), "direction": s.direction}
                        for s in self.sensors],
            "segments": [list(seg) for seg in self.segments],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "RoadNetwork":
        sensors = tuple(Sensor(str(s["sensor_id"]), str(s["road_id"]),
                               tuple(float(v) for v in np.atleast_1d(s["position"])),
                               s["direction"]) for s in obj["sensors"])
        return cls(sensors, tuple((str(a), str(b)) for a, b in obj.get("segments", [])),
                   obj.get("start_date", "2013-01-01"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "RoadNetwork":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"network file not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


# ---------------------------------------------------------------- CSV ingestion

def write_csv(path, t: TrafficSeriesTensor, network: RoadNetwork) -> None:
    """One row per (sensor, timestamp); unobserved points get an empty value field."""
    values, mask = t.daily()
    start = dt.datetime.fromisoformat(network.start_date)
    step = dt.timedelta(minutes=t.interval_minutes)
    n = values.shape[2]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sensor_id", "timestamp", "value"])
        for dpos, day in enumerate(t.days):
            day0 = start + dt.timedelta(days=day)
            for s, sid in enumerate(network.sensor_ids):
                for p in range(n):
                    ts = (day0 + p * step).isoformat()
                    w.writerow([sid, ts, repr(float(values[dpos, s, p])) if mask[dpos, s, p] else ""])


def read_csv(path, network: RoadNetwork, interval_minutes: int, slices_per_day: int,
             units: str = "flow") -> TrafficSeriesTensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"data file not found: {path}")
    if (24 * 60) % interval_minutes:
        raise DataError(f"interval {interval_minutes} min does not divide a day")
    n = 24 * 60 // interval_minutes
    start = dt.datetime.fromisoformat(network.start_date)
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            ts = dt.datetime.fromisoformat(rec["timestamp"])
            offset = ts - start
            minutes = offset.days * 24 * 60 + offset.seconds // 60
            if minutes < 0 or minutes % interval_minutes:
                raise DataError(f"timestamp {rec['timestamp']} is off the {interval_minutes}-min grid")
            rows.append((network.index(rec["sensor_id"]), minutes // interval_minutes, rec["value"]))
    n_days = max(r[1] for r in rows) // n + 1 if rows else 0
    values = np.zeros((n_days, len(network.sensors), n))
    mask = np.zeros(values.shape, dtype=bool)
    for s, step, raw in rows:
        if raw is None or raw.strip() == "":
            continue
        d, p = divmod(step, n)
        values[d, s, p] = float(raw)
        mask[d, s, p] = True
    return from_daily(values, mask, slices_per_day, interval_minutes=interval_minutes, units=units)


# ---------------------------------------------------------------- binary cache

def save_cache(path, t: TrafficSeriesTensor) -> None:
    values, mask = t.daily()
    d, s, n = values.shape
    header = _HEADER.pack(CACHE_MAGIC, CACHE_VERSION, d, s, n, t.slices_per_day, t.interval_minutes)
    days = np.asarray(t.days, dtype="<i8").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(days)
        fh.write(values.astype("<f8").tobytes())
        fh.write(np.packbits(mask.reshape(-1)).tobytes())


def load_cache(path, units: str = "flow") -> TrafficSeriesTensor:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cache file not found: {path}")
    raw = path.read_bytes()
    magic, version, d, s, n, m, interval = _HEADER.unpack_from(raw)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise DataError(f"{path}: not a version-{CACHE_VERSION} tensor cache")
    off = _HEADER.size
    days = tuple(int(x) for x in np.frombuffer(raw, "<i8", d, off))
    off += 8 * d
    count = d * s * n
    values = np.frombuffer(raw, "<f8", count, off).reshape(d, s, n).astype(np.float64)
    off += 8 * count
    mask = np.unpackbits(np.frombuffer(raw, np.uint8, offset=off))[:count].astype(bool).reshape(d, s, n)
    return from_daily(values, mask, m, interval_minutes=interval, days=days, units=units)
