"""Core domain types: readings, windows, pump cycles, scores, verdicts, artifacts.

All values are immutable after construction. Missing measurements are
first-class: they are carried as NaN inside the value arrays and surface as
``None`` on individual readings, so 0.0 and "absent" are never conflated.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .errors import EmptyCycle, MalformedRecord, NonMonotoneTimestamps

DEFAULT_WINDOW_SIZE = 1200


class Reading(NamedTuple):
    """One sensor measurement: nanosecond timestamp and optional value."""

    timestamp_ns: int
    value: float | None


def _as_arrays(readings: Iterable[Reading]) -> tuple[np.ndarray, np.ndarray]:
    ts: list[int] = []
    vals: list[float] = []
    for r in readings:
        ts.append(int(r[0]))
        v = r[1]
        vals.append(np.nan if v is None else float(v))
    return np.asarray(ts, dtype=np.int64), np.asarray(vals, dtype=np.float64)


def _check_monotone(timestamps: np.ndarray) -> None:
    if len(timestamps) > 1 and not np.all(np.diff(timestamps) > 0):
        raise NonMonotoneTimestamps("timestamps must strictly increase")


def _freeze(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Window:
    """Fixed-size ordered slice of readings; the unit of scoring and prediction.

    ``values`` uses NaN for missing measurements. A terminal slice shorter
    than the configured size must carry ``partial=True``.
    """

    id: int
    cycle_id: int
    timestamps: np.ndarray
    values: np.ndarray
    partial: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamps", _freeze(np.asarray(self.timestamps, dtype=np.int64)))
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64)))
        if self.id < 0:
            raise ValueError("window id must be >= 0")
        if len(self.timestamps) != len(self.values):
            raise ValueError("timestamps and values length mismatch")
        _check_monotone(self.timestamps)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def present_values(self) -> np.ndarray:
        return self.values[~np.isnan(self.values)]

    @property
    def n_missing(self) -> int:
        return int(np.isnan(self.values).sum())

    def readings(self) -> Iterator[Reading]:
        for t, v in zip(self.timestamps.tolist(), self.values.tolist()):
            yield Reading(t, None if np.isnan(v) else v)

    def replace_values(self, values: np.ndarray) -> "Window":
        """New window with the same identity/timestamps and different values."""
        return Window(self.id, self.cycle_id, self.timestamps, values, self.partial)


@dataclass(frozen=True)
class PumpCycle:
    """One full pumping event; its label is the minimum pressure reached."""

    cycle_id: int
    timestamps: np.ndarray
    values: np.ndarray
    label: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "timestamps", _freeze(np.asarray(self.timestamps, dtype=np.int64)))
        object.__setattr__(self, "values", _freeze(np.asarray(self.values, dtype=np.float64)))
        _check_monotone(self.timestamps)

    def __len__(self) -> int:
        return len(self.values)

    def readings(self) -> Iterator[Reading]:
        for t, v in zip(self.timestamps.tolist(), self.values.tolist()):
            yield Reading(t, None if np.isnan(v) else v)


def extract_label(cycle: PumpCycle) -> float:
    """Minimum over the cycle's non-missing values.

    Raises EmptyCycle when every reading is missing or there are none.
    """
    present = cycle.values[~np.isnan(cycle.values)]
    if present.size == 0:
        raise EmptyCycle(f"cycle {cycle.cycle_id} has no non-missing readings")
    return float(present.min())


def make_window(
    readings: Sequence[Reading] | Iterable[Reading],
    id: int,
    cycle_id: int,
    expected_n: int,
    partial: bool = False,
) -> Window:
    """Validated Window from an ordered reading sequence.

    Non-partial windows must contain exactly ``expected_n`` readings.
    """
    ts, vals = _as_arrays(readings)
    if not partial and len(ts) != expected_n:
        raise ValueError(f"expected {expected_n} readings, got {len(ts)} (partial not flagged)")
    return Window(id=id, cycle_id=cycle_id, timestamps=ts, values=vals, partial=partial)


@dataclass(frozen=True)
class DimensionScores:
    """The five per-dimension quality scores, each in [0, 1], 1 = best."""

    accuracy: float
    completeness: float
    consistency: float
    timeliness: float
    skewness: float

    FIELDS = ("accuracy", "completeness", "consistency", "timeliness", "skewness")

    def __post_init__(self) -> None:
        for name in self.FIELDS:
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} score {v} outside [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in self.FIELDS], dtype=np.float64)

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "DimensionScores":
        return cls(*(float(x) for x in a))


@dataclass(frozen=True)
class UnifiedScore:
    """Combined data-quality score on the [0, 100] scale."""

    value: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.value <= 100.0):
            raise ValueError(f"unified score {self.value} outside [0, 100]")


@dataclass(frozen=True)
class DriftVerdict:
    """Per-window divergence, its rank within history, and the drift flag."""

    divergence: float
    quantile_rank: float | None
    drift: bool
    history_len: int


class ArtifactKind(str, enum.Enum):
    REFERENCE_PROFILE = "reference_profile"
    UNIFIER = "unifier"
    DQ_SCORER = "dq_scorer"
    INFERENCE_MODEL = "inference_model"


@dataclass(frozen=True)
class VersionedArtifact:
    """Registry entry: opaque payload plus provenance metadata."""

    kind: ArtifactKind
    version: int
    payload: bytes
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.version < 1:
            raise ValueError("artifact versions start at 1")


# ---------------------------------------------------------------------------
# Canonical on-disk format: CSV with `timestamp_ns,value` columns, one file
# per cycle named cycle_<id>.csv; an empty value field encodes missing.
# ---------------------------------------------------------------------------

CSV_HEADER = ("timestamp_ns", "value")


def write_readings_csv(path: str | Path, readings: Iterable[Reading]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in readings:
            w.writerow([r.timestamp_ns, "" if r.value is None else repr(r.value)])


def read_readings_csv(path: str | Path) -> list[Reading]:
    """Parse a canonical CSV file; raises MalformedRecord with the line number."""
    out: list[Reading] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if line_no == 1 and row and row[0] == CSV_HEADER[0]:
                continue
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if len(row) != 2:
                raise MalformedRecord(line_no, f"expected 2 fields, got {len(row)}")
            try:
                ts = int(row[0])
            except ValueError:
                raise MalformedRecord(line_no, f"non-integer timestamp {row[0]!r}") from None
            raw = row[1].strip()
            if raw == "":
                value: float | None = None
            else:
                try:
                    value = float(raw)
                except ValueError:
                    raise MalformedRecord(line_no, f"non-numeric value {raw!r}") from None
            out.append(Reading(ts, value))
    return out


def cycle_filename(cycle_id: int) -> str:
    return f"cycle_{cycle_id}.csv"


def write_cycle_csv(directory: str | Path, cycle: PumpCycle) -> Path:
    path = Path(directory) / cycle_filename(cycle.cycle_id)
    write_readings_csv(path, cycle.readings())
    return path


def read_cycle_csv(path: str | Path, cycle_id: int, label: float | None = None) -> PumpCycle:
    readings = read_readings_csv(path)
    ts, vals = _as_arrays(readings)
    return PumpCycle(cycle_id=cycle_id, timestamps=ts, values=vals, label=label)
