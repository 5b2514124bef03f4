"""Stream sources (synthetic generator, CSV replay, socket), windowization,
and feature extraction for the inference model.

The synthetic stream stands in for a production vacuum-pump sensor feed:
each cycle decays exponentially from a start pressure toward its minimum,
with per-cycle parameter jitter (so the label is learnable from the early
readings), regime switches for drift, and scheduled corruption. Labels are
always computed on the clean cycle before corruption is applied.
"""

from __future__ import annotations

import hashlib
import math
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .datamodel import PumpCycle, Reading, Window, read_readings_csv
from .errors import AllMissingWindow, ConfigError
from .mutate import (
    MutationPlan,
    anomaly_values,
    missing_values,
    out_of_range_values,
    shift_values,
)

READING_PERIOD_NS = 100_000_000  # one reading every 100 ms


@dataclass(frozen=True)
class DriftPoint:
    """Regime switch: from this cycle on, use the new decay/noise."""

    cycle_index: int
    decay: float
    noise_std: float


@dataclass(frozen=True)
class CorruptionRule:
    """Plan mix applied to cycles in [start_cycle, end_cycle)."""

    start_cycle: int
    end_cycle: int
    plans: tuple[MutationPlan, ...]
    weights: tuple[float, ...]
    fraction: float = 1.0

    def __post_init__(self) -> None:
        if len(self.plans) != len(self.weights):
            raise ConfigError("plans and weights must align")
        if not (0.0 <= self.fraction <= 1.0):
            raise ConfigError("fraction must be in [0, 1]")


@dataclass(frozen=True)
class SynthConfig:
    n_cycles: int = 100
    cycle_len: int = 2400
    p0: float = 10.0
    decay: float = 0.6
    noise_std: float = 0.05
    p0_jitter: float = 0.10
    decay_jitter: float = 0.15
    drift_schedule: tuple[DriftPoint, ...] = ()
    corruption_schedule: tuple[CorruptionRule, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_cycles < 1:
            raise ConfigError("n_cycles must be >= 1")
        if self.cycle_len < 2:
            raise ConfigError("cycle_len must be >= 2")
        if self.p0 <= 0:
            raise ConfigError("p0 must be > 0")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        for dp in self.drift_schedule:
            if not (0 <= dp.cycle_index < self.n_cycles):
                raise ConfigError(f"drift point at cycle {dp.cycle_index} out of range")
        for cr in self.corruption_schedule:
            if not (0 <= cr.start_cycle <= cr.end_cycle <= self.n_cycles):
                raise ConfigError("corruption range out of bounds")

    def regime_at(self, cycle_index: int) -> tuple[float, float]:
        decay, noise = self.decay, self.noise_std
        for dp in self.drift_schedule:
            if dp.cycle_index <= cycle_index:
                decay, noise = dp.decay, dp.noise_std
        return decay, noise

    def value_range(self) -> tuple[float, float]:
        """Analytic envelope of clean values across all regimes, jitter included."""
        decays = [self.decay] + [dp.decay for dp in self.drift_schedule]
        noises = [self.noise_std] + [dp.noise_std for dp in self.drift_schedule]
        p0_hi = self.p0 * (1 + self.p0_jitter)
        p0_lo = self.p0 * (1 - self.p0_jitter)
        d_hi = max(decays) * (1 + self.decay_jitter)
        lo = p0_lo * math.exp(-d_hi) - 4 * max(noises)
        hi = p0_hi + 4 * max(noises)
        return lo, hi


def _cycle_rng(seed: int, cycle_index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed & 0x7FFFFFFF, cycle_index, stream])


def synth_generate(cfg: SynthConfig) -> Iterator[PumpCycle]:
    """Deterministic stream of labeled pump cycles."""
    value_range = cfg.value_range()
    total = 0
    for c in range(cfg.n_cycles):
        rng = _cycle_rng(cfg.seed, c, 1)
        decay, noise = cfg.regime_at(c)
        p0_c = cfg.p0 * (1 + cfg.p0_jitter * rng.uniform(-1, 1))
        decay_c = decay * (1 + cfg.decay_jitter * rng.uniform(-1, 1))
        t = np.arange(1, cfg.cycle_len + 1, dtype=np.float64) / cfg.cycle_len
        clean = p0_c * np.exp(-decay_c * t)
        if noise > 0:
            clean = clean + rng.normal(0.0, noise, size=cfg.cycle_len)
        label = float(clean.min())
        values = _apply_corruption(cfg, c, clean, value_range)
        timestamps = (total + np.arange(cfg.cycle_len, dtype=np.int64)) * READING_PERIOD_NS
        total += cfg.cycle_len
        yield PumpCycle(cycle_id=c, timestamps=timestamps, values=values, label=label)


def _apply_corruption(
    cfg: SynthConfig, cycle_index: int, clean: np.ndarray, value_range: tuple[float, float]
) -> np.ndarray:
    values = clean
    for rule in cfg.corruption_schedule:
        if not (rule.start_cycle <= cycle_index < rule.end_cycle):
            continue
        rng = _cycle_rng(cfg.seed, cycle_index, 2)
        if rng.uniform() >= rule.fraction:
            continue
        weights = np.asarray(rule.weights, dtype=np.float64)
        plan = rule.plans[int(rng.choice(len(rule.plans), p=weights / weights.sum()))]
        values = values.copy()
        for op in plan.ops:
            if op.op == "missing":
                values = missing_values(values, op.rate, rng)
            elif op.op == "anomaly":
                values = anomaly_values(values, op.rate, op.magnitude, value_range, rng)
            elif op.op == "out_of_range":
                values = out_of_range_values(values, op.rate, value_range, rng)
            else:
                values = shift_values(values, op.magnitude)
    return values


def replay_source(path: str | Path, speedup: float = math.inf) -> Iterator[Reading]:
    """Replay a canonical CSV file; paces emission by timestamp unless speedup is inf."""
    readings = read_readings_csv(path)
    prev_ts: int | None = None
    for r in readings:
        if math.isfinite(speedup) and prev_ts is not None:
            time.sleep(max(r.timestamp_ns - prev_ts, 0) / 1e9 / speedup)
        prev_ts = r.timestamp_ns
        yield r


def socket_source(host: str, port: int) -> Iterator[Reading]:
    """Newline-delimited `timestamp_ns,value` rows over TCP until EOF."""
    with socket.create_connection((host, port)) as sock:
        buf = b""
        while True:
            chunk = sock.recv(65536)
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                text = line.decode().strip()
                if not text:
                    continue
                ts_s, _, val_s = text.partition(",")
                yield Reading(int(ts_s), float(val_s) if val_s.strip() else None)


def windowize(
    readings: Iterable[Reading], n: int, start_id: int = 0, cycle_id: int = -1
) -> Iterator[Window]:
    """Consecutive non-overlapping windows of exactly n readings.

    A final shorter remainder is emitted flagged as partial; ids are contiguous.
    """
    if n < 2:
        raise ConfigError("window size must be >= 2")
    ts_buf: list[int] = []
    val_buf: list[float] = []
    wid = start_id
    for r in readings:
        ts_buf.append(r.timestamp_ns)
        val_buf.append(np.nan if r.value is None else r.value)
        if len(ts_buf) == n:
            yield Window(
                id=wid,
                cycle_id=cycle_id,
                timestamps=np.array(ts_buf, dtype=np.int64),
                values=np.array(val_buf, dtype=np.float64),
            )
            wid += 1
            ts_buf, val_buf = [], []
    if ts_buf:
        yield Window(
            id=wid,
            cycle_id=cycle_id,
            timestamps=np.array(ts_buf, dtype=np.int64),
            values=np.array(val_buf, dtype=np.float64),
            partial=True,
        )


def cycle_windows(cycle: PumpCycle, n: int, start_id: int) -> list[Window]:
    """Split one cycle into windows; the per-cycle remainder is flagged partial."""
    out: list[Window] = []
    wid = start_id
    for lo in range(0, len(cycle), n):
        hi = min(lo + n, len(cycle))
        out.append(
            Window(
                id=wid,
                cycle_id=cycle.cycle_id,
                timestamps=cycle.timestamps[lo:hi],
                values=cycle.values[lo:hi],
                partial=(hi - lo) < n,
            )
        )
        wid += 1
    return out


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    n_buckets: int = 60
    f_history: int = 5
    use_min: bool = True
    use_max: bool = True
    use_std: bool = True
    use_last: bool = True
    use_slope: bool = False

    def __post_init__(self) -> None:
        if self.n_buckets < 1:
            raise ConfigError("n_buckets must be >= 1")
        if self.f_history < 0:
            raise ConfigError("f_history must be >= 0")

    @property
    def stat_flags(self) -> tuple[bool, ...]:
        return (self.use_min, self.use_max, self.use_std, self.use_last, self.use_slope)


def feature_length(cfg: FeatureConfig) -> int:
    return cfg.n_buckets + sum(cfg.stat_flags) + cfg.f_history


def feature_schema_id(cfg: FeatureConfig) -> str:
    payload = f"{cfg.n_buckets}|{cfg.f_history}|{''.join(str(int(f)) for f in cfg.stat_flags)}"
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    schema_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))


def featureize_values(
    values: np.ndarray, history_labels: Sequence[float], cfg: FeatureConfig
) -> np.ndarray:
    """Bucket means + enabled stats + recent cycle labels, fully imputed."""
    n = len(values)
    if n % cfg.n_buckets != 0:
        raise ConfigError(f"n_buckets {cfg.n_buckets} does not divide window size {n}")
    mask = np.isfinite(values)
    if not mask.any():
        raise AllMissingWindow("cannot featureize an all-missing window")
    present = values[mask]
    wmean = float(present.mean())

    per = n // cfg.n_buckets
    v2 = values.reshape(cfg.n_buckets, per)
    m2 = mask.reshape(cfg.n_buckets, per)
    counts = m2.sum(axis=1)
    sums = np.where(m2, v2, 0.0).sum(axis=1)
    buckets = np.where(counts > 0, sums / np.maximum(counts, 1), wmean)

    stats: list[float] = []
    if cfg.use_min:
        stats.append(float(present.min()))
    if cfg.use_max:
        stats.append(float(present.max()))
    if cfg.use_std:
        stats.append(float(present.std()))
    if cfg.use_last:
        stats.append(float(present[-1]))
    if cfg.use_slope:
        idx = np.flatnonzero(mask) / n
        if len(idx) >= 2:
            stats.append(float(np.polyfit(idx, present, 1)[0]))
        else:
            stats.append(0.0)

    hist = [float(x) for x in history_labels][-cfg.f_history :] if cfg.f_history else []
    if cfg.f_history:
        pad = float(np.mean(hist)) if hist else wmean
        hist = [pad] * (cfg.f_history - len(hist)) + hist

    return np.concatenate([buckets, np.array(stats), np.array(hist)])


def featureize(current: Window, history: Sequence[PumpCycle], cfg: FeatureConfig) -> FeatureVector:
    """Fixed-length feature vector for one full window given completed cycles."""
    if current.partial:
        raise ConfigError("partial windows are not featureized")
    labels = [c.label for c in history if c.label is not None]
    return FeatureVector(
        values=featureize_values(current.values, labels, cfg),
        schema_id=feature_schema_id(cfg),
    )


# ---------------------------------------------------------------------------
# Synth config serialization (used by the `synth` CLI and bench specs)
# ---------------------------------------------------------------------------


def synth_config_to_dict(cfg: SynthConfig) -> dict:
    return {
        "n_cycles": cfg.n_cycles,
        "cycle_len": cfg.cycle_len,
        "p0": cfg.p0,
        "decay": cfg.decay,
        "noise_std": cfg.noise_std,
        "p0_jitter": cfg.p0_jitter,
        "decay_jitter": cfg.decay_jitter,
        "seed": cfg.seed,
        "drift_schedule": [
            {"cycle": dp.cycle_index, "decay": dp.decay, "noise_std": dp.noise_std}
            for dp in cfg.drift_schedule
        ],
        "corruption_schedule": [
            {
                "start": cr.start_cycle,
                "end": cr.end_cycle,
                "fraction": cr.fraction,
                "plans": [
                    {
                        "name": p.name,
                        "weight": w,
                        "ops": [
                            {
                                "op": o.op,
                                "rate": o.rate,
                                "magnitude": o.magnitude,
                            }
                            for o in p.ops
                        ],
                    }
                    for p, w in zip(cr.plans, cr.weights)
                ],
            }
            for cr in cfg.corruption_schedule
        ],
    }


def synth_config_from_dict(d: dict) -> SynthConfig:
    from .mutate import MutationOp

    drift = tuple(
        DriftPoint(int(x["cycle"]), float(x["decay"]), float(x["noise_std"]))
        for x in d.get("drift_schedule", [])
    )
    rules = []
    for x in d.get("corruption_schedule", []):
        plans = []
        weights = []
        for p in x["plans"]:
            ops = tuple(
                MutationOp(
                    op=o["op"],
                    rate=float(o.get("rate", 0.0)),
                    magnitude=float(o.get("magnitude", 0.0)),
                )
                for o in p["ops"]
            )
            plans.append(MutationPlan(p["name"], ops))
            weights.append(float(p.get("weight", 1.0)))
        rules.append(
            CorruptionRule(
                start_cycle=int(x["start"]),
                end_cycle=int(x["end"]),
                plans=tuple(plans),
                weights=tuple(weights),
                fraction=float(x.get("fraction", 1.0)),
            )
        )
    return SynthConfig(
        n_cycles=int(d.get("n_cycles", 100)),
        cycle_len=int(d.get("cycle_len", 2400)),
        p0=float(d.get("p0", 10.0)),
        decay=float(d.get("decay", 0.6)),
        noise_std=float(d.get("noise_std", 0.05)),
        p0_jitter=float(d.get("p0_jitter", 0.10)),
        decay_jitter=float(d.get("decay_jitter", 0.15)),
        drift_schedule=drift,
        corruption_schedule=tuple(rules),
        seed=int(d.get("seed", 0)),
    )
