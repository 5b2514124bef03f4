"""Divergence-based drift detection with an adaptive empirical threshold.

The active detector keeps a history of per-window divergences and flags
drift when the current value exceeds the (1 - tau) nearest-rank quantile of
that history, so the threshold tracks the stream instead of being fixed up
front. Higher tau therefore means a more sensitive detector and more
adaptations. Passive mode ignores the data and fires on a fixed schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datamodel import DriftVerdict, Window
from .dqscore import ReferenceProfile, build_profile, estimate_pdf, jsd
from .errors import ConfigError, InsufficientData

DEFAULT_WARMUP = 20
DEFAULT_REBASE_WINDOWS = 50
HISTORY_CAP = 1000

MODES = ("active", "passive", "none")


@dataclass(frozen=True)
class DriftConfig:
    mode: str = "active"
    tau: float = 0.06
    w_passive: int = 100
    warmup: int = DEFAULT_WARMUP
    rebase_windows: int = DEFAULT_REBASE_WINDOWS

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown drift mode {self.mode!r}")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError("tau must be in (0, 1)")
        if self.w_passive < 1:
            raise ConfigError("w_passive must be >= 1")
        if self.warmup < 5:
            raise ConfigError("warmup must be >= 5")
        if self.rebase_windows < 1:
            raise ConfigError("rebase_windows must be >= 1")


def divergence(w: Window, profile: ReferenceProfile) -> float:
    """Base-2 JSD between the window's histogram and the reference histogram."""
    return jsd(estimate_pdf(w.values, profile.ref_hist.bin_edges), profile.ref_hist)


def nearest_rank_quantile(history: Sequence[float], q: float) -> float:
    """Deterministic nearest-rank quantile: value at rank ceil(q * n), 1-indexed."""
    values = np.sort(np.asarray(history, dtype=np.float64))
    rank = max(1, math.ceil(q * len(values)))
    return float(values[rank - 1])


def detect_active(
    d_t: float, history: Sequence[float], tau: float, warmup: int = DEFAULT_WARMUP
) -> DriftVerdict:
    """Flag drift when d_t exceeds the (1 - tau) quantile of the history.

    During warm-up (fewer than `warmup` recorded divergences) no drift is
    ever declared and the quantile rank is undefined.
    """
    n = len(history)
    if n < warmup:
        return DriftVerdict(divergence=d_t, quantile_rank=None, drift=False, history_len=n)
    threshold = nearest_rank_quantile(history, 1.0 - tau)
    arr = np.asarray(history, dtype=np.float64)
    rank = float((arr < d_t).mean())
    return DriftVerdict(
        divergence=d_t, quantile_rank=rank, drift=bool(d_t > threshold), history_len=n
    )


def update_history(profile: ReferenceProfile, d_t: float) -> None:
    """Append one divergence; the history is a ring of the most recent values."""
    if not (0.0 <= d_t <= 1.0):
        raise ValueError(f"divergence {d_t} outside [0, 1]")
    profile.history_cap = HISTORY_CAP
    profile.append_divergence(d_t)


def passive_due(window_index: int, w_passive: int) -> bool:
    """Fixed-schedule trigger: every w_passive-th window, 1-based."""
    if window_index < 1:
        raise ValueError("window_index must be >= 1")
    return window_index % w_passive == 0


def rebase_reference(
    recent: Sequence[Window], old_profile: ReferenceProfile, bins: int | None = None
) -> ReferenceProfile:
    """New reference fitted from recent windows; integrity constraints carry over.

    The divergence history starts empty (old divergences are not comparable
    to the new reference) and the unifier is left unset for the orchestrator
    to refit from a freshly annotated corpus.
    """
    if not recent:
        raise InsufficientData("rebase requires at least one recent window")
    pooled = np.concatenate([w.present_values for w in recent])
    if pooled.size < 2:
        raise InsufficientData("recent windows carry no present values")
    if bins is None:
        bins = len(old_profile.ref_hist.mass)
    ids = [w.id for w in recent]
    return build_profile(
        pooled,
        constraints=old_profile.constraints,
        bins=bins,
        built_from=(min(ids), max(ids)),
    )
