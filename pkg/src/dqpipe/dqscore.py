"""Five-dimension data-quality scoring and PCA-based score unification.

All scores are oriented so 1.0 is best. Accuracy and consistency use the
count of present (non-missing) values as denominator so that missingness is
penalized only by the completeness dimension.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import DimensionScores, UnifiedScore, Window
from .errors import (
    AllMissingWindow,
    BinMismatch,
    DegenerateCorpus,
    EmptySample,
    InsufficientSample,
)

DEFAULT_BINS = 32
HIST_SMOOTHING_EPS = 1e-10
PROFILE_SCHEMA_VERSION = 1

# Size of the sorted reference subsample used by cheap summary features
# (learn.dq_features); the full ref_sample stays the authority for scoring.
KS_SUBSAMPLE_SIZE = 256


@dataclass(frozen=True)
class Histogram:
    """Shared-edge probability mass function over B bins."""

    bin_edges: np.ndarray
    mass: np.ndarray

    def __post_init__(self) -> None:
        edges = np.asarray(self.bin_edges, dtype=np.float64)
        mass = np.asarray(self.mass, dtype=np.float64)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "mass", mass)
        if len(edges) != len(mass) + 1:
            raise ValueError("need B+1 edges for B mass entries")
        if not np.all(np.diff(edges) > 0):
            raise ValueError("bin edges must strictly increase")
        if np.any(mass < 0):
            raise ValueError("histogram mass must be non-negative")
        if abs(float(mass.sum()) - 1.0) > 1e-9:
            raise ValueError(f"histogram mass sums to {mass.sum()}, not 1")

    def same_edges(self, other: "Histogram") -> bool:
        return self.bin_edges.shape == other.bin_edges.shape and bool(
            np.array_equal(self.bin_edges, other.bin_edges)
        )


@dataclass(frozen=True)
class UnifierParams:
    """Leading principal axis of the 5-D score cloud plus min-max range."""

    mean: np.ndarray
    loading: np.ndarray
    proj_min: float
    proj_max: float

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        loading = np.asarray(self.loading, dtype=np.float64)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "loading", loading)
        if mean.shape != (5,) or loading.shape != (5,):
            raise ValueError("unifier is defined over exactly 5 dimensions")
        if abs(float(np.linalg.norm(loading)) - 1.0) > 1e-9:
            raise ValueError("loading must have unit norm")
        if not self.proj_min < self.proj_max:
            raise ValueError("proj_min must be < proj_max")


@dataclass
class ReferenceProfile:
    """Baseline statistics every window is scored and drift-checked against.

    Scoring fields (sample, histogram, fences, constraints, unifier) are
    treated as immutable; only divergence_history evolves, under the drift
    module's single-writer contract.
    """

    ref_sample: np.ndarray
    ref_hist: Histogram
    fences: tuple[float, float]
    constraints: tuple[float, float]
    unifier: UnifierParams | None = None
    divergence_history: list[float] = field(default_factory=list)
    built_from: tuple[int, int] = (0, 0)
    history_cap: int = 1000

    def __post_init__(self) -> None:
        self.ref_sample = np.sort(np.asarray(self.ref_sample, dtype=np.float64))
        if self.fences[0] > self.fences[1]:
            raise ValueError("fence low must be <= fence high")
        if self.constraints[0] > self.constraints[1]:
            raise ValueError("constraint min_valid must be <= max_valid")
        self._ks_subsample: np.ndarray | None = None

    @property
    def ks_subsample(self) -> np.ndarray:
        """Evenly strided sorted subsample of ref_sample, for cheap KS features."""
        if self._ks_subsample is None:
            n = len(self.ref_sample)
            k = min(KS_SUBSAMPLE_SIZE, n)
            idx = np.linspace(0, n - 1, k).round().astype(int)
            self._ks_subsample = self.ref_sample[idx]
        return self._ks_subsample

    def append_divergence(self, d: float) -> None:
        self.divergence_history.append(float(d))
        if len(self.divergence_history) > self.history_cap:
            del self.divergence_history[: len(self.divergence_history) - self.history_cap]


def _present(values: np.ndarray) -> np.ndarray:
    return values[~np.isnan(values)]


def ks_statistic(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic: max ECDF gap over the combined sample."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptySample("ks_statistic requires non-empty samples")
    a_sorted = np.sort(a)
    b_sorted = np.sort(b)
    z = np.concatenate([a_sorted, b_sorted])
    cdf_a = np.searchsorted(a_sorted, z, side="right") / a_sorted.size
    cdf_b = np.searchsorted(b_sorted, z, side="right") / b_sorted.size
    return float(np.abs(cdf_a - cdf_b).max())


def _entropy_bits(mass: np.ndarray) -> float:
    nz = mass[mass > 0]
    return float(-(nz * np.log2(nz)).sum())


def jsd(p: Histogram, q: Histogram) -> float:
    """Jensen-Shannon divergence in base-2 logs; symmetric and bounded to [0, 1]."""
    if not p.same_edges(q):
        raise BinMismatch("histograms must share identical bin edges")
    return jsd_mass(p.mass, q.mass)


def jsd_mass(p: np.ndarray, q: np.ndarray) -> float:
    m = 0.5 * (p + q)
    value = _entropy_bits(m) - 0.5 * (_entropy_bits(p) + _entropy_bits(q))
    # floating error can leave tiny negatives / >1 excursions
    return float(min(max(value, 0.0), 1.0))


def estimate_pdf(values, edges) -> Histogram:
    """Histogram over the profile's fixed edges with epsilon smoothing.

    Values outside the edge range are clipped into the end bins.
    """
    values = _present(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise AllMissingWindow("cannot estimate a pdf from zero present values")
    edges = np.asarray(edges, dtype=np.float64)
    clipped = np.clip(values, edges[0], edges[-1])
    counts, _ = np.histogram(clipped, bins=edges)
    mass = counts.astype(np.float64) + HIST_SMOOTHING_EPS
    mass /= mass.sum()
    return Histogram(bin_edges=edges, mass=mass)


def tukey_fences(sample: np.ndarray, k: float = 1.5) -> tuple[float, float]:
    q1, q3 = np.percentile(sample, [25.0, 75.0])
    iqr = q3 - q1
    return float(q1 - k * iqr), float(q3 + k * iqr)


def build_profile(
    values,
    constraints: tuple[float, float],
    bins: int = DEFAULT_BINS,
    built_from: tuple[int, int] = (0, 0),
) -> ReferenceProfile:
    """Fit reference sample, histogram, and anomaly fences from baseline values."""
    sample = _present(np.asarray(values, dtype=np.float64))
    if sample.size < 2:
        raise InsufficientSample("need at least 2 present values to build a profile")
    lo, hi = float(sample.min()), float(sample.max())
    if lo == hi:
        hi = lo + 1e-9
    edges = np.linspace(lo, hi, bins + 1)
    hist = estimate_pdf(sample, edges)
    return ReferenceProfile(
        ref_sample=sample,
        ref_hist=hist,
        fences=tukey_fences(sample),
        constraints=(float(constraints[0]), float(constraints[1])),
        built_from=built_from,
    )


def score_accuracy(w: Window, profile: ReferenceProfile) -> float:
    """1 - anomalous fraction, where anomalous means outside the profile fences."""
    present = w.present_values
    if present.size == 0:
        raise AllMissingWindow(f"window {w.id} is all-missing")
    lo, hi = profile.fences
    n_anomalous = int(((present < lo) | (present > hi)).sum())
    return 1.0 - n_anomalous / present.size


def score_completeness(w: Window) -> float:
    """1 - missing fraction over the full window length."""
    n = len(w)
    if n == 0:
        return 0.0
    return 1.0 - w.n_missing / n


def score_consistency(w: Window, constraints: tuple[float, float]) -> float:
    """In-constraint fraction of present values; vacuously 1.0 with none present."""
    present = w.present_values
    if present.size == 0:
        return 1.0
    lo, hi = constraints
    n_consistent = int(((present >= lo) & (present <= hi)).sum())
    return n_consistent / present.size


def score_timeliness(w: Window, profile: ReferenceProfile, lenient: bool = False) -> float:
    """1 - KS statistic of the window's present values against the reference sample."""
    present = w.present_values
    if present.size == 0:
        raise AllMissingWindow(f"window {w.id} is all-missing")
    if present.size < 2:
        if lenient:
            return 0.0
        raise InsufficientSample("timeliness needs >= 2 present values")
    return 1.0 - ks_statistic(present, profile.ref_sample)


def score_skewness(w: Window, profile: ReferenceProfile) -> float:
    """1 - JSD between the window's histogram and the reference histogram."""
    hist = estimate_pdf(w.values, profile.ref_hist.bin_edges)
    return 1.0 - jsd(hist, profile.ref_hist)


def fit_unifier(score_rows: np.ndarray) -> UnifierParams:
    """Fit the PCA combiner over an n x 5 matrix of dimension scores.

    The loading is the unit leading eigenvector of the covariance, sign-fixed
    so its component sum is positive; proj_min/proj_max come from the fit
    corpus and anchor the [0, 100] min-max standardization.
    """
    rows = np.asarray(score_rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 5:
        raise ValueError("score corpus must be n x 5")
    if rows.shape[0] < 5:
        raise DegenerateCorpus(f"need >= 5 corpus rows, got {rows.shape[0]}")
    mean = rows.mean(axis=0)
    centered = rows - mean
    cov = centered.T @ centered / rows.shape[0]
    if float(np.abs(cov).max()) < 1e-15:
        raise DegenerateCorpus("covariance is numerically zero")
    eigvals, eigvecs = np.linalg.eigh(cov)
    loading = eigvecs[:, -1]
    s = float(loading.sum())
    if s < 0 or (s == 0 and loading[np.flatnonzero(loading)[0]] < 0):
        loading = -loading
    loading = loading / np.linalg.norm(loading)
    proj = centered @ loading
    proj_min, proj_max = float(proj.min()), float(proj.max())
    if proj_min == proj_max:
        raise DegenerateCorpus("all corpus rows project to a single point")
    return UnifierParams(mean=mean, loading=loading, proj_min=proj_min, proj_max=proj_max)


def unify(d: DimensionScores, u: UnifierParams) -> UnifiedScore:
    """Project onto the loading and min-max scale to [0, 100] with clamping."""
    return UnifiedScore(unify_array(d.as_array(), u))


def unify_array(scores: np.ndarray, u: UnifierParams) -> float:
    proj = float((np.asarray(scores, dtype=np.float64) - u.mean) @ u.loading)
    value = 100.0 * (proj - u.proj_min) / (u.proj_max - u.proj_min)
    return min(max(value, 0.0), 100.0)


def score_dimensions(
    w: Window, profile: ReferenceProfile, lenient: bool = False
) -> DimensionScores:
    return DimensionScores(
        accuracy=score_accuracy(w, profile),
        completeness=score_completeness(w),
        consistency=score_consistency(w, profile.constraints),
        timeliness=score_timeliness(w, profile, lenient=lenient),
        skewness=score_skewness(w, profile),
    )


def direct_score(
    w: Window, profile: ReferenceProfile, lenient: bool = False
) -> tuple[DimensionScores, UnifiedScore]:
    """Ground-truth scorer: all five dimensions computed exactly, then unified.

    Requires a fitted unifier on the profile.
    """
    if profile.unifier is None:
        raise ValueError("profile has no fitted unifier")
    dims = score_dimensions(w, profile, lenient=lenient)
    return dims, unify(dims, profile.unifier)


# ---------------------------------------------------------------------------
# Versioned JSON serialization (field names are normative, see docs/FORMATS.md)
# ---------------------------------------------------------------------------


def unifier_to_dict(u: UnifierParams) -> dict:
    return {
        "schema_version": PROFILE_SCHEMA_VERSION,
        "mean": u.mean.tolist(),
        "loading": u.loading.tolist(),
        "proj_min": u.proj_min,
        "proj_max": u.proj_max,
    }


def unifier_from_dict(d: dict) -> UnifierParams:
    return UnifierParams(
        mean=np.array(d["mean"], dtype=np.float64),
        loading=np.array(d["loading"], dtype=np.float64),
        proj_min=float(d["proj_min"]),
        proj_max=float(d["proj_max"]),
    )


def profile_to_dict(p: ReferenceProfile) -> dict:
    return {
        "schema_version": PROFILE_SCHEMA_VERSION,
        "ref_sample": p.ref_sample.tolist(),
        "ref_hist": {
            "bin_edges": p.ref_hist.bin_edges.tolist(),
            "mass": p.ref_hist.mass.tolist(),
        },
        "fences": list(p.fences),
        "constraints": list(p.constraints),
        "unifier": None if p.unifier is None else unifier_to_dict(p.unifier),
        "divergence_history": list(p.divergence_history),
        "built_from": list(p.built_from),
    }


def profile_from_dict(d: dict) -> ReferenceProfile:
    hist = Histogram(
        bin_edges=np.array(d["ref_hist"]["bin_edges"], dtype=np.float64),
        mass=np.array(d["ref_hist"]["mass"], dtype=np.float64),
    )
    return ReferenceProfile(
        ref_sample=np.array(d["ref_sample"], dtype=np.float64),
        ref_hist=hist,
        fences=(float(d["fences"][0]), float(d["fences"][1])),
        constraints=(float(d["constraints"][0]), float(d["constraints"][1])),
        unifier=None if d.get("unifier") is None else unifier_from_dict(d["unifier"]),
        divergence_history=[float(x) for x in d.get("divergence_history", [])],
        built_from=(int(d["built_from"][0]), int(d["built_from"][1])),
    )


def save_profile(p: ReferenceProfile, path: str | Path) -> None:
    Path(path).write_text(json.dumps(profile_to_dict(p)))


def load_profile(path: str | Path) -> ReferenceProfile:
    return profile_from_dict(json.loads(Path(path).read_text()))
