"""Synthetic corruption operators and annotated-corpus construction.

Corruption counts are exact (round(rate * N)) rather than Bernoulli draws so
the targeted dimension score has a closed form, and every operator is
deterministic under a fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .datamodel import DimensionScores, Window
from .dqscore import ReferenceProfile, score_dimensions, fit_unifier, unify_array
from .errors import AllMissingWindow, InsufficientSample

OPERATOR_IDS = ("missing", "anomaly", "out_of_range", "shift")


@dataclass(frozen=True)
class MutationOp:
    op: str
    rate: float = 0.0
    magnitude: float = 0.0
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.op not in OPERATOR_IDS:
            raise ValueError(f"unknown operator {self.op!r}")
        if not (0.0 <= self.rate <= 1.0):
            raise ValueError("rate must be in [0, 1]")
        # shift carries a signed delta; the other operators use magnitude
        # as a non-negative displacement scale
        if self.op != "shift" and self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")


@dataclass(frozen=True)
class MutationPlan:
    name: str
    ops: tuple[MutationOp, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "ops", tuple(self.ops))


def _rng(seed: int | None) -> np.random.Generator:
    return np.random.default_rng(0 if seed is None else seed)


# Array-level operators; window operators and the synthetic generator share
# these so “corrupt a window” and “corrupt a cycle” behave identically.


def missing_values(values: np.ndarray, rate: float, rng: np.random.Generator) -> np.ndarray:
    out = values.copy()
    k = round(rate * len(out))
    if k == 0:
        return out
    present_idx = np.flatnonzero(~np.isnan(out))
    k = min(k, len(present_idx))
    chosen = rng.choice(present_idx, size=k, replace=False)
    out[chosen] = np.nan
    return out


def anomaly_values(
    values: np.ndarray,
    rate: float,
    magnitude: float,
    fences: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    out = values.copy()
    present_idx = np.flatnonzero(~np.isnan(out))
    k = round(rate * len(present_idx))
    if k == 0:
        return out
    chosen = rng.choice(present_idx, size=k, replace=False)
    lo, hi = fences
    width = max(hi - lo, 1e-12)
    signs = rng.integers(0, 2, size=k) * 2 - 1
    # displace from the fence boundary itself so the result is outside for
    # any magnitude > 0
    out[chosen] = np.where(signs > 0, hi + magnitude * width, lo - magnitude * width)
    return out


def out_of_range_values(
    values: np.ndarray,
    rate: float,
    constraints: tuple[float, float],
    rng: np.random.Generator,
    magnitude: float = 0.25,
) -> np.ndarray:
    out = values.copy()
    present_idx = np.flatnonzero(~np.isnan(out))
    k = round(rate * len(present_idx))
    if k == 0:
        return out
    chosen = rng.choice(present_idx, size=k, replace=False)
    lo, hi = constraints
    span = max(hi - lo, 1e-12)
    signs = rng.integers(0, 2, size=k) * 2 - 1
    offs = span * (magnitude + rng.uniform(0.0, magnitude, size=k))
    out[chosen] = np.where(signs > 0, hi + offs, lo - offs)
    return out


def shift_values(values: np.ndarray, delta: float) -> np.ndarray:
    out = values.copy()
    mask = ~np.isnan(out)
    out[mask] += delta
    return out


def inject_missing(w: Window, rate: float, seed: int | None = None) -> Window:
    """Replace round(rate * N) present values with missing at seeded positions."""
    return w.replace_values(missing_values(w.values, rate, _rng(seed)))


def inject_anomalies(
    w: Window,
    rate: float,
    magnitude: float,
    profile: ReferenceProfile,
    seed: int | None = None,
) -> Window:
    """Displace round(rate * Npresent) present values outside the profile fences."""
    return w.replace_values(
        anomaly_values(w.values, rate, magnitude, profile.fences, _rng(seed))
    )


def inject_out_of_range(
    w: Window, rate: float, profile: ReferenceProfile, seed: int | None = None
) -> Window:
    """Push round(rate * Npresent) present values outside the integrity constraints."""
    return w.replace_values(
        out_of_range_values(w.values, rate, profile.constraints, _rng(seed))
    )


def inject_shift(w: Window, delta: float) -> Window:
    """Add delta to every present value."""
    return w.replace_values(shift_values(w.values, delta))


def apply_op(
    w: Window, op: MutationOp, profile: ReferenceProfile, fallback_seed: int = 0
) -> Window:
    seed = op.seed if op.seed is not None else fallback_seed
    if op.op == "missing":
        return inject_missing(w, op.rate, seed)
    if op.op == "anomaly":
        return inject_anomalies(w, op.rate, op.magnitude, profile, seed)
    if op.op == "out_of_range":
        return inject_out_of_range(w, op.rate, profile, seed)
    return inject_shift(w, op.magnitude)


def apply_plan(
    w: Window, plan: MutationPlan, profile: ReferenceProfile, base_seed: int = 0
) -> Window:
    for i, op in enumerate(plan.ops):
        w = apply_op(w, op, profile, fallback_seed=base_seed * 1_000_003 + i)
    return w


def default_plans(ref_std: float) -> list[MutationPlan]:
    """Catalogue covering all five dimensions, incl. three composites.

    Ordered so that any prefix of >= 5 plans still degrades every dimension
    at more than one severity; corpus builders may take a prefix. Missing
    rates reach 0.7 so the completeness axis carries enough corpus variance
    for the PCA combiner to weight it, and shifts appear in both directions.
    """
    return [
        MutationPlan(
            "mixed_severe",
            (
                MutationOp("missing", rate=0.5),
                MutationOp("anomaly", rate=0.1, magnitude=2.5),
                MutationOp("out_of_range", rate=0.1),
                MutationOp("shift", magnitude=2.0 * ref_std),
            ),
        ),
        MutationPlan("shift_halfstd", (MutationOp("shift", magnitude=0.5 * ref_std),)),
        MutationPlan("missing_70", (MutationOp("missing", rate=0.7),)),
        MutationPlan("anomaly_10", (MutationOp("anomaly", rate=0.1, magnitude=2.0),)),
        MutationPlan("out_of_range_20", (MutationOp("out_of_range", rate=0.2),)),
        MutationPlan(
            "mixed_medium",
            (
                MutationOp("missing", rate=0.3),
                MutationOp("anomaly", rate=0.05, magnitude=1.5),
                MutationOp("shift", magnitude=-1.0 * ref_std),
            ),
        ),
        MutationPlan("shift_minus2std", (MutationOp("shift", magnitude=-2.0 * ref_std),)),
        MutationPlan("missing_30", (MutationOp("missing", rate=0.3),)),
        MutationPlan(
            "mixed_mild",
            (
                MutationOp("missing", rate=0.05),
                MutationOp("shift", magnitude=0.25 * ref_std),
            ),
        ),
    ]


@dataclass
class AnnotatedCorpus:
    """Mutation-annotated training rows for the ML quality scorer."""

    features: np.ndarray  # (n, len(DQ_FEATURE_NAMES))
    dim_scores: np.ndarray  # (n, 5)
    unified: np.ndarray  # (n,) in [0, 100]
    n_skipped: int = 0


def build_annotated_corpus(
    clean: Sequence[Window],
    plans: Sequence[MutationPlan],
    profile: ReferenceProfile,
    refit_unifier: bool = False,
    seed: int = 0,
):
    """Score each window under the identity plan plus every mutation plan.

    Returns (corpus, unifier). When the profile has no fitted unifier (or
    refit_unifier is set) a fresh one is fitted from this corpus's dimension
    scores; the caller decides whether to install it on the profile.
    """
    from .learn import dq_features  # local import; learn depends on dqscore only

    feats: list[np.ndarray] = []
    dims: list[np.ndarray] = []
    skipped = 0
    for i, w in enumerate(clean):
        variants = [w] + [
            apply_plan(w, plan, profile, base_seed=seed * 9_176 + i * 131 + pi)
            for pi, plan in enumerate(plans)
        ]
        for v in variants:
            try:
                d = score_dimensions(v, profile, lenient=True)
                f = dq_features(v, profile)
            except (AllMissingWindow, InsufficientSample):
                skipped += 1
                continue
            dims.append(d.as_array())
            feats.append(f)
    if not dims:
        raise AllMissingWindow("every corpus row was skipped")
    dim_rows = np.vstack(dims)
    unifier = profile.unifier
    if unifier is None or refit_unifier:
        unifier = fit_unifier(dim_rows)
    unified = np.array([unify_array(row, unifier) for row in dim_rows])
    corpus = AnnotatedCorpus(
        features=np.vstack(feats),
        dim_scores=dim_rows,
        unified=unified,
        n_skipped=skipped,
    )
    return corpus, unifier


def corpus_to_csv(corpus: AnnotatedCorpus, path) -> None:
    from .learn import DQ_FEATURE_NAMES

    header = ",".join(DQ_FEATURE_NAMES) + ",unified_score"
    data = np.column_stack([corpus.features, corpus.unified])
    np.savetxt(path, data, delimiter=",", header=header, comments="")
