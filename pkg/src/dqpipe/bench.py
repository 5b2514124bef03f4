"""Experiment harness: strategy x acceptability-threshold grid over a shared
synthetic stream, plus threshold sweeps, correlation analysis, and CSV reports.

Every cell replays the identical stream (same seed) under one strategy and
one training-data acceptability threshold, and reports predictive accuracy,
adaptation counts, and cumulative pipeline latency. Latency-bearing cells
should be run serially; all non-latency outputs are bit-deterministic for a
fixed seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .drift import DriftConfig
from .errors import ConfigError
from .ingest import (
    CorruptionRule,
    DriftPoint,
    FeatureConfig,
    SynthConfig,
    synth_generate,
)
from .learn import EvalResult, GbdtParams, evaluate
from .mutate import MutationOp, MutationPlan
from .registry import Registry, verify_audit_trail
from .runtime import Pipeline, PipelineConfig

DEFAULT_THRESHOLDS = (0.0, 25.0, 50.0, 75.0, 90.0)
ROLLING_WINDOW = 25


@dataclass(frozen=True)
class Strategy:
    kind: str  # standard | active | passive
    tau: float | None = None
    w_passive: int | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("standard", "active", "passive"):
            raise ConfigError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "active" and self.tau is None:
            raise ConfigError("active strategy needs tau")
        if self.kind == "passive" and self.w_passive is None:
            raise ConfigError("passive strategy needs w_passive")

    @property
    def name(self) -> str:
        if self.kind == "standard":
            return "standard"
        if self.kind == "active":
            return f"active_tau{self.tau:g}"
        return f"passive_w{self.w_passive}"

    @property
    def scoring_mode(self) -> str:
        # the standard method scores directly (non-ML) and never adapts
        return "direct" if self.kind == "standard" else "ml"

    def drift_config(self, base: DriftConfig) -> DriftConfig:
        if self.kind == "standard":
            return replace(base, mode="none")
        if self.kind == "active":
            return replace(base, mode="active", tau=self.tau)
        return replace(base, mode="passive", w_passive=self.w_passive)


def parse_strategy(text: str) -> Strategy:
    """Parse 'standard', 'active:0.08', or 'passive:100'."""
    kind, _, arg = text.partition(":")
    kind = kind.strip()
    if kind == "standard":
        return Strategy("standard")
    if kind == "active":
        return Strategy("active", tau=float(arg))
    if kind == "passive":
        return Strategy("passive", w_passive=int(arg))
    raise ConfigError(f"cannot parse strategy {text!r}")


def default_strategies() -> tuple[Strategy, ...]:
    return (
        Strategy("standard"),
        Strategy("active", tau=0.04),
        Strategy("active", tau=0.06),
        Strategy("active", tau=0.08),
        Strategy("passive", w_passive=50),
        Strategy("passive", w_passive=100),
        Strategy("passive", w_passive=200),
    )


# ---------------------------------------------------------------------------
# Default synthetic streams
# ---------------------------------------------------------------------------


def clean_value_std(p0: float, decay: float, window_fraction: float = 0.8) -> float:
    """Std of clean in-window values for the base regime (analytic grid)."""
    t = np.linspace(0, window_fraction, 2001)
    return float(p0 * np.exp(-decay * t).std())


def burst_plans(sigma: float) -> tuple[tuple[MutationPlan, ...], tuple[float, ...]]:
    """Severely degraded sensor episodes: score far below the clean band."""
    plans = (
        MutationPlan(
            "degraded_offset",
            (
                MutationOp("shift", magnitude=-1.4 * sigma),
                MutationOp("missing", rate=0.45),
                MutationOp("anomaly", rate=0.08, magnitude=2.0),
            ),
        ),
        MutationPlan(
            "degraded_heavy",
            (
                MutationOp("shift", magnitude=-2.1 * sigma),
                MutationOp("missing", rate=0.55),
                MutationOp("anomaly", rate=0.12, magnitude=2.5),
            ),
        ),
        MutationPlan(
            "dropout",
            (
                MutationOp("missing", rate=0.95),
                MutationOp("shift", magnitude=-0.9 * sigma),
            ),
        ),
    )
    return plans, (2.0, 2.0, 1.0)


def light_plans(sigma: float) -> tuple[tuple[MutationPlan, ...], tuple[float, ...]]:
    plans = (
        MutationPlan("offset_light", (MutationOp("shift", magnitude=-0.5 * sigma),)),
        MutationPlan("patchy", (MutationOp("missing", rate=0.15),)),
    )
    return plans, (1.0, 1.0)


@dataclass(frozen=True)
class StreamSpec:
    """Synthetic stream template; the seed is substituted per run."""

    synth: SynthConfig
    baseline_cycles: int

    def config(self, seed: int) -> SynthConfig:
        return replace(self.synth, seed=seed)

    def generate(self, seed: int):
        cycles = list(synth_generate(self.config(seed)))
        return cycles[: self.baseline_cycles], cycles[self.baseline_cycles :]


def default_drift_stream(
    n_cycles: int = 360, baseline_cycles: int = 120
) -> StreamSpec:
    """Three decay regimes plus episodic heavy-corruption bursts.

    Sized so the acceptability threshold of 90 filters roughly half of the
    production windows once burst and clean-band tails are combined.
    """
    p0, decay = 10.0, 0.6
    sigma = clean_value_std(p0, decay)
    heavy, heavy_w = burst_plans(sigma)
    light, light_w = light_plans(sigma)
    span = n_cycles - baseline_cycles
    shift1 = baseline_cycles + int(0.375 * span)
    shift2 = baseline_cycles + int(0.6875 * span)
    bursts = []
    for frac_lo, frac_hi in ((0.15, 0.27), (0.5, 0.62), (0.8, 0.92)):
        lo = baseline_cycles + int(frac_lo * span)
        hi = baseline_cycles + int(frac_hi * span)
        bursts.append(CorruptionRule(lo, hi, heavy, heavy_w, fraction=0.85))
    synth = SynthConfig(
        n_cycles=n_cycles,
        cycle_len=1500,
        p0=p0,
        decay=decay,
        noise_std=0.05,
        p0_jitter=0.12,
        decay_jitter=0.12,
        drift_schedule=(
            DriftPoint(shift1, 1.1, 0.07),
            DriftPoint(shift2, 0.35, 0.05),
        ),
        corruption_schedule=tuple(bursts)
        + (CorruptionRule(baseline_cycles, n_cycles, light, light_w, fraction=0.08),),
        seed=0,
    )
    return StreamSpec(synth=synth, baseline_cycles=baseline_cycles)


def default_pipeline_config() -> PipelineConfig:
    """Desk-scale pipeline sizing shared by every grid cell."""
    return PipelineConfig(
        window_size=1200,
        feature=FeatureConfig(n_buckets=30),
        drift=DriftConfig(mode="active", tau=0.06, warmup=25, rebase_windows=20),
        inference_params=GbdtParams(rounds=40, max_depth=3),
        dq_params=GbdtParams(rounds=40, max_depth=3),
        acceptability_threshold=0.0,
        buffer_size=100,
        scoring_mode="ml",
        corpus_windows=9,
        n_plans=7,
        min_train_rows=40,
    )


# ---------------------------------------------------------------------------
# Grid runner
# ---------------------------------------------------------------------------


@dataclass
class CellResult:
    strategy: str
    threshold: float
    seed: int
    n_adaptations: int
    mae: float
    r2: float | None
    cumulative_latency_ns: int
    mean_dq: float
    window_ids: np.ndarray
    dq_scores: np.ndarray
    preds: np.ndarray
    labels: np.ndarray
    latencies_ns: np.ndarray
    audit_ok: bool
    audit_issues: list[str] = field(default_factory=list)

    @property
    def abs_errors(self) -> np.ndarray:
        return np.abs(self.preds - self.labels)


def run_cell(
    stream: StreamSpec,
    strategy: Strategy,
    threshold: float,
    seed: int,
    base_cfg: PipelineConfig | None = None,
    registry_root: str | Path | None = None,
) -> CellResult:
    """Replay the stream under one strategy/threshold pair."""
    import tempfile

    base = base_cfg if base_cfg is not None else default_pipeline_config()
    cfg = replace(
        base,
        drift=strategy.drift_config(base.drift),
        scoring_mode=strategy.scoring_mode,
        acceptability_threshold=float(threshold),
        seed=seed,
    )
    baseline, production = stream.generate(seed)

    def _run(root: str | Path) -> CellResult:
        with Registry(root) as registry:
            pipe = Pipeline.init_phase(baseline, cfg, registry)
            results = pipe.run_stream(production)
            labeled = [(r, lbl) for r, lbl in results if lbl is not None]
            preds = np.array([r.predicted_min_pressure for r, _ in labeled])
            labels = np.array([lbl for _, lbl in labeled])
            res: EvalResult = evaluate(preds, labels)
            audit = verify_audit_trail(registry)
            return CellResult(
                strategy=strategy.name,
                threshold=float(threshold),
                seed=seed,
                n_adaptations=pipe.n_adaptations,
                mae=res.mae,
                r2=res.r2,
                cumulative_latency_ns=int(sum(r.latency_ns for r, _ in labeled)),
                mean_dq=float(np.mean([r.dq_score for r, _ in labeled])),
                window_ids=np.array([r.window_id for r, _ in labeled]),
                dq_scores=np.array([r.dq_score for r, _ in labeled]),
                preds=preds,
                labels=labels,
                latencies_ns=np.array([r.latency_ns for r, _ in labeled]),
                audit_ok=audit.ok,
                audit_issues=audit.issues,
            )

    if registry_root is not None:
        Path(registry_root).mkdir(parents=True, exist_ok=True)
        return _run(registry_root)
    with tempfile.TemporaryDirectory() as td:
        return _run(td)


def run_grid(
    stream: StreamSpec,
    strategies: Sequence[Strategy],
    thresholds: Sequence[float],
    seed: int,
    base_cfg: PipelineConfig | None = None,
    registry_dir: str | Path | None = None,
) -> list[CellResult]:
    """One row per strategy x threshold cell, identical stream for every cell."""
    out: list[CellResult] = []
    for strategy in strategies:
        for threshold in thresholds:
            root = None
            if registry_dir is not None:
                root = Path(registry_dir) / f"{strategy.name}_t{threshold:g}"
            out.append(run_cell(stream, strategy, threshold, seed, base_cfg, root))
    return out


def run_sweep(
    stream: StreamSpec,
    strategy: Strategy,
    thresholds: Sequence[float],
    seeds: Sequence[int],
    base_cfg: PipelineConfig | None = None,
) -> list[CellResult]:
    """Threshold sweep repeated over seeds for one strategy."""
    out: list[CellResult] = []
    for seed in seeds:
        for threshold in thresholds:
            out.append(run_cell(stream, strategy, threshold, seed, base_cfg))
    return out


# ---------------------------------------------------------------------------
# Correlation analysis
# ---------------------------------------------------------------------------


def rolling_performance(
    preds: np.ndarray, labels: np.ndarray, window: int = ROLLING_WINDOW
) -> tuple[np.ndarray, np.ndarray]:
    """Trailing-window MAE and R^2 series, aligned to the last index of each window."""
    n = len(preds)
    if n < window:
        return np.empty(0), np.empty(0)
    maes = np.empty(n - window + 1)
    r2s = np.empty(n - window + 1)
    for i in range(window - 1, n):
        p = preds[i - window + 1 : i + 1]
        y = labels[i - window + 1 : i + 1]
        maes[i - window + 1] = np.abs(p - y).mean()
        ss_tot = ((y - y.mean()) ** 2).sum()
        r2s[i - window + 1] = 1.0 - ((y - p) ** 2).sum() / ss_tot if ss_tot > 0 else np.nan
    return maes, r2s


def pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    """Pearson correlation; None marks zero variance (undefined)."""
    mask = np.isfinite(a) & np.isfinite(b)
    a, b = a[mask], b[mask]
    if len(a) < 2 or a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def correlate(cell: CellResult, window: int = ROLLING_WINDOW) -> tuple[float | None, float | None]:
    """Correlation between window quality and rolling performance for one cell."""
    if len(cell.preds) < max(30, window):
        return None, None
    maes, r2s = rolling_performance(cell.preds, cell.labels, window)
    dq = cell.dq_scores[window - 1 :]
    return pearson(dq, maes), pearson(dq, r2s)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return "undefined"
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def write_grid_csv(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            [
                "strategy",
                "threshold",
                "seed",
                "n_adaptations",
                "mae",
                "r2",
                "cumulative_latency_ns",
                "mean_dq_score",
            ]
        )
        for r in results:
            w.writerow(
                [
                    r.strategy,
                    _fmt(r.threshold),
                    r.seed,
                    r.n_adaptations,
                    _fmt(r.mae),
                    _fmt(r.r2),
                    r.cumulative_latency_ns,
                    _fmt(r.mean_dq),
                ]
            )


def write_latency_trend_csv(results: Sequence[CellResult], path: str | Path) -> None:
    """Cumulative latency per window per cell (all columns are wall-clock)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "threshold", "window_index", "cumulative_latency_ns"])
        for r in results:
            cum = 0
            for i, lat in enumerate(r.latencies_ns.tolist()):
                cum += int(lat)
                w.writerow([r.strategy, _fmt(r.threshold), i, cum])


def write_quality_sweep_csv(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "threshold", "seed", "mae", "r2", "n_adaptations"])
        for r in results:
            w.writerow(
                [r.strategy, _fmt(r.threshold), r.seed, _fmt(r.mae), _fmt(r.r2), r.n_adaptations]
            )


def write_correlations_csv(results: Sequence[CellResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "threshold", "seed", "corr_dq_mae", "corr_dq_r2"])
        for r in results:
            c_mae, c_r2 = correlate(r)
            w.writerow([r.strategy, _fmt(r.threshold), r.seed, _fmt(c_mae), _fmt(c_r2)])


def report(
    grid: Sequence[CellResult],
    sweep: Sequence[CellResult],
    out_dir: str | Path,
) -> dict[str, Path]:
    """Write the four report files and return their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "grid": out / "grid.csv",
        "latency_trend": out / "latency_trend.csv",
        "quality_sweep": out / "quality_sweep.csv",
        "correlations": out / "correlations.csv",
    }
    write_grid_csv(grid, paths["grid"])
    write_latency_trend_csv(grid, paths["latency_trend"])
    write_quality_sweep_csv(sweep, paths["quality_sweep"])
    write_correlations_csv(grid, paths["correlations"])
    return paths
