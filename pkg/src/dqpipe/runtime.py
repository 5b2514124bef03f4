"""Pipeline orchestration: initialization, the per-window deployment loop,
adaptation, and the line-protocol serving endpoint.

One Pipeline instance is a single logical writer that consumes windows
strictly in order. Every window is scored, drift-checked per the configured
mode, and predicted; windows scoring below the acceptability threshold still
receive predictions but never enter the training buffer. An adaptation
retrains and re-registers all four artifact kinds atomically under one
deployment id, and its cost is charged to the triggering window's latency.
"""

from __future__ import annotations

import json
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import yaml

from .datamodel import (
    ArtifactKind,
    PumpCycle,
    Window,
    extract_label,
    read_readings_csv,
)
from .dqscore import (
    ReferenceProfile,
    build_profile,
    direct_score,
    profile_from_dict,
    profile_to_dict,
    unifier_from_dict,
    unifier_to_dict,
)
from .drift import DriftConfig, detect_active, divergence, passive_due, rebase_reference, update_history
from .errors import (
    ConfigError,
    DegenerateCorpus,
    DqPipeError,
    InsufficientBaseline,
    InsufficientData,
)
from .ingest import FeatureConfig, cycle_windows, featureize_values
from .learn import (
    GbdtParams,
    dq_features,
    filter_by_quality,
    model_from_dict,
    model_to_dict,
    predict_quality,
    train_dq_scorer,
    train_gbdt,
)
from .mutate import build_annotated_corpus, default_plans
from .registry import Registry, now_iso

SCORING_MODES = ("direct", "ml")


@dataclass(frozen=True)
class PipelineConfig:
    window_size: int = 1200
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    drift: DriftConfig = field(default_factory=DriftConfig)
    inference_params: GbdtParams = field(default_factory=lambda: GbdtParams(rounds=60))
    dq_params: GbdtParams = field(default_factory=lambda: GbdtParams(rounds=60))
    acceptability_threshold: float = 50.0
    buffer_size: int = 500
    scoring_mode: str = "ml"
    seed: int = 0
    constraints: tuple[float, float] | None = None  # None: padded baseline range
    hist_bins: int = 32
    corpus_windows: int = 25
    n_plans: int = 9
    min_train_rows: int = 20

    def __post_init__(self) -> None:
        if self.window_size < 2:
            raise ConfigError("window_size must be >= 2")
        if not (0.0 <= self.acceptability_threshold <= 100.0):
            raise ConfigError("acceptability_threshold must be in [0, 100]")
        if self.scoring_mode not in SCORING_MODES:
            raise ConfigError(f"unknown scoring mode {self.scoring_mode!r}")
        if self.buffer_size < 1:
            raise ConfigError("buffer_size must be >= 1")


@dataclass(frozen=True)
class PredictionRecord:
    window_id: int
    cycle_id: int
    dq_score: float
    divergence: float | None
    drift: bool
    predicted_min_pressure: float
    versions: dict
    deployment_id: int
    t_ingest: int
    t_ready: int

    @property
    def latency_ns(self) -> int:
        return self.t_ready - self.t_ingest

    def to_event(self) -> dict:
        return {
            "type": "prediction",
            "window_id": self.window_id,
            "cycle_id": self.cycle_id,
            "dq_score": round(self.dq_score, 6),
            "divergence": None if self.divergence is None else round(self.divergence, 9),
            "drift": self.drift,
            "predicted_min_pressure": self.predicted_min_pressure,
            "versions": self.versions,
            "deployment_id": self.deployment_id,
            "t_ingest": self.t_ingest,
            "t_ready": self.t_ready,
            "latency_ns": self.latency_ns,
        }


@dataclass(frozen=True)
class AdaptationEvent:
    deployment_id: int
    trigger: str
    window_id: int
    versions: dict
    n_training_rows: int
    duration_ns: int


class Pipeline:
    """Initialized scoring/drift/prediction loop over a window stream."""

    def __init__(self, cfg: PipelineConfig, registry: Registry):
        self.cfg = cfg
        self.registry = registry
        self.profile: ReferenceProfile | None = None
        self.dq_scorer = None
        self.inference = None
        self.versions: dict[str, int] = {}
        self.deployment_id = 0
        self.label_history: list[float] = []
        self.train_buffer: deque = deque(maxlen=cfg.buffer_size)
        self.recent_windows: deque = deque(maxlen=cfg.drift.rebase_windows)
        self.pending_rows: dict[int, list[tuple[np.ndarray, float]]] = {}
        self.next_window_id = 0
        self.step_index = 0  # 1-based count of scored windows
        self.n_adaptations = 0
        self.n_errors = 0

    # -- initialization -----------------------------------------------------

    @classmethod
    def init_phase(
        cls, baseline: Sequence[PumpCycle], cfg: PipelineConfig, registry: Registry
    ) -> "Pipeline":
        """Build all four artifacts from baseline cycles and register them as v1."""
        self = cls(cfg, registry)
        baseline = list(baseline)
        windows: list[Window] = []
        for cycle in baseline:
            for w in cycle_windows(cycle, cfg.window_size, self.next_window_id):
                self.next_window_id += 1
                if not w.partial:
                    windows.append(w)
        if len(windows) < max(50, cfg.drift.warmup):
            raise InsufficientBaseline(
                f"need >= {max(50, cfg.drift.warmup)} usable windows, got {len(windows)}"
            )

        pooled = np.concatenate([w.present_values for w in windows])
        if cfg.constraints is not None:
            constraints = cfg.constraints
        else:
            lo, hi = float(pooled.min()), float(pooled.max())
            pad = 0.25 * (hi - lo)
            constraints = (lo - pad, hi + pad)
        profile = build_profile(
            pooled,
            constraints=constraints,
            bins=cfg.hist_bins,
            built_from=(windows[0].id, windows[-1].id),
        )

        corpus_sel = _strided(windows, cfg.corpus_windows)
        plans = default_plans(float(pooled.std()))[: cfg.n_plans]
        corpus, unifier = build_annotated_corpus(
            corpus_sel, plans, profile, refit_unifier=True, seed=cfg.seed
        )
        profile.unifier = unifier
        self.profile = profile
        self.dq_scorer = train_dq_scorer(corpus.features, corpus.unified, cfg.dq_params)

        # annotate baseline windows with ground-truth scores, filter, train
        rows = []
        labels_so_far: list[float] = []
        by_cycle: dict[int, list[Window]] = {}
        for w in windows:
            by_cycle.setdefault(w.cycle_id, []).append(w)
        for cycle in baseline:
            label = cycle.label if cycle.label is not None else extract_label(cycle)
            for w in by_cycle.get(cycle.cycle_id, []):
                _, unified = direct_score(w, profile, lenient=True)
                fv = featureize_values(w.values, labels_so_far, cfg.feature)
                rows.append((fv, label, unified.value))
            labels_so_far.append(label)
        self.label_history = labels_so_far

        kept = filter_by_quality(rows, cfg.acceptability_threshold)
        if not kept:
            raise InsufficientBaseline("no baseline rows pass the acceptability threshold")
        self.train_buffer.extend(kept)
        X = np.vstack([r[0] for r in kept])
        y = np.array([r[1] for r in kept])
        self.inference = train_gbdt(X, y, cfg.inference_params)

        self.deployment_id = 1
        self.versions = self._register_all(trigger="init", window_id=-1)
        registry.log_event(
            {
                "type": "init",
                "versions": self.versions,
                "deployment_id": self.deployment_id,
                "n_baseline_windows": len(windows),
                "n_corpus_rows": int(corpus.unified.size),
                "n_training_rows": len(kept),
                "created_at": now_iso(),
            }
        )
        return self

    @classmethod
    def from_registry(cls, cfg: PipelineConfig, registry: Registry) -> "Pipeline":
        """Resume from the latest registered artifacts (buffers start empty)."""
        self = cls(cfg, registry)
        prof_art = registry.get_latest(ArtifactKind.REFERENCE_PROFILE)
        self.profile = profile_from_dict(json.loads(prof_art.payload))
        uni_art = registry.get_latest(ArtifactKind.UNIFIER)
        self.profile.unifier = unifier_from_dict(json.loads(uni_art.payload))
        dq_art = registry.get_latest(ArtifactKind.DQ_SCORER)
        self.dq_scorer = model_from_dict(json.loads(dq_art.payload))
        inf_art = registry.get_latest(ArtifactKind.INFERENCE_MODEL)
        self.inference = model_from_dict(json.loads(inf_art.payload))
        self.versions = {
            ArtifactKind.REFERENCE_PROFILE.value: prof_art.version,
            ArtifactKind.UNIFIER.value: uni_art.version,
            ArtifactKind.DQ_SCORER.value: dq_art.version,
            ArtifactKind.INFERENCE_MODEL.value: inf_art.version,
        }
        self.deployment_id = int(prof_art.meta.get("deployment_id", 1))
        self.n_adaptations = max(0, self.deployment_id - 1)
        return self

    def _register_all(self, trigger: str, window_id: int) -> dict[str, int]:
        meta = {
            "trigger": trigger,
            "window_id": window_id,
            "deployment_id": self.deployment_id,
            "parent_versions": dict(self.versions),
            "created_at": now_iso(),
        }
        payloads = {
            ArtifactKind.REFERENCE_PROFILE: json.dumps(profile_to_dict(self.profile)).encode(),
            ArtifactKind.UNIFIER: json.dumps(unifier_to_dict(self.profile.unifier)).encode(),
            ArtifactKind.DQ_SCORER: json.dumps(model_to_dict(self.dq_scorer)).encode(),
            ArtifactKind.INFERENCE_MODEL: json.dumps(model_to_dict(self.inference)).encode(),
        }
        return {
            kind.value: self.registry.put_artifact(kind, payload, meta)
            for kind, payload in payloads.items()
        }

    # -- deployment loop ----------------------------------------------------

    def _score_window(self, w: Window) -> float:
        if self.cfg.scoring_mode == "direct":
            _, unified = direct_score(w, self.profile, lenient=True)
            return unified.value
        return predict_quality(self.dq_scorer, dq_features(w, self.profile))

    def step(self, w: Window) -> PredictionRecord | None:
        """Score, drift-check, possibly adapt, and predict for one window.

        Partial windows are skipped; a window whose scoring errors is logged
        with an error marker and skipped.
        """
        if w.partial:
            return None
        t_ingest = time.perf_counter_ns()
        try:
            dq = self._score_window(w)
            self.step_index += 1
            self.recent_windows.append(w)

            div: float | None = None
            drifted = False
            mode = self.cfg.drift.mode
            if mode == "active":
                div = divergence(w, self.profile)
                verdict = detect_active(
                    div, self.profile.divergence_history, self.cfg.drift.tau, self.cfg.drift.warmup
                )
                update_history(self.profile, div)
                drifted = verdict.drift
                if drifted:
                    self.adapt("active_drift", w.id)
            elif mode == "passive":
                if passive_due(self.step_index, self.cfg.drift.w_passive):
                    self.adapt("passive_schedule", w.id)

            fv = featureize_values(w.values, self.label_history, self.cfg.feature)
            pred = self.inference.predict_one(fv)
            t_ready = time.perf_counter_ns()
        except DqPipeError as e:
            self.n_errors += 1
            self.registry.log_event(
                {
                    "type": "error",
                    "window_id": w.id,
                    "cycle_id": w.cycle_id,
                    "error": type(e).__name__,
                    "detail": str(e),
                }
            )
            return None

        record = PredictionRecord(
            window_id=w.id,
            cycle_id=w.cycle_id,
            dq_score=dq,
            divergence=div,
            drift=drifted,
            predicted_min_pressure=pred,
            versions=dict(self.versions),
            deployment_id=self.deployment_id,
            t_ingest=t_ingest,
            t_ready=t_ready,
        )
        self.registry.log_event(record.to_event())
        self.pending_rows.setdefault(w.cycle_id, []).append((fv, dq))
        return record

    def complete_cycle(self, cycle_id: int, label: float) -> None:
        """Admit the finished cycle's rows to the training buffer, threshold-filtered."""
        self.label_history.append(label)
        for fv, dq in self.pending_rows.pop(cycle_id, []):
            if dq >= self.cfg.acceptability_threshold:
                self.train_buffer.append((fv, label, dq))

    def adapt(self, trigger: str, window_id: int) -> AdaptationEvent | None:
        """Rebase the reference and retrain every artifact as one deployment.

        On insufficient recent data the adaptation is skipped and logged and
        the system continues on the current versions.
        """
        t0 = time.perf_counter_ns()
        try:
            if len(self.recent_windows) < self.cfg.drift.rebase_windows:
                raise InsufficientData(
                    f"need {self.cfg.drift.rebase_windows} recent windows, "
                    f"have {len(self.recent_windows)}"
                )
            if len(self.train_buffer) < self.cfg.min_train_rows:
                raise InsufficientData(
                    f"need {self.cfg.min_train_rows} training rows, have {len(self.train_buffer)}"
                )
            recent = list(self.recent_windows)
            new_profile = rebase_reference(recent, self.profile, bins=self.cfg.hist_bins)
            plans = default_plans(float(new_profile.ref_sample.std()))[: self.cfg.n_plans]
            corpus_sel = _strided(recent, self.cfg.corpus_windows)
            corpus, unifier = build_annotated_corpus(
                corpus_sel,
                plans,
                new_profile,
                refit_unifier=True,
                seed=self.cfg.seed + self.n_adaptations + 1,
            )
            new_profile.unifier = unifier
            dq_scorer = train_dq_scorer(corpus.features, corpus.unified, self.cfg.dq_params)
            rows = list(self.train_buffer)
            X = np.vstack([r[0] for r in rows])
            y = np.array([r[1] for r in rows])
            inference = train_gbdt(X, y, self.cfg.inference_params)
        except (InsufficientData, DegenerateCorpus) as e:
            self.registry.log_event(
                {
                    "type": "adaptation_skipped",
                    "trigger": trigger,
                    "window_id": window_id,
                    "reason": str(e),
                    "versions": dict(self.versions),
                    "deployment_id": self.deployment_id,
                }
            )
            return None

        self.profile = new_profile
        self.dq_scorer = dq_scorer
        self.inference = inference
        self.deployment_id += 1
        self.versions = self._register_all(trigger=trigger, window_id=window_id)
        self.n_adaptations += 1
        event = AdaptationEvent(
            deployment_id=self.deployment_id,
            trigger=trigger,
            window_id=window_id,
            versions=dict(self.versions),
            n_training_rows=len(self.train_buffer),
            duration_ns=time.perf_counter_ns() - t0,
        )
        self.registry.log_event(
            {
                "type": "adaptation",
                "deployment_id": event.deployment_id,
                "trigger": trigger,
                "window_id": window_id,
                "versions": event.versions,
                "n_training_rows": event.n_training_rows,
                "duration_ns": event.duration_ns,
            }
        )
        return event

    def run_stream(
        self, cycles: Iterable[PumpCycle]
    ) -> list[tuple[PredictionRecord, float | None]]:
        """Process cycles window-by-window; pair each record with its cycle label."""
        out: list[tuple[PredictionRecord, float | None]] = []
        for cycle in cycles:
            records = []
            for w in cycle_windows(cycle, self.cfg.window_size, self.next_window_id):
                self.next_window_id += 1
                rec = self.step(w)
                if rec is not None:
                    records.append(rec)
            try:
                label = cycle.label if cycle.label is not None else extract_label(cycle)
            except DqPipeError:
                label = None
            if label is not None:
                self.complete_cycle(cycle.cycle_id, label)
            out.extend((r, label) for r in records)
        return out


def _strided(items: Sequence, k: int) -> list:
    """Evenly spaced selection of k items (all of them when fewer)."""
    if len(items) <= k:
        return list(items)
    idx = np.linspace(0, len(items) - 1, k).round().astype(int)
    return [items[i] for i in idx]


# ---------------------------------------------------------------------------
# Line-protocol serving: `PREDICT <cycle_id> <path-to-window-csv>` frames
# ---------------------------------------------------------------------------


def handle_frame(pipeline: Pipeline, line: str) -> str:
    parts = line.strip().split()
    if len(parts) != 3 or parts[0] != "PREDICT":
        return "ERR malformed frame (want: PREDICT <cycle_id> <window-csv-path>)"
    try:
        cycle_id = int(parts[1])
    except ValueError:
        return f"ERR non-integer cycle_id {parts[1]!r}"
    path = Path(parts[2])
    if not path.is_file():
        return f"ERR no such file {path}"
    try:
        readings = read_readings_csv(path)
    except DqPipeError as e:
        return f"ERR {e}"
    n = pipeline.cfg.window_size
    if len(readings) != n:
        return f"ERR window must contain exactly {n} readings, got {len(readings)}"
    try:
        w = Window(
            id=pipeline.next_window_id,
            cycle_id=cycle_id,
            timestamps=np.array([r.timestamp_ns for r in readings], dtype=np.int64),
            values=np.array(
                [np.nan if r.value is None else r.value for r in readings], dtype=np.float64
            ),
        )
    except DqPipeError as e:
        return f"ERR {e}"
    pipeline.next_window_id += 1
    rec = pipeline.step(w)
    if rec is None:
        return "ERR window could not be scored"
    return (
        f"{cycle_id} {rec.predicted_min_pressure:.6f} {rec.dq_score:.2f} "
        f"{rec.versions['inference_model']} {rec.latency_ns}"
    )


def serve_stdio(pipeline: Pipeline, in_stream, out_stream) -> None:
    """Serve frames from a text stream; per-frame errors never terminate."""
    for line in in_stream:
        if not line.strip():
            continue
        out_stream.write(handle_frame(pipeline, line) + "\n")
        out_stream.flush()


class LineServer:
    """Single-threaded TCP server for the prediction line protocol."""

    def __init__(self, pipeline: Pipeline, host: str = "127.0.0.1", port: int = 0):
        self.pipeline = pipeline
        self._sock = socket.create_server((host, port))
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()

    def stop(self) -> None:
        self._stop.set()

    def serve_forever(self) -> None:
        try:
            while not self._stop.is_set():
                try:
                    conn, _ = self._sock.accept()
                except socket.timeout:
                    continue
                with conn:
                    buf = b""
                    conn.settimeout(0.2)
                    while not self._stop.is_set():
                        try:
                            chunk = conn.recv(65536)
                        except socket.timeout:
                            continue
                        except OSError:
                            break
                        if not chunk:
                            break
                        buf += chunk
                        while b"\n" in buf:
                            raw, buf = buf.split(b"\n", 1)
                            text = raw.decode(errors="replace")
                            if not text.strip():
                                continue
                            reply = handle_frame(self.pipeline, text)
                            conn.sendall((reply + "\n").encode())
        finally:
            self._sock.close()


# ---------------------------------------------------------------------------
# YAML config plumbing
# ---------------------------------------------------------------------------


def pipeline_config_to_dict(cfg: PipelineConfig) -> dict:
    return {
        "window_size": cfg.window_size,
        "scoring_mode": cfg.scoring_mode,
        "acceptability_threshold": cfg.acceptability_threshold,
        "buffer_size": cfg.buffer_size,
        "seed": cfg.seed,
        "hist_bins": cfg.hist_bins,
        "corpus_windows": cfg.corpus_windows,
        "n_plans": cfg.n_plans,
        "min_train_rows": cfg.min_train_rows,
        "constraints": None if cfg.constraints is None else list(cfg.constraints),
        "feature": {
            "n_buckets": cfg.feature.n_buckets,
            "f_history": cfg.feature.f_history,
            "use_min": cfg.feature.use_min,
            "use_max": cfg.feature.use_max,
            "use_std": cfg.feature.use_std,
            "use_last": cfg.feature.use_last,
            "use_slope": cfg.feature.use_slope,
        },
        "drift": {
            "mode": cfg.drift.mode,
            "tau": cfg.drift.tau,
            "w_passive": cfg.drift.w_passive,
            "warmup": cfg.drift.warmup,
            "rebase_windows": cfg.drift.rebase_windows,
        },
        "inference": {
            "rounds": cfg.inference_params.rounds,
            "max_depth": cfg.inference_params.max_depth,
            "learning_rate": cfg.inference_params.learning_rate,
            "min_leaf": cfg.inference_params.min_leaf,
            "seed": cfg.inference_params.seed,
        },
        "dq_scorer": {
            "rounds": cfg.dq_params.rounds,
            "max_depth": cfg.dq_params.max_depth,
            "learning_rate": cfg.dq_params.learning_rate,
            "min_leaf": cfg.dq_params.min_leaf,
            "seed": cfg.dq_params.seed,
        },
    }


def pipeline_config_from_dict(d: dict) -> PipelineConfig:
    feature = FeatureConfig(**d.get("feature", {}))
    drift = DriftConfig(**d.get("drift", {}))
    inference = GbdtParams(**d.get("inference", {}))
    dq = GbdtParams(**d.get("dq_scorer", {}))
    constraints = d.get("constraints")
    return PipelineConfig(
        window_size=int(d.get("window_size", 1200)),
        feature=feature,
        drift=drift,
        inference_params=inference,
        dq_params=dq,
        acceptability_threshold=float(d.get("acceptability_threshold", 50.0)),
        buffer_size=int(d.get("buffer_size", 500)),
        scoring_mode=str(d.get("scoring_mode", "ml")),
        seed=int(d.get("seed", 0)),
        constraints=None if constraints is None else (float(constraints[0]), float(constraints[1])),
        hist_bins=int(d.get("hist_bins", 32)),
        corpus_windows=int(d.get("corpus_windows", 25)),
        n_plans=int(d.get("n_plans", 9)),
        min_train_rows=int(d.get("min_train_rows", 20)),
    )


def load_config(path: str | Path) -> dict:
    """Whole config document: pipeline plus optional synth/baseline sections."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a mapping")
    return doc


def pipeline_config_from_file(path: str | Path) -> PipelineConfig:
    doc = load_config(path)
    return pipeline_config_from_dict(doc.get("pipeline", {}))


def save_config(doc: dict, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))
