"""Gradient-boosted regression trees, quality filtering, and evaluation metrics.

The regressor is self-contained (no external boosting library) and sits
behind a small train/predict/serialize surface so the pipeline stays
model-agnostic. Split search is exact: candidate thresholds are midpoints of
consecutive sorted unique feature values, ties broken by lowest feature index
then lowest threshold, which makes training bit-deterministic.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .datamodel import Window
from .dqscore import ReferenceProfile, ks_statistic
from .errors import (
    AllMissingWindow,
    DegenerateCorpus,
    DimensionMismatch,
    EmptyTrainingSet,
    LengthMismatch,
    NonFiniteInput,
)

MODEL_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class GbdtParams:
    rounds: int = 100
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ValueError("learning_rate must be in (0, 1]")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")


class Tree(NamedTuple):
    """Flat array encoding; feature == -1 marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray


@dataclass
class GbdtModel:
    base_prediction: float
    trees: list[Tree]
    params: GbdtParams
    n_features: int
    train_mse: list[float] = field(default_factory=list)

    def predict_one(self, x: Sequence[float]) -> float:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n_features,):
            raise DimensionMismatch(
                f"expected {self.n_features} features, got {x.shape}"
            )
        out = self.base_prediction
        lr = self.params.learning_rate
        for t in self.trees:
            node = 0
            f = t.feature[node]
            while f >= 0:
                node = t.left[node] if x[f] <= t.threshold[node] else t.right[node]
                f = t.feature[node]
            out += lr * t.value[node]
        return float(out)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            return np.array([self.predict_one(X)])
        if X.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"expected {self.n_features} features, got {X.shape[1]}"
            )
        out = np.full(X.shape[0], self.base_prediction, dtype=np.float64)
        lr = self.params.learning_rate
        for t in self.trees:
            out += lr * _apply_tree(t, X)
        return out


def _apply_tree(t: Tree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int32)
    for _ in range(64):  # depth is bounded far below this
        f = t.feature[node]
        active = f >= 0
        if not active.any():
            break
        rows = np.flatnonzero(active)
        fa = f[rows]
        go_left = X[rows, fa] <= t.threshold[node[rows]]
        node[rows] = np.where(go_left, t.left[node[rows]], t.right[node[rows]])
    return t.value[node]


class _TreeBuilder:
    """Accumulates nodes for one tree during greedy top-down fitting."""

    def __init__(self) -> None:
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def add(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def freeze(self) -> Tree:
        return Tree(
            feature=np.asarray(self.feature, dtype=np.int32),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int32),
            right=np.asarray(self.right, dtype=np.int32),
            value=np.asarray(self.value, dtype=np.float64),
        )


def train_gbdt(X, y, params: GbdtParams) -> GbdtModel:
    """Stagewise residual fitting with greedy variance-reduction splits."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    if X.shape[0] == 0:
        raise EmptyTrainingSet("no training rows")
    if X.shape[0] != y.shape[0]:
        raise LengthMismatch(f"{X.shape[0]} rows vs {y.shape[0]} labels")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise NonFiniteInput("training data must be finite")

    n, n_features = X.shape
    base = float(y.mean())
    model = GbdtModel(base_prediction=base, trees=[], params=params, n_features=n_features)

    # Exact split search at histogram speed: encode each feature by the rank
    # of its value among that feature's sorted unique values, then aggregate
    # residual sums per (feature, rank) with one flat bincount per node.
    uniques: list[np.ndarray] = []
    codes = np.empty((n, n_features), dtype=np.int64)
    for j in range(n_features):
        u, inv = np.unique(X[:, j], return_inverse=True)
        uniques.append(u)
        codes[:, j] = inv
    bins_per_feat = np.array([len(u) for u in uniques], dtype=np.int64)
    offsets = np.concatenate([[0], np.cumsum(bins_per_feat)])
    total_bins = int(offsets[-1])
    flat_codes = codes + offsets[:-1]
    g2f = np.repeat(np.arange(n_features, dtype=np.int64), bins_per_feat)
    g2f_f = g2f.astype(np.float64)
    last_bin = np.zeros(total_bins, dtype=bool)
    last_bin[offsets[1:] - 1] = True

    min_leaf = params.min_leaf
    max_depth = params.max_depth
    lr = params.learning_rate

    # Count-side arrays at the root never change between rounds.
    fc_root = flat_codes.ravel()
    root_rows = np.arange(n, dtype=np.int64)
    root_cnt = np.bincount(fc_root, minlength=total_bins)

    def node_stats(rows: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if rows.size == n:
            fc = fc_root
            cnt = root_cnt
        else:
            fc = flat_codes[rows].ravel()
            cnt = np.bincount(fc, minlength=total_bins)
        sm = np.bincount(fc, weights=np.repeat(r, n_features), minlength=total_bins)
        return cnt, sm

    def best_split(cnt, sm, m, total):
        left_cnt = np.cumsum(cnt) - m * g2f
        left_sum = np.cumsum(sm) - total * g2f_f
        right_cnt = m - left_cnt
        right_sum = total - left_sum
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = left_sum * left_sum / np.maximum(left_cnt, 1)
            gain += right_sum * right_sum / np.maximum(right_cnt, 1)
        gain[last_bin | (left_cnt < min_leaf) | (right_cnt < min_leaf)] = -np.inf
        g = int(np.argmax(gain))
        return g, float(gain[g])

    preds = np.full(n, base, dtype=np.float64)
    for _ in range(params.rounds):
        resid = y - preds
        builder = _TreeBuilder()
        root = builder.add()
        # stack of (node_id, rows, depth, cnt, sm); cnt/sm may be precomputed
        stack: list[tuple] = [(root, root_rows, 0, None, None)]
        while stack:
            node_id, rows, depth, cnt, sm = stack.pop()
            r = resid[rows]
            m = rows.size
            if depth >= max_depth or m < 2 * min_leaf:
                builder.value[node_id] = float(r.mean())
                continue
            if cnt is None:
                cnt, sm = node_stats(rows, r)
            total = float(r.sum())
            g, gain = best_split(cnt, sm, m, total)
            if not gain > total * total / m:
                builder.value[node_id] = float(r.mean())
                continue
            j = int(g2f[g])
            local = g - int(offsets[j])
            thr = 0.5 * (uniques[j][local] + uniques[j][local + 1])
            go_left = codes[rows, j] <= local
            rows_l = rows[go_left]
            rows_r = rows[~go_left]
            left_id = builder.add()
            right_id = builder.add()
            builder.feature[node_id] = j
            builder.threshold[node_id] = float(thr)
            builder.left[node_id] = left_id
            builder.right[node_id] = right_id
            # children that can still split get stats now so the sibling's
            # come from one subtraction instead of a second bincount pass
            child_depth = depth + 1
            if child_depth < max_depth and rows_l.size >= 2 * min_leaf and rows_r.size >= 2 * min_leaf:
                cnt_l, sm_l = node_stats(rows_l, resid[rows_l])
                stack.append((right_id, rows_r, child_depth, cnt - cnt_l, sm - sm_l))
                stack.append((left_id, rows_l, child_depth, cnt_l, sm_l))
            else:
                stack.append((right_id, rows_r, child_depth, None, None))
                stack.append((left_id, rows_l, child_depth, None, None))
        tree = builder.freeze()
        model.trees.append(tree)
        preds += lr * _apply_tree(tree, X)
        model.train_mse.append(float(np.mean((y - preds) ** 2)))
    return model


def predict(model: GbdtModel, x) -> float:
    """Single-row prediction; raises DimensionMismatch on wrong width."""
    return model.predict_one(x)


# ---------------------------------------------------------------------------
# Window summary features for the ML quality scorer
# ---------------------------------------------------------------------------

DQ_FEATURE_NAMES = (
    "mean",
    "std",
    "min",
    "max",
    "median",
    "q1",
    "q3",
    "missing_rate",
    "out_of_range_rate",
    "outside_fence_rate",
    "ks_vs_ref",
    "last_minus_first",
)


def dq_features(w: Window, profile: ReferenceProfile) -> np.ndarray:
    """Cheap 12-stat summary of a window, input to the ML quality scorer.

    The KS feature uses the profile's small reference subsample; the exact
    full-sample KS stays with the direct scorer.
    """
    present = w.present_values
    if present.size == 0:
        raise AllMissingWindow(f"window {w.id} is all-missing")
    n = len(w)
    q1, median, q3 = np.percentile(present, [25.0, 50.0, 75.0])
    lo_c, hi_c = profile.constraints
    lo_f, hi_f = profile.fences
    return np.array(
        [
            present.mean(),
            present.std(),
            present.min(),
            present.max(),
            median,
            q1,
            q3,
            1.0 - present.size / n,
            ((present < lo_c) | (present > hi_c)).mean(),
            ((present < lo_f) | (present > hi_f)).mean(),
            ks_statistic(present, profile.ks_subsample),
            present[-1] - present[0],
        ],
        dtype=np.float64,
    )


def train_dq_scorer(features, scores, params: GbdtParams) -> GbdtModel:
    """GBDT mapping window summary features to unified quality scores."""
    features = np.asarray(features, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if features.shape[0] < 50:
        raise DegenerateCorpus(f"scorer corpus needs >= 50 rows, got {features.shape[0]}")
    if float(scores.max() - scores.min()) <= 0.0:
        raise DegenerateCorpus("scorer corpus has zero label spread")
    return train_gbdt(features, scores, params)


def predict_quality(model: GbdtModel, feats) -> float:
    """Scorer prediction clamped to the [0, 100] unified-score range."""
    return min(max(model.predict_one(feats), 0.0), 100.0)


def filter_by_quality(rows: Sequence[tuple], threshold: float) -> list[tuple]:
    """Keep (features, label, score) rows whose score >= threshold; order preserved."""
    if not (0.0 <= threshold <= 100.0):
        raise ValueError("threshold must be in [0, 100]")
    out = []
    for row in rows:
        score = row[2]
        score = getattr(score, "value", score)
        if score >= threshold:
            out.append(row)
    return out


@dataclass(frozen=True)
class EvalResult:
    mae: float
    r2: float | None  # None marks R^2 undefined (zero label variance)


def evaluate(preds, labels) -> EvalResult:
    """Mean absolute error and coefficient of determination."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape or preds.ndim != 1:
        raise LengthMismatch(f"{preds.shape} vs {labels.shape}")
    if preds.size == 0:
        raise LengthMismatch("cannot evaluate zero predictions")
    mae = float(np.abs(preds - labels).mean())
    ss_tot = float(((labels - labels.mean()) ** 2).sum())
    if ss_tot == 0.0:
        return EvalResult(mae=mae, r2=None)
    ss_res = float(((labels - preds) ** 2).sum())
    return EvalResult(mae=mae, r2=1.0 - ss_res / ss_tot)


# ---------------------------------------------------------------------------
# Self-describing JSON serialization
# ---------------------------------------------------------------------------


def _tree_to_nested(t: Tree, node: int = 0) -> dict:
    if t.feature[node] < 0:
        return {"value": float(t.value[node])}
    return {
        "feature": int(t.feature[node]),
        "threshold": float(t.threshold[node]),
        "left": _tree_to_nested(t, int(t.left[node])),
        "right": _tree_to_nested(t, int(t.right[node])),
    }


def _tree_from_nested(d: dict) -> Tree:
    builder = _TreeBuilder()

    def walk(nd: dict) -> int:
        idx = builder.add()
        if "value" in nd:
            builder.value[idx] = float(nd["value"])
            return idx
        builder.feature[idx] = int(nd["feature"])
        builder.threshold[idx] = float(nd["threshold"])
        builder.left[idx] = walk(nd["left"])
        builder.right[idx] = walk(nd["right"])
        return idx

    walk(d)
    return builder.freeze()


def params_to_dict(p: GbdtParams) -> dict:
    return {
        "rounds": p.rounds,
        "max_depth": p.max_depth,
        "learning_rate": p.learning_rate,
        "min_leaf": p.min_leaf,
        "seed": p.seed,
    }


def config_hash(p: GbdtParams, n_features: int) -> str:
    payload = json.dumps({**params_to_dict(p), "n_features": n_features}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def model_to_dict(m: GbdtModel) -> dict:
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "params": params_to_dict(m.params),
        "config_hash": config_hash(m.params, m.n_features),
        "base_prediction": m.base_prediction,
        "n_features": m.n_features,
        "trees": [_tree_to_nested(t) for t in m.trees],
    }


def model_from_dict(d: dict) -> GbdtModel:
    params = GbdtParams(**d["params"])
    return GbdtModel(
        base_prediction=float(d["base_prediction"]),
        trees=[_tree_from_nested(t) for t in d["trees"]],
        params=params,
        n_features=int(d["n_features"]),
    )


def save_model(m: GbdtModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(m)))


def load_model(path: str | Path) -> GbdtModel:
    return model_from_dict(json.loads(Path(path).read_text()))
