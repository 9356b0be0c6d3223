"""Diagnostics reported by the benchmark harness.

Mean IoU over classes, the three feature-dispersion quantities
(same-class episode-center spread, cross-class center distance, point
spread around an instance center), normalized attention entropy and
attention-map diversity, and the mean query/key distance inside the
attention head.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import Episode, split_fg_bg
from .errors import ArgumentError, UndefinedMetricError
from .linalg import pairwise_distances
from .warm import WarmParams

METRIC_COLUMNS = ("d_intra", "d_inter", "d_instance", "attn_entropy", "attn_diversity", "qk_dist")


def miou(pred, truth, class_set) -> tuple[float, dict[int, float]]:
    """Mean intersection-over-union over the classes present.

    A class absent from both prediction and truth is excluded; if that
    empties the class set the metric is undefined.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise ArgumentError(f"pred and truth must be equal-length vectors, got {pred.shape} vs {truth.shape}")
    classes = sorted(int(c) for c in class_set)
    seen = set(np.unique(pred)) | set(np.unique(truth))
    if not seen <= set(classes):
        raise ArgumentError(f"labels {sorted(seen - set(classes))} outside class_set {classes}")
    per_class: dict[int, float] = {}
    for c in classes:
        tp = int(np.sum((pred == c) & (truth == c)))
        fp = int(np.sum((pred == c) & (truth != c)))
        fn = int(np.sum((pred != c) & (truth == c)))
        denom = tp + fp + fn
        if denom > 0:
            per_class[c] = tp / denom
    if not per_class:
        raise UndefinedMetricError("no class present in either prediction or truth")
    return float(np.mean(list(per_class.values()))), per_class


@dataclass(frozen=True)
class FgSummary:
    """Foreground summary of one episode way: class id, support-feature
    mean, and the mean point distance to that mean."""

    class_id: int
    mean: np.ndarray
    instance_dispersion: float


def fg_summaries(episode: Episode) -> list[FgSummary]:
    out = []
    for way in range(episode.n_way):
        blocks = [
            split_fg_bg(episode.support_cloud(way, shot), way + 1)[0]
            for shot in range(episode.k_shot)
        ]
        feats = np.vstack(blocks)
        mu = feats.mean(axis=0)
        disp = float(np.mean(np.linalg.norm(feats - mu, axis=1)))
        out.append(FgSummary(episode.class_ids[way], mu, disp))
    return out


@dataclass
class DispersionReport:
    d_intra: float | None  # None when no same-class episode pair exists
    d_inter: float | None  # None when no cross-class episode pair exists
    d_instance: float


def dispersion_metrics(summaries: list[FgSummary]) -> DispersionReport:
    """Pairwise center distances split by class equality, plus the mean
    within-instance point spread."""
    if not summaries:
        raise ArgumentError("need at least one foreground summary")
    intra, inter = [], []
    for i in range(len(summaries)):
        for j in range(i + 1, len(summaries)):
            dist = float(np.linalg.norm(summaries[i].mean - summaries[j].mean))
            (intra if summaries[i].class_id == summaries[j].class_id else inter).append(dist)
    return DispersionReport(
        d_intra=float(np.mean(intra)) if intra else None,
        d_inter=float(np.mean(inter)) if inter else None,
        d_instance=float(np.mean([s.instance_dispersion for s in summaries])),
    )


def attention_entropy(weights) -> float:
    """Mean over rows of the normalized entropy -sum(p ln p) / ln L.

    Rows must be probability vectors. A single-column map has no
    uniformity to measure; by convention it scores 1.0 (with a warning).
    """
    a = _check_prob_rows(weights)
    n_cols = a.shape[1]
    if n_cols == 1:
        warnings.warn("attention entropy over a single key is 1.0 by convention", stacklevel=2)
        return 1.0
    terms = np.where(a > 0, a * np.log(np.where(a > 0, a, 1.0)), 0.0)
    return float(np.mean(-terms.sum(axis=1) / np.log(n_cols)))


def attention_diversity(weights) -> float:
    """One minus the mean pairwise cosine similarity of attention rows."""
    a = _check_prob_rows(weights)
    m = a.shape[0]
    if m < 2:
        raise UndefinedMetricError("diversity needs at least two attention rows")
    norms = np.linalg.norm(a, axis=1)
    cos = (a @ a.T) / np.outer(norms, norms)
    upper = cos[np.triu_indices(m, k=1)]
    return float(1.0 - upper.mean())


def _check_prob_rows(weights) -> np.ndarray:
    a = np.asarray(weights, dtype=np.float64)
    if a.ndim != 2 or a.size == 0:
        raise ArgumentError(f"attention weights must be a nonempty 2-D array, got shape {a.shape}")
    if a.min() < -1e-12 or np.max(np.abs(a.sum(axis=1) - 1.0)) > 1e-6:
        raise ArgumentError("attention rows must be probability vectors")
    return np.clip(a, 0.0, None)


def qk_distance(tokens, keys_in, params: WarmParams) -> float:
    """Mean over all (token, key) pairs of the projected Euclidean distance."""
    tokens = np.asarray(tokens, dtype=np.float64)
    keys_in = np.asarray(keys_in, dtype=np.float64)
    if tokens.shape[0] == 0 or keys_in.shape[0] == 0:
        raise ArgumentError("qk_distance needs nonempty tokens and keys")
    return float(pairwise_distances(tokens @ params.w_q, keys_in @ params.w_k).mean())


@dataclass
class MetricsReport:
    """One experiment's aggregate diagnostics; attention fields stay None
    for methods without an attention head."""

    miou: float
    per_class_iou: dict[int, float]
    d_intra: float | None = None
    d_inter: float | None = None
    d_instance: float | None = None
    attn_entropy: float | None = None
    attn_diversity: float | None = None
    qk_dist: float | None = None


def write_metrics_csv(path, reports: list[MetricsReport], class_labels: list[int]) -> None:
    """Fixed column order: miou, per-class iou, then METRIC_COLUMNS."""
    header = ["miou"] + [f"iou_{c}" for c in class_labels] + list(METRIC_COLUMNS)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in reports:
            row = [repr(float(r.miou))]
            for c in class_labels:
                v = r.per_class_iou.get(c)
                row.append("" if v is None else repr(float(v)))
            for name in METRIC_COLUMNS:
                v = getattr(r, name)
                row.append("" if v is None else repr(float(v)))
            writer.writerow(row)
