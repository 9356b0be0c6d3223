"""Farthest point sampling in feature space and the distance baseline.

The baseline builds per-class prototype sets by FPS over pooled support
features and labels query points by nearest prototype. Its only source
of randomness is the FPS start point, which is exactly what the seed
sweep varies.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import Episode
from .errors import ArgumentError
from .losses import point_distances, predict
from .metrics import MetricsReport, dispersion_metrics, fg_summaries, miou
from .rng import derive_rng

_FPS_STREAM = 300


@dataclass
class FpsResult:
    indices: np.ndarray  # (T,) distinct row indices, selection order
    subset: np.ndarray  # (T x D) rows of the input at those indices


def farthest_point_sampling(features, count: int, rng) -> FpsResult:
    """Greedy max-min subset of the feature rows.

    The first index is drawn uniformly from rng; every later index
    maximizes the minimum Euclidean distance to the rows already chosen,
    ties broken by the smallest index. Already-selected rows are excluded,
    so the indices are always distinct.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if not 1 <= count <= n:
        raise ArgumentError(f"count must satisfy 1 <= count <= {n}, got {count}")
    start = int(rng.integers(n))
    indices = np.empty(count, dtype=np.int64)
    indices[0] = start
    selected = np.zeros(n, dtype=bool)
    selected[start] = True
    min_dist = np.linalg.norm(features - features[start], axis=1)
    for t in range(1, count):
        candidate_dist = np.where(selected, -np.inf, min_dist)
        nxt = int(np.argmax(candidate_dist))
        indices[t] = nxt
        selected[nxt] = True
        np.minimum(min_dist, np.linalg.norm(features - features[nxt], axis=1), out=min_dist)
    return FpsResult(indices=indices, subset=features[indices].copy())


def min_dist_classify(query, prototypes) -> np.ndarray:
    """Label each query row with the class of its nearest prototype row."""
    return predict(point_distances(query, prototypes))


def fps_prototypes(episode: Episode, count: int, rng) -> dict[int, np.ndarray]:
    """Per-class FPS subsets of the pooled support features.

    Classes with fewer than ``count`` rows contribute all their rows.
    Classes are processed in sorted order, consuming one start draw each.
    """
    protos = {}
    for label, feats in sorted(episode.pooled_support_by_class().items()):
        protos[label] = farthest_point_sampling(feats, min(count, feats.shape[0]), rng).subset
    return protos


def _episode_eval(episode: Episode, protos: dict[int, np.ndarray]) -> tuple[float, dict[int, float]]:
    preds = np.concatenate([min_dist_classify(q.features, protos) for q in episode.query])
    truths = np.concatenate([q.labels for q in episode.query])
    return miou(preds, truths, range(episode.n_way + 1))


def evaluate_fps(episodes: list[Episode], count: int, seed: int) -> tuple[MetricsReport, list[float]]:
    """Run the baseline over an episode batch with one sweep seed.

    Episode i uses the independent stream (seed, i), so the batch is
    identical across seeds while the FPS starts vary.
    """
    per_episode, per_class_acc = [], {}
    summaries = []
    for i, episode in enumerate(episodes):
        rng = derive_rng(seed, _FPS_STREAM, i)
        score, per_class = _episode_eval(episode, fps_prototypes(episode, count, rng))
        per_episode.append(score)
        for c, v in per_class.items():
            per_class_acc.setdefault(c, []).append(v)
        summaries.extend(fg_summaries(episode))
    disp = dispersion_metrics(summaries)
    report = MetricsReport(
        miou=float(np.mean(per_episode)),
        per_class_iou={c: float(np.mean(v)) for c, v in sorted(per_class_acc.items())},
        d_intra=disp.d_intra,
        d_inter=disp.d_inter,
        d_instance=disp.d_instance,
    )
    return report, per_episode


@dataclass
class SweepRow:
    seed: int
    mean_miou: float
    per_class_iou: dict[int, float]


@dataclass
class SweepResult:
    rows: list[SweepRow]
    best: float
    worst: float
    mean: float
    stdev: float


def fps_seed_sweep(episodes: list[Episode], count: int, seeds) -> SweepResult:
    """Evaluate the baseline once per seed on identical episodes.

    Only the FPS starts change between seeds; the summary reports the
    order statistics of the per-seed mean IoU (population stdev).
    """
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ArgumentError("seed sweep needs at least one seed")
    rows = []
    for seed in seeds:
        report, _ = evaluate_fps(episodes, count, seed)
        rows.append(SweepRow(seed, report.miou, report.per_class_iou))
    scores = np.array([r.mean_miou for r in rows])
    return SweepResult(
        rows=rows,
        best=float(scores.max()),
        worst=float(scores.min()),
        mean=float(scores.mean()),
        stdev=float(scores.std()),
    )


def write_sweep_csv(path, result: SweepResult, class_labels: list[int]) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "mean_miou"] + [f"iou_{c}" for c in class_labels])
        for row in result.rows:
            record = [row.seed, repr(float(row.mean_miou))]
            record += [repr(float(row.per_class_iou.get(c, float("nan")))) for c in class_labels]
            writer.writerow(record)


def write_sweep_summary_csv(path, result: SweepResult) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["best", "worst", "mean", "stdev", "spread"])
        writer.writerow(
            [
                repr(result.best),
                repr(result.worst),
                repr(result.mean),
                repr(result.stdev),
                repr(result.best - result.worst),
            ]
        )
