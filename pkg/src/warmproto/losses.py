"""Distance-based inference and the training objective.

Queries are labeled by their nearest prototype. Training combines a
margin term (distance to the true class must not exceed the distance to
the hardest other class) with a simplification term that keeps the
prototypes covering the support features instead of collapsing.

Backward convention for every min/max: the achieving index (lowest index
on ties) receives the full subgradient; the hinge propagates only where
its argument is strictly positive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ArgumentError, EmptyClassError
from .linalg import pairwise_distances
from .warm import PrototypeSet


def _proto_mapping(protos) -> dict[int, np.ndarray]:
    mapping = protos.prototypes if isinstance(protos, PrototypeSet) else dict(protos)
    if not mapping:
        raise ArgumentError("prototype set is empty")
    out = {}
    for label in sorted(mapping):
        p = np.asarray(mapping[label], dtype=np.float64)
        if p.ndim != 2 or p.shape[0] == 0:
            raise EmptyClassError(f"class {label} has an empty prototype matrix")
        out[int(label)] = p
    dims = {p.shape[1] for p in out.values()}
    if len(dims) != 1:
        raise ArgumentError(f"prototype matrices disagree on D: {sorted(dims)}")
    return out


@dataclass
class DistanceField:
    """Per-class min distance from every query point to the prototypes."""

    class_labels: tuple[int, ...]  # sorted
    distances: np.ndarray  # (C x L)
    nearest: np.ndarray  # (C x L), achieving prototype row per class/point

    def row_of(self, truth: np.ndarray) -> np.ndarray:
        labels = np.asarray(self.class_labels)
        rows = np.searchsorted(labels, truth)
        bad = (rows >= labels.size) | (labels[np.minimum(rows, labels.size - 1)] != truth)
        if np.any(bad):
            missing = sorted(set(np.asarray(truth)[bad].tolist()))
            raise ArgumentError(f"labels {missing} have no prototypes (classes: {list(labels)})")
        return rows


def point_distances(query: np.ndarray, protos) -> DistanceField:
    """d[c, l] = min over prototype rows of the class-c Euclidean distance."""
    query = np.asarray(query, dtype=np.float64)
    mapping = _proto_mapping(protos)
    labels = tuple(mapping)
    dists = np.empty((len(labels), query.shape[0]))
    nearest = np.empty((len(labels), query.shape[0]), dtype=np.int64)
    for i, label in enumerate(labels):
        dm = pairwise_distances(query, mapping[label])
        nearest[i] = np.argmin(dm, axis=1)
        dists[i] = dm[np.arange(query.shape[0]), nearest[i]]
    return DistanceField(labels, dists, nearest)


def predict(field: DistanceField) -> np.ndarray:
    """Class of the minimal distance per point; ties go to the lower class id."""
    rows = np.argmin(field.distances, axis=0)
    return np.asarray(field.class_labels, dtype=np.int64)[rows]


def _pos_neg(field: DistanceField, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if len(field.class_labels) < 2:
        raise ArgumentError("margin needs at least two classes")
    truth = np.asarray(truth, dtype=np.int64)
    if truth.shape != (field.distances.shape[1],):
        raise ArgumentError("truth length does not match the distance field")
    pos_rows = field.row_of(truth)
    cols = np.arange(truth.size)
    d_pos = field.distances[pos_rows, cols]
    masked = field.distances.copy()
    masked[pos_rows, cols] = np.inf
    neg_rows = np.argmin(masked, axis=0)
    d_neg = masked[neg_rows, cols]
    return pos_rows, neg_rows, d_pos, d_neg


def margin_loss(field: DistanceField, truth, margin: float = 0.0) -> float:
    """Sum over points of max(d_pos - d_neg + margin, 0)."""
    _, _, d_pos, d_neg = _pos_neg(field, truth)
    return float(np.sum(np.maximum(d_pos - d_neg + margin, 0.0)))


def margin_loss_grad(
    query: np.ndarray, protos, field: DistanceField, truth, margin: float = 0.0
) -> dict[int, np.ndarray]:
    """Gradient of margin_loss with respect to each class's prototypes."""
    query = np.asarray(query, dtype=np.float64)
    mapping = _proto_mapping(protos)
    pos_rows, neg_rows, d_pos, d_neg = _pos_neg(field, truth)
    active = (d_pos - d_neg + margin) > 0
    cols = np.arange(query.shape[0])
    grads = {label: np.zeros_like(mapping[label]) for label in mapping}
    for i, label in enumerate(field.class_labels):
        p = mapping[label]
        g = grads[label]
        sel = active & (pos_rows == i) & (d_pos > 0)
        if np.any(sel):
            idx = field.nearest[i, sel]
            diff = (p[idx] - query[sel]) / d_pos[sel, None]
            np.add.at(g, idx, diff)
        sel = active & (neg_rows == i) & (d_neg > 0)
        if np.any(sel):
            idx = field.nearest[i, sel]
            diff = (p[idx] - query[sel]) / d_neg[sel, None]
            np.add.at(g, idx, -diff)
    return grads


def _check_sim_inputs(features_by_class: Mapping[int, np.ndarray], mapping: dict[int, np.ndarray]):
    feat_keys = {int(k) for k in features_by_class}
    if feat_keys != set(mapping):
        raise ArgumentError(
            f"feature classes {sorted(feat_keys)} do not match prototype classes {sorted(mapping)}"
        )
    feats = {}
    for label in mapping:
        f = np.asarray(features_by_class[label], dtype=np.float64)
        if f.ndim != 2 or f.shape[0] == 0:
            raise EmptyClassError(f"class {label} has no feature rows")
        feats[label] = f
    return feats


def simplification_loss_and_grad(
    features_by_class: Mapping[int, np.ndarray], protos
) -> tuple[float, dict[int, np.ndarray]]:
    """Coverage loss and its prototype gradients in one pass.

    Per class: mean feature-to-nearest-prototype distance, mean
    prototype-to-nearest-feature distance, and the worst-covered
    prototype's distance (max over prototypes of the min distance), then
    averaged over classes. Zero exactly when prototype rows and feature
    rows coincide as sets.
    """
    mapping = _proto_mapping(protos)
    feats = _check_sim_inputs(features_by_class, mapping)
    inv_classes = 1.0 / len(mapping)
    values, grads = [], {}
    for label in mapping:
        f, p = feats[label], mapping[label]
        n_feat, n_proto = f.shape[0], p.shape[0]
        dm = pairwise_distances(f, p)
        g = np.zeros_like(p)
        # feature -> nearest prototype
        arg_p = np.argmin(dm, axis=1)
        d1 = dm[np.arange(n_feat), arg_p]
        nz = d1 > 0
        if np.any(nz):
            diff = (p[arg_p[nz]] - f[nz]) / d1[nz, None] / n_feat
            np.add.at(g, arg_p[nz], diff)
        # prototype -> nearest feature
        arg_f = np.argmin(dm, axis=0)
        d2 = dm[arg_f, np.arange(n_proto)]
        nz = d2 > 0
        if np.any(nz):
            g[nz] += (p[nz] - f[arg_f[nz]]) / d2[nz, None] / n_proto
        # worst-covered prototype
        worst = int(np.argmax(d2))
        if d2[worst] > 0:
            g[worst] += (p[worst] - f[arg_f[worst]]) / d2[worst]
        values.append(d1.mean() + d2.mean() + d2.max())
        grads[label] = g * inv_classes
    return float(np.mean(values)), grads


def simplification_loss(features_by_class: Mapping[int, np.ndarray], protos) -> float:
    return simplification_loss_and_grad(features_by_class, protos)[0]


def simplification_loss_grad(
    features_by_class: Mapping[int, np.ndarray], protos
) -> dict[int, np.ndarray]:
    return simplification_loss_and_grad(features_by_class, protos)[1]


@dataclass
class LossReport:
    margin: float
    simplification: float
    lam: float
    total: float


def total_loss(margin: float, simplification: float, lam: float = 0.5) -> LossReport:
    """Weighted objective: margin + lam * simplification."""
    margin = float(margin)
    simplification = float(simplification)
    if not (np.isfinite(margin) and np.isfinite(simplification)):
        raise ArgumentError("loss components must be finite")
    return LossReport(margin, simplification, lam, margin + lam * simplification)
