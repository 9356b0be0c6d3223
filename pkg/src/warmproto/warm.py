"""Prototype generation by aligned cross-attention.

The full operator runs three stages per class: whiten the class's support
features (subtract the mean, multiply by the inverse covariance root),
let that class's learnable token pool attend to the whitened features
through a single projection-only attention head, then color the attended
tokens back (covariance root and mean restored). Ablation variants swap
whitening for plain centering or per-channel normalization, or skip the
restoration; the naive variant attends to raw features directly.

Foreground ways share one token pool, background has its own; each pool
only ever attends to its own class's features. Whitening statistics are
constants with respect to the learnables (the features come from a fixed
source), so the backward pass never differentiates through the
eigendecomposition.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ArgumentError, CheckpointError, EmptyClassError, InsufficientPointsError
from .linalg import mat_pow_half, pairwise_distances, require_finite, softmax_rows

BACKGROUND = 0

MODES = ("naive", "center", "normalize", "whiten")

# Named forward variants: name -> (mode, restore). The rows of the
# component-ablation grid are exactly the first seven entries.
VARIANTS: dict[str, tuple[str, bool]] = {
    "naive": ("naive", False),
    "center": ("center", False),
    "normalize": ("normalize", False),
    "whiten": ("whiten", False),
    "center+restore": ("center", True),
    "normalize+restore": ("normalize", True),
    "whiten+restore": ("whiten", True),
    "warm": ("whiten", True),
}

ABLATION_GRID = (
    "naive",
    "center",
    "normalize",
    "whiten",
    "center+restore",
    "normalize+restore",
    "whiten+restore",
)


def resolve_variant(name: str) -> tuple[str, bool]:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ArgumentError(f"unknown variant {name!r}; expected one of {sorted(VARIANTS)}") from None


@dataclass
class WhitenStats:
    """Per-class mean, covariance and its clamped +/- half powers."""

    mean: np.ndarray
    cov: np.ndarray
    inv_sqrt: np.ndarray
    sqrt: np.ndarray
    eps: float


def compute_stats(features: np.ndarray, eps: float = 1e-4) -> WhitenStats:
    """Alignment/restoration statistics of one class's support features.

    Covariance uses the unbiased divisor (rows - 1); eigenvalues below eps
    are clamped before taking the half powers.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ArgumentError(f"features must be 2-D, got shape {features.shape}")
    if features.shape[0] < 2:
        raise InsufficientPointsError(
            f"need at least 2 points for covariance, got {features.shape[0]}"
        )
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (features.shape[0] - 1)
    cov = 0.5 * (cov + cov.T)
    return WhitenStats(
        mean=mean,
        cov=cov,
        inv_sqrt=mat_pow_half(cov, -0.5, eps),
        sqrt=mat_pow_half(cov, 0.5, eps),
        eps=eps,
    )


def whiten(features: np.ndarray, stats: WhitenStats) -> np.ndarray:
    """Zero-mean, channel-decorrelated view of the features."""
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != stats.mean.shape[0]:
        raise ArgumentError(
            f"dimension mismatch: features have D={features.shape[1]}, stats have D={stats.mean.shape[0]}"
        )
    return (features - stats.mean) @ stats.inv_sqrt


def color(tokens: np.ndarray, stats: WhitenStats) -> np.ndarray:
    """Restore the removed statistics: tokens @ cov^(1/2) + mean."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.shape[1] != stats.mean.shape[0]:
        raise ArgumentError(
            f"dimension mismatch: tokens have D={tokens.shape[1]}, stats have D={stats.mean.shape[0]}"
        )
    return tokens @ stats.sqrt + stats.mean


@dataclass
class WarmParams:
    """Learnable state: 2M prototypical tokens and the three projections.

    Rows [:M] of ``tokens`` are the foreground pool (shared across ways),
    rows [M:] the background pool. Projections are bias-free D x D maps.
    """

    tokens: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.w_q = np.asarray(self.w_q, dtype=np.float64)
        self.w_k = np.asarray(self.w_k, dtype=np.float64)
        self.w_v = np.asarray(self.w_v, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] % 2 != 0:
            raise ArgumentError(f"tokens must be (2M x D), got shape {self.tokens.shape}")
        d = self.tokens.shape[1]
        for name in ("w_q", "w_k", "w_v"):
            w = getattr(self, name)
            if w.shape != (d, d):
                raise ArgumentError(f"{name} must be ({d} x {d}), got {w.shape}")
            require_finite(w, name)
        require_finite(self.tokens, "tokens")

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[0] // 2

    @property
    def feature_dim(self) -> int:
        return self.tokens.shape[1]

    @property
    def fg_tokens(self) -> np.ndarray:
        return self.tokens[: self.num_tokens]

    @property
    def bg_tokens(self) -> np.ndarray:
        return self.tokens[self.num_tokens :]

    def token_pool(self, class_label: int) -> tuple[str, np.ndarray]:
        if class_label == BACKGROUND:
            return "bg", self.bg_tokens
        return "fg", self.fg_tokens

    def copy(self) -> "WarmParams":
        return WarmParams(self.tokens.copy(), self.w_q.copy(), self.w_k.copy(), self.w_v.copy())


PARAM_NAMES = ("tokens", "w_q", "w_k", "w_v")


def params_as_dict(params: WarmParams) -> dict[str, np.ndarray]:
    return {name: getattr(params, name) for name in PARAM_NAMES}


def init_params(
    feature_dim: int, num_tokens: int, rng: np.random.Generator, token_std: float = 0.02
) -> WarmParams:
    """Gaussian tokens (std token_std, compact next to feature dispersion)
    and gaussian projections with std 3/sqrt(D).

    The projection scale is a few times larger than the classic 1/sqrt(D)
    so the attention logits have unit-order spread over whitened keys from
    the very first step; with smaller projections the head starts out
    uniform and stays that way for the whole desk-scale step budget.
    """
    if feature_dim < 1 or num_tokens < 1:
        raise ArgumentError("feature_dim and num_tokens must be >= 1")
    proj_scale = 3.0 / np.sqrt(feature_dim)
    return WarmParams(
        tokens=token_std * rng.standard_normal((2 * num_tokens, feature_dim)),
        w_q=proj_scale * rng.standard_normal((feature_dim, feature_dim)),
        w_k=proj_scale * rng.standard_normal((feature_dim, feature_dim)),
        w_v=proj_scale * rng.standard_normal((feature_dim, feature_dim)),
    )


@dataclass
class AttentionOutput:
    attended: np.ndarray  # (M x D)
    weights: np.ndarray  # (M x L), rows sum to 1


def cross_attention(
    queries_in: np.ndarray,
    keys_in: np.ndarray,
    params: WarmParams,
    scale_logits: bool = False,
) -> AttentionOutput:
    """Single-head attention: softmax(Wq(queries) Wk(keys)^T) Wv(keys).

    No logit scaling by default; ``scale_logits`` divides by sqrt(D) for
    experimentation.
    """
    queries_in = np.asarray(queries_in, dtype=np.float64)
    keys_in = np.asarray(keys_in, dtype=np.float64)
    if keys_in.shape[0] == 0:
        raise EmptyClassError("cross-attention needs at least one key row")
    if queries_in.shape[1] != keys_in.shape[1]:
        raise ArgumentError(
            f"dimension mismatch: queries D={queries_in.shape[1]}, keys D={keys_in.shape[1]}"
        )
    q = queries_in @ params.w_q
    k = keys_in @ params.w_k
    v = keys_in @ params.w_v
    logits = q @ k.T
    if scale_logits:
        logits = logits / np.sqrt(queries_in.shape[1])
    weights = softmax_rows(logits)
    return AttentionOutput(attended=weights @ v, weights=weights)


@dataclass
class PrototypeSet:
    """Per-class prototype matrices plus the variant that produced them."""

    prototypes: dict[int, np.ndarray]
    provenance: str

    @property
    def classes(self) -> list[int]:
        return sorted(self.prototypes)


@dataclass
class ClassTrace:
    """Everything the backward pass and the diagnostics need per class."""

    class_label: int
    pool: str  # "fg" or "bg"
    keys_in: np.ndarray  # transformed features actually fed to attention
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    attended: np.ndarray
    out_map: np.ndarray | None  # restoration matrix, None means identity
    out_shift: np.ndarray | None  # restoration offset, None means zero
    stats: WhitenStats | None
    scale_logits: bool

    @property
    def attention(self) -> AttentionOutput:
        return AttentionOutput(attended=self.attended, weights=self.weights)


@dataclass
class ForwardResult:
    prototypes: PrototypeSet
    per_class: dict[int, ClassTrace]


def _class_transform(
    features: np.ndarray, mode: str, restore: bool, eps: float
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None, WhitenStats | None]:
    """Returns (keys_in, out_map, out_shift, stats) for one class."""
    if mode == "naive":
        return features, None, None, None
    stats = compute_stats(features, eps)
    if mode == "center":
        keys = features - stats.mean
        return keys, None, (stats.mean if restore else None), stats
    if mode == "normalize":
        sigma = np.sqrt(np.maximum(np.diagonal(stats.cov), eps))
        keys = (features - stats.mean) / sigma
        out_map = np.diag(sigma) if restore else None
        return keys, out_map, (stats.mean if restore else None), stats
    if mode == "whiten":
        keys = (features - stats.mean) @ stats.inv_sqrt
        out_map = stats.sqrt if restore else None
        return keys, out_map, (stats.mean if restore else None), stats
    raise ArgumentError(f"unknown mode {mode!r}; expected one of {MODES}")


def ablation_forward(
    params: WarmParams,
    features_by_class: dict[int, np.ndarray],
    mode: str,
    restore: bool,
    eps: float = 1e-4,
    scale_logits: bool = False,
    provenance: str | None = None,
) -> ForwardResult:
    """Shared forward pass for the full operator and all its ablations.

    Per class: transform the features, attend with the class's token pool,
    add the residual, then apply the restoration map (if any).
    """
    if not features_by_class:
        raise ArgumentError("features_by_class is empty")
    if provenance is None:
        provenance = mode + ("+restore" if restore else "")
    prototypes: dict[int, np.ndarray] = {}
    traces: dict[int, ClassTrace] = {}
    for label in sorted(features_by_class):
        features = np.asarray(features_by_class[label], dtype=np.float64)
        if features.shape[0] == 0:
            raise EmptyClassError(f"class {label} has no support features")
        pool, tokens = params.token_pool(label)
        keys_in, out_map, out_shift, stats = _class_transform(features, mode, restore, eps)
        q = tokens @ params.w_q
        k = keys_in @ params.w_k
        v = keys_in @ params.w_v
        logits = q @ k.T
        if scale_logits:
            logits = logits / np.sqrt(params.feature_dim)
        weights = softmax_rows(logits)
        attended = weights @ v
        mid = tokens + attended
        out = mid if out_map is None else mid @ out_map
        if out_shift is not None:
            out = out + out_shift
        prototypes[label] = out
        traces[label] = ClassTrace(
            class_label=label,
            pool=pool,
            keys_in=keys_in,
            q=q,
            k=k,
            v=v,
            weights=weights,
            attended=attended,
            out_map=out_map,
            out_shift=out_shift,
            stats=stats,
            scale_logits=scale_logits,
        )
    return ForwardResult(PrototypeSet(prototypes, provenance), traces)


def warm_forward(
    params: WarmParams,
    features_by_class: dict[int, np.ndarray],
    eps: float = 1e-4,
    scale_logits: bool = False,
) -> ForwardResult:
    """Full whiten / attend / color pass; provenance tag "warm"."""
    return ablation_forward(
        params, features_by_class, "whiten", True, eps, scale_logits, provenance="warm"
    )


def naive_forward(
    params: WarmParams, features_by_class: dict[int, np.ndarray], scale_logits: bool = False
) -> ForwardResult:
    """Attention on raw features, no alignment and no restoration."""
    return ablation_forward(
        params, features_by_class, "naive", False, scale_logits=scale_logits, provenance="naive"
    )


def warm_backward(
    params: WarmParams, result: ForwardResult, grad_by_class: dict[int, np.ndarray]
) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of the forward pass.

    ``grad_by_class`` holds the loss gradient with respect to each class's
    prototype matrix; contributions are summed over classes. Transform
    statistics are treated as constants.
    """
    grads = {name: np.zeros_like(arr) for name, arr in params_as_dict(params).items()}
    m = params.num_tokens
    for label in sorted(grad_by_class):
        trace = result.per_class.get(label)
        if trace is None:
            raise ArgumentError(f"no forward trace recorded for class {label}")
        g = np.asarray(grad_by_class[label], dtype=np.float64)
        if g.shape != trace.attended.shape:
            raise ArgumentError(
                f"gradient for class {label} has shape {g.shape}, expected {trace.attended.shape}"
            )
        d_mid = g if trace.out_map is None else g @ trace.out_map.T
        # attended = weights @ v, with the residual token path on the side
        d_weights = d_mid @ trace.v.T
        d_v = trace.weights.T @ d_mid
        tmp = d_weights * trace.weights
        d_logits = tmp - trace.weights * tmp.sum(axis=1, keepdims=True)
        if trace.scale_logits:
            d_logits = d_logits / np.sqrt(params.feature_dim)
        d_q = d_logits @ trace.k
        d_k = d_logits.T @ trace.q
        _, tokens = params.token_pool(label)
        grads["w_q"] += tokens.T @ d_q
        grads["w_k"] += trace.keys_in.T @ d_k
        grads["w_v"] += trace.keys_in.T @ d_v
        d_tokens = d_mid + d_q @ params.w_q.T
        block = slice(0, m) if trace.pool == "fg" else slice(m, 2 * m)
        grads["tokens"][block] += d_tokens
    return grads


def average_shots(sets: list[PrototypeSet]) -> PrototypeSet:
    """Element-wise mean of per-shot prototype sets."""
    if not sets:
        raise ArgumentError("no prototype sets to average")
    first = sets[0]
    for other in sets[1:]:
        if other.provenance != first.provenance:
            raise ArgumentError(
                f"cannot average across provenances {first.provenance!r} and {other.provenance!r}"
            )
        if other.classes != first.classes:
            raise ArgumentError("prototype sets cover different classes")
        for label in first.prototypes:
            if other.prototypes[label].shape != first.prototypes[label].shape:
                raise ArgumentError(f"shape mismatch for class {label}")
    averaged = {
        label: np.mean([s.prototypes[label] for s in sets], axis=0) for label in first.prototypes
    }
    return PrototypeSet(averaged, first.provenance)


def config_sha256(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def save_checkpoint(path, params: WarmParams, seed: int, config_hash: str = "") -> None:
    """Persist parameters as JSON, atomically (write temp, then rename)."""
    payload = {
        "version": 1,
        "feature_dim": params.feature_dim,
        "num_tokens": params.num_tokens,
        "seed": int(seed),
        "config_sha256": config_hash,
        "tokens": params.tokens.tolist(),
        "w_q": params.w_q.tolist(),
        "w_k": params.w_k.tolist(),
        "w_v": params.w_v.tolist(),
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, sort_keys=True))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[WarmParams, dict]:
    """Read a checkpoint back; shape inconsistencies raise CheckpointError."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    required = {"version", "feature_dim", "num_tokens", "seed", "tokens", "w_q", "w_k", "w_v"}
    missing = required - payload.keys()
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing fields {sorted(missing)}")
    if payload["version"] != 1:
        raise CheckpointError(f"unsupported checkpoint version {payload['version']}")
    d, m = int(payload["feature_dim"]), int(payload["num_tokens"])
    try:
        params = WarmParams(
            tokens=np.array(payload["tokens"], dtype=np.float64),
            w_q=np.array(payload["w_q"], dtype=np.float64),
            w_k=np.array(payload["w_k"], dtype=np.float64),
            w_v=np.array(payload["w_v"], dtype=np.float64),
        )
    except (ValueError, ArgumentError) as exc:
        raise CheckpointError(f"checkpoint {path} holds malformed arrays: {exc}") from exc
    if params.feature_dim != d or params.num_tokens != m:
        raise CheckpointError(
            f"checkpoint arrays are ({params.num_tokens} tokens, D={params.feature_dim}) "
            f"but header says ({m} tokens, D={d})"
        )
    meta = {k: payload[k] for k in ("version", "feature_dim", "num_tokens", "seed", "config_sha256") if k in payload}
    return params, meta
