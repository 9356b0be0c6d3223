"""Episodic meta-training and evaluation.

Training samples one episode per optimizer step from the base classes,
runs the chosen forward variant per shot, averages prototypes across
shots, scores the query set with the margin objective plus the weighted
simplification term, backpropagates into the tokens and projections, and
applies a decoupled-weight-decay moment update. The learning rate drops
by the decay factor at 60% and 80% of the total step budget.

Everything is deterministic given the configs: episode streams, the
parameter init and evaluation all derive from explicit seeds.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .episodes import Episode, GeneratorConfig, gen_episode
from .errors import ArgumentError, CheckpointError, ConfigError, NumericError, WarmError
from .losses import (
    LossReport,
    margin_loss,
    margin_loss_grad,
    point_distances,
    predict,
    simplification_loss_and_grad,
    total_loss,
)
from .metrics import (
    MetricsReport,
    attention_diversity,
    attention_entropy,
    dispersion_metrics,
    fg_summaries,
    miou,
)
from .linalg import pairwise_distances
from .rng import derive_rng
from .warm import (
    ForwardResult,
    PARAM_NAMES,
    PrototypeSet,
    WarmParams,
    ablation_forward,
    average_shots,
    init_params,
    params_as_dict,
    resolve_variant,
    save_checkpoint,
    warm_backward,
)

_INIT_STREAM = 201
_TRAIN_STREAM = 202
_EVAL_STREAM = 203

TRAIN_LOG_COLUMNS = ("episode_idx", "loss_margin", "loss_sim", "loss_total", "grad_norm", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    episodes_per_epoch: int = 200
    lr: float = 1e-4
    weight_decay: float = 0.01
    lr_decay_factor: float = 0.1
    lr_milestones: tuple[float, float] = (0.6, 0.8)
    lam: float = 0.5
    eps: float = 1e-4
    num_tokens: int = 100
    seed: int = 0
    margin: float = 0.0
    grad_clip: float | None = None
    scale_logits: bool = False
    token_std: float = 0.02

    def validate(self) -> None:
        if self.epochs < 0 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs must be >= 0 and episodes_per_epoch >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError(f"lr_decay_factor must lie in (0, 1], got {self.lr_decay_factor}")
        ms = self.lr_milestones
        if len(ms) != 2 or not (0.0 < ms[0] < ms[1] < 1.0):
            raise ConfigError(f"lr_milestones must be ascending inside (0, 1), got {ms}")
        if self.lam < 0 or self.margin < 0:
            raise ConfigError("lam and margin must be >= 0")
        if not self.eps > 0:
            raise ConfigError(f"eps must be positive, got {self.eps}")
        if self.num_tokens < 1:
            raise ConfigError(f"num_tokens must be >= 1, got {self.num_tokens}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive when set, got {self.grad_clip}")
        if not self.token_std >= 0:
            raise ConfigError(f"token_std must be >= 0, got {self.token_std}")


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    stab_eps: float = 1e-8


def init_optimizer(params: WarmParams) -> OptimizerState:
    zeros = {name: np.zeros_like(arr) for name, arr in params_as_dict(params).items()}
    return OptimizerState(m=zeros, v={name: arr.copy() for name, arr in zeros.items()})


def apply_update(
    params: WarmParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    weight_decay: float,
) -> tuple[WarmParams, OptimizerState]:
    """One bias-corrected moment step with decoupled weight decay.

    Pure: returns fresh parameter and state values, inputs untouched.
    The decay term lr * wd * theta is subtracted independently of the
    gradient-driven update.
    """
    t = state.step + 1
    new_m, new_v, new_params = {}, {}, {}
    for name in PARAM_NAMES:
        g = grads[name]
        theta = getattr(params, name)
        if g.shape != theta.shape:
            raise ArgumentError(f"gradient shape {g.shape} does not match {name} {theta.shape}")
        m = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1**t)
        v_hat = v / (1 - state.beta2**t)
        new_params[name] = theta - lr * m_hat / (np.sqrt(v_hat) + state.stab_eps) - lr * weight_decay * theta
        new_m[name] = m
        new_v[name] = v
    return (
        WarmParams(**new_params),
        OptimizerState(new_m, new_v, t, state.beta1, state.beta2, state.stab_eps),
    )


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Step-granular schedule: decayed once past each milestone fraction."""
    m1 = int(np.floor(cfg.lr_milestones[0] * total_steps))
    m2 = int(np.floor(cfg.lr_milestones[1] * total_steps))
    return cfg.lr * cfg.lr_decay_factor ** (int(step >= m1) + int(step >= m2))


def episode_forward(
    params: WarmParams, episode: Episode, variant: str, eps: float, scale_logits: bool = False
) -> tuple[PrototypeSet, list[ForwardResult]]:
    """Per-shot forward passes, prototypes averaged across shots."""
    mode, restore = resolve_variant(variant)
    shots = [
        ablation_forward(
            params,
            episode.support_features_by_class(shot),
            mode,
            restore,
            eps,
            scale_logits,
            provenance=variant,
        )
        for shot in range(episode.k_shot)
    ]
    return average_shots([s.prototypes for s in shots]), shots


def episode_loss(
    protos: PrototypeSet, episode: Episode, lam: float, margin: float
) -> tuple[LossReport, dict[int, np.ndarray]]:
    """Query margin loss plus weighted support-coverage loss, with the
    combined gradient per class prototype matrix."""
    grad_by_class = {label: np.zeros_like(p) for label, p in protos.prototypes.items()}
    margin_total = 0.0
    for cloud in episode.query:
        field = point_distances(cloud.features, protos)
        margin_total += margin_loss(field, cloud.labels, margin)
        for label, g in margin_loss_grad(cloud.features, protos, field, cloud.labels, margin).items():
            grad_by_class[label] += g
    support = episode.pooled_support_by_class()
    sim, sim_grads = simplification_loss_and_grad(support, protos)
    for label, g in sim_grads.items():
        grad_by_class[label] += lam * g
    return total_loss(margin_total, sim, lam), grad_by_class


@dataclass
class TrainResult:
    params: WarmParams
    initial_params: WarmParams
    log: list[tuple]  # TRAIN_LOG_COLUMNS rows
    wall_ms: list[float]
    checkpoint_path: Path | None = None


def train(
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    variant: str = "warm",
    out_dir=None,
    config_hash: str = "",
) -> TrainResult:
    """Full training run; optionally persists checkpoint, log and timing.

    Episodes come from the base split only (checked every step). A
    non-finite loss or gradient aborts with the offending episode's seed
    in the message rather than propagating NaNs.
    """
    cfg.validate()
    gen_cfg.validate()
    resolve_variant(variant)
    params = init_params(
        gen_cfg.feature_dim, cfg.num_tokens, derive_rng(cfg.seed, _INIT_STREAM), cfg.token_std
    )
    initial = params.copy()
    state = init_optimizer(params)
    base_set = set(gen_cfg.base_classes)
    total_steps = cfg.epochs * cfg.episodes_per_epoch
    log_rows, wall = [], []
    for step in range(total_steps):
        started = time.perf_counter()
        lr = lr_at(cfg, step, total_steps)
        episode = gen_episode(gen_cfg, derive_rng(cfg.seed, _TRAIN_STREAM, step), split="base")
        if not set(episode.class_ids) <= base_set:
            raise WarmError(
                f"training episode drew novel classes {sorted(set(episode.class_ids) - base_set)}"
            )
        protos, shots = episode_forward(params, episode, variant, cfg.eps, cfg.scale_logits)
        report, grad_by_class = episode_loss(protos, episode, cfg.lam, cfg.margin)
        per_shot = {label: g / episode.k_shot for label, g in grad_by_class.items()}
        grads = {name: np.zeros_like(arr) for name, arr in params_as_dict(params).items()}
        for shot_result in shots:
            for name, g in warm_backward(params, shot_result, per_shot).items():
                grads[name] += g
        grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if not np.isfinite(report.total) or not np.isfinite(grad_norm):
            raise NumericError(
                f"non-finite loss or gradient at step {step} "
                f"(episode stream seed={cfg.seed}, key=({_TRAIN_STREAM}, {step}))"
            )
        if cfg.grad_clip is not None and grad_norm > cfg.grad_clip:
            scale = cfg.grad_clip / grad_norm
            grads = {name: g * scale for name, g in grads.items()}
        params, state = apply_update(params, grads, state, lr, cfg.weight_decay)
        log_rows.append(
            (step, report.margin, report.simplification, report.total, grad_norm, lr)
        )
        wall.append((time.perf_counter() - started) * 1e3)
    result = TrainResult(params, initial, log_rows, wall)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt = out_dir / "checkpoint.json"
        save_checkpoint(ckpt, params, cfg.seed, config_hash)
        write_train_log(out_dir / "training_log.csv", log_rows)
        write_timing_csv(out_dir / "timing.csv", wall)
        result.checkpoint_path = ckpt
    return result


def write_train_log(path, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAIN_LOG_COLUMNS)
        for step, m, s, t, g, lr in rows:
            writer.writerow([step, repr(float(m)), repr(float(s)), repr(float(t)), repr(float(g)), repr(float(lr))])


def write_timing_csv(path, wall_ms) -> None:
    # kept apart from the training log so the log stays byte-reproducible
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode_idx", "wall_ms"])
        for i, ms in enumerate(wall_ms):
            writer.writerow([i, f"{ms:.3f}"])


def make_eval_episodes(
    gen_cfg: GeneratorConfig, count: int, seed: int, split: str = "novel"
) -> list[Episode]:
    """Deterministic evaluation batch: episode i uses stream (seed, i)."""
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    return [
        gen_episode(gen_cfg, derive_rng(seed, _EVAL_STREAM, i), split=split) for i in range(count)
    ]


@dataclass
class EvalResult:
    report: MetricsReport
    per_episode_miou: list[float]


def evaluate(
    params: WarmParams,
    episodes: list[Episode],
    variant: str = "warm",
    eps: float = 1e-4,
    scale_logits: bool = False,
) -> EvalResult:
    """Frozen-parameter evaluation over an episode batch.

    IoU aggregates per episode over the episode-local classes and is then
    averaged. Attention diagnostics (entropy, diversity, query/key
    distance) are measured on the foreground ways only, averaged over
    shots, ways and episodes.
    """
    if not episodes:
        raise ArgumentError("evaluation needs at least one episode")
    if episodes[0].support[0].feature_dim != params.feature_dim:
        raise CheckpointError(
            f"checkpoint has D={params.feature_dim} but episodes have "
            f"D={episodes[0].support[0].feature_dim}"
        )
    per_episode, per_class_acc = [], {}
    entropies, diversities, qk_dists = [], [], []
    summaries = []
    for episode in episodes:
        protos, shots = episode_forward(params, episode, variant, eps, scale_logits)
        preds = np.concatenate([predict(point_distances(q.features, protos)) for q in episode.query])
        truths = np.concatenate([q.labels for q in episode.query])
        score, per_class = miou(preds, truths, range(episode.n_way + 1))
        per_episode.append(score)
        for c, value in per_class.items():
            per_class_acc.setdefault(c, []).append(value)
        for shot_result in shots:
            for way in range(episode.n_way):
                trace = shot_result.per_class[way + 1]
                entropies.append(attention_entropy(trace.weights))
                if trace.weights.shape[0] >= 2:
                    diversities.append(attention_diversity(trace.weights))
                qk_dists.append(float(pairwise_distances(trace.q, trace.k).mean()))
        summaries.extend(fg_summaries(episode))
    disp = dispersion_metrics(summaries)
    report = MetricsReport(
        miou=float(np.mean(per_episode)),
        per_class_iou={c: float(np.mean(v)) for c, v in sorted(per_class_acc.items())},
        d_intra=disp.d_intra,
        d_inter=disp.d_inter,
        d_instance=disp.d_instance,
        attn_entropy=float(np.mean(entropies)),
        attn_diversity=float(np.mean(diversities)) if diversities else None,
        qk_dist=float(np.mean(qk_dists)),
    )
    return EvalResult(report, per_episode)
