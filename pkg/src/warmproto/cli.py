"""Command-line entry point.

Verbs: gen, train, eval, sweep-fps, ablate, token-sweep, report. Every
command is driven by a strict JSON config (unknown fields are rejected so
sweep typos fail loudly), writes CSV outputs plus a JSON sidecar that
embeds the config and its content hash, and never mutates its inputs.

Exit codes: 0 success, 1 usage or configuration error, 2 numeric failure,
3 IO or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .episodes import GeneratorConfig, gen_episode, load_episode, save_episode
from .errors import ArgumentError, ConfigError, FormatError, NumericError
from .fps import evaluate_fps, fps_seed_sweep, write_sweep_csv, write_sweep_summary_csv
from .metrics import write_metrics_csv
from .rng import derive_rng
from .trainer import TrainConfig, evaluate, make_eval_episodes, train
from .warm import ABLATION_GRID, MODES, VARIANTS, config_sha256, load_checkpoint

_GEN_STREAM = 203  # same stream as make_eval_episodes: gen+load reproduces in-memory batches


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = GeneratorConfig()
    train: TrainConfig = TrainConfig()
    method: str = "warm"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    eval_episodes: int = 100
    eval_seed: int = 7700
    eval_split: str = "novel"
    fps_tokens: int = 3
    fps_seeds: int = 100
    token_counts: tuple[int, ...] = (1, 10, 100)
    num_episodes: int = 100
    gen_split: str = "novel"
    gen_seed: int = 7700

    def validate(self) -> None:
        self.generator.validate()
        self.train.validate()
        parse_method(self.method)
        for name in ("eval_episodes", "fps_tokens", "fps_seeds", "num_episodes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("eval_split", "gen_split"):
            if getattr(self, name) not in ("base", "novel"):
                raise ConfigError(f"{name} must be 'base' or 'novel', got {getattr(self, name)!r}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if not self.token_counts or any(m < 1 for m in self.token_counts):
            raise ConfigError("token_counts must be a nonempty list of counts >= 1")


def parse_method(method: str) -> str:
    """Normalize a method string to an internal variant name.

    Accepts warm, naive, fps-min-dist, the grid row names, and the
    ablation:<mode>,<on|off> form.
    """
    if method == "fps-min-dist" or method in VARIANTS:
        return method
    if method.startswith("ablation:"):
        body = method[len("ablation:") :]
        mode, _, restore_word = body.partition(",")
        if mode not in MODES:
            raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {MODES}")
        if restore_word not in ("on", "off"):
            raise ConfigError(f"ablation restore flag must be 'on' or 'off', got {restore_word!r}")
        if mode == "naive":
            return "naive"
        return mode + ("+restore" if restore_word == "on" else "")
    raise ConfigError(
        f"unknown method {method!r}; expected warm, naive, fps-min-dist, or ablation:<mode>,<on|off>"
    )


def _build_dataclass(cls, data: dict, section: str):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown field(s) {unknown} in section '{section}'")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in section '{section}': {exc}") from exc


def load_experiment_config(path) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
        cfg.validate()
        return cfg
    try:
        raw = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object at the top level")
    top = dict(data)
    gen_data = top.pop("generator", {})
    train_data = top.pop("train", {})
    if not isinstance(gen_data, dict) or not isinstance(train_data, dict):
        raise ConfigError("sections 'generator' and 'train' must be JSON objects")
    cfg = _build_dataclass(ExperimentConfig, top, "top level")
    cfg = replace(
        cfg,
        generator=_build_dataclass(GeneratorConfig, gen_data, "generator"),
        train=_build_dataclass(TrainConfig, train_data, "train"),
    )
    cfg.validate()
    return cfg


def config_dict(cfg: ExperimentConfig) -> dict:
    def clean(obj):
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, (list, tuple)):
            return [clean(v) for v in obj]
        return obj

    return clean(asdict(cfg))


def write_sidecar(path, command: str, cfg: ExperimentConfig) -> None:
    payload = {"command": command, "config": config_dict(cfg)}
    payload["config_sha256"] = config_sha256(payload["config"])
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def worker_cap() -> int:
    """Parallelism cap from WARM_THREADS; execution is currently sequential,
    which always respects the cap."""
    raw = os.environ.get("WARM_THREADS")
    if raw is None:
        return 1
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"WARM_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"WARM_THREADS must be >= 1, got {cap}")
    return cap


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_episode_dir(data_dir) -> list:
    paths = sorted(Path(data_dir).glob("*.warmep"))
    if not paths:
        raise ArgumentError(f"no .warmep episode files under {data_dir}")
    return [load_episode(p) for p in paths]


def _eval_batch(cfg: ExperimentConfig, data_dir):
    if data_dir is not None:
        return _load_episode_dir(data_dir)
    return make_eval_episodes(cfg.generator, cfg.eval_episodes, cfg.eval_seed, cfg.eval_split)


def cmd_gen(args) -> None:
    cfg = load_experiment_config(args.config)
    out = _out_dir(args)
    seed = cfg.gen_seed if args.seed is None else args.seed
    for i in range(cfg.num_episodes):
        episode = gen_episode(cfg.generator, derive_rng(seed, _GEN_STREAM, i), split=cfg.gen_split)
        save_episode(episode, out / f"ep_{i:05d}.warmep")
    write_sidecar(out / "generator_config.json", "gen", cfg)
    print(f"gen: wrote {cfg.num_episodes} episodes to {out}")


def cmd_train(args) -> None:
    cfg = load_experiment_config(args.config)
    variant = parse_method(cfg.method)
    if variant == "fps-min-dist":
        raise ConfigError("method 'fps-min-dist' has no learnable parameters; nothing to train")
    train_cfg = cfg.train if args.seed is None else replace(cfg.train, seed=args.seed)
    out = _out_dir(args)
    result = train(
        train_cfg,
        cfg.generator,
        variant=variant,
        out_dir=out,
        config_hash=config_sha256(config_dict(cfg)),
    )
    write_sidecar(out / "train_config.json", "train", cfg)
    final = result.log[-1][3] if result.log else float("nan")
    print(f"train[{variant}]: {len(result.log)} episodes, final loss {final:.4f}, checkpoint {result.checkpoint_path}")


def cmd_eval(args) -> None:
    cfg = load_experiment_config(args.config)
    variant = parse_method(cfg.method)
    out = _out_dir(args)
    episodes = _eval_batch(cfg, args.data)
    if variant == "fps-min-dist":
        seed = cfg.eval_seed if args.seed is None else args.seed
        report, _ = evaluate_fps(episodes, cfg.fps_tokens, seed)
    else:
        if args.checkpoint is None:
            raise ConfigError(f"method {variant!r} needs --checkpoint")
        params, _meta = load_checkpoint(args.checkpoint)
        report = evaluate(params, episodes, variant, cfg.train.eps, cfg.train.scale_logits).report
    labels = list(range(cfg.generator.n_way + 1))
    write_metrics_csv(out / "metrics.csv", [report], labels)
    write_sidecar(out / "eval_config.json", "eval", cfg)
    print(f"eval[{variant}]: mIoU {report.miou:.4f} over {len(episodes)} episodes -> {out / 'metrics.csv'}")


def cmd_sweep_fps(args) -> None:
    cfg = load_experiment_config(args.config)
    out = _out_dir(args)
    episodes = _eval_batch(cfg, args.data)
    n_seeds = cfg.fps_seeds if args.seeds is None else args.seeds
    if n_seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {n_seeds}")
    result = fps_seed_sweep(episodes, cfg.fps_tokens, range(n_seeds))
    labels = list(range(cfg.generator.n_way + 1))
    write_sweep_csv(out / "sweep.csv", result, labels)
    write_sweep_summary_csv(out / "sweep_summary.csv", result)
    write_sidecar(out / "sweep_config.json", "sweep-fps", cfg)
    print(
        f"sweep-fps: {n_seeds} seeds, best {result.best:.4f}, worst {result.worst:.4f}, "
        f"spread {result.best - result.worst:.4f}"
    )


def cmd_ablate(args) -> None:
    cfg = load_experiment_config(args.config)
    out = _out_dir(args)
    seeds = list(cfg.seeds) if args.seeds is None else list(range(args.seeds))
    if not seeds:
        raise ConfigError("ablation grid needs at least one seed")
    episodes = _eval_batch(cfg, args.data)
    rows = []
    for seed in seeds:
        for variant in ABLATION_GRID:
            result = train(replace(cfg.train, seed=seed), cfg.generator, variant=variant)
            ev = evaluate(result.params, episodes, variant, cfg.train.eps, cfg.train.scale_logits)
            rows.append((variant, seed, ev.report.qk_dist, ev.report.miou))
    with (out / "ablation.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "seed", "qk_dist", "miou"])
        for variant, seed, qk, score in rows:
            writer.writerow([variant, seed, repr(float(qk)), repr(float(score))])
    write_sidecar(out / "ablation_config.json", "ablate", cfg)
    print(f"ablate: {len(rows)} rows ({len(ABLATION_GRID)} variants x {len(seeds)} seeds) -> {out / 'ablation.csv'}")


def cmd_token_sweep(args) -> None:
    cfg = load_experiment_config(args.config)
    variant = parse_method(cfg.method)
    if variant == "fps-min-dist":
        raise ConfigError("token-sweep needs a trainable method")
    out = _out_dir(args)
    episodes = _eval_batch(cfg, args.data)
    rows = []
    for m in cfg.token_counts:
        scores = []
        for seed in cfg.seeds:
            train_cfg = replace(cfg.train, seed=seed, num_tokens=int(m))
            result = train(train_cfg, cfg.generator, variant=variant)
            scores.append(evaluate(result.params, episodes, variant, cfg.train.eps).report.miou)
        rows.append((int(m), float(np.mean(scores)), float(np.std(scores))))
    with (out / "token_sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["M", "miou_mean", "miou_std"])
        for m, mean, std in rows:
            writer.writerow([m, repr(mean), repr(std)])
    write_sidecar(out / "token_sweep_config.json", "token-sweep", cfg)
    print(f"token-sweep: {len(rows)} token counts -> {out / 'token_sweep.csv'}")


def cmd_report(args) -> None:
    data = Path(args.data)
    if not data.exists():
        raise ArgumentError(f"no such directory: {data}")
    found = False
    for name in ("metrics.csv", "sweep_summary.csv", "ablation.csv", "token_sweep.csv", "training_log.csv"):
        path = data / name
        if not path.exists():
            continue
        found = True
        with path.open() as fh:
            reader = list(csv.reader(fh))
        print(f"== {name}")
        if name == "training_log.csv" and len(reader) > 11:
            for row in reader[:1] + reader[-10:]:
                print(",".join(row))
            print(f"({len(reader) - 1} episodes total; last 10 shown)")
        else:
            for row in reader:
                print(",".join(row))
    if not found:
        raise ArgumentError(f"no known result CSVs under {data}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(self.prog + ": error: " + message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="warmproto", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, handler, *, data=False, out=True, checkpoint=False, seeds=False):
        p = sub.add_parser(name, help=handler.__doc__)
        p.add_argument("--config", type=Path, default=None, help="JSON experiment config")
        if out:
            p.add_argument("--out", type=Path, required=True, help="output directory")
        if data:
            p.add_argument("--data", type=Path, default=None, help="directory of .warmep episode files")
        if checkpoint:
            p.add_argument("--checkpoint", type=Path, default=None, help="parameter checkpoint JSON")
        p.add_argument("--seed", type=int, default=None, help="override the relevant seed")
        if seeds:
            p.add_argument("--seeds", type=int, default=None, help="number of seeds to run")
        p.set_defaults(func=func)
        return p

    add("gen", cmd_gen, cmd_gen)
    add("train", cmd_train, cmd_train)
    add("eval", cmd_eval, cmd_eval, data=True, checkpoint=True)
    add("sweep-fps", cmd_sweep_fps, cmd_sweep_fps, data=True, seeds=True)
    add("ablate", cmd_ablate, cmd_ablate, data=True, seeds=True)
    add("token-sweep", cmd_token_sweep, cmd_token_sweep, data=True)
    report = sub.add_parser("report", help="print a text summary of a result directory")
    report.add_argument("--data", type=Path, required=True, help="result directory to summarize")
    report.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 1
        return 0 if exc.code in (0, None) else 1
    try:
        worker_cap()
        args.func(args)
        return 0
    except (ConfigError, ArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"io/format failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    raise SystemExit(main())
