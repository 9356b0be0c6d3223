"""Session-scoped fixtures for the expensive benchmark runs.

Training runs and evaluations on the default benchmark are cached per
(variant, seed) so the trainer examples, the acceptance criteria and the
ablation grid never repeat a run within one pytest session.
"""

import pytest

from warmproto import GeneratorConfig, TrainConfig, evaluate, train
from warmproto.fps import fps_seed_sweep
from warmproto.trainer import make_eval_episodes
from warmproto.warm import resolve_variant

FPS_BASELINE_TOKENS = 3  # desk-scale default, matches configs/default.json
EVAL_SEED = 7700


@pytest.fixture(scope="session")
def default_gen():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def bench_episodes(default_gen):
    """The default evaluation benchmark: 100 novel-class episodes."""
    return make_eval_episodes(default_gen, 100, EVAL_SEED, "novel")


@pytest.fixture(scope="session")
def trained(default_gen):
    """Memoized training on the default benchmark config."""
    cache = {}

    def get(variant, seed):
        key = (resolve_variant(variant), seed)
        if key not in cache:
            cache[key] = train(TrainConfig(seed=seed), default_gen, variant=variant)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def evaluated(trained, bench_episodes):
    """Memoized evaluation of a trained run on the default benchmark."""
    cache = {}

    def get(variant, seed):
        key = (resolve_variant(variant), seed)
        if key not in cache:
            result = trained(variant, seed)
            cache[key] = evaluate(result.params, bench_episodes, variant)
        return cache[key]

    return get


@pytest.fixture(scope="session")
def fps_sweep(bench_episodes):
    """100-seed baseline sweep on the default benchmark."""
    return fps_seed_sweep(bench_episodes, FPS_BASELINE_TOKENS, range(100))
