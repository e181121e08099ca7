"""Meta-test evaluation of a trained checkpoint: episodes from the test
split only, per-task accuracies, and a summary result.json.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from ..algorithms import evaluate
from ..checkpoint import load_checkpoint
from ..episodes import sample_task
from ..rng import substream
from .config import ConfigError, ExperimentConfig
from .train import _filter_records, build_data, build_learner


def load_run(checkpoint_path, expect_algo: str | None = None):
    """Rehydrate a trained learner from a checkpoint plus the config.json
    written beside it. Returns (learner, cfg, records, split)."""
    ckpt_path = Path(checkpoint_path)
    algo, digest, tensors = load_checkpoint(ckpt_path)
    if expect_algo is not None and expect_algo != algo:
        raise ConfigError(
            f"checkpoint was trained with algo {algo!r}, not {expect_algo!r}"
        )
    cfg_path = ckpt_path.parent / "config.json"
    if not cfg_path.exists():
        raise ConfigError(f"no config.json beside checkpoint at {cfg_path}")
    cfg = ExperimentConfig.from_dict(json.loads(cfg_path.read_text())).resolve()
    if cfg.digest() != digest:
        raise ConfigError("config.json does not match the checkpoint's config digest")
    if cfg.algorithm != algo:
        raise ConfigError("config.json algorithm does not match the checkpoint tag")

    records, split = build_data(cfg)
    image_dim = records[0].image_embeddings.shape[1]
    text_dim = records[0].text_embedding.shape[0]
    learner = build_learner(cfg, image_dim, text_dim, substream(cfg.seed, "init"))
    for k, v in learner.params.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise ConfigError(f"checkpoint tensor {k!r} missing or mis-shaped")
        learner.params[k] = tensors[k].copy()
    # rebuild optimizer state bindings after swapping arrays
    learner.opt.params = learner.params
    return learner, cfg, records, split


def run_eval(
    checkpoint_path,
    episodes: int = 1000,
    query_per_class: int = 20,
    seed: int = 0,
    expect_algo: str | None = None,
    out_path=None,
) -> dict:
    ckpt_path = Path(checkpoint_path)
    learner, cfg, records, split = load_run(ckpt_path, expect_algo)
    test_records = _filter_records(records, split.test)

    rng_eval = substream(seed, "eval-episodes")
    start = time.perf_counter()
    tasks = [
        sample_task(test_records, cfg.ways, cfg.shots, query_per_class, rng_eval)
        for _ in range(episodes)
    ]
    accs, n_scored = evaluate(learner, tasks, allowed_class_ids=split.test)
    elapsed = time.perf_counter() - start

    result = {
        "algo": cfg.algorithm,
        "shots": cfg.shots,
        "ways": cfg.ways,
        "seed": cfg.seed,
        "eval_seed": seed,
        "n_tasks": len(tasks),
        "query_per_class": query_per_class,
        "n_scored": int(n_scored),
        "mean_acc": float(np.mean(accs)),
        "per_task_acc": [float(a) for a in accs],
        "config_digest": cfg.digest(),
        "wall_clock_s": elapsed,  # the only non-deterministic field
    }
    out_path = Path(out_path) if out_path else ckpt_path.parent / "result.json"
    out_path.write_text(json.dumps(result, sort_keys=True))
    return result
