"""Training orchestration: data construction, seeded learner setup, the
episode loop with periodic validation, and best-checkpoint selection.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..algorithms import (
    Am3Learner,
    FumiLearner,
    InnerLoopConfig,
    MamlLearner,
    OuterLoopConfig,
)
from ..checkpoint import save_checkpoint
from ..diffcore import GradMode
from ..episodes import generate_synthetic, make_meta_split, sample_task
from ..mmfs import load_dataset
from ..models import MixMode
from ..rng import substream
from .config import ConfigError, ExperimentConfig

# synthetic class splits use these ratios so the default 80-class corpus
# lands on 50 train / 15 val / 15 test
SYNTHETIC_SPLIT_RATIOS = (0.625, 0.1875, 0.1875)


def build_data(cfg: ExperimentConfig):
    """Returns (records, split). Synthetic data and its split depend only
    on the synthetic config, never on the run seed."""
    if cfg.data == "synthetic":
        records = generate_synthetic(cfg.synthetic)
        split = make_meta_split(
            [r.class_id for r in records],
            ratios=SYNTHETIC_SPLIT_RATIOS,
            seed=cfg.synthetic.seed,
        )
        return records, split
    records, split = load_dataset(cfg.data)
    return records, split


def build_learner(cfg: ExperimentConfig, image_dim: int, text_dim: int, rng):
    grad_mode = GradMode.SECOND_ORDER if cfg.grad_mode == "second" else GradMode.FIRST_ORDER
    inner = InnerLoopConfig(
        alpha=cfg.inner_alpha,
        train_steps=cfg.inner_steps,
        test_steps_by_shot=dict(cfg.test_steps_by_shot),
        grad_mode=grad_mode,
    )
    outer = OuterLoopConfig(
        lr=cfg.outer_lr,
        weight_decay=cfg.weight_decay,
        betas=(cfg.beta1, cfg.beta2),
        eps=cfg.adam_eps,
        tasks_per_batch=cfg.tasks_per_batch,
    )
    if cfg.algorithm == "fumi":
        return FumiLearner(
            image_dim, text_dim, rng,
            body_hidden=cfg.body_hidden, hyper_hidden=cfg.hyper_hidden,
            dropout_p=cfg.dropout_p, inner=inner, outer=outer,
        )
    if cfg.algorithm == "maml":
        return MamlLearner(
            image_dim, cfg.ways, rng,
            body_hidden=cfg.body_hidden, dropout_p=cfg.dropout_p,
            inner=inner, outer=outer,
        )
    mix = {
        "protonet": MixMode.FORCE_IMAGE_ONLY,
        "am3": MixMode.LEARNED,
        "am3-zero": MixMode.FORCE_TEXT_ONLY,
    }[cfg.algorithm]
    return Am3Learner(
        image_dim, text_dim, rng, mix_mode=mix,
        proto_dim=cfg.proto_dim, hidden=cfg.am3_hidden,
        dropout_p=cfg.dropout_p, outer=outer, algo=cfg.algorithm,
    )


def _filter_records(records, class_ids):
    keep = set(class_ids)
    return [r for r in records if r.class_id in keep]


def run_train(cfg: ExperimentConfig) -> dict:
    """Train one (config, seed) run; writes config.json, log.jsonl and
    the best-validation checkpoint into cfg.out_dir."""
    cfg = cfg.resolve()
    records, split = build_data(cfg)
    train_records = _filter_records(records, split.train)
    val_records = _filter_records(records, split.val)
    if not train_records:
        raise ConfigError("empty training split")
    image_dim = train_records[0].image_embeddings.shape[1]
    text_dim = train_records[0].text_embedding.shape[0]

    rng_init = substream(cfg.seed, "init")
    rng_episodes = substream(cfg.seed, "episodes")
    rng_dropout = substream(cfg.seed, "dropout")
    rng_val = substream(cfg.seed, "val-episodes")

    learner = build_learner(cfg, image_dim, text_dim, rng_init)

    # one fixed validation set keeps losses comparable across checkpoints
    val_set = [
        sample_task(val_records, cfg.ways, cfg.shots, cfg.train_query_size, rng_val)
        for _ in range(cfg.val_tasks)
    ] if cfg.val_tasks and val_records else []

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    digest = cfg.digest()
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

    best_loss = np.inf
    best_params = {k: v.copy() for k, v in learner.params.items()}
    episode_count = 0
    next_val = cfg.val_every
    lines = []
    while episode_count < cfg.episodes:
        batch_size = min(cfg.tasks_per_batch, cfg.episodes - episode_count)
        tasks = [
            sample_task(train_records, cfg.ways, cfg.shots, cfg.train_query_size, rng_episodes)
            for _ in range(batch_size)
        ]
        metrics = learner.outer_step(tasks, rng_dropout)
        episode_count += batch_size
        entry = {"episode": episode_count, "train_loss": metrics["train_loss"],
                 "train_acc": metrics["train_acc"]}
        if val_set and (episode_count >= next_val or episode_count >= cfg.episodes):
            val_loss, val_acc = learner.validation_loss(val_set)
            entry["val_loss"] = val_loss
            entry["val_acc"] = val_acc
            if val_loss < best_loss:
                best_loss = val_loss
                best_params = {k: v.copy() for k, v in learner.params.items()}
            while next_val <= episode_count:
                next_val += cfg.val_every
        lines.append(json.dumps(entry, sort_keys=True))
    if not val_set:
        best_params = {k: v.copy() for k, v in learner.params.items()}

    (out / "log.jsonl").write_text("\n".join(lines) + "\n")
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, cfg.algorithm, digest, best_params)
    return {"checkpoint": str(ckpt_path), "log": str(out / "log.jsonl"),
            "config": str(out / "config.json"), "digest": digest}
