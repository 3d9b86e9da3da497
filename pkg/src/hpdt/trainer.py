"""Training loop: per-task segment sampling, prompt fusion, MSE on actions, Adam.

Every batch derives from (seed, epoch, update, task, row) alone, so runs are
bitwise reproducible, rows are order-independent, and resuming from a
checkpoint continues the exact same stream.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import data as tdata
from . import prompt
from .autodiff import AdamState, Tape
from .checkpoint import ModelCheckpoint, save_checkpoint
from .data import TaskBundle
from .model import FusedBatch, ModelConfig, ModelParams, action_loss, init_params
from .rngs import derive_rng


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, update: int, loss: float, batch_key: tuple):
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, update {update} (batch key {batch_key})"
        )
        self.epoch = epoch
        self.update = update
        self.loss = loss
        self.batch_key = batch_key


@dataclass
class TrainConfig:
    epochs: int = 500
    updates_per_epoch: int = 10
    batch_per_task: int = 16
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 0  # epochs between evaluations; 0 disables
    eval_episodes: int = 10
    checkpoint_dir: str | None = None
    clip_grad_norm: float | None = None  # off by default
    raw_rtg_distance: bool = False

    def __post_init__(self):
        # epochs == 0 is allowed: it yields the initialization checkpoint
        if self.epochs < 0 or min(self.updates_per_epoch, self.batch_per_task) < 1:
            raise ValueError("epochs must be >= 0; updates_per_epoch and batch_per_task >= 1")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "updates_per_epoch": self.updates_per_epoch,
            "batch_per_task": self.batch_per_task,
            "lr": self.lr,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "eval_episodes": self.eval_episodes,
            "checkpoint_dir": self.checkpoint_dir,
            "clip_grad_norm": self.clip_grad_norm,
            "raw_rtg_distance": self.raw_rtg_distance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def build_training_batch(
    bundles: list[TaskBundle],
    params: ModelParams,
    config: ModelConfig,
    batch_per_task: int,
    seed: int,
    epoch: int = 0,
    update: int = 0,
    raw_rtg_distance: bool = False,
) -> FusedBatch:
    """One fused batch of n_tasks * batch_per_task rows.

    Per row: a uniform rollout segment, a uniform demo segment, batched
    neighbor retrieval, on-tape prompt encoding, summation fusion.
    """
    flags = config.flags
    m = config.context_len
    s_dim, a_dim = config.state_dim, config.action_dim
    rows_roll: list[tdata.Segment] = []
    rows_demo: list[tdata.Segment] = []
    rows_scale: list[float] = []
    demo_seg_len = config.prompt_len if flags.static_prompt else config.demo_len
    for ti, bundle in enumerate(bundles):
        if not bundle.rollouts:
            raise ValueError(f"task {bundle.task_id}: training requires at least one rollout")
        scale = prompt.bundle_rtg_scale(bundle, raw_rtg_distance)
        for row in range(batch_per_task):
            rng = derive_rng(seed, "batch", epoch, update, ti, row)
            roll_idx = int(rng.integers(len(bundle.rollouts)))
            rows_roll.append(tdata.sample_segment(bundle.rollouts[roll_idx], m, rng, roll_idx))
            demo_idx = int(rng.integers(len(bundle.demos)))
            rows_demo.append(tdata.sample_segment(bundle.demos[demo_idx], demo_seg_len, rng, demo_idx))
            rows_scale.append(scale)

    b = len(rows_roll)
    times = np.stack([seg.times for seg in rows_roll])
    loss_mask = np.stack([seg.mask for seg in rows_roll])
    targets = np.stack([seg.actions for seg in rows_roll])
    fused_rtg = ad.constant(np.stack([seg.rtg for seg in rows_roll])[:, :, None])
    fused_state = ad.constant(np.stack([seg.states for seg in rows_roll]))
    fused_action = ad.constant(np.stack([seg.actions for seg in rows_roll]))

    neighbor_indices = None
    if flags.use_adaptive:
        a_width = 1 + s_dim + a_dim
        neighbor_indices = np.full((b, m, config.k), -1, dtype=np.int64)
        tuples = np.zeros((b, m, config.k, a_width))
        for i, (roll, demo) in enumerate(zip(rows_roll, rows_demo)):
            n_real = roll.real_length
            idx = prompt.retrieve_neighbors(
                roll.rtg[:n_real], roll.states[:n_real], demo, config.k, rows_scale[i]
            )
            neighbor_indices[i, :n_real] = idx
            tuples[i, :n_real] = prompt._demo_tuples(demo)[idx]
        encoded = prompt.encode_adaptive_tokens(tuples, params.adaptive_encoder)
        # padded rollout positions get exactly-zero template tokens
        encoded = ad.mul(encoded, ad.constant(loss_mask[:, :, None]))
        t_rtg, t_state, t_action = prompt.split_template(encoded, s_dim, a_dim)
        fused_rtg = ad.add(fused_rtg, t_rtg)
        fused_state = ad.add(fused_state, t_state)
        fused_action = ad.add(fused_action, t_action)

    global_tokens = None
    if flags.use_global:
        lengths = {seg.real_length for seg in rows_demo}
        if len(lengths) == 1:
            global_tokens = prompt.encode_global_tokens(rows_demo, params.global_encoder)
        else:
            singles = [
                ad.reshape(prompt.encode_global_token(seg, params.global_encoder), (1, config.d_g))
                for seg in rows_demo
            ]
            global_tokens = ad.concat(singles, axis=0)

    kwargs = {}
    if flags.static_prompt:
        kwargs = {
            "prompt_rtg": ad.constant(np.stack([seg.rtg for seg in rows_demo])[:, :, None]),
            "prompt_state": ad.constant(np.stack([seg.states for seg in rows_demo])),
            "prompt_action": ad.constant(np.stack([seg.actions for seg in rows_demo])),
            "prompt_times": np.stack([seg.times for seg in rows_demo]),
        }
    return FusedBatch(
        rtg=fused_rtg,
        state=fused_state,
        action=fused_action,
        times=times,
        loss_mask=loss_mask,
        target_actions=targets,
        global_tokens=global_tokens,
        neighbor_indices=neighbor_indices,
        **kwargs,
    )


def _resume_state(resume_from: ModelCheckpoint, model_config: ModelConfig,
                  train_config: TrainConfig) -> tuple[ModelParams, AdamState, int]:
    ck = resume_from
    if ck.config.mode != model_config.mode:
        raise ValueError(
            f"mode mismatch: checkpoint was trained in mode {ck.config.mode!r}, "
            f"requested {model_config.mode!r}"
        )
    if ck.config.to_dict() != model_config.to_dict():
        raise ValueError("checkpoint model config differs from the requested config")
    recorded = ck.extra.get("train_config")
    if recorded:
        for key in ("updates_per_epoch", "batch_per_task", "lr", "seed"):
            if recorded[key] != getattr(train_config, key):
                raise ValueError(
                    f"train config {key} changed across resume: "
                    f"{recorded[key]!r} -> {getattr(train_config, key)!r}"
                )
    adam = ck.adam if ck.adam is not None else AdamState.for_params(ck.params.all())
    start = ck.rng_info.get("next_epoch", 0) * train_config.updates_per_epoch
    start += ck.rng_info.get("next_update", 0)
    return ck.params, adam, start


def train(
    train_bundles: list[TaskBundle],
    model_config: ModelConfig,
    train_config: TrainConfig,
    test_bundles: list[TaskBundle] | None = None,
    resume_from: ModelCheckpoint | None = None,
    version: str = "",
    log=None,
) -> tuple[ModelCheckpoint, list[dict]]:
    """Run the full teacher-forcing loop; returns (final checkpoint, metrics rows)."""
    seed = train_config.seed
    upe = train_config.updates_per_epoch
    if resume_from is not None:
        params, adam, start_step = _resume_state(resume_from, model_config, train_config)
    else:
        params = init_params(model_config, seed)
        adam = AdamState.for_params(params.all())
        start_step = 0

    metrics: list[dict] = []
    ckpt_dir = train_config.checkpoint_dir
    if ckpt_dir:
        os.makedirs(ckpt_dir, exist_ok=True)

    def make_ckpt(next_step: int) -> ModelCheckpoint:
        return ModelCheckpoint(
            config=model_config,
            params=params,
            adam=adam,
            rng_info={"seed": seed, "next_epoch": next_step // upe, "next_update": next_step % upe},
            version=version,
            extra={"train_config": train_config.to_dict()},
        )

    def run_eval(epoch: int, row: dict) -> None:
        from . import evaluator  # deferred to avoid a module cycle

        cfg = evaluator.EvalConfig(
            episodes_per_task=train_config.eval_episodes,
            seed=derive_rng(seed, "eval-seed", epoch).integers(2**31 - 1),
            raw_rtg_distance=train_config.raw_rtg_distance,
        )
        ckpt = make_ckpt((epoch + 1) * upe)
        for bundle in test_bundles:
            res = evaluator.evaluate_task(bundle.env_spec, bundle, ckpt, cfg)
            row[f"mean_return/{bundle.task_id}"] = res.mean
            row[f"std_return/{bundle.task_id}"] = res.std

    total_steps = train_config.epochs * upe
    for step in range(start_step, total_steps):
        epoch, update = step // upe, step % upe
        batch_key = (seed, epoch, update)
        with Tape() as tape:
            batch = build_training_batch(
                train_bundles, params, model_config, train_config.batch_per_task,
                seed, epoch, update, train_config.raw_rtg_distance,
            )
            dropout_rng = (
                derive_rng(seed, "dropout", epoch, update) if model_config.dropout > 0 else None
            )
            loss = action_loss(batch, params, model_config, dropout_rng)
        loss_val = loss.item()
        if not math.isfinite(loss_val):
            if ckpt_dir:
                snap = os.path.join(ckpt_dir, "diverged.json")
                with open(snap, "w", encoding="utf-8") as fh:
                    json.dump({"epoch": epoch, "update": update, "loss": repr(loss_val),
                               "batch_key": list(batch_key)}, fh)
            raise TrainingDivergedError(epoch, update, loss_val, batch_key)
        ad.backward(loss, tape)
        if train_config.clip_grad_norm is not None:
            ad.clip_grad_norm(params.all(), train_config.clip_grad_norm)
        ad.adam_step(params.all(), adam, train_config.lr)
        ad.zero_grads(params.all())
        row = {"epoch": epoch, "update": update, "loss": loss_val}
        end_of_epoch = update == upe - 1
        if (end_of_epoch and test_bundles and train_config.eval_every
                and (epoch + 1) % train_config.eval_every == 0):
            run_eval(epoch, row)
            if ckpt_dir:
                save_checkpoint(make_ckpt(step + 1), os.path.join(ckpt_dir, f"epoch_{epoch + 1:05d}.ckpt"))
        metrics.append(row)
        if log and end_of_epoch and (epoch + 1) % max(1, train_config.epochs // 10) == 0:
            log(f"epoch {epoch + 1}/{train_config.epochs} loss {loss_val:.5f}")

    final = make_ckpt(total_steps)
    if ckpt_dir:
        save_checkpoint(final, os.path.join(ckpt_dir, "final.ckpt"))
        write_metrics_csv(os.path.join(ckpt_dir, "metrics.csv"), metrics)
    return final, metrics


def write_metrics_csv(path, metrics: list[dict], header_comments: list[str] | None = None) -> None:
    """Metrics CSV: epoch, update, loss, then eval columns where present."""
    eval_cols: list[str] = []
    for row in metrics:
        for key in row:
            if key not in ("epoch", "update", "loss") and key not in eval_cols:
                eval_cols.append(key)
    cols = ["epoch", "update", "loss"] + eval_cols
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for comment in header_comments or []:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in metrics:
            writer.writerow([row.get(c, "") for c in cols])
