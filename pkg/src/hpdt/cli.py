"""Command-line surface: generate-data, train, eval, repro.

Configuration is a JSON file with fail-closed parsing (unknown keys are
errors). Every artifact a command writes embeds the resolved config and the
package version string. The HPDT_DATA_DIR environment variable supplies the
default data root.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import data as tdata
from . import envs, evaluator, trainer
from .checkpoint import load_checkpoint, save_checkpoint
from .model import ModelConfig
from .rngs import derive_rng


class ConfigError(Exception):
    pass


def version_string() -> str:
    """Package version plus git describe when available."""
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        desc = ""
    return f"hpdt {__version__}" + (f" ({desc})" if desc else "")


# ---------------------------------------------------------------------------
# experiment configuration
# ---------------------------------------------------------------------------

_MODEL_KEYS = {"embed_dim", "n_layers", "n_heads", "context_len", "dropout", "mode",
               "d_g", "demo_len", "k", "max_timestep"}
_TRAIN_KEYS = {"epochs", "updates_per_epoch", "batch_per_task", "lr", "eval_every",
               "eval_episodes", "clip_grad_norm", "raw_rtg_distance"}
_EVAL_KEYS = {"episodes_per_task", "target_rtg", "max_steps", "k", "m_prime",
              "raw_rtg_distance"}
_DATASET_KEYS = {"family", "n_train_tasks", "n_test_tasks", "episodes_per_task",
                 "demos_per_task", "skill_mix", "horizon", "action_bound", "noise_std"}
_TOP_KEYS = {"seed", "output_dir", "dataset", "model", "train", "eval"}


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "dataset": dict(self.dataset),
            "model": dict(self.model),
            "train": dict(self.train),
            "eval": dict(self.eval),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys(raw, _TOP_KEYS, "top level")
        _check_keys(raw.get("dataset", {}), _DATASET_KEYS, "dataset")
        _check_keys(raw.get("model", {}), _MODEL_KEYS, "model")
        _check_keys(raw.get("train", {}), _TRAIN_KEYS, "train")
        _check_keys(raw.get("eval", {}), _EVAL_KEYS, "eval")
        return cls(
            seed=raw.get("seed", 0),
            output_dir=raw.get("output_dir", "runs"),
            dataset=dict(raw.get("dataset", {})),
            model=dict(raw.get("model", {})),
            train=dict(raw.get("train", {})),
            eval=dict(raw.get("eval", {})),
        )

    def dataset_config(self) -> envs.DatasetConfig:
        d = dict(self.dataset)
        d.setdefault("seed", self.seed)
        if "skill_mix" in d:
            d["skill_mix"] = tuple(d["skill_mix"])
        return envs.DatasetConfig(**d)

    def model_config(self, state_dim: int, action_dim: int,
                     mode: str | None = None) -> ModelConfig:
        m = dict(self.model)
        if mode is not None:
            m["mode"] = mode
        m.setdefault("max_timestep", self.dataset_config().horizon)
        return ModelConfig(state_dim=state_dim, action_dim=action_dim, **m)

    def train_config(self, seed: int | None = None, checkpoint_dir: str | None = None,
                     paper_scale: bool = False) -> trainer.TrainConfig:
        t = dict(self.train)
        if paper_scale:
            t["epochs"] = 5000
            t["updates_per_epoch"] = 10
        t["seed"] = self.seed if seed is None else seed
        if checkpoint_dir is not None:
            t["checkpoint_dir"] = checkpoint_dir
        return trainer.TrainConfig(**t)

    def eval_config(self, seed: int | None = None, **overrides) -> evaluator.EvalConfig:
        e = dict(self.eval)
        e.update({k: v for k, v in overrides.items() if v is not None})
        e["seed"] = self.seed if seed is None else seed
        return evaluator.EvalConfig(**e)


def _check_keys(section: dict, allowed: set[str], where: str) -> None:
    if not isinstance(section, dict):
        raise ConfigError(f"config section {where!r} must be an object")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    cfg = ExperimentConfig.from_dict(raw)
    round_trip = ExperimentConfig.from_dict(cfg.to_dict())
    if round_trip.to_dict() != cfg.to_dict():
        raise ConfigError(f"{path}: config does not round-trip")
    return cfg


def default_config(family: str = "pointdir", paper_scale: bool = False) -> ExperimentConfig:
    """Desk-scale defaults; --paper-scale restores full-size counts."""
    cfg = ExperimentConfig(
        seed=0,
        output_dir="runs",
        dataset={"family": family, "n_train_tasks": 8, "n_test_tasks": 2,
                 "episodes_per_task": 12, "demos_per_task": 5, "horizon": 64},
        model={"embed_dim": 32, "n_layers": 2, "n_heads": 1, "context_len": 20,
               "dropout": 0.1, "demo_len": 10, "k": 3, "mode": "full"},
        train={"epochs": 500, "updates_per_epoch": 10, "batch_per_task": 8, "lr": 1e-3,
               "eval_every": 0, "eval_episodes": 10},
        eval={"episodes_per_task": 50},
    )
    if paper_scale:
        cfg.dataset.update({"n_train_tasks": 35, "n_test_tasks": 5})
        cfg.model.update({"embed_dim": 128, "n_layers": 3})
        cfg.train.update({"epochs": 5000, "batch_per_task": 16, "lr": 1e-4})
    return cfg


def data_root(args) -> str:
    if getattr(args, "data", None):
        return args.data
    return os.environ.get("HPDT_DATA_DIR", "data")


def _comments(config: ExperimentConfig | dict) -> list[str]:
    as_dict = config.to_dict() if isinstance(config, ExperimentConfig) else config
    return [f"version: {version_string()}", f"config: {json.dumps(as_dict, sort_keys=True)}"]


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(args.family or "pointdir")
    if args.family:
        cfg.dataset["family"] = args.family
    if args.seed is not None:
        cfg.seed = args.seed
    dcfg = cfg.dataset_config()
    root = data_root(args)
    out_dir = os.path.join(root, dcfg.family)
    paths = {split: tdata.dataset_path(root, dcfg.family, split) for split in ("train", "test")}
    manifest_path = os.path.join(out_dir, "manifest.json")
    existing = [p for p in list(paths.values()) + [manifest_path] if os.path.exists(p)]
    if existing and not args.force:
        print(f"error: refusing to overwrite {existing[0]} (use --force)", file=sys.stderr)
        return 1
    os.makedirs(out_dir, exist_ok=True)
    train_b, test_b = envs.collect_meta_dataset(dcfg)
    header = {"generator": version_string(), "config": cfg.to_dict()}
    tdata.save_dataset(train_b, paths["train"], extra_header=header)
    tdata.save_dataset(test_b, paths["test"], extra_header=header)
    manifest = {
        "version": version_string(),
        "config": cfg.to_dict(),
        "family": dcfg.family,
        "seed": dcfg.seed,
        "n_train_tasks": len(train_b),
        "n_test_tasks": len(test_b),
        "episodes_per_task": dcfg.episodes_per_task,
        "demos_per_task": dcfg.demos_per_task,
        "task_params": {b.task_id: b.env_spec.task_params for b in train_b + test_b},
        "files": {k: os.path.abspath(v) for k, v in paths.items()},
    }
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {paths['train']} ({len(train_b)} tasks), {paths['test']} ({len(test_b)} tasks)")
    return 0


def _load_split(root: str, family: str, split: str):
    path = tdata.dataset_path(root, family, split)
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset {path} not found; run generate-data first")
    return tdata.load_dataset(path)


def _dims(bundles) -> tuple[int, int]:
    traj = (bundles[0].rollouts or bundles[0].demos)[0]
    return traj.states.shape[1], traj.actions.shape[1]


def cmd_train(args) -> int:
    cfg = load_config(args.config) if args.config else default_config(args.family or "pointdir")
    if args.seed is not None:
        cfg.seed = args.seed
    mode = args.mode.replace("-", "_") if args.mode else None
    root = data_root(args)
    family = cfg.dataset.get("family", "pointdir")
    train_b = _load_split(root, family, "train")
    test_b = _load_split(root, family, "test")
    s_dim, a_dim = _dims(train_b)
    model_config = cfg.model_config(s_dim, a_dim, mode=mode)

    if args.dry_run:
        from .model import init_params

        params = init_params(model_config, cfg.seed)
        print(f"mode: {model_config.mode}")
        print(f"sequence length: {model_config.sequence_length()}")
        for group, count in sorted(params.group_counts().items()):
            print(f"  {group}: {count}")
        print(f"total parameters: {params.n_scalars()}")
        return 0

    out_dir = args.out or os.path.join(cfg.output_dir, f"{family}-{model_config.mode}-s{cfg.seed}")
    train_config = cfg.train_config(checkpoint_dir=out_dir, paper_scale=args.paper_scale)
    resume = load_checkpoint(args.resume) if args.resume else None
    try:
        ckpt, metrics = trainer.train(
            train_b, model_config, train_config, test_bundles=test_b,
            resume_from=resume, version=version_string(),
            log=lambda msg: print(msg, flush=True),
        )
    except trainer.TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"diagnostics: {os.path.join(out_dir, 'diverged.json')}", file=sys.stderr)
        return 2
    trainer.write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics,
                              header_comments=_comments(cfg))
    print(f"final checkpoint: {os.path.join(out_dir, 'final.ckpt')}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    ckpt = load_checkpoint(args.checkpoint)
    root = data_root(args)
    family = ckpt.extra.get("family") or cfg.dataset.get("family", "pointdir")
    bundles = _load_split(root, family, args.split)
    s_dim, a_dim = _dims(bundles)
    if (s_dim, a_dim) != (ckpt.config.state_dim, ckpt.config.action_dim):
        print(
            f"error: checkpoint dims (state {ckpt.config.state_dim}, action "
            f"{ckpt.config.action_dim}) do not match dataset dims (state {s_dim}, "
            f"action {a_dim})", file=sys.stderr)
        return 1
    out_path = args.out or "eval_report.csv"
    if os.path.exists(out_path):
        os.remove(out_path)
    ks = args.k or [None]
    m_primes = args.m_prime or [None]
    for k in ks:
        for m_prime in m_primes:
            results = []
            for bundle in bundles:
                eval_config = cfg.eval_config(
                    episodes_per_task=args.episodes, k=k, m_prime=m_prime,
                    target_rtg=args.target_rtg,
                    raw_rtg_distance=True if args.raw_rtg_distance else None,
                    record_neighbors=bool(args.dump_neighbors),
                )
                res = evaluator.evaluate_task(bundle.env_spec, bundle, ckpt, eval_config)
                results.append(res)
                if args.dump_neighbors:
                    _dump_neighbors(args.dump_neighbors, bundle, ckpt, eval_config)
            label = ""
            if k is not None or m_prime is not None:
                label = f"k={k if k is not None else ckpt.config.k}," \
                        f"m_prime={m_prime if m_prime is not None else ckpt.config.demo_len}"
            evaluator.write_eval_report(out_path, results, mode=ckpt.config.mode,
                                        episodes=results[0].returns and len(results[0].returns),
                                        header_comments=_comments(cfg), sweep_label=label)
    print(f"wrote {out_path}")
    if args.project_tokens:
        proj_path = os.path.splitext(out_path)[0] + "_tokens.csv"
        evaluator.export_global_token_projection(bundles, ckpt, proj_path,
                                                 header_comments=_comments(cfg))
        print(f"wrote {proj_path}")
    return 0


def _dump_neighbors(path, bundle, ckpt, eval_config) -> None:
    rng = derive_rng(eval_config.seed, "episode", bundle.task_id, 0)
    res = evaluator.rollout_episode(bundle.env_spec, bundle, ckpt, eval_config, rng)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps({"task_id": bundle.task_id,
                             "neighbors": res.trace["neighbors"]}) + "\n")


REPRO_SUITES = ("pointdir-ablation", "pointvel-ablation", "robustness", "baseline-compare")
REPRO_SEEDS = (0, 1, 2)


def cmd_repro(args) -> int:
    if args.suite not in REPRO_SUITES:
        print(f"error: unknown suite {args.suite!r}; choose from {REPRO_SUITES}",
              file=sys.stderr)
        return 1
    cfg = default_config()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.train["epochs"] = args.epochs
    if args.episodes is not None:
        cfg.eval["episodes_per_task"] = args.episodes

    family = "pointvel" if args.suite == "pointvel-ablation" else "pointdir"
    cfg.dataset["family"] = family
    if args.suite in ("pointdir-ablation", "pointvel-ablation"):
        modes = ["full", "wo_g", "wo_a", "wo_t", "pdt_baseline"]
    elif args.suite == "baseline-compare":
        modes = ["full", "pdt_baseline"]
    else:
        modes = ["full"]

    out_dir = args.out or os.path.join(cfg.output_dir, f"repro-{args.suite}")
    os.makedirs(out_dir, exist_ok=True)
    dcfg = cfg.dataset_config()
    train_b, test_b = envs.collect_meta_dataset(dcfg)
    s_dim, a_dim = _dims(train_b)

    rows = []
    for mode in modes:
        for seed in REPRO_SEEDS:
            model_config = cfg.model_config(s_dim, a_dim, mode=mode)
            train_config = cfg.train_config(seed=derive_rng(cfg.seed, "suite", mode, seed)
                                            .integers(2**31 - 1))
            ckpt, _ = trainer.train(train_b, model_config, train_config,
                                    version=version_string())
            sweep = [(None, None)]
            if args.suite == "robustness":
                sweep = [(k, mp) for k in (1, 3, 5) for mp in (10, 25)]
            for k, m_prime in sweep:
                eval_config = cfg.eval_config(
                    seed=int(derive_rng(cfg.seed, "suite-eval", mode, seed).integers(2**31 - 1)),
                    k=k, m_prime=m_prime)
                means = [evaluator.evaluate_task(b.env_spec, b, ckpt, eval_config).mean
                         for b in test_b]
                cell = "" if k is None else f"k={k},m_prime={m_prime}"
                rows.append({"suite": args.suite, "mode": mode, "seed": seed, "cell": cell,
                             "mean_return": float(np.mean(means))})
                print(f"{args.suite} {mode} seed{seed} {cell}: {np.mean(means):.3f}", flush=True)

    summary_path = os.path.join(out_dir, "summary.csv")
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        for comment in _comments(cfg):
            fh.write(f"# {comment}\n")
        import csv as csv_mod

        writer = csv_mod.writer(fh)
        writer.writerow(["suite", "mode", "cell", "seed", "mean_return"])
        for row in rows:
            writer.writerow([row["suite"], row["mode"], row["cell"], row["seed"],
                             repr(row["mean_return"])])
        keys = sorted({(r["mode"], r["cell"]) for r in rows})
        for mode, cell in keys:
            vals = [r["mean_return"] for r in rows if r["mode"] == mode and r["cell"] == cell]
            writer.writerow([args.suite, mode, cell, "mean±std",
                             f"{np.mean(vals):.6f}±{np.std(vals):.6f}"])
    print(f"wrote {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hpdt",
        description="Hierarchical prompt decision transformer: synthetic offline meta-RL",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate-data", help="collect and write a meta-dataset")
    p_gen.add_argument("--config", help="experiment config JSON")
    p_gen.add_argument("--family", choices=envs.FAMILIES)
    p_gen.add_argument("--data", help="data root (default $HPDT_DATA_DIR or ./data)")
    p_gen.add_argument("--seed", type=int)
    p_gen.add_argument("--force", action="store_true", help="overwrite existing files")
    p_gen.set_defaults(func=cmd_generate_data)

    p_train = sub.add_parser("train", help="train a model on a generated dataset")
    p_train.add_argument("--config")
    p_train.add_argument("--family", choices=envs.FAMILIES)
    p_train.add_argument("--data")
    p_train.add_argument("--mode", choices=["full", "wo-g", "wo-a", "wo-t", "pdt"],
                         help="ablation mode (default: config model.mode)")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out", help="output directory for checkpoints and metrics")
    p_train.add_argument("--resume", help="checkpoint to resume from")
    p_train.add_argument("--dry-run", action="store_true",
                         help="validate config and print parameter counts")
    p_train.add_argument("--paper-scale", action="store_true",
                         help="restore full-size epoch counts")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config")
    p_eval.add_argument("--data")
    p_eval.add_argument("--split", default="test", choices=["train", "test"])
    p_eval.add_argument("--episodes", type=int)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--k", type=int, action="append",
                        help="retrieval width override; repeat for a sweep")
    p_eval.add_argument("--m-prime", type=int, action="append", dest="m_prime",
                        help="demo segment length override; repeat for a sweep")
    p_eval.add_argument("--target-rtg", type=float, dest="target_rtg")
    p_eval.add_argument("--raw-rtg-distance", action="store_true",
                        help="disable rtg standardization in retrieval distances")
    p_eval.add_argument("--project-tokens", action="store_true",
                        help="also export a 2-d projection of global tokens")
    p_eval.add_argument("--dump-neighbors", help="JSONL path for per-step neighbor indices")
    p_eval.add_argument("--out", help="report CSV path")
    p_eval.set_defaults(func=cmd_eval)

    p_repro = sub.add_parser("repro", help="run a canned experiment suite")
    p_repro.add_argument("suite", choices=REPRO_SUITES)
    p_repro.add_argument("--out")
    p_repro.add_argument("--seed", type=int)
    p_repro.add_argument("--epochs", type=int, help="override suite training epochs")
    p_repro.add_argument("--episodes", type=int, help="override evaluation episodes")
    p_repro.set_defaults(func=cmd_repro)
    return parser


MODE_ALIASES = {"pdt": "pdt_baseline"}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "mode", None):
        args.mode = MODE_ALIASES.get(args.mode.replace("-", "_"), args.mode)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
