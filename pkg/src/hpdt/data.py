"""Trajectories, return-to-go, normalization, segment sampling, and JSONL datasets.

A task's offline data is a TaskBundle: rollout trajectories used for training
plus a few demonstration trajectories that define the task at adaptation time.
States are normalized with statistics computed from the demonstrations ONLY;
actions and rtg stay in environment units.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

DATASET_FORMAT_VERSION = 1
STD_FLOOR = 1e-6


class DatasetError(Exception):
    pass


def compute_rtg(rewards: np.ndarray) -> np.ndarray:
    """Suffix sums of the reward series: out[t] = sum(rewards[t:])."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.ndim != 1 or rewards.size == 0:
        raise ValueError("compute_rtg expects a non-empty 1-d reward series")
    return np.cumsum(rewards[::-1])[::-1].copy()


@dataclass
class Trajectory:
    """One episode's aligned state/action/reward/rtg/time series."""

    states: np.ndarray  # (T, state_dim)
    actions: np.ndarray  # (T, action_dim)
    rewards: np.ndarray  # (T,)
    rtg: np.ndarray  # (T,)
    times: np.ndarray  # (T,) ints 0..T-1
    task_id: str

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.rtg = np.asarray(self.rtg, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.int64)
        self.validate()

    @property
    def length(self) -> int:
        return self.states.shape[0]

    @classmethod
    def from_rewards(cls, states, actions, rewards, task_id: str) -> "Trajectory":
        rewards = np.asarray(rewards, dtype=np.float64)
        return cls(
            states=states,
            actions=actions,
            rewards=rewards,
            rtg=compute_rtg(rewards),
            times=np.arange(len(rewards), dtype=np.int64),
            task_id=task_id,
        )

    def validate(self) -> None:
        t = self.states.shape[0]
        if t < 1:
            raise ValueError("trajectory must have at least one step")
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise ValueError("states and actions must be 2-d")
        for name, arr in (("actions", self.actions), ("rewards", self.rewards),
                          ("rtg", self.rtg), ("times", self.times)):
            if arr.shape[0] != t:
                raise ValueError(f"{name} length {arr.shape[0]} != {t}")
        for name, arr in (("states", self.states), ("actions", self.actions),
                          ("rewards", self.rewards), ("rtg", self.rtg)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")
        if not np.array_equal(self.times, np.arange(t)):
            raise ValueError("times must increase from 0 with step 1")
        if not np.array_equal(self.rtg, compute_rtg(self.rewards)):
            raise ValueError("rtg is not the suffix sum of rewards")


@dataclass
class TaskBundle:
    """A task's offline data: rollouts, few-shot demos, and demo-derived stats."""

    task_id: str
    env_spec: "object"  # hpdt.envs.EnvSpec; typed loosely to avoid an import cycle
    rollouts: list[Trajectory]
    demos: list[Trajectory]
    norm_mean: np.ndarray | None = None
    norm_std: np.ndarray | None = None
    normalized: bool = False

    def __post_init__(self):
        if not self.demos:
            raise ValueError(f"task {self.task_id}: demos must be non-empty")


@dataclass(frozen=True)
class SegmentRef:
    """Which trajectory a segment came from and where it starts."""

    traj_index: int
    start: int
    length: int  # real (unpadded) steps


@dataclass
class Segment:
    """Materialized segment arrays, padded to a fixed length with a loss mask."""

    rtg: np.ndarray  # (m,)
    states: np.ndarray  # (m, state_dim)
    actions: np.ndarray  # (m, action_dim)
    times: np.ndarray  # (m,) int
    mask: np.ndarray  # (m,) 1.0 where real data, 0.0 where padding
    ref: SegmentRef = field(default=SegmentRef(0, 0, 0))

    @property
    def real_length(self) -> int:
        return self.ref.length


def sample_segment(traj: Trajectory, m: int, rng: np.random.Generator,
                   traj_index: int = 0) -> Segment:
    """Uniform-start length-m slice; shorter trajectories are padded and masked."""
    if m < 1:
        raise ValueError("segment length must be >= 1")
    t = traj.length
    if t >= m:
        start = int(rng.integers(0, t - m + 1))
        length = m
    else:
        start = 0
        length = t
    return extract_segment(traj, start, length, m, traj_index)


def extract_segment(traj: Trajectory, start: int, length: int, padded: int,
                    traj_index: int = 0) -> Segment:
    if start + length > traj.length:
        raise ValueError(f"segment [{start}, {start + length}) exceeds trajectory length {traj.length}")
    sl = slice(start, start + length)
    state_dim = traj.states.shape[1]
    action_dim = traj.actions.shape[1]
    rtg = np.zeros(padded)
    states = np.zeros((padded, state_dim))
    actions = np.zeros((padded, action_dim))
    times = np.zeros(padded, dtype=np.int64)
    mask = np.zeros(padded)
    rtg[:length] = traj.rtg[sl]
    states[:length] = traj.states[sl]
    actions[:length] = traj.actions[sl]
    times[:length] = traj.times[sl]
    # pad times continue past the end so positions stay distinct for the model
    if length < padded:
        last = int(traj.times[start + length - 1])
        times[length:] = np.arange(last + 1, last + 1 + (padded - length))
    mask[:length] = 1.0
    return Segment(rtg, states, actions, times, mask, SegmentRef(traj_index, start, length))


def normalize_bundle(bundle: TaskBundle) -> TaskBundle:
    """Standardize all states with per-dimension mean/std computed from the demos."""
    if bundle.normalized:
        raise ValueError(f"task {bundle.task_id}: bundle is already normalized")
    demo_states = np.concatenate([d.states for d in bundle.demos], axis=0)
    mean = demo_states.mean(axis=0)
    std = np.maximum(demo_states.std(axis=0), STD_FLOOR)

    def scaled(traj: Trajectory) -> Trajectory:
        out = replace(traj, states=(traj.states - mean) / std)
        _freeze(out)
        return out

    out = TaskBundle(
        task_id=bundle.task_id,
        env_spec=bundle.env_spec,
        rollouts=[scaled(t) for t in bundle.rollouts],
        demos=[scaled(t) for t in bundle.demos],
        norm_mean=mean,
        norm_std=std,
        normalized=True,
    )
    return out


def _freeze(traj: Trajectory) -> None:
    for arr in (traj.states, traj.actions, traj.rewards, traj.rtg, traj.times):
        arr.flags.writeable = False


# ---------------------------------------------------------------------------
# JSONL serialization
# ---------------------------------------------------------------------------


def _floats(arr: np.ndarray) -> list:
    return np.asarray(arr, dtype=np.float64).tolist()


def save_dataset(bundles: Sequence[TaskBundle], path, extra_header: dict | None = None) -> None:
    """Write bundles as JSONL: one header line, then one trajectory per line.

    Floats go through repr, so the round trip is exact to the last bit.
    """
    header = {
        "kind": "trajectory-dataset",
        "version": DATASET_FORMAT_VERSION,
        "tasks": [
            {
                "task_id": b.task_id,
                "env_spec": b.env_spec.to_dict(),
                "normalized": b.normalized,
                "norm_mean": None if b.norm_mean is None else _floats(b.norm_mean),
                "norm_std": None if b.norm_std is None else _floats(b.norm_std),
                "n_rollouts": len(b.rollouts),
                "n_demos": len(b.demos),
            }
            for b in bundles
        ],
    }
    if extra_header:
        header.update(extra_header)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for b in bundles:
            for role, trajs in (("rollout", b.rollouts), ("demo", b.demos)):
                for i, traj in enumerate(trajs):
                    line = {
                        "task_id": b.task_id,
                        "role": role,
                        "index": i,
                        "states": _floats(traj.states),
                        "actions": _floats(traj.actions),
                        "rewards": _floats(traj.rewards),
                        "rtg": _floats(traj.rtg),
                        "times": traj.times.tolist(),
                    }
                    fh.write(json.dumps(line) + "\n")


def load_dataset(path) -> list[TaskBundle]:
    from . import envs  # deferred: envs imports this module for Trajectory

    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty dataset file")

    def parse(line_no: int, text: str) -> dict:
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: malformed JSON on line {line_no}: {exc}") from None

    header = parse(1, lines[0])
    if header.get("kind") != "trajectory-dataset":
        raise DatasetError(f"{path}: line 1 is not a dataset header")
    version = header.get("version")
    if version != DATASET_FORMAT_VERSION:
        raise DatasetError(
            f"{path}: unsupported dataset version {version!r} (supported: {DATASET_FORMAT_VERSION})"
        )

    by_task: dict[str, dict] = {}
    order: list[str] = []
    for meta in header["tasks"]:
        tid = meta["task_id"]
        by_task[tid] = {"meta": meta, "rollout": [], "demo": []}
        order.append(tid)

    for line_no, text in enumerate(lines[1:], start=2):
        if not text.strip():
            raise DatasetError(f"{path}: blank line {line_no}")
        rec = parse(line_no, text)
        try:
            tid = rec["task_id"]
            role = rec["role"]
            traj = Trajectory(
                states=np.array(rec["states"], dtype=np.float64),
                actions=np.array(rec["actions"], dtype=np.float64),
                rewards=np.array(rec["rewards"], dtype=np.float64),
                rtg=np.array(rec["rtg"], dtype=np.float64),
                times=np.array(rec["times"], dtype=np.int64),
                task_id=tid,
            )
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{path}: bad trajectory on line {line_no}: {exc}") from None
        if tid not in by_task:
            raise DatasetError(f"{path}: line {line_no} references unknown task {tid!r}")
        if role not in ("rollout", "demo"):
            raise DatasetError(f"{path}: line {line_no} has unknown role {role!r}")
        by_task[tid][role].append(traj)

    bundles = []
    for tid in order:
        entry = by_task[tid]
        meta = entry["meta"]
        for role in ("rollout", "demo"):
            want = meta[f"n_{role}s"]
            got = len(entry[role])
            if got != want:
                raise DatasetError(
                    f"{path}: task {tid!r} has {got} {role} lines, header says {want} "
                    f"(file truncated after line {len(lines)}?)"
                )
        bundle = TaskBundle(
            task_id=tid,
            env_spec=envs.EnvSpec.from_dict(meta["env_spec"]),
            rollouts=entry["rollout"],
            demos=entry["demo"],
            norm_mean=None if meta["norm_mean"] is None else np.array(meta["norm_mean"]),
            norm_std=None if meta["norm_std"] is None else np.array(meta["norm_std"]),
            normalized=meta["normalized"],
        )
        if bundle.normalized:
            for traj in bundle.rollouts + bundle.demos:
                _freeze(traj)
        bundles.append(bundle)
    return bundles


def dataset_path(data_dir, family: str, split: str):
    import os

    return os.path.join(data_dir, family, f"{split}.jsonl")
