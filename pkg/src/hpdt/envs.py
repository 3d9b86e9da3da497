"""Synthetic point-mass meta-environment families, scripted experts, and data collection.

Four families span the usual task-variation axes: reward direction (pointdir),
target speed (pointvel), transition dynamics (pointdyn), and goal position
(pointgoal). Observations are [position, velocity] (4-d), actions are 2-d
accelerations. Rewards are snapped to a 2^-32 grid so return bookkeeping
identities (suffix sums, rtg decrements) are exact in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import TaskBundle, Trajectory, normalize_bundle
from .rngs import derive_rng

FAMILIES = ("pointdir", "pointvel", "pointdyn", "pointgoal")

DT = 0.1
DEFAULT_DRAG = 0.1
ACTION_COST = 0.01
RESET_POS_STD = 0.1
STATE_DIM = 4
ACTION_DIM = 2

_REWARD_GRID_BITS = 32


def snap_reward(r: float) -> float:
    """Round to the nearest multiple of 2^-32 so reward sums are exact."""
    return math.ldexp(round(math.ldexp(r, _REWARD_GRID_BITS)), -_REWARD_GRID_BITS)


@dataclass(frozen=True)
class EnvSpec:
    family: str
    task_params: dict
    horizon: int = 64
    action_bound: float = 1.0
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.horizon < 1 or self.action_bound <= 0:
            raise ValueError("horizon and action_bound must be positive")
        if self.family == "pointvel":
            v = self.task_params["target_speed"]
            if not 0.0 <= v <= 3.0:
                raise ValueError(f"pointvel target_speed {v} outside [0, 3]")

    @property
    def mass(self) -> float:
        return float(self.task_params["mass"]) if self.family == "pointdyn" else 1.0

    @property
    def drag(self) -> float:
        return float(self.task_params["drag"]) if self.family == "pointdyn" else DEFAULT_DRAG

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "task_params": {k: float(v) for k, v in self.task_params.items()},
            "horizon": self.horizon,
            "action_bound": self.action_bound,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            family=d["family"],
            task_params=dict(d["task_params"]),
            horizon=int(d["horizon"]),
            action_bound=float(d["action_bound"]),
            noise_std=float(d["noise_std"]),
            seed=int(d["seed"]),
        )


@dataclass
class EnvState:
    position: np.ndarray  # (2,)
    velocity: np.ndarray  # (2,)
    step_count: int = 0


def observation(state: EnvState) -> np.ndarray:
    return np.concatenate([state.position, state.velocity])


def reset(spec: EnvSpec, rng: np.random.Generator) -> EnvState:
    position = rng.normal(0.0, RESET_POS_STD, size=2)
    return EnvState(position=position, velocity=np.zeros(2), step_count=0)


def step(spec: EnvSpec, state: EnvState, action: np.ndarray,
         rng: np.random.Generator | None = None) -> tuple[EnvState, float]:
    """Advance one step; returns (next_state, reward). Action is clipped to bounds."""
    if state.step_count >= spec.horizon:
        raise RuntimeError(f"episode finished at step {state.step_count}; reset before stepping")
    a = np.clip(np.asarray(action, dtype=np.float64), -spec.action_bound, spec.action_bound)
    noise = np.zeros(2)
    if spec.noise_std > 0.0:
        if rng is None:
            raise ValueError("rng required when noise_std > 0")
        noise = rng.normal(0.0, spec.noise_std, size=2)
    v_next = (1.0 - spec.drag) * state.velocity + a / spec.mass * DT + noise
    p_next = state.position + v_next * DT
    cost = ACTION_COST * float(a @ a)

    params = spec.task_params
    if spec.family == "pointdir":
        theta = params["theta"]
        r = float(v_next @ np.array([math.cos(theta), math.sin(theta)])) - cost
    elif spec.family == "pointvel":
        r = -abs(float(np.linalg.norm(v_next)) - params["target_speed"]) - cost
    elif spec.family == "pointdyn":
        r = float(v_next[0]) - cost
    else:  # pointgoal
        goal = np.array([params["goal_x"], params["goal_y"]])
        r = -float(np.linalg.norm(p_next - goal)) - cost

    next_state = EnvState(position=p_next, velocity=v_next, step_count=state.step_count + 1)
    return next_state, snap_reward(r)


def scripted_expert(spec: EnvSpec, state: EnvState, skill: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Proportional controller toward the task objective, blended with noise.

    skill in (0, 1]: the controller output is scaled by skill and exploration
    noise (1-skill)*N(0, 0.3^2) is added before clipping.
    """
    if not 0.0 < skill <= 1.0:
        raise ValueError(f"skill must be in (0, 1], got {skill}")
    params = spec.task_params
    v = state.velocity
    if spec.family == "pointdir":
        theta = params["theta"]
        base = np.array([math.cos(theta), math.sin(theta)])
    elif spec.family == "pointvel":
        target = params["target_speed"]
        speed = float(np.linalg.norm(v))
        direction = v / speed if speed > 1e-8 else np.array([1.0, 0.0])
        base = direction * (target + 1.0 * (target - speed))
    elif spec.family == "pointdyn":
        base = np.array([1.0, 0.0])
    else:  # pointgoal
        goal = np.array([params["goal_x"], params["goal_y"]])
        base = 2.0 * (goal - state.position) - 2.0 * v
    action = skill * base + (1.0 - skill) * rng.normal(0.0, 0.3, size=2)
    return np.clip(action, -spec.action_bound, spec.action_bound)


def run_episode(spec: EnvSpec, skill: float, rng: np.random.Generator,
                task_id: str) -> Trajectory:
    """Roll the scripted expert for one full episode and package it."""
    state = reset(spec, rng)
    states, actions, rewards = [], [], []
    for _ in range(spec.horizon):
        obs = observation(state)
        action = scripted_expert(spec, state, skill, rng)
        state, reward = step(spec, state, action, rng)
        states.append(obs)
        actions.append(action)
        rewards.append(reward)
    return Trajectory.from_rewards(np.array(states), np.array(actions), np.array(rewards), task_id)


# ---------------------------------------------------------------------------
# task grids and dataset collection
# ---------------------------------------------------------------------------

# pointvel target speeds stay below the top speed reachable under the default
# action bound (v_ss = bound * DT / drag = 1.0), so the expert can track them.
_VEL_LO, _VEL_HI = 0.2, 0.9
_DYN_MASS_LO, _DYN_MASS_HI = 0.6, 1.8
_DYN_DRAG_LO, _DYN_DRAG_HI = 0.06, 0.18
_GOAL_RADIUS = 1.0


def task_grid(family: str, n_train: int, n_test: int) -> tuple[list[dict], list[dict]]:
    """Deterministic train/test task parameters.

    Train values lie on an even grid over the family's parameter range; test
    values sit half a grid step above spread-out train values, so they are
    held out between training values and can never coincide with the grid.
    """
    test_slots = [(j * n_train) // n_test for j in range(n_test)]

    if family == "pointdir":
        def make(fr: float) -> dict:
            return {"theta": 2.0 * math.pi * fr}
    elif family == "pointgoal":
        def make(fr: float) -> dict:
            angle = 2.0 * math.pi * fr
            return {"goal_x": _GOAL_RADIUS * math.cos(angle),
                    "goal_y": _GOAL_RADIUS * math.sin(angle)}
    elif family == "pointvel":
        def make(fr: float) -> dict:
            return {"target_speed": _VEL_LO + fr * (_VEL_HI - _VEL_LO)}
    elif family == "pointdyn":
        def make(fr: float) -> dict:
            return {
                "mass": _DYN_MASS_LO + fr * (_DYN_MASS_HI - _DYN_MASS_LO),
                "drag": _DYN_DRAG_LO + fr * (_DYN_DRAG_HI - _DYN_DRAG_LO),
            }
    else:
        raise ValueError(f"unknown family {family!r}")

    train = [make(i / n_train) for i in range(n_train)]
    test = [make((slot + 0.5) / n_train) for slot in test_slots]

    train_keys = {tuple(sorted(p.items())) for p in train}
    test_keys = {tuple(sorted(p.items())) for p in test}
    overlap = train_keys & test_keys
    if overlap:
        raise ValueError(f"train/test task parameters overlap: {sorted(overlap)}")
    return train, test


DEFAULT_SKILL_MIX = (0.4, 0.7, 1.0)


@dataclass(frozen=True)
class DatasetConfig:
    family: str = "pointdir"
    n_train_tasks: int = 8
    n_test_tasks: int = 2
    episodes_per_task: int = 12
    demos_per_task: int = 5
    skill_mix: tuple[float, ...] = DEFAULT_SKILL_MIX
    horizon: int = 64
    action_bound: float = 1.0
    noise_std: float = 0.01
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "n_train_tasks": self.n_train_tasks,
            "n_test_tasks": self.n_test_tasks,
            "episodes_per_task": self.episodes_per_task,
            "demos_per_task": self.demos_per_task,
            "skill_mix": list(self.skill_mix),
            "horizon": self.horizon,
            "action_bound": self.action_bound,
            "noise_std": self.noise_std,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "skill_mix" in d:
            d["skill_mix"] = tuple(d["skill_mix"])
        return cls(**d)


def collect_meta_dataset(config: DatasetConfig) -> tuple[list[TaskBundle], list[TaskBundle]]:
    """Collect normalized train/test bundles for one family.

    Rollouts cycle through the skill mix; demos come from the best skill tier.
    Test tasks get demos only. All randomness derives from config.seed.
    """
    if min(config.n_train_tasks, config.n_test_tasks, config.episodes_per_task,
           config.demos_per_task) < 1:
        raise ValueError("task and episode counts must be >= 1")
    train_params, test_params = task_grid(config.family, config.n_train_tasks, config.n_test_tasks)
    top_skill = max(config.skill_mix)

    def build(params: dict, split: str, idx: int, with_rollouts: bool) -> TaskBundle:
        task_id = f"{config.family}-{split}-{idx:02d}"
        spec = EnvSpec(
            family=config.family,
            task_params=params,
            horizon=config.horizon,
            action_bound=config.action_bound,
            noise_std=config.noise_std,
            seed=config.seed,
        )
        rollouts = []
        if with_rollouts:
            for e in range(config.episodes_per_task):
                skill = config.skill_mix[e % len(config.skill_mix)]
                rng = derive_rng(config.seed, "collect", split, idx, "rollout", e)
                rollouts.append(run_episode(spec, skill, rng, task_id))
        demos = []
        for e in range(config.demos_per_task):
            rng = derive_rng(config.seed, "collect", split, idx, "demo", e)
            demos.append(run_episode(spec, top_skill, rng, task_id))
        bundle = TaskBundle(task_id=task_id, env_spec=spec, rollouts=rollouts, demos=demos)
        return normalize_bundle(bundle)

    train = [build(p, "train", i, True) for i, p in enumerate(train_params)]
    test = [build(p, "test", j, False) for j, p in enumerate(test_params)]
    return train, test
