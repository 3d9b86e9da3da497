"""Few-shot evaluation: autoregressive rollouts with per-step retrieval.

Each episode samples one demo segment, encodes the task's global token once,
then at every env step retrieves adaptive tokens for the current (rtg, state)
query, fuses a sliding window of recent timesteps, and executes the predicted
action. The rtg decrements by the observed reward, which is exact because env
rewards live on a dyadic grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import data as tdata
from . import envs, prompt
from .checkpoint import ModelCheckpoint
from .model import FusedBatch, forward
from .prompt import AdaptiveEncoder
from .rngs import derive_rng

from . import autodiff as ad


@dataclass
class EvalConfig:
    episodes_per_task: int = 50
    target_rtg: float | None = None  # None: best demo return for the task
    max_steps: int | None = None  # None: env horizon
    seed: int = 0
    k: int | None = None  # override checkpoint retrieval width
    m_prime: int | None = None  # override demo segment length
    raw_rtg_distance: bool = False
    expect_mode: str | None = None  # error if the checkpoint mode differs
    record_neighbors: bool = False

    def __post_init__(self):
        if self.episodes_per_task < 1:
            raise ValueError("episodes_per_task must be >= 1")


@dataclass
class EpisodeResult:
    episode_return: float
    length: int
    trace: dict


@dataclass
class TaskEvalResult:
    task_id: str
    mean: float
    std: float
    returns: list[float]
    target_rtg: float
    demo_baseline: float


def default_target_rtg(bundle: tdata.TaskBundle) -> float:
    """Best demonstrated return; stands in for a hand-set target reward."""
    return max(float(d.rtg[0]) for d in bundle.demos)


def demo_return_baseline(bundles: list[tdata.TaskBundle]) -> dict[str, float]:
    """Mean demo return per task: the quality of the data-collection policy."""
    return {
        b.task_id: float(np.mean([d.rewards.sum() for d in b.demos])) for b in bundles
    }


def rollout_episode(
    env_spec: envs.EnvSpec,
    bundle: tdata.TaskBundle,
    ckpt: ModelCheckpoint,
    eval_config: EvalConfig,
    rng: np.random.Generator,
) -> EpisodeResult:
    config = ckpt.config
    if eval_config.expect_mode is not None and config.mode != eval_config.expect_mode:
        raise ValueError(
            f"checkpoint mode {config.mode!r} does not match expected {eval_config.expect_mode!r}"
        )
    if not bundle.demos:
        raise ValueError(f"task {bundle.task_id}: evaluation needs demonstrations")
    flags = config.flags
    params = ckpt.params
    m = config.context_len
    s_dim, a_dim = config.state_dim, config.action_dim
    k = eval_config.k if eval_config.k is not None else config.k
    m_prime = eval_config.m_prime if eval_config.m_prime is not None else config.demo_len
    max_steps = eval_config.max_steps if eval_config.max_steps is not None else env_spec.horizon

    demo_idx = int(rng.integers(len(bundle.demos)))
    demo_seg_len = (m_prime + 1) if flags.static_prompt else m_prime
    demo = tdata.sample_segment(bundle.demos[demo_idx], demo_seg_len, rng, demo_idx)
    scale = prompt.bundle_rtg_scale(bundle, eval_config.raw_rtg_distance)

    global_np = None
    if flags.use_global:
        global_np = prompt.encode_global_token(demo, params.global_encoder).data
    adaptive = None
    if flags.use_adaptive:
        adaptive = AdaptiveEncoder(params["adaptive_encoder.weight"],
                                   params["adaptive_encoder.bias"], k=k)

    prompt_kwargs = {}
    if flags.static_prompt:
        n_real = demo.real_length
        prompt_kwargs = {
            "prompt_rtg": demo.rtg[:n_real, None],
            "prompt_state": demo.states[:n_real],
            "prompt_action": demo.actions[:n_real],
            "prompt_times": demo.times[:n_real],
        }

    target_rtg = (eval_config.target_rtg if eval_config.target_rtg is not None
                  else default_target_rtg(bundle))
    state = envs.reset(env_spec, rng)
    rtg = float(target_rtg)
    fused_r: list[np.ndarray] = []  # per-step fused (rtg, state, action) tokens
    fused_s: list[np.ndarray] = []
    fused_a: list[np.ndarray] = []
    times: list[int] = []
    total = 0.0
    trace: dict = {"rtg": [rtg], "rewards": [], "actions": [], "neighbors": []}

    for t in range(max_steps):
        obs = envs.observation(state)
        s_norm = (obs - bundle.norm_mean) / bundle.norm_std
        if adaptive is not None:
            template, idx = prompt.retrieve_adaptive_step(rtg, s_norm, demo, adaptive, scale)
            tpl = template.data
            tpl_r, tpl_s, tpl_a = tpl[:1], tpl[1:1 + s_dim], tpl[1 + s_dim:]
        else:
            tpl_r = np.zeros(1)
            tpl_s = np.zeros(s_dim)
            tpl_a = np.zeros(a_dim)
            idx = np.zeros(0, dtype=np.int64)
        fused_r.append(np.array([rtg]) + tpl_r)
        fused_s.append(s_norm + tpl_s)
        fused_a.append(tpl_a.copy())  # action unknown yet; position is causally invisible
        times.append(t)

        w = min(t + 1, m)
        batch = FusedBatch(
            rtg=ad.constant(np.stack(fused_r[-w:])[None]),
            state=ad.constant(np.stack(fused_s[-w:])[None]),
            action=ad.constant(np.stack(fused_a[-w:])[None]),
            times=np.array(times[-w:])[None],
            loss_mask=np.ones((1, w)),
            target_actions=np.zeros((1, w, a_dim)),
            global_tokens=None if global_np is None else ad.constant(global_np[None]),
            **({k2: ad.constant(v[None]) if k2 != "prompt_times" else v[None]
                for k2, v in prompt_kwargs.items()}),
        )
        pred = forward(batch, params, config).data[0, -1]
        action = np.clip(pred, -env_spec.action_bound, env_spec.action_bound)
        fused_a[-1] = action + tpl_a
        state, reward = envs.step(env_spec, state, action, rng)
        total += reward
        rtg = rtg - reward
        trace["rewards"].append(reward)
        trace["rtg"].append(rtg)
        trace["actions"].append(action.tolist())
        if eval_config.record_neighbors:
            trace["neighbors"].append(idx.tolist())
    return EpisodeResult(episode_return=total, length=max_steps, trace=trace)


def evaluate_task(
    env_spec: envs.EnvSpec,
    bundle: tdata.TaskBundle,
    ckpt: ModelCheckpoint,
    eval_config: EvalConfig,
) -> TaskEvalResult:
    """Mean/std of episode returns with per-episode derived seeds."""
    returns = []
    for e in range(eval_config.episodes_per_task):
        rng = derive_rng(eval_config.seed, "episode", bundle.task_id, e)
        returns.append(rollout_episode(env_spec, bundle, ckpt, eval_config, rng).episode_return)
    arr = np.array(returns)
    return TaskEvalResult(
        task_id=bundle.task_id,
        mean=float(arr.mean()),
        std=float(arr.std()),
        returns=returns,
        target_rtg=(eval_config.target_rtg if eval_config.target_rtg is not None
                    else default_target_rtg(bundle)),
        demo_baseline=demo_return_baseline([bundle])[bundle.task_id],
    )


def write_eval_report(path, results: list[TaskEvalResult], mode: str, episodes: int,
                      header_comments: list[str] | None = None,
                      sweep_label: str | None = None) -> None:
    """Per-task rows plus one aggregate row (unweighted mean over tasks)."""
    with open(path, "a", encoding="utf-8", newline="") as fh:
        new_file = fh.tell() == 0
        for comment in (header_comments or []) if new_file else []:
            fh.write(f"# {comment}\n")
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(["task_id", "mode", "sweep", "mean_return", "std_return",
                             "episodes", "demo_return", "target_rtg"])
        label = sweep_label or ""
        for r in results:
            writer.writerow([r.task_id, mode, label, repr(r.mean), repr(r.std),
                             episodes, repr(r.demo_baseline), repr(r.target_rtg)])
        agg = float(np.mean([r.mean 	for r in results]))
        agg_std = float(np.mean([r.std for r in results]))
        agg_demo = float(np.mean([r.demo_baseline for r in results]))
        writer.writerow(["__aggregate__", mode, label, repr(agg), repr(agg_std),
                         episodes, repr(agg_demo), ""])


# ---------------------------------------------------------------------------
# global-token geometry export
# ---------------------------------------------------------------------------


def pca_2d(tokens: np.ndarray, tol: float = 1e-10, max_iter: int = 100000) -> tuple[np.ndarray, bool]:
    """Project rows to 2-d via power iteration with deflation.

    Returns (points (n, 2), degenerate) where degenerate means the centered
    token matrix had rank < 2 and the second coordinate is zero.
    """
    centered = tokens - tokens.mean(axis=0)
    cov = centered.T @ centered / max(len(tokens), 1)
    scale = float(np.trace(cov))
    components = []
    degenerate = False
    for _ in range(2):
        v = np.ones(cov.shape[0]) / np.sqrt(cov.shape[0])
        lam = 0.0
        for _ in range(max_iter):
            w = cov @ v
            norm = float(np.linalg.norm(w))
            if norm <= tol * max(scale, 1.0):
                degenerate = True
                break
            w /= norm
            if np.linalg.norm(w - v) < tol or np.linalg.norm(w + v) < tol:
                v = w
                lam = norm
                break
            v = w
        else:
            lam = float(np.linalg.norm(cov @ v))
        if degenerate:
            components.append(np.zeros(cov.shape[0]))
            continue
        # deterministic sign: largest-magnitude entry positive
        pivot = int(np.argmax(np.abs(v)))
        if v[pivot] < 0:
            v = -v
        components.append(v)
        cov = cov - lam * np.outer(v, v)
    basis = np.stack(components, axis=1)
    return centered @ basis, degenerate


def export_global_token_projection(bundles: list[tdata.TaskBundle], ckpt: ModelCheckpoint,
                                   out_path, header_comments: list[str] | None = None):
    """Encode one global token per demo trajectory, PCA to 2-d, write CSV rows."""
    if not ckpt.config.flags.use_global:
        raise ValueError(f"checkpoint mode {ckpt.config.mode!r} has no global token")
    if len(bundles) < 2 or any(len(b.demos) < 2 for b in bundles):
        raise ValueError("projection needs >= 2 tasks with >= 2 demo segments each")
    labels: list[tuple[str, int]] = []
    tokens = []
    encoder = ckpt.params.global_encoder
    for b in bundles:
        for i, demo in enumerate(b.demos):
            seg = tdata.extract_segment(demo, 0, demo.length, demo.length, i)
            tokens.append(prompt.encode_global_token(seg, encoder).data)
            labels.append((b.task_id, i))
    points, degenerate = pca_2d(np.stack(tokens))
    with open(out_path, "w", encoding="utf-8", newline="") as fh:
        for comment in header_comments or []:
            fh.write(f"# {comment}\n")
        if degenerate:
            fh.write("# warning: token matrix rank < 2; second coordinate is zero\n")
        writer = csv.writer(fh)
        writer.writerow(["task_id", "segment_index", "x", "y"])
        for (task_id, i), (x, y) in zip(labels, points):
            writer.writerow([task_id, i, repr(float(x)), repr(float(y))])
    return labels, points
