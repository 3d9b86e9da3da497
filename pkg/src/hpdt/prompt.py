"""Hierarchical prompt construction: global token, retrieved adaptive tokens, Time2Vec.

The global token mean-aggregates encoded transition tuples from a demo segment,
so it is invariant to tuple order. Adaptive tokens are built per rollout
timestep by retrieving the k nearest (rtg, state) demo tuples in Euclidean
distance and averaging their encoded (rtg, state, action) tuples. Fusion adds
template tokens to rollout tokens modality by modality in raw token space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import Segment, TaskBundle

RTG_SCALE_FLOOR = 1e-6


@dataclass
class GlobalTokenEncoder:
    """Linear map over concatenated (rtg, s, a, s', rtg') transition tuples."""

    weight: Parameter  # (2 + 2*state_dim + action_dim, d_g)
    bias: Parameter  # (d_g,)


@dataclass
class AdaptiveEncoder:
    """Dimension-preserving linear map over (rtg, s, a) tuples; k neighbors."""

    weight: Parameter  # (1 + state_dim + action_dim,) square
    bias: Parameter
    k: int


@dataclass
class Time2VecParams:
    """One linear channel plus h-1 sinusoidal channels over t / t_max."""

    omega: Parameter  # (h,)
    phi: Parameter  # (h,)
    t_max: int


@dataclass
class PromptBundle:
    """Hierarchical prompt for one rollout segment."""

    global_token: Tensor | None  # (d_g,) or None in modes without it
    template_rtg: Tensor | None  # (m, 1)
    template_state: Tensor | None  # (m, state_dim)
    template_action: Tensor | None  # (m, action_dim)
    neighbor_indices: np.ndarray | None  # (m, k) ints, -1 at padded rows


def transition_tuples(seg: Segment) -> np.ndarray:
    """Stack [rtg_t, s_t, a_t, s_{t+1}, rtg_{t+1}] for consecutive real steps."""
    n = seg.real_length
    if n < 2:
        raise ValueError(f"demo segment needs >= 2 timesteps for transition tuples, got {n}")
    r = seg.rtg[:n, None]
    s = seg.states[:n]
    a = seg.actions[:n]
    return np.concatenate([r[:-1], s[:-1], a[:-1], s[1:], r[1:]], axis=1)


def encode_global_token(demo_seg: Segment, encoder: GlobalTokenEncoder) -> Tensor:
    """Mean over encoded transition tuples (GELU after the linear map)."""
    tuples = ad.constant(transition_tuples(demo_seg))
    return ad.mean_axis(ad.gelu(ad.linear(tuples, encoder.weight, encoder.bias)), axis=0)


def encode_global_tokens(demo_segs: list[Segment], encoder: GlobalTokenEncoder) -> Tensor:
    """Batched variant for segments of equal real length -> (batch, d_g)."""
    lengths = {s.real_length for s in demo_segs}
    if len(lengths) != 1:
        raise ValueError("batched global-token encoding needs equal segment lengths")
    tuples = ad.constant(np.stack([transition_tuples(s) for s in demo_segs]))
    return ad.mean_axis(ad.gelu(ad.linear(tuples, encoder.weight, encoder.bias)), axis=1)


def retrieval_rtg_scale(demos: list) -> float:
    """Std of all demo rtg values for one task, floored; scales retrieval queries."""
    rtg = np.concatenate([d.rtg for d in demos])
    return max(float(rtg.std()), RTG_SCALE_FLOOR)


def bundle_rtg_scale(bundle: TaskBundle, raw_rtg_distance: bool = False) -> float:
    return 1.0 if raw_rtg_distance else retrieval_rtg_scale(bundle.demos)


def _query_matrix(rtg: np.ndarray, states: np.ndarray, rtg_scale: float) -> np.ndarray:
    return np.concatenate([rtg[:, None] / rtg_scale, states], axis=1)


def retrieval_distances(queries: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Pairwise L2 distances, (n_query, n_key).

    Computed as sqrt(sum((q - x)^2)) with broadcasting. The expanded form
    a^2 - 2ab + b^2 is deliberately avoided: the per-step and batched paths
    must produce bit-identical distances.
    """
    diff = queries[:, None, :] - keys[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def top_k_indices(distances: np.ndarray, k: int) -> np.ndarray:
    """k smallest per row; ties broken by lower index (stable sort)."""
    return np.argsort(distances, axis=-1, kind="stable")[..., :k]


def retrieve_neighbors(query_rtg: np.ndarray, query_states: np.ndarray, demo_seg: Segment,
                       k: int, rtg_scale: float) -> np.ndarray:
    """Batched neighbor lookup for a whole rollout segment -> (n_query, k)."""
    n = demo_seg.real_length
    if k < 1 or k > n:
        raise ValueError(f"k={k} must be in [1, demo segment length {n}]")
    queries = _query_matrix(np.asarray(query_rtg, dtype=np.float64),
                            np.asarray(query_states, dtype=np.float64), rtg_scale)
    keys = _query_matrix(demo_seg.rtg[:n], demo_seg.states[:n], rtg_scale)
    return top_k_indices(retrieval_distances(queries, keys), k)


def encode_adaptive_tokens(neighbor_tuples: np.ndarray, encoder: AdaptiveEncoder) -> Tensor:
    """(..., k, dim) neighbor tuples -> mean of encoded tuples along the k axis."""
    x = ad.constant(neighbor_tuples)
    return ad.mean_axis(ad.linear(x, encoder.weight, encoder.bias), axis=x.ndim - 2)


def _demo_tuples(demo_seg: Segment) -> np.ndarray:
    n = demo_seg.real_length
    return np.concatenate([demo_seg.rtg[:n, None], demo_seg.states[:n], demo_seg.actions[:n]], axis=1)


def retrieve_adaptive_step(query_rtg: float, query_state: np.ndarray, demo_seg: Segment,
                           encoder: AdaptiveEncoder, rtg_scale: float) -> tuple[Tensor, np.ndarray]:
    """Per-step retrieval path used at inference; returns (template tuple, indices)."""
    idx = retrieve_neighbors(np.array([query_rtg]), np.asarray(query_state)[None, :],
                             demo_seg, encoder.k, rtg_scale)[0]
    tuples = _demo_tuples(demo_seg)[idx]
    return encode_adaptive_tokens(tuples, encoder), idx


def build_template(rollout_seg: Segment, demo_seg: Segment, encoder: AdaptiveEncoder,
                   rtg_scale: float, state_dim: int, action_dim: int) -> tuple[Tensor, np.ndarray]:
    """Template tuples for every real rollout timestep, batched distances.

    Padded rollout positions get zero template tokens and -1 neighbor indices.
    Returns ((m, 1+state_dim+action_dim) tensor, (m, k) indices).
    """
    m = rollout_seg.rtg.shape[0]
    n_real = rollout_seg.real_length
    idx = retrieve_neighbors(rollout_seg.rtg[:n_real], rollout_seg.states[:n_real],
                             demo_seg, encoder.k, rtg_scale)
    neighbor_tuples = _demo_tuples(demo_seg)[idx]  # (n_real, k, dim)
    encoded = encode_adaptive_tokens(neighbor_tuples, encoder)
    if n_real < m:
        dim = 1 + state_dim + action_dim
        encoded = ad.concat([encoded, ad.constant(np.zeros((m - n_real, dim)))], axis=0)
        pad_idx = np.full((m - n_real, encoder.k), -1, dtype=idx.dtype)
        idx = np.concatenate([idx, pad_idx], axis=0)
    return encoded, idx


def split_template(template: Tensor, state_dim: int, action_dim: int) -> tuple[Tensor, Tensor, Tensor]:
    """Split (..., 1+state_dim+action_dim) back at modality boundaries."""
    axis = template.ndim - 1
    rtg = ad.narrow(template, axis, 0, 1)
    state = ad.narrow(template, axis, 1, state_dim)
    action = ad.narrow(template, axis, 1 + state_dim, action_dim)
    return rtg, state, action


def time2vec(times: np.ndarray, params: Time2VecParams) -> Tensor:
    """Embed integer timesteps: channel 0 linear, channels 1..h-1 sinusoidal."""
    times = np.asarray(times)
    if times.min() < 0 or times.max() > params.t_max:
        raise ValueError(f"times outside [0, {params.t_max}]")
    flat = times.reshape(-1).astype(np.float64) / params.t_max
    h = params.omega.shape[0]
    z = ad.linear(ad.constant(flat[:, None]), ad.reshape(params.omega, (1, h)), params.phi)
    lin = ad.narrow(z, 1, 0, 1)
    per = ad.sin(ad.narrow(z, 1, 1, h - 1))
    out = ad.concat([lin, per], axis=1)
    return ad.reshape(out, times.shape + (h,))


def fuse(rollout_seg: Segment, prompt: PromptBundle) -> tuple[Tensor, Tensor, Tensor]:
    """Sum template tokens onto rollout tokens per modality, in raw token space.

    Returns (rtg (m,1), state (m,S), action (m,A)) tensors; the global token
    stays separate and is prepended at embedding time.
    """
    m = rollout_seg.rtg.shape[0]
    rtg = ad.constant(rollout_seg.rtg[:, None])
    state = ad.constant(rollout_seg.states)
    action = ad.constant(rollout_seg.actions)
    if prompt.template_rtg is not None:
        if prompt.template_rtg.shape[0] != m:
            raise ValueError(
                f"template length {prompt.template_rtg.shape[0]} != rollout segment length {m}"
            )
        rtg = ad.add(rtg, prompt.template_rtg)
        state = ad.add(state, prompt.template_state)
        action = ad.add(action, prompt.template_action)
    return rtg, state, action
