"""Causal transformer policy over fused (rtg, state, action) token sequences.

The rollout segment is interleaved as one (rtg, state, action) triplet per
timestep after per-modality projection; timestep embeddings are added to all
three tokens. Prefixes depend on the mode: the full model prepends one
projected global token (no time embedding), the static-prompt baseline
prepends a projected demo segment with its own time embeddings. Actions are
predicted from the hidden vector at each state-token position, so the label
token can never leak into its own prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .prompt import Time2VecParams, AdaptiveEncoder, GlobalTokenEncoder, time2vec
from .rngs import derive_rng

ATTENTION_MASK_VALUE = -1e9
INIT_STD = 0.02

_CANONICAL_MODES = ("full", "wo_g", "wo_a", "wo_t", "pdt_baseline")


@dataclass(frozen=True)
class ModeFlags:
    use_global: bool
    use_adaptive: bool
    sinusoidal_time: bool  # False -> lookup-table time embedding
    static_prompt: bool


def parse_mode(mode: str) -> ModeFlags:
    """Accepts the canonical modes plus '+'-joined wo_* combinations."""
    mode = mode.strip().lower().replace("-", "_")
    if mode == "full":
        return ModeFlags(True, True, True, False)
    if mode == "pdt_baseline":
        return ModeFlags(False, False, True, True)
    parts = mode.split("+")
    if parts and all(p in ("wo_g", "wo_a", "wo_t") for p in parts) and len(set(parts)) == len(parts):
        return ModeFlags(
            use_global="wo_g" not in parts,
            use_adaptive="wo_a" not in parts,
            sinusoidal_time="wo_t" not in parts,
            static_prompt=False,
        )
    raise ValueError(
        f"unknown mode {mode!r}; expected one of {_CANONICAL_MODES} or a 'wo_*+wo_*' combination"
    )


@dataclass
class ModelConfig:
    state_dim: int
    action_dim: int
    embed_dim: int = 128
    n_layers: int = 3
    n_heads: int = 1
    context_len: int = 20  # rollout segment length fed to the model
    dropout: float = 0.1
    mode: str = "full"
    d_g: int | None = None  # global token width; defaults to 1 + state_dim + action_dim
    demo_len: int = 10  # demo segment length for prompt construction
    k: int = 3  # retrieval neighbor count
    max_timestep: int = 64  # horizon bound for time embeddings

    def __post_init__(self):
        if self.d_g is None:
            self.d_g = 1 + self.state_dim + self.action_dim
        parse_mode(self.mode)  # validates
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        for name in ("state_dim", "action_dim", "embed_dim", "n_layers", "n_heads",
                     "context_len", "demo_len", "k", "max_timestep"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def flags(self) -> ModeFlags:
        return parse_mode(self.mode)

    @property
    def prompt_len(self) -> int:
        """Timesteps in the static-prompt prefix (baseline mode only)."""
        return self.demo_len + 1

    def prefix_tokens(self) -> int:
        flags = self.flags
        if flags.static_prompt:
            return 3 * self.prompt_len
        return 1 if flags.use_global else 0

    def sequence_length(self, m: int | None = None) -> int:
        return self.prefix_tokens() + 3 * (self.context_len if m is None else m)

    def to_dict(self) -> dict:
        return {
            "state_dim": self.state_dim,
            "action_dim": self.action_dim,
            "embed_dim": self.embed_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "dropout": self.dropout,
            "mode": self.mode,
            "d_g": self.d_g,
            "demo_len": self.demo_len,
            "k": self.k,
            "max_timestep": self.max_timestep,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ModelParams:
    """All learnable parameters, name-keyed, in a stable manifest order."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self._params = params

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def all(self) -> list[Parameter]:
        return list(self._params.values())

    def names(self) -> list[str]:
        return list(self._params.keys())

    def n_scalars(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def group_counts(self) -> dict[str, int]:
        """Scalar counts keyed by top-level parameter group."""
        counts: dict[str, int] = {}
        for name, p in self._params.items():
            group = name.split(".")[0]
            counts[group] = counts.get(group, 0) + p.data.size
        return counts

    @property
    def global_encoder(self) -> GlobalTokenEncoder:
        return GlobalTokenEncoder(self["global_encoder.weight"], self["global_encoder.bias"])

    @property
    def adaptive_encoder(self) -> AdaptiveEncoder:
        return AdaptiveEncoder(self["adaptive_encoder.weight"], self["adaptive_encoder.bias"],
                               k=self.config.k)

    @property
    def time2vec_params(self) -> Time2VecParams:
        return Time2VecParams(self["time.omega"], self["time.phi"], t_max=self.config.max_timestep)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Name-keyed init: each parameter's values derive from (seed, 'init', name),
    so parameter groups shared between modes initialize identically."""

    params: dict[str, Parameter] = {}

    def add(name: str, shape: tuple[int, ...], kind: str) -> None:
        if kind == "weight":
            value = derive_rng(seed, "init", name).normal(0.0, INIT_STD, size=shape)
        elif kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        elif kind == "normal":
            value = derive_rng(seed, "init", name).normal(0.0, 1.0, size=shape)
        else:
            raise ValueError(kind)
        params[name] = Parameter(name, value)

    s, a, h = config.state_dim, config.action_dim, config.embed_dim
    flags = config.flags
    if flags.use_global:
        tuple_dim = 2 + 2 * s + a
        add("global_encoder.weight", (tuple_dim, config.d_g), "weight")
        add("global_encoder.bias", (config.d_g,), "zeros")
    if flags.use_adaptive:
        adim = 1 + s + a
        add("adaptive_encoder.weight", (adim, adim), "weight")
        add("adaptive_encoder.bias", (adim,), "zeros")
    if flags.sinusoidal_time:
        add("time.omega", (h,), "normal")
        add("time.phi", (h,), "normal")
    else:
        add("time.table", (config.max_timestep + 1, h), "weight")
    if flags.use_global:
        add("proj_global.weight", (config.d_g, h), "weight")
        add("proj_global.bias", (h,), "zeros")
    add("proj_rtg.weight", (1, h), "weight")
    add("proj_rtg.bias", (h,), "zeros")
    add("proj_state.weight", (s, h), "weight")
    add("proj_state.bias", (h,), "zeros")
    add("proj_action.weight", (a, h), "weight")
    add("proj_action.bias", (h,), "zeros")
    for i in range(config.n_layers):
        pfx = f"blocks.{i}"
        add(f"{pfx}.ln1.gain", (h,), "ones")
        add(f"{pfx}.ln1.bias", (h,), "zeros")
        for w in ("wq", "wk", "wv", "wo"):
            add(f"{pfx}.attn.{w}", (h, h), "weight")
            add(f"{pfx}.attn.{w[-1] if w != 'wo' else 'o'}_bias", (h,), "zeros")
        add(f"{pfx}.ln2.gain", (h,), "ones")
        add(f"{pfx}.ln2.bias", (h,), "zeros")
        add(f"{pfx}.mlp.w1", (h, 4 * h), "weight")
        add(f"{pfx}.mlp.b1", (4 * h,), "zeros")
        add(f"{pfx}.mlp.w2", (4 * h, h), "weight")
        add(f"{pfx}.mlp.b2", (h,), "zeros")
    add("final_norm.gain", (h,), "ones")
    add("final_norm.bias", (h,), "zeros")
    add("head.weight", (h, a), "weight")
    add("head.bias", (a,), "zeros")
    return ModelParams(config, params)


@dataclass
class FusedBatch:
    """Assembled model input for a batch of fused rollout segments."""

    rtg: Tensor  # (B, m, 1) fused rtg tokens
    state: Tensor  # (B, m, state_dim)
    action: Tensor  # (B, m, action_dim)
    times: np.ndarray  # (B, m) ints
    loss_mask: np.ndarray  # (B, m) 1.0 at supervised positions
    target_actions: np.ndarray  # (B, m, action_dim)
    global_tokens: Tensor | None = None  # (B, d_g)
    neighbor_indices: np.ndarray | None = None  # (B, m, k)
    prompt_rtg: Tensor | None = None  # (B, p, 1) static-prompt modes only
    prompt_state: Tensor | None = None
    prompt_action: Tensor | None = None
    prompt_times: np.ndarray | None = None  # (B, p)

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]

    @property
    def m(self) -> int:
        return self.rtg.shape[1]

    def check(self, config: ModelConfig) -> None:
        b, m = self.batch_size, self.m
        flags = config.flags
        if self.state.shape != (b, m, config.state_dim) or self.action.shape != (b, m, config.action_dim):
            raise ValueError("fused batch modality shapes are inconsistent")
        if self.times.shape != (b, m) or self.loss_mask.shape != (b, m):
            raise ValueError("times/loss_mask shape mismatch")
        if flags.use_global != (self.global_tokens is not None):
            raise ValueError(f"mode {config.mode!r} and global-token presence disagree")
        if flags.static_prompt != (self.prompt_rtg is not None):
            raise ValueError(f"mode {config.mode!r} and static-prompt presence disagree")
        if flags.use_global and self.global_tokens.shape != (b, config.d_g):
            raise ValueError("global token shape mismatch")


def _dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ad.mul(x, ad.constant(keep))


def _interleave(r_tok: Tensor, s_tok: Tensor, a_tok: Tensor) -> Tensor:
    """Three (B, m, h) streams -> (B, 3m, h), ordered (rtg, state, action) per step."""
    b, m, h = r_tok.shape
    stacked = ad.concat([
        ad.reshape(r_tok, (b, m, 1, h)),
        ad.reshape(s_tok, (b, m, 1, h)),
        ad.reshape(a_tok, (b, m, 1, h)),
    ], axis=2)
    return ad.reshape(stacked, (b, 3 * m, h))


def _time_embedding(times: np.ndarray, params: ModelParams, config: ModelConfig) -> Tensor:
    if config.flags.sinusoidal_time:
        return time2vec(times, params.time2vec_params)
    table = params["time.table"]
    if times.min() < 0 or times.max() > config.max_timestep:
        raise ValueError(f"times outside [0, {config.max_timestep}]")
    flat = ad.index_select(table, 0, times.reshape(-1))
    return ad.reshape(flat, times.shape + (config.embed_dim,))


def _project_triplet(batch_rtg, batch_state, batch_action, times, params, config) -> Tensor:
    r_tok = ad.linear(batch_rtg, params["proj_rtg.weight"], params["proj_rtg.bias"])
    s_tok = ad.linear(batch_state, params["proj_state.weight"], params["proj_state.bias"])
    a_tok = ad.linear(batch_action, params["proj_action.weight"], params["proj_action.bias"])
    t_emb = _time_embedding(times, params, config)
    return _interleave(ad.add(r_tok, t_emb), ad.add(s_tok, t_emb), ad.add(a_tok, t_emb))


def embed_sequence(batch: FusedBatch, params: ModelParams, config: ModelConfig,
                   dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Project, add time embeddings, interleave, and prepend the prefix."""
    batch.check(config)
    tokens = _project_triplet(batch.rtg, batch.state, batch.action, batch.times, params, config)
    flags = config.flags
    if flags.use_global:
        g = ad.linear(batch.global_tokens, params["proj_global.weight"], params["proj_global.bias"])
        g = ad.reshape(g, (batch.batch_size, 1, config.embed_dim))
        tokens = ad.concat([g, tokens], axis=1)
    elif flags.static_prompt:
        prompt = _project_triplet(batch.prompt_rtg, batch.prompt_state, batch.prompt_action,
                                  batch.prompt_times, params, config)
        tokens = ad.concat([prompt, tokens], axis=1)
    # dropout lives in the blocks (attention probs and residual branches), not
    # on the input embedding: zeroing whole prompt tokens would train the
    # model to ignore them
    return tokens


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    mask = _MASK_CACHE.get(n)
    if mask is None:
        mask = np.triu(np.full((n, n), ATTENTION_MASK_VALUE), k=1)
        mask.flags.writeable = False
        _MASK_CACHE[n] = mask
    return mask


def _attention(x: Tensor, params: ModelParams, config: ModelConfig, layer: int,
               dropout_rng) -> Tensor:
    b, n, h = x.shape
    heads = config.n_heads
    dh = h // heads
    pfx = f"blocks.{layer}.attn"

    def split_heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

    q = split_heads(ad.linear(x, params[f"{pfx}.wq"], params[f"{pfx}.q_bias"]))
    k = split_heads(ad.linear(x, params[f"{pfx}.wk"], params[f"{pfx}.k_bias"]))
    v = split_heads(ad.linear(x, params[f"{pfx}.wv"], params[f"{pfx}.v_bias"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    scores = ad.add(scores, ad.constant(_causal_mask(n)))
    att = _dropout(ad.softmax_rows(scores), config.dropout, dropout_rng)
    y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, n, h))
    y = ad.linear(y, params[f"{pfx}.wo"], params[f"{pfx}.o_bias"])
    return _dropout(y, config.dropout, dropout_rng)


def forward(batch: FusedBatch, params: ModelParams, config: ModelConfig,
            dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Predicted actions (B, m, action_dim), read at state-token positions."""
    if batch.m > config.context_len:
        raise ValueError(f"segment length {batch.m} exceeds context_len {config.context_len}")
    x = embed_sequence(batch, params, config, dropout_rng)
    n = x.shape[1]
    max_len = config.sequence_length()
    if n > max_len:
        raise ValueError(f"sequence length {n} exceeds configured maximum {max_len}")
    for layer in range(config.n_layers):
        attn_out = _attention(
            ad.layer_norm(x, params[f"blocks.{layer}.ln1.gain"], params[f"blocks.{layer}.ln1.bias"]),
            params, config, layer, dropout_rng)
        x = ad.add(x, attn_out)
        z = ad.layer_norm(x, params[f"blocks.{layer}.ln2.gain"], params[f"blocks.{layer}.ln2.bias"])
        z = ad.linear(z, params[f"blocks.{layer}.mlp.w1"], params[f"blocks.{layer}.mlp.b1"])
        z = ad.linear(ad.gelu(z), params[f"blocks.{layer}.mlp.w2"], params[f"blocks.{layer}.mlp.b2"])
        x = ad.add(x, _dropout(z, config.dropout, dropout_rng))
    x = ad.layer_norm(x, params["final_norm.gain"], params["final_norm.bias"])
    prefix = n - 3 * batch.m
    state_positions = prefix + 3 * np.arange(batch.m) + 1
    hidden = ad.index_select(x, 1, state_positions)
    return ad.linear(hidden, params["head.weight"], params["head.bias"])


def action_loss(batch: FusedBatch, params: ModelParams, config: ModelConfig,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Masked MSE over predicted vs target actions at unmasked rollout positions."""
    pred = forward(batch, params, config, dropout_rng)
    mask = np.repeat(batch.loss_mask[:, :, None], config.action_dim, axis=2)
    return ad.mse_loss(pred, ad.constant(batch.target_actions), ad.constant(mask))
