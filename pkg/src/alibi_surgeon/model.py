"""Decoder-only ALiBi transformer with a fused, per-head addressable QKV projection.

Layout follows BLOOM: ``qkv.weight`` is ``[d_model, 3*d_model]`` split into
``[Q | K | V]`` thirds, and inside each third head ``h`` owns the contiguous
columns ``[h*d_head, (h+1)*d_head)``. Head ``h`` feeds ``attn_out.weight``
through input rows ``[h*d_head, (h+1)*d_head)``.
"""

from __future__ import annotations

import copy
import functools
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 64
    # output vocabulary (byte values); the embedding has one extra input-only row for BOS
    vocab_size: int = 256
    max_seq_len: int = 128
    mlp_ratio: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq_len", "mlp_ratio"):
            if int(getattr(self, name)) <= 0:
                raise ValueError(f"{name} must be positive")
        if not _is_power_of_two(self.n_heads) or self.n_heads > 32:
            raise ValueError(f"n_heads must be a power of two <= 32, got {self.n_heads}")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def bos_id(self) -> int:
        return self.vocab_size

    @property
    def n_embed(self) -> int:
        return self.vocab_size + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


def _is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def alibi_slopes(n_heads: int) -> np.ndarray:
    """Per-head ALiBi slopes ``2**(-8*(h+1)/H)``; head 0 is the steepest."""
    if not _is_power_of_two(n_heads):
        raise ValueError(f"ALiBi slopes are only defined here for power-of-two head counts, got {n_heads}")
    h = np.arange(n_heads, dtype=np.float64)
    return np.exp2(-8.0 * (h + 1.0) / n_heads)


def alibi_bias(T: int, slope: float) -> np.ndarray:
    """``[T, T]`` additive bias: ``-slope*(i-j)`` on and below the diagonal, ``-inf`` above."""
    i = np.arange(T)[:, None]
    j = np.arange(T)[None, :]
    dist = (i - j).astype(np.float64)
    out = -slope * dist
    out[j > i] = -np.inf
    return out


@functools.lru_cache(maxsize=32)
def _alibi_stack(n_heads: int, T: int, dtype: str) -> np.ndarray:
    stack = np.stack([alibi_bias(T, s) for s in alibi_slopes(n_heads)])
    stack = stack.astype(dtype)
    stack.setflags(write=False)
    return stack


LAYER_PARAMS = (
    "ln1.gain", "ln1.shift",
    "qkv.weight", "qkv.bias",
    "attn_out.weight", "attn_out.bias",
    "ln2.gain", "ln2.shift",
    "mlp_up.weight", "mlp_up.bias",
    "mlp_down.weight", "mlp_down.bias",
)


@dataclass
class ModelWeights:
    """Named parameters in a fixed, serialization-stable order."""

    config: ModelConfig
    params: dict[str, Parameter]
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def layer(self, l: int, name: str) -> Parameter:
        return self.params[f"layers.{l}.{name}"]

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        return iter(self.params.items())

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def copy(self) -> "ModelWeights":
        params = {}
        for name, p in self.params.items():
            q = Parameter(p.data.copy())
            q.trainable_mask = p.trainable_mask.copy()
            params[name] = q
        return ModelWeights(self.config, params, self.seed, copy.deepcopy(self.meta))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def qkv_cols(self, head: int) -> list[slice]:
        """Column slices of head ``head`` in the Q, K and V thirds of ``qkv``."""
        d, dh = self.config.d_model, self.config.d_head
        return [slice(part * d + head * dh, part * d + (head + 1) * dh) for part in range(3)]

    def out_rows(self, head: int) -> slice:
        dh = self.config.d_head
        return slice(head * dh, (head + 1) * dh)


def parameter_names(config: ModelConfig) -> list[str]:
    names = ["embed"]
    for l in range(config.n_layers):
        names.extend(f"layers.{l}.{n}" for n in LAYER_PARAMS)
    names.extend(["ln_f.gain", "ln_f.shift"])
    return names


def xavier_std(fan_in: int, fan_out: int) -> float:
    return math.sqrt(2.0 / (fan_in + fan_out))


def init_model(config: ModelConfig, seed: int = 42) -> ModelWeights:
    """Deterministic initialization: Xavier-normal projections, unit/zero norms, zero biases.

    The fused QKV matrix is drawn per head slice (fan_in = d_model,
    fan_out = d_head), the same convention surgery uses to redraw a head.
    """
    rng = np.random.default_rng(seed)
    d, dh, H = config.d_model, config.d_head, config.n_heads
    d_ff = config.mlp_ratio * d
    dtype = nx.default_dtype()
    p: dict[str, np.ndarray] = {}
    p["embed"] = rng.normal(0.0, 0.02, size=(config.n_embed, d))
    for l in range(config.n_layers):
        pre = f"layers.{l}."
        qkv = np.empty((d, 3 * d))
        for part in range(3):
            for h in range(H):
                c0 = part * d + h * dh
                qkv[:, c0:c0 + dh] = rng.normal(0.0, xavier_std(d, dh), size=(d, dh))
        p[pre + "ln1.gain"] = np.ones(d)
        p[pre + "ln1.shift"] = np.zeros(d)
        p[pre + "qkv.weight"] = qkv
        p[pre + "qkv.bias"] = np.zeros(3 * d)
        p[pre + "attn_out.weight"] = rng.normal(0.0, xavier_std(d, d), size=(d, d))
        p[pre + "attn_out.bias"] = np.zeros(d)
        p[pre + "ln2.gain"] = np.ones(d)
        p[pre + "ln2.shift"] = np.zeros(d)
        p[pre + "mlp_up.weight"] = rng.normal(0.0, xavier_std(d, d_ff), size=(d, d_ff))
        p[pre + "mlp_up.bias"] = np.zeros(d_ff)
        p[pre + "mlp_down.weight"] = rng.normal(0.0, xavier_std(d_ff, d), size=(d_ff, d))
        p[pre + "mlp_down.bias"] = np.zeros(d)
    p["ln_f.gain"] = np.ones(d)
    p["ln_f.shift"] = np.zeros(d)
    params = {name: Parameter(p[name].astype(dtype)) for name in parameter_names(config)}
    return ModelWeights(config, params, seed)


def check_heads(config: ModelConfig, heads: Iterable[tuple[int, int]]) -> set[tuple[int, int]]:
    out = set()
    for l, h in heads:
        if not (0 <= l < config.n_layers and 0 <= h < config.n_heads):
            raise ValueError(f"invalid head coordinate L{l}H{h}")
        out.add((int(l), int(h)))
    return out


def forward(
    weights: ModelWeights,
    tokens,
    capture: bool = False,
    ablated: Iterable[tuple[int, int]] = (),
    attention: bool = True,
) -> tuple[Tensor, np.ndarray | None]:
    """Run the model on one token sequence.

    Returns ``(logits[T, V], snapshot)`` where ``snapshot`` is an
    ``[L, H, T, T]`` array of attention probabilities when ``capture`` is set.
    ``ablated`` zeroes the listed heads' context vectors before the output
    projection; ``attention=False`` drops every head's context, leaving only
    the output-projection bias (the attention-free baseline).
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    T = int(tokens.shape[0])
    if T < 1 or T > cfg.max_seq_len:
        raise ValueError(f"sequence length {T} outside [1, {cfg.max_seq_len}]")
    if tokens.min() < 0 or tokens.max() > cfg.bos_id:
        raise IndexError(f"token id outside [0, {cfg.bos_id}]")
    ablated = check_heads(cfg, ablated)

    d, H, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    dtype = weights["embed"].data.dtype
    bias = _alibi_stack(H, T, dtype.str)
    inv_sqrt = 1.0 / math.sqrt(dh)
    snaps = np.empty((cfg.n_layers, H, T, T), dtype=dtype) if capture else None

    x = nx.embedding_lookup(weights["embed"], tokens)
    for l in range(cfg.n_layers):
        P = lambda n: weights.params[f"layers.{l}.{n}"]  # noqa: E731
        h = nx.layernorm(x, P("ln1.gain"), P("ln1.shift"), cfg.ln_eps)
        if attention:
            qkv = nx.add_bias(nx.matmul(h, P("qkv.weight")), P("qkv.bias"))
            q = nx.split_heads(nx.take_cols(qkv, 0, d), H)
            k = nx.split_heads(nx.take_cols(qkv, d, 2 * d), H)
            v = nx.split_heads(nx.take_cols(qkv, 2 * d, 3 * d), H)
            scores = nx.scale(nx.matmul(q, nx.transpose(k)), inv_sqrt)
            A = nx.softmax_rows(scores, bias)
            if capture:
                snaps[l] = A.data
            ctx = nx.matmul(A, v)
            dead = [hh for hh in range(H) if (l, hh) in ablated]
            if dead:
                keep = np.ones((H, 1, 1), dtype=dtype)
                keep[dead] = 0.0
                ctx = nx.mul_const(ctx, np.broadcast_to(keep, ctx.shape))
            attn = nx.add_bias(nx.matmul(nx.concat_heads(ctx), P("attn_out.weight")), P("attn_out.bias"))
        else:
            if capture:
                snaps[l] = np.nan
            zero = Tensor(np.zeros((T, d), dtype=dtype))
            attn = nx.add_bias(zero, P("attn_out.bias"))
        x = nx.add(x, attn)
        h2 = nx.layernorm(x, P("ln2.gain"), P("ln2.shift"), cfg.ln_eps)
        up = nx.gelu(nx.add_bias(nx.matmul(h2, P("mlp_up.weight")), P("mlp_up.bias")))
        x = nx.add(x, nx.add_bias(nx.matmul(up, P("mlp_down.weight")), P("mlp_down.bias")))
    x = nx.layernorm(x, weights["ln_f.gain"], weights["ln_f.shift"], cfg.ln_eps)
    # tied head over the byte rows only: BOS is never predicted
    logits = nx.matmul(x, nx.take_cols(nx.transpose(weights["embed"]), 0, cfg.vocab_size))
    return logits, snaps


def forward_with_heads_ablated(weights: ModelWeights, tokens, ablated: Iterable[tuple[int, int]]) -> Tensor:
    logits, _ = forward(weights, tokens, ablated=ablated)
    return logits


def lm_loss(weights: ModelWeights, tokens) -> Tensor:
    """Mean next-token cross-entropy of one sequence."""
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, _ = forward(weights, tokens[:-1])
    return nx.cross_entropy(logits, tokens[1:])
