"""Byte tokenizer, corpus handling, AdamW with warmup/cosine, masked training loop, perplexity."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .diagnostics import DiagnosisReport, Thresholds, detect_band, diagnose, slope_ordering
from .model import ModelConfig, ModelWeights, forward, init_model

log = logging.getLogger(__name__)

BOS = ModelConfig().bos_id  # 256: one past the byte values


# ---------------------------------------------------------------- tokenizer


def tokenize(data: bytes | str) -> list[int]:
    """Byte-level ids with BOS prepended."""
    if isinstance(data, str):
        data = data.encode("utf-8")
    return [BOS, *data]


def detokenize(tokens: Sequence[int]) -> bytes:
    return bytes(t for t in tokens if t != BOS)


def chunk(data: bytes, seq_len: int, offset: int = 0) -> list[list[int]]:
    """Split ``data[offset:]`` into BOS-prefixed chunks of at most ``seq_len`` tokens."""
    if seq_len < 2:
        raise ValueError("seq_len must leave room for BOS and one byte")
    body = seq_len - 1
    data = data[offset:]
    return [tokenize(data[i:i + body]) for i in range(0, len(data), body)]


# ---------------------------------------------------------------- corpus


def bundled_corpus() -> bytes:
    return resources.files("alibi_surgeon.data").joinpath("corpus.txt").read_bytes()


def bundled_text(name: str) -> bytes:
    return resources.files("alibi_surgeon.data").joinpath(name).read_bytes()


@dataclass
class Corpus:
    """Training bytes plus a disjoint held-out set of chunks."""

    train: bytes
    heldout: list[list[int]]
    provenance: str
    seq_len: int

    @classmethod
    def from_bytes(cls, data: bytes, seq_len: int, heldout_frac: float = 0.1,
                   provenance: str | None = None) -> "Corpus":
        if not data:
            raise ValueError("empty corpus")
        cut = int(len(data) * (1.0 - heldout_frac))
        train, rest = data[:cut], data[cut:]
        # held-out chunks that also occur verbatim in the training bytes are dropped
        heldout = [c for c in chunk(rest, seq_len) if len(c) > 1 and detokenize(c) not in train]
        return cls(train, heldout, provenance or hashlib.sha256(data).hexdigest()[:16], seq_len)

    def train_chunks(self, epoch: int = 0, seed: int = 0) -> list[list[int]]:
        """One epoch of training chunks; the chunk phase shifts deterministically per epoch."""
        body = self.seq_len - 1
        rng = np.random.default_rng([seed, epoch])
        offset = int(rng.integers(0, body)) if epoch else 0
        chunks = [c for c in chunk(self.train, self.seq_len, offset) if len(c) > 1]
        order = rng.permutation(len(chunks))
        return [chunks[i] for i in order]

    def n_train_chunks(self) -> int:
        return len(chunk(self.train, self.seq_len))


# ---------------------------------------------------------------- optimizer


@dataclass
class TrainConfig:
    lr_peak: float = 5e-5
    warmup_steps: int | None = None  # None -> 10% of total_steps
    total_steps: int | None = None  # None -> epochs * steps per epoch
    accum_steps: int = 8
    clip_norm: float = 1.0
    seq_len: int = 64
    epochs: int = 3
    seed: int = 42
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_interval: int | None = None  # None -> total_steps // 10

    def __post_init__(self):
        if self.accum_steps < 1:
            raise ValueError("accum_steps must be >= 1")
        if self.total_steps is not None and self.warmup_steps is not None and self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps exceeds total_steps")

    def resolved(self, steps_per_epoch: int) -> "TrainConfig":
        total = self.total_steps if self.total_steps is not None else self.epochs * steps_per_epoch
        warm = self.warmup_steps if self.warmup_steps is not None else total // 10
        interval = self.eval_interval if self.eval_interval is not None else max(total // 10, 1)
        return replace(self, total_steps=total, warmup_steps=min(warm, total), eval_interval=interval)

    def to_dict(self) -> dict:
        return asdict(self)


def pretrain_config(**overrides) -> TrainConfig:
    """Defaults for inducing collapse from scratch (much hotter than surgical training)."""
    base = dict(lr_peak=3e-3, total_steps=20_000, accum_steps=1, seq_len=64, epochs=0, seed=42)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` then cosine decay to zero at ``total_steps``."""
    total, warm = cfg.total_steps, cfg.warmup_steps or 0
    if step < 0 or step > total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warm:
        return cfg.lr_peak * step / warm
    if total == warm:
        return cfg.lr_peak
    progress = (step - warm) / (total - warm)
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float, bool]:
    """Scale all gradients by ``max_norm / norm`` when the global L2 norm exceeds ``max_norm``."""
    sq = 0.0
    for g in grads.values():
        g64 = g.astype(np.float64, copy=False)
        sq += float(np.dot(g64.ravel(), g64.ravel()))
    norm = math.sqrt(sq)
    if not math.isfinite(norm):
        raise nx.NonFiniteError("non-finite gradient norm")
    if norm > max_norm:
        s = max_norm / norm
        return {k: (g * s).astype(g.dtype, copy=False) for k, g in grads.items()}, norm, True
    return grads, norm, False


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_weights(cls, weights: ModelWeights) -> "OptimizerState":
        st = cls()
        for name, p in weights.named_parameters():
            if p.trainable_mask.any():
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
        return st


def adamw_step(weights: ModelWeights, grads: dict[str, np.ndarray], state: OptimizerState, lr: float,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam with decoupled weight decay; masked-out elements never move."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name in state.m:
        p = weights.params[name]
        g = grads[name]
        m = state.m[name] = beta1 * state.m[name] + (1.0 - beta1) * g
        v = state.v[name] = beta2 * state.v[name] + (1.0 - beta2) * g * g
        upd = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        if weight_decay:
            upd = upd + lr * weight_decay * p.data
        new = (p.data - upd).astype(p.data.dtype)
        mask = p.trainable_mask
        p.data = new if mask.all() else np.where(mask, new, p.data)


# ---------------------------------------------------------------- loop


def sequence_loss(weights: ModelWeights, tokens: Sequence[int]) -> nx.Tensor:
    tokens = np.asarray(tokens, dtype=np.int64)
    logits, _ = forward(weights, tokens[:-1])
    return nx.cross_entropy(logits, tokens[1:])


def accumulate_window(weights: ModelWeights, window: Sequence[Sequence[int]]) -> float:
    """Backward over a group of sequences with the loss mean-reduced over all their tokens.

    Gradients add into the parameters' ``.grad``; returns the window loss.
    """
    n_total = sum(len(s) - 1 for s in window)
    total = 0.0
    for seq in window:
        n = len(seq) - 1
        with nx.Tape() as tape:
            loss = sequence_loss(weights, seq)
            weighted = nx.scale(loss, n / n_total)
        tape.backward(weighted)
        total += loss.item() * n
    return total / n_total


def perplexity(weights: ModelWeights, texts: Sequence[Sequence[int]]) -> float:
    """exp of token-weighted mean next-token cross-entropy over ``texts`` (token lists)."""
    nll, n = 0.0, 0
    T = weights.config.max_seq_len
    for seq in texts:
        seq = list(seq)
        if len(seq) > T + 1:
            pieces = [seq[i:i + T + 1] for i in range(0, len(seq) - 1, T)]
        else:
            pieces = [seq]
        for piece in pieces:
            if len(piece) < 2:
                continue
            loss = sequence_loss(weights, piece)
            nll += loss.item() * (len(piece) - 1)
            n += len(piece) - 1
    if n == 0:
        raise ValueError("no predictable tokens in the evaluation texts")
    return math.exp(nll / n)


@dataclass
class TrainResult:
    loss_trace: list[dict] = field(default_factory=list)
    eval_trace: list[dict] = field(default_factory=list)
    checkpoints: list[tuple[int, ModelWeights]] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    config: TrainConfig | None = None
    epoch_steps: list[int] = field(default_factory=list)  # optimizer step at each epoch boundary

    def checkpoint(self, epoch: int) -> ModelWeights:
        for e, w in self.checkpoints:
            if e == epoch:
                return w
        raise KeyError(epoch)

    def best(self) -> ModelWeights:
        return self.checkpoint(self.best_epoch)


def install_masks(weights: ModelWeights, masks: dict[str, np.ndarray] | None) -> None:
    for name, p in weights.named_parameters():
        p.trainable_mask = np.ones(p.shape, dtype=bool) if masks is None else np.asarray(masks[name], dtype=bool).copy()


def _windows(chunks, k):
    return [chunks[i:i + k] for i in range(0, len(chunks), k)]


def train(
    weights: ModelWeights,
    corpus: Corpus,
    cfg: TrainConfig,
    masks: dict[str, np.ndarray] | None = None,
    eval_sets: dict[str, Sequence[Sequence[int]]] | None = None,
    on_epoch: Callable[[int, ModelWeights], None] | None = None,
    on_eval: Callable[[int, ModelWeights], None] | None = None,
    keep_checkpoints: bool = True,
) -> TrainResult:
    """Train ``weights`` in place under ``masks`` (``None`` trains everything).

    One optimizer step per window of ``accum_steps`` chunks. An epoch is one
    pass over the training chunks; when ``cfg.total_steps`` is set it takes
    precedence and epochs wrap until the budget is spent. Checkpoints are kept
    per epoch (epoch 0 is the starting point) and scored on the ``heldout``
    eval split to pick the best one.
    """
    install_masks(weights, masks)
    steps_per_epoch = max(math.ceil(corpus.n_train_chunks() / cfg.accum_steps), 1)
    cfg = cfg.resolved(steps_per_epoch)
    if eval_sets is None:
        eval_sets = {"heldout": corpus.heldout}
    state = OptimizerState.for_weights(weights)
    res = TrainResult(config=cfg)

    last_eval: dict = {}

    def evaluate(step: int) -> dict[str, float]:
        if last_eval.get("step") == step:  # epoch boundary on an eval-interval step
            return last_eval["ppl"]
        out = {}
        for split, texts in eval_sets.items():
            if texts:
                out[split] = perplexity(weights, texts)
                res.eval_trace.append({"step": step, "split": split, "ppl": out[split]})
        if on_eval:
            on_eval(step, weights)
        last_eval.update(step=step, ppl=out)
        return out

    def end_epoch(epoch: int, step: int) -> None:
        ppl = evaluate(step)
        res.epoch_steps.append(step)
        if keep_checkpoints:
            res.checkpoints.append((epoch, weights.copy()))
        score = ppl.get("heldout", next(iter(ppl.values()), None))
        if score is not None and (res.best_epoch is None or score < best_score[0]):
            best_score[0] = score
            res.best_epoch = epoch
        if on_epoch:
            on_epoch(epoch, weights)

    best_score = [math.inf]
    end_epoch(0, 0)
    step, epoch = 0, 0
    epoch_losses: list[float] = []
    while step < cfg.total_steps:
        epoch += 1
        for window in _windows(corpus.train_chunks(epoch - 1, cfg.seed), cfg.accum_steps):
            if step >= cfg.total_steps:
                break
            step += 1
            weights.zero_grad()
            loss = accumulate_window(weights, window)
            if not math.isfinite(loss):
                raise nx.NonFiniteError(f"non-finite loss at step {step}")
            grads = {}
            for name, p in weights.named_parameters():
                p.apply_mask()
                grads[name] = p.grad
            grads, gnorm, clipped = clip_global_norm(grads, cfg.clip_norm)
            lr = lr_at(step, cfg)
            adamw_step(weights, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
            res.loss_trace.append({"step": step, "lr": lr, "loss": loss, "grad_norm": gnorm, "clipped": int(clipped)})
            epoch_losses.append(loss)
            if step % cfg.eval_interval == 0 and step < cfg.total_steps:
                evaluate(step)
        res.epoch_loss.append(float(np.mean(epoch_losses)) if epoch_losses else math.nan)
        epoch_losses = []
        end_epoch(epoch, step)
    weights.zero_grad()
    return res


def mean_loss(weights: ModelWeights, chunks: Sequence[Sequence[int]]) -> float:
    return math.log(perplexity(weights, chunks))


# ---------------------------------------------------------------- collapse induction


class InductionError(RuntimeError):
    def __init__(self, msg: str, report: DiagnosisReport | None = None):
        super().__init__(msg)
        self.report = report


def default_prompt() -> list[int]:
    return tokenize(bundled_text("diagnostic_prompt.txt").strip())


def pretrain_to_collapse(
    config: ModelConfig,
    corpus: Corpus,
    cfg: TrainConfig,
    prompt: Sequence[int] | None = None,
    thresholds: Thresholds = Thresholds(),
    strict: bool = True,
) -> tuple[ModelWeights, DiagnosisReport, TrainResult]:
    """Train a fresh model until ALiBi's slope schedule has shaped its BOS-mass profile.

    Success means mean BOS mass rises with head index (positive rank
    correlation). With ``strict`` a failed induction raises
    :class:`InductionError` carrying the report.
    """
    weights = init_model(config, cfg.seed)
    res = train(weights, corpus, cfg, masks=None, keep_checkpoints=False)
    prompt = list(prompt) if prompt is not None else default_prompt()
    report = diagnose(weights, prompt, thresholds, checkpoint_id=f"pretrain-seed{cfg.seed}")
    rho = slope_ordering(report)
    weights.meta.update({"kind": "pretrain", "spearman": rho, "band": detect_band(report)})
    log.info("pretrain seed=%d spearman=%.3f counts=%s band=%s", cfg.seed, rho, report.counts(), detect_band(report))
    if strict and not rho > 0:
        raise InductionError(f"BOS mass not increasing with head index (spearman={rho:.3f})", report)
    return weights, report, res
