"""Head selection, reinitialization, gradient masks and the two-pass protocol."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .diagnostics import DiagnosisReport, HeadClass, Thresholds, detect_band, diagnose
from .model import ModelConfig, ModelWeights, check_heads, xavier_std
from .training import Corpus, TrainConfig, TrainResult, train

log = logging.getLogger(__name__)

Head = tuple[int, int]


class EmptyTargetError(ValueError):
    pass


@dataclass(frozen=True)
class SurgicalPlan:
    targets: frozenset[Head]
    kept_frozen: frozenset[Head] = frozenset()
    seed: int = 42
    pass_index: int = 1
    policy: str = "explicit"

    def __post_init__(self):
        if self.targets & self.kept_frozen:
            raise ValueError("a head cannot be both targeted and kept frozen")
        if self.pass_index not in (1, 2):
            raise ValueError("pass_index must be 1 or 2")

    def validate(self, config: ModelConfig) -> None:
        check_heads(config, self.targets)
        check_heads(config, self.kept_frozen)

    def to_json(self) -> dict:
        return {
            "pass": self.pass_index,
            "policy": self.policy,
            "targets": [list(t) for t in sorted(self.targets)],
            "kept_frozen": [list(t) for t in sorted(self.kept_frozen)],
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SurgicalPlan":
        return cls(
            targets=frozenset(tuple(t) for t in d["targets"]),
            kept_frozen=frozenset(tuple(t) for t in d.get("kept_frozen", [])),
            seed=int(d.get("seed", 42)),
            pass_index=int(d.get("pass", 1)),
            policy=d.get("policy", "explicit"),
        )


def select_targets(
    report: DiagnosisReport,
    policy: str = "band",
    *,
    band: tuple[int, int] | None = None,
    heads: Iterable[Head] | None = None,
    column: int | None = None,
    add_columns: Sequence[int] = (),
    layers: Sequence[int] | None = None,
    seed: int = 42,
    pass_index: int = 1,
) -> SurgicalPlan:
    """Build a plan from a diagnosis.

    ``band``: every collapsed head in the band columns (auto-detected unless
    given); the band's other heads are kept frozen. ``column``: every head of
    one column, healthy or not. ``residual``: every collapsed head anywhere.
    ``explicit``: exactly ``heads``. ``add_columns`` unions whole columns into
    any policy; ``layers`` restricts the layer range.
    """
    L, H = report.shape
    layer_ok = set(range(L)) if layers is None else set(layers)
    sick = report.sick()
    kept: set[Head] = set()
    if policy == "band":
        band = band if band is not None else detect_band(report)
        if band is None:
            raise EmptyTargetError("no sick band found")
        a, b = band
        cells = {(l, h) for l in layer_ok for h in range(a, b + 1)}
        targets = cells & sick
        kept = cells - sick
    elif policy == "column":
        if column is None or not 0 <= column < H:
            raise ValueError(f"column policy needs an index in [0, {H})")
        targets = {(l, column) for l in layer_ok}
    elif policy == "residual":
        targets = {c for c in sick if c[0] in layer_ok}
    elif policy == "explicit":
        targets = {(int(l), int(h)) for l, h in (heads or ())}
    else:
        raise ValueError(f"unknown policy {policy!r}")
    for c in add_columns:
        targets |= {(l, int(c)) for l in layer_ok}
    kept -= targets
    if not targets:
        raise EmptyTargetError(f"policy {policy!r} selected no heads")
    name = policy + "".join(f"+col{c}" for c in add_columns)
    return SurgicalPlan(frozenset(targets), frozenset(kept), seed, pass_index, name)


def reinit_head(weights: ModelWeights, layer: int, head: int, seed: int) -> None:
    """Redraw one head's Q/K/V slices (Xavier normal), zero their biases and its output rows.

    The draw depends only on ``(seed, layer, head)`` so plans are order independent.
    """
    cfg = weights.config
    check_heads(cfg, [(layer, head)])
    d, dh = cfg.d_model, cfg.d_head
    rng = np.random.default_rng([seed, layer, head])
    W = weights.layer(layer, "qkv.weight").data
    b = weights.layer(layer, "qkv.bias").data
    std = xavier_std(d, dh)
    for cols in weights.qkv_cols(head):
        W[:, cols] = rng.normal(0.0, std, size=(d, dh)).astype(W.dtype)
        b[cols] = 0.0
    weights.layer(layer, "attn_out.weight").data[weights.out_rows(head), :] = 0.0


def apply_plan(weights: ModelWeights, plan: SurgicalPlan) -> None:
    plan.validate(weights.config)
    for l, h in sorted(plan.targets):
        reinit_head(weights, l, h, plan.seed)


def build_masks(plan: SurgicalPlan | Iterable[Head], weights_or_config, train_out_bias: bool = False) -> dict[str, np.ndarray]:
    """Boolean trainable masks: only the targets' Q/K/V columns, biases and output rows.

    ``train_out_bias`` additionally opens the (head-shared) output bias of
    every layer containing a target.
    """
    if isinstance(weights_or_config, ModelWeights):
        weights = weights_or_config
    else:
        weights = _shape_only(weights_or_config)
    targets = plan.targets if isinstance(plan, SurgicalPlan) else frozenset(plan)
    check_heads(weights.config, targets)
    masks = {name: np.zeros(p.shape, dtype=bool) for name, p in weights.named_parameters()}
    for l, h in targets:
        qkv_w = masks[f"layers.{l}.qkv.weight"]
        qkv_b = masks[f"layers.{l}.qkv.bias"]
        for cols in weights.qkv_cols(h):
            qkv_w[:, cols] = True
            qkv_b[cols] = True
        masks[f"layers.{l}.attn_out.weight"][weights.out_rows(h), :] = True
        if train_out_bias:
            masks[f"layers.{l}.attn_out.bias"][:] = True
    return masks


class _ShapeParam:
    def __init__(self, shape):
        self.shape = shape


def _shape_only(config: ModelConfig) -> ModelWeights:
    from .model import parameter_names

    d, V, f = config.d_model, config.n_embed, config.mlp_ratio * config.d_model
    shapes = {
        "embed": (V, d), "ln_f.gain": (d,), "ln_f.shift": (d,),
        "ln1.gain": (d,), "ln1.shift": (d,), "ln2.gain": (d,), "ln2.shift": (d,),
        "qkv.weight": (d, 3 * d), "qkv.bias": (3 * d,),
        "attn_out.weight": (d, d), "attn_out.bias": (d,),
        "mlp_up.weight": (d, f), "mlp_up.bias": (f,),
        "mlp_down.weight": (f, d), "mlp_down.bias": (d,),
    }
    params = {}
    for name in parameter_names(config):
        key = name if name in shapes else name.split(".", 2)[2]
        params[name] = _ShapeParam(shapes[key])
    return ModelWeights(config, params)


def trainable_fraction(masks: dict[str, np.ndarray]) -> float:
    total = sum(m.size for m in masks.values())
    return sum(int(m.sum()) for m in masks.values()) / total


def apply_masks(grads: dict[str, np.ndarray], masks: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Zero every gradient element whose mask entry is false."""
    out = {}
    for name, g in grads.items():
        m = masks[name]
        if m.shape != g.shape:
            raise ValueError(f"mask shape {m.shape} does not match gradient {name} {g.shape}")
        out[name] = np.where(m, g, 0).astype(g.dtype)
    return out


def iatrogenic_detect(stock: DiagnosisReport, post: DiagnosisReport) -> set[Head]:
    """Heads healthy in ``stock`` that are collapsed in ``post``."""
    if stock.shape != post.shape:
        raise ValueError(f"grid shape mismatch {stock.shape} vs {post.shape}")
    return {(l, h) for l, h in stock.heads()
            if stock.cls(l, h) is HeadClass.HEALTHY and post.cls(l, h).collapsed}


def recovered(plan: SurgicalPlan, post: DiagnosisReport) -> set[Head]:
    return {t for t in plan.targets if post.cls(*t) is HeadClass.HEALTHY}


@dataclass
class SurgeryOutcome:
    plan: SurgicalPlan
    result: TrainResult
    reports: dict[int, DiagnosisReport] = field(default_factory=dict)
    masks: dict[str, np.ndarray] | None = None
    reinitialized: bool = True

    def recovery(self, epoch: int) -> tuple[int, int]:
        rep = self.reports[epoch]
        return len(recovered(self.plan, rep)), len(self.plan.targets)

    def first_full_recovery(self, frac: float = 1.0) -> int | None:
        for e in sorted(self.reports):
            got, n = self.recovery(e)
            if got >= frac * n:
                return e
        return None


def operate(
    weights: ModelWeights,
    plan: SurgicalPlan,
    corpus: Corpus,
    cfg: TrainConfig,
    prompt: Sequence[int],
    thresholds: Thresholds = Thresholds(),
    reinit: bool = True,
    train_out_bias: bool = False,
    eval_sets=None,
) -> SurgeryOutcome:
    """Reinitialize (unless ``reinit`` is off: the negative control), mask and train in place.

    Each epoch checkpoint is re-diagnosed so recovery can be tracked over time.
    """
    plan.validate(weights.config)
    if reinit:
        apply_plan(weights, plan)
    masks = build_masks(plan, weights, train_out_bias=train_out_bias)
    log.info("surgery pass %d: %d targets, %d kept frozen, trainable %.2f%%, reinit=%s",
             plan.pass_index, len(plan.targets), len(plan.kept_frozen), 100 * trainable_fraction(masks), reinit)
    reports: dict[int, DiagnosisReport] = {}

    def on_epoch(epoch, w):
        reports[epoch] = diagnose(w, prompt, thresholds, checkpoint_id=f"pass{plan.pass_index}-e{epoch}")
        got = len(recovered(plan, reports[epoch]))
        log.info("  epoch %d: %d/%d targets healthy", epoch, got, len(plan.targets))

    res = train(weights, corpus, cfg, masks=masks, on_epoch=on_epoch, eval_sets=eval_sets)
    return SurgeryOutcome(plan, res, reports, masks, reinit)


@dataclass
class TwoPassResult:
    stock: DiagnosisReport
    pass1: SurgeryOutcome
    pass1_best: ModelWeights
    pass1_report: DiagnosisReport
    iatrogenic: set[Head]
    pass2: SurgeryOutcome | None
    pass2_best: ModelWeights | None
    final_report: DiagnosisReport


def two_pass(
    weights: ModelWeights,
    corpus: Corpus,
    cfg: TrainConfig,
    prompt: Sequence[int],
    thresholds: Thresholds = Thresholds(),
    seed: int = 42,
    band: tuple[int, int] | None = None,
    cfg_pass2: TrainConfig | None = None,
) -> TwoPassResult:
    """Band surgery, then residual surgery from the pass-1 best (lowest held-out PPL) epoch.

    ``weights`` is left untouched; passes run on copies.
    """
    stock = diagnose(weights, prompt, thresholds, checkpoint_id="stock")
    plan1 = select_targets(stock, "band", band=band, seed=seed, pass_index=1)
    w1 = weights.copy()
    out1 = operate(w1, plan1, corpus, cfg, prompt, thresholds)
    best1 = out1.result.best().copy()
    rep1 = diagnose(best1, prompt, thresholds, checkpoint_id="pass1-best")
    iatro = iatrogenic_detect(stock, rep1)
    try:
        plan2 = select_targets(rep1, "residual", seed=seed + 1, pass_index=2)
    except EmptyTargetError:
        return TwoPassResult(stock, out1, best1, rep1, iatro, None, None, rep1)
    w2 = best1.copy()
    out2 = operate(w2, plan2, corpus, cfg_pass2 or cfg, prompt, thresholds)
    best2 = out2.result.best().copy()
    final = diagnose(best2, prompt, thresholds, checkpoint_id="pass2-best")
    return TwoPassResult(stock, out1, best1, rep1, iatro, out2, best2, final)
