"""Per-head attention health: BOS mass, entropy, classification, bands and drift."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np

from .model import ModelWeights, forward

MIN_PROMPT_LEN = 16
BAND_PENALTY = 0.5
SPREADING_RATIO = 1.5


# JSON Schema (draft 2020-12) for DiagnosisReport.to_json
REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["checkpoint_id", "prompt_sha", "thresholds", "grid", "counts", "band"],
    "properties": {
        "checkpoint_id": {"type": "string"},
        "prompt_sha": {"type": "string"},
        "thresholds": {
            "type": "object",
            "required": ["healthy_max", "dead_min", "low_entropy_max"],
            "additionalProperties": {"type": "number"},
        },
        "grid": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "array",
                "minItems": 1,
                "items": {
                    "type": "object",
                    "required": ["bos", "entropy", "class"],
                    "properties": {
                        "bos": {"type": "number", "minimum": 0, "maximum": 1},
                        "entropy": {"type": "number", "minimum": 0},
                        "class": {"enum": ["Healthy", "BosSink", "Dead", "LowEntropy"]},
                    },
                },
            },
        },
        "counts": {
            "type": "object",
            "required": ["Healthy", "BosSink", "Dead", "LowEntropy"],
            "additionalProperties": {"type": "integer", "minimum": 0},
        },
        "band": {"type": "array", "items": {"type": "integer", "minimum": 0}, "maxItems": 2},
    },
}


class HeadClass(str, Enum):
    HEALTHY = "Healthy"
    BOS_SINK = "BosSink"
    DEAD = "Dead"
    LOW_ENTROPY = "LowEntropy"

    @property
    def collapsed(self) -> bool:
        return self in (HeadClass.BOS_SINK, HeadClass.DEAD)


@dataclass(frozen=True)
class Thresholds:
    healthy_max: float = 0.50
    dead_min: float = 0.95
    low_entropy_max: float = 0.50

    def __post_init__(self):
        if not self.healthy_max < self.dead_min:
            raise ValueError("healthy_max must be below dead_min")

    def to_dict(self) -> dict:
        return {"healthy_max": self.healthy_max, "dead_min": self.dead_min,
                "low_entropy_max": self.low_entropy_max}


@dataclass(frozen=True)
class HeadMetrics:
    bos_mass: float
    entropy: float


def _check_rows(A: np.ndarray, tol: float) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square attention matrix, got {A.shape}")
    if np.any(np.abs(A.sum(axis=1) - 1.0) > tol):
        raise ValueError("attention rows are not normalized")
    return A


def bos_mass(A: np.ndarray, tol: float = 1e-4) -> float:
    """Mean attention weight on position 0 across query rows."""
    A = _check_rows(A, tol)
    return float(A[:, 0].mean())


def attn_entropy(A: np.ndarray, tol: float = 1e-4) -> float:
    """Mean Shannon entropy (nats) of the attention rows, with 0*log 0 = 0."""
    A = _check_rows(A, tol)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(A > 0, A * np.log(A), 0.0)
    return float(-terms.sum(axis=1).mean())


def classify(m: HeadMetrics, th: Thresholds = Thresholds()) -> HeadClass:
    # precedence: Dead > BosSink > LowEntropy > Healthy
    if m.bos_mass > th.dead_min:
        return HeadClass.DEAD
    if m.bos_mass > th.healthy_max:
        return HeadClass.BOS_SINK
    if m.entropy < th.low_entropy_max:
        return HeadClass.LOW_ENTROPY
    return HeadClass.HEALTHY


def prompt_sha(tokens: Sequence[int]) -> str:
    return hashlib.sha256(np.asarray(tokens, dtype="<u4").tobytes()).hexdigest()


@dataclass
class DiagnosisReport:
    """L x H grid of head metrics and classes for one checkpoint and prompt."""

    bos: np.ndarray
    entropy: np.ndarray
    thresholds: Thresholds = Thresholds()
    prompt_sha: str = ""
    checkpoint_id: str = ""
    classes: list[list[HeadClass]] = field(default=None)

    def __post_init__(self):
        self.bos = np.asarray(self.bos, dtype=np.float64)
        self.entropy = np.asarray(self.entropy, dtype=np.float64)
        if self.bos.shape != self.entropy.shape or self.bos.ndim != 2:
            raise ValueError("bos and entropy must be matching L x H grids")
        if self.classes is None:
            self.classes = [
                [classify(HeadMetrics(b, e), self.thresholds) for b, e in zip(brow, erow)]
                for brow, erow in zip(self.bos, self.entropy)
            ]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bos.shape

    def cls(self, l: int, h: int) -> HeadClass:
        return self.classes[l][h]

    def heads(self) -> Iterable[tuple[int, int]]:
        L, H = self.shape
        return ((l, h) for l in range(L) for h in range(H))

    def sick(self) -> set[tuple[int, int]]:
        return {(l, h) for l, h in self.heads() if self.classes[l][h].collapsed}

    def healthy(self) -> set[tuple[int, int]]:
        return {(l, h) for l, h in self.heads() if self.classes[l][h] is HeadClass.HEALTHY}

    def counts(self) -> dict[str, int]:
        out = {c.value: 0 for c in HeadClass}
        for row in self.classes:
            for c in row:
                out[c.value] += 1
        return out

    def sick_grid(self) -> np.ndarray:
        return np.array([[c.collapsed for c in row] for row in self.classes], dtype=bool)

    def to_json(self) -> dict:
        band = detect_band(self)
        return {
            "checkpoint_id": self.checkpoint_id,
            "prompt_sha": self.prompt_sha,
            "thresholds": self.thresholds.to_dict(),
            "grid": [
                [{"bos": float(self.bos[l, h]), "entropy": float(self.entropy[l, h]),
                  "class": self.classes[l][h].value} for h in range(self.shape[1])]
                for l in range(self.shape[0])
            ],
            "counts": self.counts(),
            "band": list(band) if band else [],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DiagnosisReport":
        grid = d["grid"]
        return cls(
            bos=[[c["bos"] for c in row] for row in grid],
            entropy=[[c["entropy"] for c in row] for row in grid],
            thresholds=Thresholds(**d.get("thresholds", {})),
            prompt_sha=d.get("prompt_sha", ""),
            checkpoint_id=d.get("checkpoint_id", ""),
            classes=[[HeadClass(c["class"]) for c in row] for row in grid],
        )


def report_from_snapshot(snap: np.ndarray, thresholds: Thresholds = Thresholds(), **kw) -> DiagnosisReport:
    L, H = snap.shape[:2]
    bos = np.empty((L, H))
    ent = np.empty((L, H))
    for l in range(L):
        for h in range(H):
            bos[l, h] = bos_mass(snap[l, h])
            ent[l, h] = attn_entropy(snap[l, h])
    return DiagnosisReport(bos, ent, thresholds, **kw)


def diagnose(weights: ModelWeights, prompt_tokens: Sequence[int],
             thresholds: Thresholds = Thresholds(), checkpoint_id: str = "") -> DiagnosisReport:
    """Classify every head from one attention-capturing forward pass over the prompt."""
    if len(prompt_tokens) < MIN_PROMPT_LEN:
        raise ValueError(f"diagnostic prompt needs at least {MIN_PROMPT_LEN} tokens, got {len(prompt_tokens)}")
    _, snap = forward(weights, prompt_tokens, capture=True)
    return report_from_snapshot(snap, thresholds, prompt_sha=prompt_sha(prompt_tokens),
                                checkpoint_id=checkpoint_id)


def threshold_robustness(bos: np.ndarray, thresholds: Sequence[float] = (0.40, 0.50, 0.60)) -> float:
    """Fraction of heads whose healthy-vs-collapsed verdict agrees across all thresholds.

    A head is collapsed at threshold ``t`` when ``bos > t`` (so 0.5 exactly is
    collapsed at 0.40 but healthy at 0.50 and 0.60, i.e. a disagreement).
    """
    bos = np.asarray(bos, dtype=np.float64).reshape(-1)
    if bos.size == 0:
        raise ValueError("no heads")
    verdicts = np.stack([bos > t for t in thresholds])
    agree = np.all(verdicts == verdicts[0], axis=0)
    return float(agree.mean())


def detect_band(report_or_grid, penalty: float = BAND_PENALTY) -> tuple[int, int] | None:
    """Contiguous head-index interval maximizing sick count minus ``penalty`` per column.

    Returns ``None`` when no interval scores above zero. Ties prefer the
    interval with the higher upper edge, then the higher lower edge.
    """
    grid = report_or_grid.sick_grid() if isinstance(report_or_grid, DiagnosisReport) else np.asarray(report_or_grid, bool)
    col = grid.sum(axis=0).astype(np.float64)
    best, best_iv = 0.0, None
    H = col.size
    for a in range(H):
        s = 0.0
        for b in range(a, H):
            s += col[b] - penalty
            if s > best + 1e-12 or (best_iv is not None and abs(s - best) <= 1e-12 and (b, a) > (best_iv[1], best_iv[0])):
                best, best_iv = s, (a, b)
    return best_iv


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    from scipy.stats import spearmanr

    r = spearmanr(x, y).statistic
    return 0.0 if r is None or math.isnan(r) else float(r)


def slope_ordering(report: DiagnosisReport) -> float:
    """Rank correlation between head index and layer-averaged BOS mass."""
    H = report.shape[1]
    return spearman(np.arange(H), report.bos.mean(axis=0))


# ---------------------------------------------------------------- drift

Zone = Callable[[int, int], bool]


def as_zone(zone) -> Zone:
    if zone is None:
        return lambda l, h: True
    if callable(zone):
        return zone
    members = {(int(l), int(h)) for l, h in zone}
    return lambda l, h: (l, h) in members


def outside_columns(columns: Iterable[int]) -> Zone:
    cols = set(columns)
    return lambda l, h: h not in cols


@dataclass(frozen=True)
class DriftRecord:
    layer: int
    head: int
    zone: bool
    delta: float
    drifting: bool


@dataclass
class DriftSummary:
    records: list[DriftRecord]
    count: int
    zone_size: int
    mean_abs_zone: float
    mean_abs_drifters: float
    worst: tuple[int, int, float] | None

    def worst_label(self) -> str:
        if self.worst is None:
            return "-"
        l, h, d = self.worst
        return f"L{l}H{h}: {d:+.3f}"

    def to_json(self) -> dict:
        return {
            "count": self.count,
            "zone_size": self.zone_size,
            "mean_abs_zone": self.mean_abs_zone,
            "mean_abs_drifters": self.mean_abs_drifters,
            "worst": self.worst_label(),
        }


def drift(stock: DiagnosisReport, post: DiagnosisReport, threshold: float = 0.05, zone=None) -> DriftSummary:
    """BOS-mass change ``post - stock`` per head, summarized over ``zone``.

    ``mean_abs_zone`` averages |delta| over every zone head (the headline
    statistic); ``mean_abs_drifters`` averages over drifting zone heads only.
    """
    if stock.shape != post.shape:
        raise ValueError(f"grid shape mismatch {stock.shape} vs {post.shape}")
    if stock.prompt_sha and post.prompt_sha and stock.prompt_sha != post.prompt_sha:
        raise ValueError("reports were produced from different prompts")
    in_zone = as_zone(zone)
    delta = post.bos - stock.bos
    records = []
    for l, h in stock.heads():
        d = float(delta[l, h])
        records.append(DriftRecord(l, h, bool(in_zone(l, h)), d, abs(d) > threshold))
    zr = [r for r in records if r.zone]
    drifters = [r for r in zr if r.drifting]
    worst = None
    if zr:
        w = max(zr, key=lambda r: abs(r.delta))
        worst = (w.layer, w.head, w.delta)
    return DriftSummary(
        records=records,
        count=len(drifters),
        zone_size=len(zr),
        mean_abs_zone=float(np.mean([abs(r.delta) for r in zr])) if zr else 0.0,
        mean_abs_drifters=float(np.mean([abs(r.delta) for r in drifters])) if drifters else 0.0,
        worst=worst,
    )


@dataclass(frozen=True)
class ColumnDrift:
    head: int
    n_frozen: int
    means: tuple[float, ...]
    trend: str


def column_trend(means: Sequence[float], ratio: float = SPREADING_RATIO) -> str:
    """``Spreading`` when the last mean exceeds ``ratio`` times the first, else ``Stable``."""
    return "Spreading" if means[-1] > ratio * means[0] else "Stable"


def column_drift(stock: DiagnosisReport, checkpoints: Sequence[DiagnosisReport],
                 frozen: Iterable[tuple[int, int]]) -> list[ColumnDrift]:
    """Per head-index column, mean |delta| of frozen heads at each checkpoint vs stock.

    Columns without frozen heads are omitted.
    """
    if not checkpoints:
        raise ValueError("need at least one post checkpoint besides stock")
    frozen = sorted({(int(l), int(h)) for l, h in frozen})
    by_col: dict[int, list[tuple[int, int]]] = {}
    for l, h in frozen:
        by_col.setdefault(h, []).append((l, h))
    out = []
    for h in sorted(by_col):
        heads = by_col[h]
        means = []
        for ck in checkpoints:
            if ck.shape != stock.shape:
                raise ValueError("grid shape mismatch")
            means.append(float(np.mean([abs(ck.bos[l, hh] - stock.bos[l, hh]) for l, hh in heads])))
        out.append(ColumnDrift(h, len(heads), tuple(means), column_trend(means)))
    return out
