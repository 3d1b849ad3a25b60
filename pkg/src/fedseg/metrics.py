"""Segmentation metrics and report assembly.

All metric functions are pure and operate in float64.  ``dice`` works on
soft values; confusion-count metrics threshold the prediction first.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ShapeError

BCE_CLAMP = 1e-7

SCD_DEFINITION = "scd = sum over evaluated images of (1 - cosine_similarity(truth, prediction))"


@dataclass(frozen=True)
class MetricsConfig:
    dice_epsilon: float = 1e-6
    binarize_threshold: float = 0.5
    ssim_window: int = 7
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def validate(self) -> None:
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError(f"binarize_threshold must lie in (0, 1), got {self.binarize_threshold}")
        if self.ssim_window < 3 or self.ssim_window % 2 == 0:
            raise ConfigError(f"ssim_window must be odd and >= 3, got {self.ssim_window}")
        if self.dice_epsilon < 0:
            raise ConfigError("dice_epsilon must be non-negative")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError("metric operands differ in shape", a.shape, b.shape)


def dice(truth, pred, eps: float = 1e-6) -> float:
    """2 * sum(t * p) / (sum(t) + sum(p) + eps)."""
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(t, p)
    denom = t.sum() + p.sum() + eps
    if denom == 0:
        return 0.0
    return float(2.0 * (t * p).sum() / denom)


class ZeroVectorCounter:
    """Counts cosine similarities that hit a zero vector."""

    def __init__(self):
        self.count = 0


ZERO_VECTORS = ZeroVectorCounter()


def cosine_similarity(a, b) -> float:
    """Dot-product cosine similarity of the flattened inputs.

    A zero vector on either side yields 0 and bumps ``ZERO_VECTORS.count``.
    """
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    _check_shapes(x, y)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        ZERO_VECTORS.count += 1
        warnings.warn("cosine similarity of a zero vector defined as 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


def scd(pairs: Iterable[tuple[np.ndarray, np.ndarray]]) -> float:
    """Sum of cosine distances over (truth, prediction) pairs."""
    return float(sum(1.0 - cosine_similarity(t, p) for t, p in pairs))


def bce(truth, pred) -> float:
    y = np.asarray(truth, dtype=np.float64)
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    _check_shapes(y, p)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def confusion(truth, pred, threshold: float = 0.5) -> ConfusionCounts:
    t = np.asarray(truth) >= 0.5
    p = np.asarray(pred) >= threshold
    _check_shapes(t, p)
    tp = int(np.count_nonzero(t & p))
    fp = int(np.count_nonzero(~t & p))
    fn = int(np.count_nonzero(t & ~p))
    tn = t.size - tp - fp - fn
    return ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: float, den: float, name: str, flags: set[str] | None) -> float:
    if den == 0:
        if flags is not None:
            flags.add(name)
        return 0.0
    return num / den


def iou(c: ConfusionCounts, flags: set[str] | None = None) -> float:
    return _ratio(c.tp, c.tp + c.fp + c.fn, "iou", flags)


def accuracy(c: ConfusionCounts, flags: set[str] | None = None) -> float:
    return _ratio(c.tp + c.tn, c.total, "accuracy", flags)


def recall(c: ConfusionCounts, flags: set[str] | None = None) -> float:
    return _ratio(c.tp, c.tp + c.fn, "recall", flags)


def precision(c: ConfusionCounts, flags: set[str] | None = None) -> float:
    return _ratio(c.tp, c.tp + c.fp, "precision", flags)


def f1(c: ConfusionCounts, flags: set[str] | None = None) -> float:
    p, r = precision(c, flags), recall(c, flags)
    return _ratio(2 * p * r, p + r, "f1", flags)


def rmse(truth, pred) -> float:
    t = np.asarray(truth, dtype=np.float64)
    p = np.asarray(pred, dtype=np.float64)
    _check_shapes(t, p)
    return float(np.sqrt(np.mean((t - p) ** 2)))


def _ssim_2d(x: np.ndarray, y: np.ndarray, win: int, c1: float, c2: float) -> float:
    if x.shape[0] < win or x.shape[1] < win:
        wx = x[None, None]
        wy = y[None, None]
    else:
        wx = sliding_window_view(x, (win, win))
        wy = sliding_window_view(y, (win, win))
    axes = (-2, -1)
    mx, my = wx.mean(axis=axes), wy.mean(axis=axes)
    vx = (wx * wx).mean(axis=axes) - mx * mx
    vy = (wy * wy).mean(axis=axes) - my * my
    cxy = (wx * wy).mean(axis=axes) - mx * my
    s = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    return float(s.mean())


def ssim(x, y, config: MetricsConfig | None = None) -> float:
    """Mean windowed SSIM with a uniform window.

    Accepts (H, W) or (H, W, C); multichannel input averages over channels.
    Windows use population (1/N) moments.
    """
    cfg = config or MetricsConfig()
    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(y, dtype=np.float64)
    _check_shapes(a, b)
    if a.ndim == 2:
        return _ssim_2d(a, b, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    if a.ndim == 3:
        return float(np.mean([_ssim_2d(a[..., c], b[..., c], cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
                              for c in range(a.shape[-1])]))
    raise ShapeError("ssim expects (H, W) or (H, W, C) arrays", a.shape)


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) points from sweeping every distinct score, high to low."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    l = np.asarray(labels).ravel() >= 0.5
    _check_shapes(s, l)
    pos = int(l.sum())
    neg = l.size - pos
    if pos == 0:
        raise ValueError("auc needs at least one positive label")
    if neg == 0:
        raise ValueError("auc needs at least one negative label")
    order = np.argsort(-s, kind="stable")
    s, l = s[order], l[order]
    tps = np.cumsum(l)
    fps = np.cumsum(~l)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tpr = np.r_[0.0, tps[ends] / pos]
    fpr = np.r_[0.0, fps[ends] / neg]
    return fpr, tpr


def auc(scores, labels) -> float:
    fpr, tpr = roc_curve(scores, labels)
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[:-1] + tpr[1:])) / 2.0)


@dataclass
class MetricsReport:
    dice: float
    bce_dice: float
    iou: float
    rmse: float
    ssim: float
    scd: float
    accuracy: float
    auc: float
    recall: float
    precision: float
    f1: float
    bce: float
    cosine_similarity: float
    dice_per_image: float
    iou_per_image: float
    samples: int
    degenerate: str = ""

    @classmethod
    def columns(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def as_row(self) -> dict:
        return asdict(self)

    def check_ranges(self) -> None:
        for name in ("dice", "iou", "accuracy", "recall", "precision", "f1", "auc",
                     "dice_per_image", "iou_per_image"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise AssertionError(f"{name}={v} outside [0, 1]")
        if not -1 <= self.ssim <= 1:
            raise AssertionError(f"ssim={self.ssim} outside [-1, 1]")
        for name in ("rmse", "bce", "scd", "bce_dice"):
            if getattr(self, name) < 0:
                raise AssertionError(f"{name} negative")


def evaluate_predictions(
    truths: np.ndarray,
    preds: np.ndarray,
    config: MetricsConfig | None = None,
) -> MetricsReport:
    """Metrics over a stack of (N, H, W, C) ground-truth masks and probabilities.

    Confusion metrics, dice, bce, rmse and auc are pooled over every pixel;
    ssim and cosine similarity are averaged per image; scd is summed per image.
    """
    cfg = config or MetricsConfig()
    t = np.asarray(truths, dtype=np.float64)
    p = np.asarray(preds, dtype=np.float64)
    _check_shapes(t, p)
    if t.shape[0] == 0:
        raise ValueError("cannot evaluate an empty split")
    binary = (p >= cfg.binarize_threshold).astype(np.float64)

    flags: set[str] = set()
    counts = confusion(t, p, cfg.binarize_threshold)
    b = bce(t, p)
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    soft = dice(t, pc, cfg.dice_epsilon)
    per_dice, per_iou, per_ssim, cos = [], [], [], []
    for ti, pi, bi in zip(t, p, binary):
        per_dice.append(dice(ti, bi, cfg.dice_epsilon) if ti.any() or bi.any() else 1.0)
        ci = confusion(ti, bi, 0.5)
        per_iou.append(iou(ci) if ci.tp + ci.fp + ci.fn else 1.0)
        per_ssim.append(ssim(ti, pi, cfg))
        cos.append(cosine_similarity(ti, pi))
    try:
        area = auc(p, t)
    except ValueError:
        flags.add("auc")
        area = 0.0
    return MetricsReport(
        dice=dice(t, binary, cfg.dice_epsilon),
        bce_dice=b + (1.0 - soft),
        iou=iou(counts, flags),
        rmse=rmse(t, p),
        ssim=float(np.mean(per_ssim)),
        scd=float(sum(1.0 - c for c in cos)),
        accuracy=accuracy(counts, flags),
        auc=area,
        recall=recall(counts, flags),
        precision=precision(counts, flags),
        f1=f1(counts, flags),
        bce=b,
        cosine_similarity=float(np.mean(cos)),
        dice_per_image=float(np.mean(per_dice)),
        iou_per_image=float(np.mean(per_iou)),
        samples=int(t.shape[0]),
        degenerate=";".join(sorted(flags)),
    )


def evaluate(
    predict_fn: Callable[[np.ndarray], np.ndarray],
    images: np.ndarray,
    masks: np.ndarray,
    config: MetricsConfig | None = None,
) -> MetricsReport:
    """Run ``predict_fn`` over a split and score it."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    return evaluate_predictions(masks, predict_fn(images), config)


def mean_reports(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Field-wise mean of several reports (sample count summed)."""
    if not reports:
        raise ValueError("no reports to average")
    vals = {}
    for f in fields(MetricsReport):
        if f.name == "samples":
            vals[f.name] = sum(r.samples for r in reports)
        elif f.name == "degenerate":
            vals[f.name] = ";".join(sorted({x for r in reports for x in r.degenerate.split(";") if x}))
        else:
            vals[f.name] = float(math.fsum(getattr(r, f.name) for r in reports) / len(reports))
    return MetricsReport(**vals)
