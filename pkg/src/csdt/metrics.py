"""Pixel-level (Dice, IoU) and target-level (Pd, Fa) evaluation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

THRESHOLD = 0.5
DETECTION_IOU = 0.5
FA_UNIT = 1e-4


def _binary(x, threshold=THRESHOLD) -> np.ndarray:
    a = np.asarray(x)
    if a.dtype == bool:
        return a
    return a > threshold


def pixel_metrics(pred, gt, threshold: float = THRESHOLD) -> tuple[float, float]:
    """Set-based ``(dice, iou)`` for one image. Two empty masks score (1, 1)."""
    p, g = _binary(pred, threshold), _binary(gt, threshold)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    inter = np.count_nonzero(p & g)
    union = np.count_nonzero(p | g)
    total = np.count_nonzero(p) + np.count_nonzero(g)
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / union


def target_metrics(pred, gt, threshold: float = THRESHOLD) -> tuple[bool, int, int]:
    """``(detected, false_pixels, total_pixels)`` for a single-target image."""
    p, g = _binary(pred, threshold), _binary(gt, threshold)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    _, iou = pixel_metrics(p, g)
    detected = bool(g.any()) and iou > DETECTION_IOU
    return detected, int(np.count_nonzero(p & ~g)), int(p.size)


@dataclass
class CategoryMetrics:
    """Aggregates for one group of images; rates in percent, Fa in 1e-4 units."""

    dice: float
    miou: float
    pd: float
    fa: float
    n_images: int
    n_d: int
    n_t: int
    n_f: int
    n_p: int


@dataclass
class MetricReport:
    overall: CategoryMetrics
    categories: dict[str, CategoryMetrics] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall": asdict(self.overall),
            "categories": {k: asdict(v) for k, v in self.categories.items()},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(
            overall=CategoryMetrics(**d["overall"]),
            categories={k: CategoryMetrics(**v) for k, v in d.get("categories", {}).items()},
            meta=d.get("meta", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def table(self) -> str:
        return format_table(self)


@dataclass
class ImageResult:
    dice: float
    iou: float
    detected: bool
    has_target: bool
    n_f: int
    n_p: int


def image_result(pred, gt, threshold: float = THRESHOLD) -> ImageResult:
    dice, iou = pixel_metrics(pred, gt, threshold)
    detected, n_f, n_p = target_metrics(pred, gt, threshold)
    return ImageResult(dice, iou, detected, bool(_binary(gt, threshold).any()), n_f, n_p)


def aggregate(results) -> CategoryMetrics:
    """Per-image means for Dice/IoU; pooled ratios for Pd and Fa."""
    results = list(results)
    if not results:
        raise ValueError("cannot aggregate an empty result list")
    n_t = sum(r.has_target for r in results)
    n_d = sum(r.detected for r in results)
    n_f = sum(r.n_f for r in results)
    n_p = sum(r.n_p for r in results)
    return CategoryMetrics(
        dice=100.0 * float(np.mean([r.dice for r in results])),
        miou=100.0 * float(np.mean([r.iou for r in results])),
        pd=100.0 * n_d / n_t if n_t else 0.0,
        fa=n_f / n_p / FA_UNIT,
        n_images=len(results),
        n_d=n_d,
        n_t=n_t,
        n_f=n_f,
        n_p=n_p,
    )


def evaluate_predictions(preds_by_cat: dict, gts_by_cat: dict, threshold: float = THRESHOLD) -> MetricReport:
    """Build a report from ``{category: predictions}`` and matching masks."""
    if not preds_by_cat:
        raise ValueError("no categories to evaluate")
    per_cat = {}
    everything = []
    for cat, preds in preds_by_cat.items():
        gts = gts_by_cat.get(cat)
        if gts is None:
            raise ValueError(f"category {cat!r} has no ground-truth masks")
        if len(preds) != len(gts):
            raise ValueError(f"category {cat!r}: {len(preds)} predictions vs {len(gts)} masks")
        results = [image_result(p, g, threshold) for p, g in zip(preds, gts)]
        per_cat[cat] = aggregate(results)
        everything.extend(results)
    return MetricReport(overall=aggregate(everything), categories=per_cat)


def average_reports(reports, pooled_fa: bool = False) -> CategoryMetrics:
    """Average the overall rows of several reports (e.g. across labeling rates).

    Dice, mIoU and Pd are plain means. Fa is the mean of per-report Fa unless
    ``pooled_fa`` is set, in which case false pixels are pooled over all
    pixels.
    """
    rows = [r.overall for r in reports]
    if not rows:
        raise ValueError("no reports to average")
    n_f = sum(r.n_f for r in rows)
    n_p = sum(r.n_p for r in rows)
    fa = n_f / n_p / FA_UNIT if pooled_fa else float(np.mean([r.fa for r in rows]))
    return CategoryMetrics(
        dice=float(np.mean([r.dice for r in rows])),
        miou=float(np.mean([r.miou for r in rows])),
        pd=float(np.mean([r.pd for r in rows])),
        fa=fa,
        n_images=sum(r.n_images for r in rows),
        n_d=sum(r.n_d for r in rows),
        n_t=sum(r.n_t for r in rows),
        n_f=n_f,
        n_p=n_p,
    )


def format_table(report: MetricReport) -> str:
    header = f"{'category':<10} {'Dice(%)':>8} {'mIoU(%)':>8} {'Pd(%)':>7} {'Fa(1e-4)':>9} {'N':>5}"
    lines = [header, "-" * len(header)]
    rows = list(report.categories.items()) + [("overall", report.overall)]
    for name, m in rows:
        lines.append(f"{name:<10} {m.dice:8.2f} {m.miou:8.2f} {m.pd:7.2f} {m.fa:9.2f} {m.n_images:5d}")
    return "\n".join(lines)


def report_rows(report: MetricReport) -> list[dict]:
    """Flat rows (one per category plus ``overall``) for delimited output."""
    rows = []
    for name, m in list(report.categories.items()) + [("overall", report.overall)]:
        rows.append({"category": name, **asdict(m)})
    return rows


def evaluate_split(checkpoint, manifest: dict, splits=None, per_light: bool = True, batch_size: int = 16) -> MetricReport:
    """Run inference on test splits and aggregate.

    ``splits`` defaults to every ``test_*`` split of the manifest. Categories
    are named after the stray-light kind (``test_sun`` -> ``sun``).
    """
    from .synthgen import load_split
    from .trainer import infer

    if splits is None:
        splits = sorted(s for s in manifest["splits"] if s.startswith("test_"))
    if isinstance(checkpoint, (str, bytes)) or hasattr(checkpoint, "__fspath__"):
        from .network import load_checkpoint

        model, meta = load_checkpoint(checkpoint)
    else:
        model, meta = checkpoint, {}
    preds, gts = {}, {}
    for split in splits:
        x, y = load_split(manifest, split)
        if len(x) == 0:
            raise ValueError(f"split {split!r} is empty")
        if y is None:
            raise ValueError(f"split {split!r} has no masks")
        name = split[5:] if split.startswith("test_") else split
        preds[name] = infer(model, x, batch_size)
        gts[name] = y > 0.5
    report = evaluate_predictions(preds, gts)
    if not per_light:
        report.categories = {}
    report.meta = {"splits": list(splits), "checkpoint_meta": meta}
    return report
