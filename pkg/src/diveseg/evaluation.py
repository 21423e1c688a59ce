"""Mask average precision and PCA feature visualization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

COCO_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class ScoredMask:
    mask: np.ndarray  # (H, W) bool
    label: int
    score: float


@dataclass
class GroundTruth:
    masks: np.ndarray  # (N, H, W) bool
    labels: np.ndarray  # (N,)


@dataclass
class APReport:
    mAP: float
    AP50: float
    AP75: float
    per_class: dict[int, dict[str, float]] = field(default_factory=dict)
    per_threshold: dict[float, float] = field(default_factory=dict)
    num_images: int = 0
    class_names: tuple[str, ...] = ()

    def as_dict(self) -> dict[str, float]:
        out = {"mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75, "num_images": self.num_images}
        for k, row in self.per_class.items():
            out[f"class{k}.mAP"] = row["mAP"]
        return out

    def table(self, title: str = "Mask AP") -> str:
        """Human-readable table, values x100 like published result tables."""
        lines = [title, f"{'':<20}{'mAP':>8}{'AP50':>8}{'AP75':>8}"]
        lines.append(f"{'all':<20}{100 * self.mAP:8.1f}{100 * self.AP50:8.1f}{100 * self.AP75:8.1f}")
        for k, row in sorted(self.per_class.items()):
            name = self.class_names[k] if k < len(self.class_names) else str(k)
            lines.append(f"{name:<20}{100 * row['mAP']:8.1f}{100 * row['AP50']:8.1f}{100 * row['AP75']:8.1f}")
        lines.append(f"images: {self.num_images}")
        return "\n".join(lines)

    def to_kv(self) -> str:
        return "\n".join(f"{k}={v}" for k, v in self.as_dict().items()) + "\n"


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        raise ValueError("IoU of two empty masks is undefined")
    return float(np.logical_and(a, b).sum() / union)


def _iou_matrix(preds: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """(P, H, W) x (G, H, W) -> (P, G) IoU."""
    if len(preds) == 0 or len(gts) == 0:
        return np.zeros((len(preds), len(gts)))
    p = preds.reshape(len(preds), -1).astype(np.float64)
    g = gts.reshape(len(gts), -1).astype(np.float64)
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    return inter / np.maximum(union, 1e-12)


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-sorted true-positive flag vector."""
    if num_gt == 0:
        raise ValueError("AP undefined without ground truth")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1 - tp)
    recall = tps / num_gt
    precision = tps / (tps + fps)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def mask_ap(
    predictions: Sequence[Sequence[ScoredMask]],
    ground_truths: Sequence[GroundTruth],
    thresholds: Sequence[float] = COCO_THRESHOLDS,
    class_names: Sequence[str] = (),
) -> APReport:
    """Greedy score-ordered matching per class and IoU threshold, 101-point AP.

    Classes without ground truth are left out of every average.
    """
    if len(predictions) != len(ground_truths):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truths)} images")
    thresholds = tuple(float(t) for t in thresholds)
    for preds in predictions:
        for p in preds:
            if not 0.0 <= p.score <= 1.0:
                raise ValueError(f"score {p.score} outside [0, 1]")

    classes = sorted({int(l) for gt in ground_truths for l in np.asarray(gt.labels).tolist()})
    if not classes:
        raise ValueError("no ground-truth instances to evaluate against")

    per_class: dict[int, dict[str, float]] = {}
    ap_grid = np.zeros((len(classes), len(thresholds)))
    for ci, cls in enumerate(classes):
        # (score, image, pred index) over all images, highest score first; stable on ties
        entries = []
        ious = []
        num_gt = 0
        for img, (preds, gt) in enumerate(zip(predictions, ground_truths)):
            gt_labels = np.asarray(gt.labels)
            gt_masks = np.asarray(gt.masks, dtype=bool)[gt_labels == cls]
            num_gt += len(gt_masks)
            own = [p for p in preds if int(p.label) == cls]
            pm = np.stack([np.asarray(p.mask, dtype=bool) for p in own]) if own else np.zeros((0,) + gt_masks.shape[1:], bool)
            ious.append(_iou_matrix(pm, gt_masks))
            entries += [(-p.score, img, j) for j, p in enumerate(own)]
        entries.sort(key=lambda e: e[0])
        for ti, thr in enumerate(thresholds):
            taken = [np.zeros(iou.shape[1], dtype=bool) for iou in ious]
            tp = np.zeros(len(entries))
            for k, (_, img, j) in enumerate(entries):
                row = np.where(taken[img], -1.0, ious[img][j])
                if row.size and row.max() >= thr:
                    best = int(np.argmax(row))
                    taken[img][best] = True
                    tp[k] = 1
            ap_grid[ci, ti] = interpolated_ap(tp, num_gt)
        per_class[cls] = {
            "mAP": float(ap_grid[ci].mean()),
            "AP50": _at(ap_grid[ci], thresholds, 0.5),
            "AP75": _at(ap_grid[ci], thresholds, 0.75),
        }
    means = ap_grid.mean(axis=0)
    return APReport(
        mAP=float(ap_grid.mean(axis=1).mean()),
        AP50=_at(means, thresholds, 0.5),
        AP75=_at(means, thresholds, 0.75),
        per_class=per_class,
        per_threshold=dict(zip(thresholds, means.tolist())),
        num_images=len(ground_truths),
        class_names=tuple(class_names),
    )


def _at(values: np.ndarray, thresholds: Sequence[float], t: float) -> float:
    for v, thr in zip(values, thresholds):
        if abs(thr - t) < 1e-9:
            return float(v)
    return float("nan")


# ---------------------------------------------------------------------------
# PCA of dense tokens


@dataclass
class PCAResult:
    rgb: np.ndarray  # (H, W, 3) in [0, 1], background black
    foreground: np.ndarray  # (H, W) bool
    components: np.ndarray  # (N, 3) token projections on the top-3 axes
    explained_variance_ratio: np.ndarray  # (3,)
    axes: np.ndarray  # (D, 3) principal directions


def pca_components(tokens: np.ndarray, k: int = 3) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Top-k projections, axes and explained-variance ratios via covariance eigh."""
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need an (N >= {k}, D) token matrix, got shape {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(x.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    axes = evecs[:, order[:k]]
    total = evals.sum()
    ratio = evals[:k] / total if total > 0 else np.zeros(k)
    return centered @ axes, axes, ratio


def pca_visualize(
    tokens: np.ndarray,
    image_size: int | tuple[int, int],
    grid: tuple[int, int] | None = None,
    invert: bool = False,
) -> PCAResult:
    """Foreground from the sign of the first component, RGB from the top three.

    Eigenvector signs are arbitrary, so ``invert`` flips which side counts as
    foreground.
    """
    tokens = np.asarray(tokens)
    n = tokens.shape[0]
    if grid is None:
        side = int(round(np.sqrt(n)))
        if side * side != n:
            raise ValueError(f"{n} tokens are not a square grid; pass grid explicitly")
        grid = (side, side)
    proj, axes, ratio = pca_components(tokens, 3)
    first = -proj[:, 0] if invert else proj[:, 0]
    fg = first > 0
    rgb = np.zeros((n, 3))
    if fg.any():
        sel = proj[fg]
        lo, hi = sel.min(axis=0), sel.max(axis=0)
        span = np.where(hi - lo > 0, hi - lo, 1.0)
        rgb[fg] = (sel - lo) / span
    size = (image_size, image_size) if isinstance(image_size, int) else tuple(image_size)
    reps = (size[0] // grid[0], size[1] // grid[1])
    if size[0] % grid[0] or size[1] % grid[1]:
        raise ValueError(f"image size {size} is not a multiple of the token grid {grid}")
    rgb_img = np.kron(rgb.reshape(*grid, 3), np.ones((*reps, 1)))
    fg_img = np.kron(fg.reshape(grid).astype(np.uint8), np.ones(reps, dtype=np.uint8)).astype(bool)
    return PCAResult(rgb_img, fg_img, proj, ratio, axes)
