"""Hungarian matching and the training losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .decoder import Prediction
from .prompter import SCALE_STRIDES, PseudoMaskSet

IOU_EPS = 1e-6


@dataclass
class LossWeights:
    cls: float = 2.0
    mask_bce: float = 5.0
    mask_dice: float = 5.0
    pm_bce: float = 1.0
    pm_iou: float = 1.0
    pm_l1: float = 1.0
    no_object: float = 0.1  # class weight of the no-object label, not a loss weight


COMPONENTS = ("cls", "mask_bce", "mask_dice", "pm_bce", "pm_iou", "pm_l1")


@dataclass
class LossReport:
    components: dict[str, torch.Tensor]
    weights: LossWeights
    total: torch.Tensor
    detail: dict[str, float] = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        out = {k: float(v.detach()) for k, v in self.components.items()}
        out["total"] = float(self.total.detach())
        return out


def sigmoid_bce_cost(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Pairwise mean BCE: logits (Q, P), targets (N, P) -> (Q, N)."""
    pos = F.binary_cross_entropy_with_logits(logits, torch.ones_like(logits), reduction="none")
    neg = F.binary_cross_entropy_with_logits(logits, torch.zeros_like(logits), reduction="none")
    return (pos @ targets.T + neg @ (1 - targets).T) / logits.shape[1]


def dice_cost(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Pairwise dice loss with +1 smoothing: (Q, P), (N, P) -> (Q, N)."""
    probs = logits.sigmoid()
    numerator = 2 * probs @ targets.T
    denominator = probs.sum(-1)[:, None] + targets.sum(-1)[None, :]
    return 1 - (numerator + 1) / (denominator + 1)


def solve_assignment(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching of rows (instances) to columns (queries).

    Columns with exactly identical costs are interchangeable; among them the
    lowest query indices are used, so ties resolve deterministically.
    Returns (query_idx, gt_idx) ordered by gt index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n_gt, n_q = cost.shape
    if n_gt > n_q:
        raise ValueError(
            f"{n_gt} ground-truth instances exceed {n_q} queries; increase num_queries in the model config"
        )
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost)
    col_of_row = dict(zip(rows.tolist(), cols.tolist()))

    groups: dict[bytes, list[int]] = {}
    for q in range(n_q):
        groups.setdefault(cost[:, q].tobytes(), []).append(q)
    for members in groups.values():
        if len(members) < 2:
            continue
        member_set = set(members)
        used_rows = sorted(r for r, c in col_of_row.items() if c in member_set)
        for r, q in zip(used_rows, members):
            col_of_row[r] = q

    gt_idx = np.arange(n_gt)
    query_idx = np.array([col_of_row[r] for r in gt_idx], dtype=np.int64)
    return query_idx, gt_idx


def matching_cost(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_masks: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """(N_gt, Q) cost: w_cls * -log p(class) + w_bce * BCE + w_dice * dice."""
    log_probs = class_logits.log_softmax(-1)  # (Q, K+1)
    cls_cost = -log_probs[:, gt_labels]  # (Q, N)
    flat_pred = mask_logits.flatten(1)
    flat_gt = gt_masks.flatten(1).to(flat_pred.dtype)
    cost = (
        weights.cls * cls_cost
        + weights.mask_bce * sigmoid_bce_cost(flat_pred, flat_gt)
        + weights.mask_dice * dice_cost(flat_pred, flat_gt)
    )
    return cost.T


@torch.no_grad()
def hungarian_match(
    class_logits: torch.Tensor,
    mask_logits: torch.Tensor,
    gt_labels: torch.Tensor,
    gt_masks: torch.Tensor,
    weights: LossWeights | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Match one image's queries to its instances; unmatched queries mean no-object.

    ``mask_logits`` must already be at the ground-truth resolution.
    """
    weights = weights or LossWeights()
    num_queries = class_logits.shape[0]
    if gt_labels.numel() > num_queries:
        raise ValueError(
            f"{gt_labels.numel()} ground-truth instances exceed {num_queries} queries; "
            "increase num_queries in the model config"
        )
    cost = matching_cost(class_logits, mask_logits, gt_labels, gt_masks, weights)
    return solve_assignment(cost.double().cpu().numpy())


def soft_iou(probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-sample soft IoU over all but the batch dimension."""
    p, t = probs.flatten(1), target.flatten(1)
    inter = (p * t).sum(-1)
    union = p.sum(-1) + t.sum(-1) - inter
    return (inter + IOU_EPS) / (union + IOU_EPS)


def downsample_binary(binary_mask: torch.Tensor, stride: int) -> torch.Tensor:
    """Max-pool a (B, 1, H, W) binary mask by ``stride`` so thin objects survive."""
    return F.max_pool2d(binary_mask, kernel_size=stride, stride=stride)


def pseudo_mask_terms(maps: PseudoMaskSet, binary_mask: torch.Tensor) -> list[dict[str, torch.Tensor]]:
    """BCE, 1 - soft IoU and L1 at each scale against the pooled binary mask."""
    terms = []
    for stride, probs in zip(SCALE_STRIDES, maps.maps):
        target = downsample_binary(binary_mask, stride)
        if target.shape != probs.shape:
            raise ValueError(f"pseudo mask {tuple(probs.shape)} vs target {tuple(target.shape)} at stride {stride}")
        terms.append(
            {
                "bce": F.binary_cross_entropy(probs, target),
                "iou": (1 - soft_iou(probs, target)).mean(),
                "l1": (probs - target).abs().mean(),
            }
        )
    return terms


def compute_losses(
    pred: Prediction,
    gt_labels: list[torch.Tensor],
    gt_masks: list[torch.Tensor],
    pseudo_masks_prior: PseudoMaskSet | None = None,
    pseudo_masks_update: list[PseudoMaskSet] | None = None,
    binary_mask: torch.Tensor | None = None,
    weights: LossWeights | None = None,
    matches: list[tuple[np.ndarray, np.ndarray]] | None = None,
) -> LossReport:
    """Set-prediction losses plus pseudo-mask supervision for one batch.

    gt_masks[i] is (N_i, H, W) at full resolution; predicted masks are
    bilinearly upsampled to it. ``binary_mask`` is (B, 1, H, W) in {0, 1}.
    Pass ``matches`` to reuse a precomputed assignment.
    """
    weights = weights or LossWeights()
    class_logits, batch = pred.class_logits, pred.class_logits.shape[0]
    num_classes = class_logits.shape[-1] - 1
    full_size = tuple(gt_masks[0].shape[-2:]) if gt_masks else None
    mask_logits = pred.upsampled_masks(full_size) if full_size else pred.mask_logits

    if matches is None:
        matches = [
            hungarian_match(class_logits[i], mask_logits[i], gt_labels[i], gt_masks[i], weights)
            for i in range(batch)
        ]

    target_classes = torch.full(class_logits.shape[:2], num_classes, dtype=torch.long)
    matched_pred, matched_gt = [], []
    for i, (q_idx, g_idx) in enumerate(matches):
        q_idx_t = torch.as_tensor(q_idx, dtype=torch.long)
        g_idx_t = torch.as_tensor(g_idx, dtype=torch.long)
        target_classes[i, q_idx_t] = gt_labels[i][g_idx_t].long()
        matched_pred.append(mask_logits[i, q_idx_t])
        matched_gt.append(gt_masks[i][g_idx_t].to(mask_logits.dtype))

    class_weight = torch.ones(num_classes + 1, dtype=class_logits.dtype)
    class_weight[-1] = weights.no_object
    cls_loss = F.cross_entropy(class_logits.flatten(0, 1), target_classes.flatten(), weight=class_weight)

    pred_flat = torch.cat(matched_pred).flatten(1) if matched_pred else mask_logits.new_zeros(0, 1)
    gt_flat = torch.cat(matched_gt).flatten(1) if matched_gt else mask_logits.new_zeros(0, 1)
    num_matched = max(pred_flat.shape[0], 1)
    if pred_flat.shape[0]:
        mask_bce = F.binary_cross_entropy_with_logits(pred_flat, gt_flat, reduction="none").mean(1).sum() / num_matched
        probs = pred_flat.sigmoid()
        dice = 1 - (2 * (probs * gt_flat).sum(1) + 1) / (probs.sum(1) + gt_flat.sum(1) + 1)
        mask_dice = dice.sum() / num_matched
    else:
        mask_bce = mask_dice = mask_logits.sum() * 0

    zero = class_logits.new_zeros(())
    pm = {"bce": zero, "iou": zero, "l1": zero}
    detail: dict[str, float] = {}
    sites: list[tuple[str, PseudoMaskSet]] = []
    if pseudo_masks_prior is not None:
        sites.append(("prior", pseudo_masks_prior))
    for b, maps in enumerate(pseudo_masks_update or []):
        sites.append((f"update{b + 1}", maps))
    if sites and binary_mask is None:
        raise ValueError("pseudo-mask supervision needs the binary mask")
    for site, maps in sites:
        for k, terms in enumerate(pseudo_mask_terms(maps, binary_mask)):
            for name, value in terms.items():
                pm[name] = pm[name] + value
                detail[f"{site}/s{k + 1}/{name}"] = float(value.detach())

    components = {
        "cls": cls_loss,
        "mask_bce": mask_bce,
        "mask_dice": mask_dice,
        "pm_bce": pm["bce"],
        "pm_iou": pm["iou"],
        "pm_l1": pm["l1"],
    }
    total = sum(getattr(weights, name) * components[name] for name in COMPONENTS)
    return LossReport(components, weights, total, detail)
