"""Training, evaluation, ablation and checkpoints."""
from __future__ import annotations

import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig, from_mapping, parse_text, replace
from .criterion import compute_losses
from .data import CocoDataset, SegmentationDataset, collate, synth_generate
from .evaluation import APReport, GroundTruth, ScoredMask, mask_ap
from .model import DiveSeg, count_parameters, module_sizes, trainable_parameters

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ABLATION_LABELS = {
    "full": "Full Model",
    "no-aligner": "w/o AquaStyle Aligner",
    "no-prompter": "w/o ObjectPrior Prompter",
    "frozen-baseline": "DINOv2+Mask2Former",
}


def lr_factor(iteration: int, optim) -> float:
    """Linear warm-up, then x``decay`` at each milestone reached."""
    factor = optim.decay ** sum(iteration >= m for m in optim.milestones)
    warm = optim.warmup_iters
    if warm and iteration < warm:
        factor *= (iteration + 1) / warm
    return factor


def lr_at(iteration: int, optim) -> float:
    return optim.lr * lr_factor(iteration, optim)


# ---------------------------------------------------------------------------
# data


def build_dataset(config: RunConfig, split: str = "train") -> tuple[SegmentationDataset, tuple[str, ...]]:
    """Synthetic splits come from ``config.seed``: train = indices [0, n), val = [n, n + m)."""
    m, d = config.model, config.data
    if d.source == "synth":
        if split == "train" or d.eval_split == "train":
            samples = synth_generate(config.seed, d.train_count, m.image_size, m.num_classes)
        else:
            samples = synth_generate(config.seed, d.eval_count, m.image_size, m.num_classes, start=d.train_count)
        names = tuple(f"class{k}" for k in range(m.num_classes))
    else:
        coco = CocoDataset(d.source, m.image_size, d.class_agnostic, d.missing_images, split=split)
        samples = list(coco)
        names = coco.class_names
    if d.class_agnostic:
        names = ("object",)
    return SegmentationDataset(samples, class_agnostic=d.class_agnostic), names


class BatchStream:
    """Endless seeded stream of shuffled batches."""

    def __init__(self, dataset: SegmentationDataset, batch_size: int, seed: int):
        self.dataset = dataset
        self.batch_size = batch_size
        self.rng = np.random.default_rng([seed, 0xDA7A])
        self.queue: list[int] = []

    def next_indices(self) -> list[int]:
        while len(self.queue) < self.batch_size:
            self.queue += self.rng.permutation(len(self.dataset)).tolist()
        out, self.queue = self.queue[: self.batch_size], self.queue[self.batch_size :]
        return out

    def __next__(self) -> dict:
        return collate([self.dataset[i] for i in self.next_indices()])


def loss_for_batch(model: DiveSeg, batch: dict, config: RunConfig):
    out = model(batch["image"], batch["style"])
    return compute_losses(
        out.prediction,
        batch["labels"],
        batch["masks"],
        out.prior_masks,
        out.update_masks,
        batch["binary_mask"],
        config.loss,
    )


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_state(model: DiveSeg, optimizer, iteration: int, config: RunConfig) -> dict:
    trainable = dict(trainable_parameters(model))
    frozen = [n for n in trainable if n.startswith("backbone.")]
    if frozen:
        raise RuntimeError(f"refusing to serialize frozen backbone tensors: {frozen[:3]}")
    return {
        "format_version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": config.to_text(),
        "trainable": {n: p.detach().clone() for n, p in trainable.items()},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
    }


def save_checkpoint(state: dict, path: str | Path) -> Path:
    if any(n.startswith("backbone.") for n in state["trainable"]):
        raise RuntimeError("checkpoint must not contain backbone tensors")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save(state, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path: str | Path) -> dict:
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format {state.get('format_version')!r}")
    return state


def config_of(state: dict) -> RunConfig:
    return from_mapping(parse_text(state["config"]))


def model_from_checkpoint(state: dict) -> tuple[DiveSeg, RunConfig]:
    """Rebuild the backbone from its source, then restore the trainable tensors."""
    config = config_of(state)
    model = DiveSeg(config.model, seed=config.seed)
    missing = model.load_state_dict(state["trainable"], strict=False)
    not_backbone = [k for k in missing.missing_keys if not k.startswith("backbone.")]
    if not_backbone or missing.unexpected_keys:
        raise ValueError(f"checkpoint does not fit the model: missing {not_backbone}, unexpected {missing.unexpected_keys}")
    return model, config


def make_optimizer(model: DiveSeg, config: RunConfig):
    params = [p for _, p in trainable_parameters(model)]
    optimizer = torch.optim.AdamW(params, lr=config.optim.lr, weight_decay=config.optim.weight_decay)
    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda it: lr_factor(it, config.optim))
    return optimizer, scheduler


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: DiveSeg
    checkpoint: dict
    checkpoint_path: Path | None
    losses: list[dict[str, float]] = field(default_factory=list)
    class_names: tuple[str, ...] = ()


class NonFiniteLoss(RuntimeError):
    pass


def train(config: RunConfig, save: bool = True, dataset: SegmentationDataset | None = None) -> TrainResult:
    torch.manual_seed(config.seed)
    names: tuple[str, ...] = ()
    if dataset is None:
        dataset, names = build_dataset(config, "train")  # fails before any update
    model = DiveSeg(config.model, seed=config.seed)
    model.train()
    optimizer, scheduler = make_optimizer(model, config)
    stream = BatchStream(dataset, config.optim.batch_size, config.seed)
    out_dir = Path(config.output_dir)
    log_path = out_dir / "metrics.log"
    if save:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.cfg").write_text(config.to_text())

    losses = []
    for it in range(config.optim.iterations):
        indices = stream.next_indices()
        batch = collate([dataset[i] for i in indices])
        report = loss_for_batch(model, batch, config)
        values = report.as_floats()
        if not all(math.isfinite(v) for v in values.values()):
            dump = {"iteration": it, "batch_indices": indices, "losses": values}
            if save:
                (out_dir / "nonfinite_batch.json").write_text(json.dumps(dump, indent=2))
            raise NonFiniteLoss(f"non-finite loss at iteration {it} on samples {indices}: {values}")
        optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        optimizer.step()
        scheduler.step()
        values["lr"] = lr_at(it, config.optim)
        losses.append(values)
        if save and (it % config.log_every == 0 or it == config.optim.iterations - 1):
            with log_path.open("a") as fh:
                fh.write(f"{it} " + " ".join(f"{k}={v:.6g}" for k, v in values.items()) + "\n")
        if save and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(checkpoint_state(model, optimizer, it + 1, config), out_dir / f"checkpoint_{it + 1:06d}.pt")

    state = checkpoint_state(model, optimizer, config.optim.iterations, config)
    path = save_checkpoint(state, out_dir / "checkpoint_final.pt") if save else None
    return TrainResult(model, state, path, losses, names)


# ---------------------------------------------------------------------------
# evaluation


@torch.no_grad()
def predict(model: DiveSeg, batch: dict, mode: str) -> list[list[ScoredMask]]:
    """Per-query predictions: binarized upsampled mask, label and score.

    The score is the class probability times the mean mask probability inside
    the binarized mask. In agnostic mode the class probability is the max over
    the foreground classes and every label is 0.
    """
    model.eval()
    out = model(batch["image"], batch["style"])
    size = tuple(batch["image"].shape[-2:])
    probs = out.prediction.class_logits.softmax(-1)[..., :-1]
    mask_probs = out.prediction.upsampled_masks(size).sigmoid()
    results = []
    for b in range(probs.shape[0]):
        fg_prob, label = probs[b].max(-1)
        binary = mask_probs[b] > 0.5
        area = binary.flatten(1).sum(-1)
        mask_score = (mask_probs[b] * binary).flatten(1).sum(-1) / area.clamp(min=1)
        preds = []
        for q in range(probs.shape[1]):
            if area[q] == 0:
                continue
            preds.append(
                ScoredMask(
                    mask=binary[q].numpy(),
                    label=0 if mode == "agnostic" else int(label[q]),
                    score=float(min(max(fg_prob[q] * mask_score[q], 0.0), 1.0)),
                )
            )
        results.append(preds)
    return results


def evaluate(
    model: DiveSeg,
    dataset: SegmentationDataset,
    mode: str = "multi",
    batch_size: int = 4,
    class_names: tuple[str, ...] = (),
) -> APReport:
    if mode not in ("agnostic", "multi"):
        raise ValueError("mode must be 'agnostic' or 'multi'")
    if mode == "multi":
        labels = {int(l) for s in dataset.samples for l in s.labels}
        k = model.config.num_classes
        if dataset.class_agnostic or (labels and max(labels) >= k) or (class_names and len(class_names) != k):
            raise ValueError(
                f"multi-class evaluation needs dataset labels within the checkpoint's {k} classes"
            )
    predictions, truths = [], []
    for start in range(0, len(dataset), batch_size):
        batch = collate([dataset[i] for i in range(start, min(start + batch_size, len(dataset)))])
        predictions += predict(model, batch, mode)
        for masks, labels in zip(batch["masks"], batch["labels"]):
            gt_labels = labels.numpy() if mode == "multi" else np.zeros(len(labels), dtype=np.int64)
            truths.append(GroundTruth(masks.numpy().astype(bool), gt_labels))
    names = ("object",) if mode == "agnostic" else class_names
    return mask_ap(predictions, truths, class_names=names)


# ---------------------------------------------------------------------------
# ablation

VARIANT_SWITCHES = {
    "full": {},
    "no-aligner": {"model.use_aligner": False},
    "no-prompter": {"model.use_prompter": False},
    "frozen-baseline": {"model.use_aligner": False, "model.use_prompter": False},
}


def expected_param_delta(config: RunConfig, variant: str) -> int:
    """Closed-form count of trainable parameters a variant removes from the full model."""
    sizes = module_sizes(config.model)
    aligner = 4 * sizes["aligner"] + sizes["style_encoder"]
    prompter = sizes["prompter"] + sizes["decoder_prior_proj"]
    return {"full": 0, "no-aligner": aligner, "no-prompter": prompter, "frozen-baseline": aligner + prompter}[variant]


@dataclass
class AblationRow:
    variant: str
    label: str
    trainable_params: int
    param_delta: int
    expected_delta: int
    report: APReport | None


@dataclass
class AblationReport:
    rows: list[AblationRow]

    def table(self) -> str:
        lines = [f"{'Methods':<28}{'Params':>10}{'mAP':>8}{'AP50':>8}{'AP75':>8}"]
        for r in self.rows:
            rep = r.report
            scores = (
                f"{100 * rep.mAP:8.1f}{100 * rep.AP50:8.1f}{100 * rep.AP75:8.1f}" if rep else f"{'-':>8}" * 3
            )
            lines.append(f"{r.label:<28}{r.trainable_params:>10}{scores}")
        return "\n".join(lines)


def ablate(
    config: RunConfig,
    variants=("no-aligner", "no-prompter", "frozen-baseline"),
    mode: str = "multi",
    save: bool = True,
) -> AblationReport:
    """Train the full model and each variant with identical seed and data."""
    base = config.model
    if not (base.use_aligner and base.use_prompter):
        config = replace(config, **{"model.use_aligner": True, "model.use_prompter": True})
    rows = []
    full_params = None
    train_set, names = build_dataset(config, "train")
    eval_set, _ = build_dataset(config, "val")
    for variant in ("full", *[v for v in variants if v != "full"]):
        if variant not in VARIANT_SWITCHES:
            raise ValueError(f"unknown ablation variant {variant!r}")
        changes = dict(VARIANT_SWITCHES[variant])
        changes["output_dir"] = str(Path(config.output_dir) / variant)
        cfg = replace(config, **changes)
        result = train(cfg, save=save, dataset=train_set)
        n_params = count_parameters(trainable_parameters(result.model))
        if full_params is None:
            full_params = n_params
        report = evaluate(result.model, eval_set, mode, class_names=names)
        rows.append(
            AblationRow(variant, ABLATION_LABELS[variant], n_params, full_params - n_params,
                        expected_param_delta(config, variant), report)
        )
        logger.info("ablation %s: %d trainable params", variant, n_params)
    ablation = AblationReport(rows)
    if save:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.txt").write_text(ablation.table() + "\n")
    return ablation
