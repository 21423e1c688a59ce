"""Synthetic underwater scenes, COCO-format ingestion/export, binary masks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage
from skimage import draw

from .fourier_style import style_image_of

logger = logging.getLogger(__name__)

UIIS_CLASSES = ("Fish", "Reefs", "Aquatic plants", "Wrecks/Ruins", "Human divers", "Robots", "Sea-floor")

# (shape, base RGB) per synthetic class
SYNTH_FAMILIES = (
    ("ellipse", (0.95, 0.55, 0.15)),
    ("triangle", (0.20, 0.80, 0.30)),
    ("blob", (0.90, 0.20, 0.65)),
    ("star", (0.95, 0.95, 0.30)),
    ("rectangle", (0.30, 0.90, 0.95)),
    ("diamond", (0.90, 0.15, 0.15)),
    ("hexagon", (0.50, 0.30, 0.90)),
)


@dataclass
class InstanceSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    masks: np.ndarray  # (N, H, W) bool
    labels: np.ndarray  # (N,) int64
    binary_mask: np.ndarray = field(default=None)  # (H, W) uint8, union of masks
    image_id: int = 0

    def __post_init__(self) -> None:
        h, w = self.image.shape[:2]
        self.masks = np.asarray(self.masks, dtype=bool).reshape(-1, h, w)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.masks) != len(self.labels):
            raise ValueError(f"{len(self.masks)} masks but {len(self.labels)} labels")
        if self.binary_mask is None:
            self.binary_mask = derive_binary_mask(self.masks, (h, w))

    def check(self) -> None:
        """Raise if the sample violates its invariants."""
        if not np.all(np.isfinite(self.image)) or self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must be finite and within [0, 1]")
        if np.any(self.masks.reshape(len(self.masks), -1).sum(1) == 0):
            raise ValueError("every instance mask needs at least one foreground pixel")
        if not np.array_equal(self.binary_mask, derive_binary_mask(self.masks, self.image.shape[:2])):
            raise ValueError("binary mask is not the union of the instance masks")


@dataclass
class DatasetManifest:
    split: str
    sample_count: int
    class_names: tuple[str, ...] = UIIS_CLASSES
    source: str = "synthetic"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.sample_count <= 0:
            raise ValueError("dataset has no samples")
        if len(self.class_names) < 1:
            raise ValueError("need at least one class")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def derive_binary_mask(masks: Sequence[np.ndarray] | np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    """Pixelwise OR of instance masks; all zeros when there are none."""
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not masks:
        if shape is None:
            raise ValueError("shape is required for an empty instance list")
        return np.zeros(shape, dtype=np.uint8)
    shapes = {m.shape for m in masks}
    if len(shapes) != 1 or (shape is not None and shapes != {tuple(shape)}):
        raise ValueError(f"instance masks disagree in shape: {sorted(shapes)}")
    return np.logical_or.reduce(masks).astype(np.uint8)


# ---------------------------------------------------------------------------
# synthetic scenes


def _regular_polygon(cy, cx, radii, angle0, size):
    n = len(radii)
    angles = angle0 + 2 * np.pi * np.arange(n) / n
    rows = cy + np.asarray(radii) * np.sin(angles)
    cols = cx + np.asarray(radii) * np.cos(angles)
    out = np.zeros((size, size), dtype=bool)
    rr, cc = draw.polygon(rows, cols, shape=(size, size))
    out[rr, cc] = True
    return out


def _shape_mask(kind: str, rng: np.random.Generator, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    angle = rng.uniform(0, 2 * np.pi)
    if kind == "ellipse":
        out = np.zeros((size, size), dtype=bool)
        rr, cc = draw.ellipse(cy, cx, r, r * rng.uniform(0.45, 0.7), shape=(size, size), rotation=angle)
        out[rr, cc] = True
        return out
    if kind == "triangle":
        return _regular_polygon(cy, cx, [r] * 3, angle, size)
    if kind == "star":
        return _regular_polygon(cy, cx, [r, 0.5 * r] * 5, angle, size)
    if kind == "rectangle":
        a, b = r, r * rng.uniform(0.35, 0.55)
        corners = np.array([[-a, -b], [a, -b], [a, b], [-a, b]])
        rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
        pts = corners @ rot.T
        out = np.zeros((size, size), dtype=bool)
        rr, cc = draw.polygon(cy + pts[:, 1], cx + pts[:, 0], shape=(size, size))
        out[rr, cc] = True
        return out
    if kind == "diamond":
        return _regular_polygon(cy, cx, [r, 0.55 * r] * 2, angle, size)
    if kind == "hexagon":
        return _regular_polygon(cy, cx, [r] * 6, angle, size)
    if kind == "blob":
        out = np.zeros((size, size), dtype=bool)
        for _ in range(rng.integers(3, 6)):
            oy, ox = rng.uniform(-0.45, 0.45, size=2) * r
            rr, cc = draw.disk((cy + oy, cx + ox), r * rng.uniform(0.4, 0.6), shape=(size, size))
            out[rr, cc] = True
        return out
    raise ValueError(f"unknown shape kind {kind!r}")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(4, 4, 3))
    smooth = ndimage.zoom(coarse, (size / 4, size / 4, 1), order=3)[:size, :size]
    base = np.array([0.55, 0.5, 0.4]) + rng.uniform(-0.08, 0.08, size=3)
    grain = rng.normal(0.0, 0.03, size=(size, size, 1))
    ramp = np.linspace(0.08, -0.08, size)[:, None, None]
    return np.clip(base + 0.2 * (smooth - 0.5) + grain + ramp, 0.2, 0.9)


def underwater_cast(clean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Depth-dependent per-channel attenuation, blue-green haze, mild blur.

    Red is attenuated most and blue least; the haze has no red component, so
    the red channel can only lose energy.
    """
    size = clean.shape[0]
    beta = np.array([rng.uniform(0.6, 0.9), rng.uniform(0.2, 0.35), rng.uniform(0.06, 0.12)])
    d0 = rng.uniform(0.8, 1.5)
    depth = d0 + rng.uniform(0.3, 1.0) * d0 * np.linspace(0, 1, size)[:, None, None]
    transmission = np.exp(-beta * depth)  # (H, 1, 3)
    haze = np.array([0.0, rng.uniform(0.3, 0.45), rng.uniform(0.4, 0.55)])
    cast = clean * transmission + haze * (1 - transmission)
    cast = ndimage.gaussian_filter(cast, sigma=(0.7, 0.7, 0), mode="nearest")
    return np.clip(cast, 0.0, 1.0)


def render_scene(seed: int, index: int, image_size: int = 128, num_classes: int = 4) -> tuple[InstanceSample, np.ndarray]:
    """One synthetic sample plus its pre-cast image. Pure function of its arguments."""
    if image_size % 32:
        raise ValueError(f"image_size must be divisible by 32, got {image_size}")
    if not 1 <= num_classes <= len(SYNTH_FAMILIES):
        raise ValueError(f"num_classes must be in 1..{len(SYNTH_FAMILIES)}")
    rng = np.random.default_rng([seed, index])
    s = image_size
    clean = _background(rng, s)
    min_area = (s // 16) ** 2
    visible: list[np.ndarray] = []
    labels: list[int] = []
    wanted = int(rng.integers(1, 5))
    attempts = 0
    while len(visible) < wanted and attempts < 60:
        attempts += 1
        cls = int(rng.integers(num_classes))
        kind, color = SYNTH_FAMILIES[cls]
        r = rng.uniform(0.11, 0.22) * s
        cy, cx = rng.uniform(r, s - r, size=2)
        shape = _shape_mask(kind, rng, cy, cx, r, s)
        if shape.sum() < min_area:
            continue
        remaining = [m & ~shape for m in visible]
        if any(rem.sum() < max(min_area, 0.6 * m.sum()) for rem, m in zip(remaining, visible)):
            continue
        visible = remaining + [shape]
        labels.append(cls)
        tint = np.clip(np.array(color) + rng.uniform(-0.07, 0.07, size=3), 0, 1)
        shade = 1 + 0.08 * rng.normal(size=(s, s, 1))
        clean = np.where(shape[..., None], np.clip(tint * shade, 0, 1), clean)
    if not visible:  # fall back to one centered ellipse
        kind, color = SYNTH_FAMILIES[0]
        shape = _shape_mask(kind, rng, s / 2, s / 2, 0.2 * s, s)
        visible, labels = [shape], [0]
        clean = np.where(shape[..., None], np.array(color), clean)
    cast = underwater_cast(clean, rng)
    sample = InstanceSample(
        image=cast.astype(np.float32),
        masks=np.stack(visible),
        labels=np.array(labels),
        image_id=index,
    )
    return sample, clean.astype(np.float32)


def synth_generate(seed: int, count: int, image_size: int = 128, num_classes: int = 4, start: int = 0) -> list[InstanceSample]:
    return [render_scene(seed, i, image_size, num_classes)[0] for i in range(start, start + count)]


def synth_manifest(seed: int, count: int, num_classes: int = 4, split: str = "train") -> DatasetManifest:
    names = tuple(f"{SYNTH_FAMILIES[k][0]}" for k in range(num_classes))
    return DatasetManifest(split=split, sample_count=count, class_names=names, source="synthetic", seed=seed)


# ---------------------------------------------------------------------------
# COCO run-length encoding (column-major counts, compressed string form)


def rle_encode(mask: np.ndarray) -> dict:
    """Binary (H, W) mask -> COCO compressed RLE ``{"size": [h, w], "counts": str}``."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    flat = mask.flatten(order="F").astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        counts = [0] + counts
    return {"size": [h, w], "counts": _counts_to_string(counts)}


def _counts_to_string(counts: list[int]) -> str:
    chars = []
    for i, count in enumerate(counts):
        x = int(count)
        if i > 2:
            x -= int(counts[i - 2])
        more = True
        while more:
            c = x & 0x1F
            x >>= 5
            more = (x != -1) if (c & 0x10) else (x != 0)
            if more:
                c |= 0x20
            chars.append(chr(c + 48))
    return "".join(chars)


def _string_to_counts(s: str) -> list[int]:
    counts: list[int] = []
    p = 0
    while p < len(s):
        x, k, more = 0, 0, True
        while more:
            c = ord(s[p]) - 48
            x |= (c & 0x1F) << (5 * k)
            more = bool(c & 0x20)
            p += 1
            k += 1
            if not more and (c & 0x10):
                x |= -1 << (5 * k)
        if len(counts) > 2:
            x += counts[-2]
        counts.append(x)
    return counts


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = rle["counts"]
    if isinstance(counts, (bytes, str)):
        counts = _string_to_counts(counts.decode() if isinstance(counts, bytes) else counts)
    if sum(counts) != h * w:
        raise ValueError(f"RLE counts sum to {sum(counts)}, expected {h * w}")
    values = np.zeros(len(counts), dtype=bool)
    values[1::2] = True
    flat = np.repeat(values, counts)
    return flat.reshape((w, h)).T.copy()


def polygon_to_mask(polygons: Sequence[Sequence[float]], height: int, width: int) -> np.ndarray:
    """Rasterize COCO polygons (x, y pairs); a pixel is on when its center is inside."""
    out = np.zeros((height, width), dtype=bool)
    for poly in polygons:
        pts = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 3:
            continue
        rr, cc = draw.polygon(pts[:, 1] - 0.5, pts[:, 0] - 0.5, shape=(height, width))
        out[rr, cc] = True
    return out


def decode_segmentation(segmentation, height: int, width: int) -> np.ndarray:
    if isinstance(segmentation, list):
        return polygon_to_mask(segmentation, height, width)
    if isinstance(segmentation, dict):
        mask = rle_decode(segmentation)
        if mask.shape != (height, width):
            raise ValueError(f"RLE size {mask.shape} differs from image size {(height, width)}")
        return mask
    raise ValueError(f"unsupported segmentation type {type(segmentation).__name__}")


# ---------------------------------------------------------------------------
# COCO directories


def _find_annotation_file(root: Path) -> Path:
    candidates = [root / "annotations.json"]
    candidates += sorted(root.glob("*.json")) + sorted((root / "annotations").glob("*.json"))
    for path in candidates:
        if path.is_file():
            return path
    raise FileNotFoundError(f"no COCO annotation file (annotations.json) under {root}")


def _resize_image(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    pil = Image.fromarray(np.round(image * 255).astype(np.uint8))
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float32) / 255.0


def _resize_mask(mask: np.ndarray, size: int) -> np.ndarray:
    if mask.shape == (size, size):
        return mask
    pil = Image.fromarray(mask.astype(np.uint8) * 255)
    return np.asarray(pil.resize((size, size), Image.NEAREST)) > 127


def load_image(path: str | Path) -> np.ndarray:
    """8-bit raster -> (H, W, 3) float32 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


class CocoDataset:
    """COCO instance-format directory: ``annotations.json`` plus ``images/``.

    Images without annotations are excluded. ``missing_images`` is ``"fail"``
    (default) or ``"skip"``.
    """

    def __init__(
        self,
        root: str | Path,
        image_size: int = 128,
        class_agnostic: bool = False,
        missing_images: str = "fail",
        split: str = "train",
    ):
        if missing_images not in ("fail", "skip"):
            raise ValueError("missing_images must be 'fail' or 'skip'")
        if image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {image_size}")
        self.root = Path(root)
        self.image_size = image_size
        self.class_agnostic = class_agnostic
        ann_path = _find_annotation_file(self.root)
        try:
            coco = json.loads(ann_path.read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid annotation file {ann_path}: {exc}") from exc
        for key in ("images", "annotations", "categories"):
            if key not in coco:
                raise ValueError(f"annotation file {ann_path} lacks a '{key}' list")
        image_dir = self.root / "images"
        self.image_dir = image_dir if image_dir.is_dir() else self.root

        cats = sorted(coco["categories"], key=lambda c: c["id"])
        if class_agnostic:
            self.class_names: tuple[str, ...] = ("object",)
            self.category_map = {c["id"]: 0 for c in cats}
        else:
            self.class_names = tuple(c["name"] for c in cats)
            self.category_map = {c["id"]: i for i, c in enumerate(cats)}

        by_image: dict[int, list[dict]] = {}
        for ann in coco["annotations"]:
            if ann.get("iscrowd", 0):
                continue
            by_image.setdefault(ann["image_id"], []).append(ann)
        self.records = []
        for info in sorted(coco["images"], key=lambda im: im["id"]):
            anns = by_image.get(info["id"], [])
            if not anns:
                continue
            path = self.image_dir / info["file_name"]
            if not path.is_file():
                if missing_images == "fail":
                    raise FileNotFoundError(f"image {path} referenced by {ann_path} is missing")
                logger.warning("skipping missing image %s", path)
                continue
            self.records.append((info, anns, path))
        self.manifest = DatasetManifest(
            split=split,
            sample_count=len(self.records),
            class_names=self.class_names,
            source="coco-dir",
        )

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int) -> InstanceSample:
        info, anns, path = self.records[idx]
        image = load_image(path)
        h, w = image.shape[:2]
        masks, labels = [], []
        for ann in anns:
            mask = _resize_mask(decode_segmentation(ann["segmentation"], h, w), self.image_size)
            if not mask.any():
                logger.warning("instance %s of image %s vanished after resize; dropped", ann.get("id"), info["id"])
                continue
            masks.append(mask)
            labels.append(self.category_map[ann["category_id"]])
        s = self.image_size
        return InstanceSample(
            image=_resize_image(image, s),
            masks=np.stack(masks) if masks else np.zeros((0, s, s), dtype=bool),
            labels=np.array(labels, dtype=np.int64),
            image_id=int(info["id"]),
        )

    def __iter__(self) -> Iterator[InstanceSample]:
        for i in range(len(self)):
            sample = self[i]
            if len(sample.labels):
                yield sample


def load_coco_dataset(root: str | Path, image_size: int = 128, class_agnostic: bool = False, missing_images: str = "fail"):
    ds = CocoDataset(root, image_size, class_agnostic, missing_images)
    return ds.manifest, iter(ds)


def export_coco(samples: Sequence[InstanceSample], out_dir: str | Path, class_names: Sequence[str]) -> Path:
    """Write samples as PNG images plus a COCO ``annotations.json`` with RLE masks."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 1
    for i, sample in enumerate(samples):
        name = f"{i:06d}.png"
        Image.fromarray(np.round(sample.image * 255).astype(np.uint8)).save(out / "images" / name)
        h, w = sample.image.shape[:2]
        images.append({"id": i + 1, "file_name": name, "height": h, "width": w})
        for mask, label in zip(sample.masks, sample.labels):
            ys, xs = np.nonzero(mask)
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i + 1,
                    "category_id": int(label) + 1,
                    "segmentation": rle_encode(mask),
                    "area": int(mask.sum()),
                    "bbox": [int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1)],
                    "iscrowd": 0,
                }
            )
            ann_id += 1
    categories = [{"id": k + 1, "name": n} for k, n in enumerate(class_names)]
    path = out / "annotations.json"
    path.write_text(json.dumps({"images": images, "annotations": annotations, "categories": categories}))
    return path


# ---------------------------------------------------------------------------
# torch side


class SegmentationDataset(torch.utils.data.Dataset):
    """Wraps samples as tensors; style images are computed once and cached."""

    def __init__(self, samples: Sequence[InstanceSample], class_agnostic: bool = False):
        self.samples = [s for s in samples if len(s.labels)]
        if not self.samples:
            raise ValueError("dataset has no samples with instances")
        self.class_agnostic = class_agnostic
        self._style: dict[int, torch.Tensor] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def style(self, idx: int) -> torch.Tensor:
        if idx not in self._style:
            self._style[idx] = torch.from_numpy(style_image_of(self.samples[idx].image)).permute(2, 0, 1)
        return self._style[idx]

    def __getitem__(self, idx: int) -> dict:
        s = self.samples[idx]
        labels = torch.from_numpy(s.labels)
        if self.class_agnostic:
            labels = torch.zeros_like(labels)
        return {
            "index": idx,
            "image": torch.from_numpy(np.ascontiguousarray(s.image)).permute(2, 0, 1).float(),
            "style": self.style(idx).float(),
            "masks": torch.from_numpy(s.masks).float(),
            "labels": labels,
            "binary_mask": torch.from_numpy(s.binary_mask).float()[None],
        }


def collate(items: list[dict]) -> dict:
    return {
        "index": [it["index"] for it in items],
        "image": torch.stack([it["image"] for it in items]),
        "style": torch.stack([it["style"] for it in items]),
        "masks": [it["masks"] for it in items],
        "labels": [it["labels"] for it in items],
        "binary_mask": torch.stack([it["binary_mask"] for it in items]),
    }
