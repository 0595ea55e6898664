"""Dataset schema, COCO-style annotation IO, per-category splitting and the
synthetic colour x shape generator used as a desk-scale benchmark."""

from __future__ import annotations

import json
import logging
import math
import os
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image

from .taxonomy import CategoryRecord, TaxonomyRegistry

logger = logging.getLogger(__name__)


class AnnotationError(ValueError):
    """Raised for malformed annotation records; carries the offending record."""

    def __init__(self, message: str, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise AnnotationError(f"non-finite box {vals}")
        if min(vals) < 0:
            raise AnnotationError(f"negative box coordinate {vals}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise AnnotationError(f"degenerate box {vals}")

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "BBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    dominant_category: str
    boxes: tuple[BBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"image {self.image_id}: non-positive size")
        if not self.boxes:
            raise AnnotationError(f"image {self.image_id}: no boxes")
        for b in self.boxes:
            if b.x_max > self.width or b.y_max > self.height:
                raise AnnotationError(f"image {self.image_id}: box {b.as_tuple()} outside image")


@dataclass(frozen=True)
class DatasetIndex:
    images: tuple[ImageRecord, ...] = ()
    curated: bool = False
    root: str = ""

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            raise AnnotationError("duplicate image ids")
        if self.curated:
            thin = {c: len(v) for c, v in self.per_category.items() if len(v) < 10}
            if thin:
                raise AnnotationError(f"curated index needs >= 10 images per category; short: {thin}")

    @property
    def per_category(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for im in self.images:
            out.setdefault(im.dominant_category, []).append(im.image_id)
        return out

    @property
    def categories(self) -> list[str]:
        return list(self.per_category)

    def __len__(self):
        return len(self.images)

    def by_id(self) -> dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def subset(self, image_ids) -> "DatasetIndex":
        keep = set(image_ids)
        return DatasetIndex(tuple(im for im in self.images if im.image_id in keep), root=self.root)

    def filter_categories(self, names) -> "DatasetIndex":
        keep = set(names)
        return DatasetIndex(tuple(im for im in self.images if im.dominant_category in keep), root=self.root)

    def resolve(self, im: ImageRecord) -> Path:
        p = Path(im.path)
        return p if p.is_absolute() or not self.root else Path(self.root) / p


def _coco_id(image_id: str):
    return int(image_id) if image_id.isdigit() else image_id


def to_coco(index: DatasetIndex, extra_categories: Sequence[str] = ()) -> dict:
    names = list(dict.fromkeys([*index.categories, *extra_categories]))
    cat_ids = {n: i + 1 for i, n in enumerate(names)}
    images, anns = [], []
    for im in index.images:
        images.append({"id": _coco_id(im.image_id), "file_name": im.path, "width": im.width, "height": im.height})
        for b in im.boxes:
            anns.append(
                {
                    "id": len(anns) + 1,
                    "image_id": _coco_id(im.image_id),
                    "category_id": cat_ids[im.dominant_category],
                    "bbox": [round(v, 4) for v in b.to_xywh()],
                }
            )
    return {"images": images, "annotations": anns, "categories": [{"id": i, "name": n} for n, i in cat_ids.items()]}


def write_annotations(index: DatasetIndex, path: str | os.PathLike, extra_categories: Sequence[str] = ()) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_coco(index, extra_categories), indent=1) + "\n", encoding="utf-8")
    return path


def load_annotations(path: str | os.PathLike, strict: bool = True, curated: bool = False) -> DatasetIndex:
    """Read a COCO-style annotation file.

    With ``strict`` off, boxes spilling past the image are clipped and
    images mixing categories keep their majority category; with it on both
    are errors.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from exc
    for key in ("images", "annotations", "categories"):
        if not isinstance(raw.get(key), list):
            raise AnnotationError(f"{path}: missing list {key!r}")
    cats = {}
    for c in raw["categories"]:
        if "id" not in c or "name" not in c:
            raise AnnotationError("malformed category", c)
        cats[c["id"]] = c["name"]

    meta = {}
    for im in raw["images"]:
        try:
            iid = str(im["id"])
            meta[iid] = (im["file_name"], int(im["width"]), int(im["height"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"malformed image record ({exc})", im) from exc
    per_image: dict[str, list[tuple[str, BBox]]] = {iid: [] for iid in meta}
    for ann in raw["annotations"]:
        try:
            iid = str(ann["image_id"])
            cname = cats[ann["category_id"]]
            x, y, w, h = (float(v) for v in ann["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"malformed annotation ({exc})", ann) from exc
        if iid not in meta:
            raise AnnotationError(f"annotation for unknown image {iid}", ann)
        _, width, height = meta[iid]
        if w <= 0 or h <= 0:
            raise AnnotationError(f"degenerate box {ann['bbox']}", ann)
        x0, y0, x1, y1 = x, y, x + w, y + h
        if x0 < 0 or y0 < 0 or x1 > width or y1 > height:
            if strict:
                raise AnnotationError(f"box {ann['bbox']} outside {width}x{height} image", ann)
            x0, y0, x1, y1 = max(x0, 0.0), max(y0, 0.0), min(x1, width), min(y1, height)
            if x1 <= x0 or y1 <= y0:
                logger.warning("dropping box %s clipped to nothing", ann["bbox"])
                continue
        per_image[iid].append((cname, BBox(x0, y0, x1, y1)))

    images = []
    for iid, (fname, width, height) in meta.items():
        entries = per_image[iid]
        if not entries:
            raise AnnotationError(f"image {iid} has no boxes", {"id": iid})
        names = [c for c, _ in entries]
        dominant = max(dict.fromkeys(names), key=names.count)
        if len(set(names)) > 1:
            if strict:
                raise AnnotationError(f"image {iid} mixes categories {sorted(set(names))}", {"id": iid})
            logger.warning("image %s mixes categories; keeping %r", iid, dominant)
        boxes = [b for c, b in entries if c == dominant]
        images.append(ImageRecord(iid, fname, width, height, dominant, tuple(boxes)))
    return DatasetIndex(tuple(images), curated=curated, root=str(path.parent))


def read_declared_stats(path: str | os.PathLike) -> dict:
    """Totals declared in an annotation file header (``info.statistics``).

    Falls back to counting the category and image lists when absent.
    """
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    declared = (raw.get("info") or {}).get("statistics") or {}
    return {
        "categories": int(declared.get("categories", len(raw.get("categories", [])))),
        "images": int(declared.get("images", len(raw.get("images", [])))),
        "annotation_type": declared.get("annotation_type", "BBOX"),
    }


def train_val_split(index: DatasetIndex, fraction: float, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    """Per category, send floor(fraction * n) images to train and the rest to val."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie strictly between 0 and 1")
    train_ids: set[str] = set()
    for ci, (cat, ids) in enumerate(sorted(index.per_category.items())):
        if len(ids) < 2:
            raise ValueError(f"category {cat!r} has {len(ids)} image(s); cannot fill both sides")
        ordered = sorted(ids)
        rng = np.random.default_rng([seed, ci])
        perm = rng.permutation(len(ordered))
        k = math.floor(fraction * len(ordered) + 1e-9)
        train_ids.update(ordered[i] for i in perm[:k])
    train = tuple(im for im in index.images if im.image_id in train_ids)
    val = tuple(im for im in index.images if im.image_id not in train_ids)
    return DatasetIndex(train, root=index.root), DatasetIndex(val, root=index.root)


@dataclass(frozen=True)
class Stats:
    categories: int
    images: int
    boxes: int
    min_images_per_category: int
    median_images_per_category: float
    max_images_per_category: int


def dataset_stats(index: DatasetIndex) -> Stats:
    counts = [len(v) for v in index.per_category.values()]
    if not counts:
        return Stats(0, 0, 0, 0, 0.0, 0)
    return Stats(
        categories=len(counts),
        images=len(index.images),
        boxes=sum(len(im.boxes) for im in index.images),
        min_images_per_category=min(counts),
        median_images_per_category=float(statistics.median(counts)),
        max_images_per_category=max(counts),
    )


# --------------------------------------------------------------------------
# synthetic colour x shape benchmark

DEFAULT_COLORS = {"red": (220, 40, 40), "green": (40, 190, 70), "blue": (50, 90, 230)}
EXTRA_COLORS = {
    "yellow": (235, 215, 40),
    "purple": (150, 60, 200),
    "orange": (245, 140, 30),
    "cyan": (40, 210, 220),
    "white": (245, 245, 245),
}
ALL_COLORS = {**DEFAULT_COLORS, **EXTRA_COLORS}
SHAPES = ("circle", "square", "triangle", "diamond")


def shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean raster of a shape evaluated at pixel centres."""
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xs - cx, ys - cy
    if shape == "circle":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "triangle":
        # apex at (cx, cy - r), base on y = cy + r spanning [cx - r, cx + r]
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    if shape == "cross":
        arm = r / 3
        return ((np.abs(dx) <= r) & (np.abs(dy) <= arm)) | ((np.abs(dy) <= r) & (np.abs(dx) <= arm))
    raise ValueError(f"unknown shape {shape!r}")


def shape_box(cx: float, cy: float, r: float) -> BBox:
    """Analytic bounding box of any shape in :func:`shape_mask`."""
    return BBox(cx - r, cy - r, cx + r, cy + r)


def mask_box(mask: np.ndarray) -> BBox:
    ys, xs = np.nonzero(mask)
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


@dataclass(frozen=True)
class SynthConfig:
    colors: Mapping[str, tuple[int, int, int]] = field(default_factory=lambda: dict(DEFAULT_COLORS))
    shapes: Sequence[str] = ("circle", "square", "triangle")
    images_per_category: int = 12
    image_size: int = 64
    objects_per_image: tuple[int, int] = (1, 2)
    radius_range: tuple[float, float] = (6.0, 12.0)
    distractor_rate: float = 0.3
    noise_std: float = 6.0
    background: str = "textured"
    exclude: Sequence[str] = ()
    seed: int = 0

    def __post_init__(self):
        if len(self.colors) * len(self.shapes) < 2:
            raise ValueError("need at least two colour x shape compositions")
        if self.images_per_category < 10:
            raise ValueError("images_per_category must be >= 10")
        if not 0 <= self.distractor_rate <= 1:
            raise ValueError("distractor_rate must lie in [0, 1]")
        lo, hi = self.objects_per_image
        if not 1 <= lo <= hi:
            raise ValueError("objects_per_image must be a range with 1 <= lo <= hi")
        if self.background not in ("textured", "plain"):
            raise ValueError("background must be 'textured' or 'plain'")
        for s in self.shapes:
            if s not in SHAPES:
                raise ValueError(f"unknown shape {s!r}")

    @property
    def categories(self) -> list[str]:
        skip = set(self.exclude)
        return [f"{c} {s}" for c in self.colors for s in self.shapes if f"{c} {s}" not in skip]

    def to_json(self) -> dict:
        d = asdict(self)
        d["colors"] = {k: list(v) for k, v in self.colors.items()}
        d["shapes"] = list(self.shapes)
        d["exclude"] = list(self.exclude)
        d["objects_per_image"] = list(self.objects_per_image)
        d["radius_range"] = list(self.radius_range)
        return d

    @classmethod
    def from_json(cls, obj: Mapping) -> "SynthConfig":
        obj = dict(obj)
        if "colors" in obj:
            obj["colors"] = {k: tuple(v) for k, v in obj["colors"].items()}
        for k in ("shapes", "exclude"):
            if k in obj:
                obj[k] = tuple(obj[k])
        for k in ("objects_per_image", "radius_range"):
            if k in obj:
                obj[k] = tuple(obj[k])
        return cls(**obj)


def _background(rng: np.random.Generator, size: int, style: str) -> np.ndarray:
    base = rng.uniform(70, 130)
    tint = rng.uniform(-12, 12, size=3)
    if style == "plain":
        img = np.broadcast_to(base + tint, (size, size, 3)).astype(np.float64)
        return img.copy()
    coarse = rng.uniform(-35, 35, size=(6, 6)).astype(np.float32)
    up = np.asarray(Image.fromarray(coarse, mode="F").resize((size, size), Image.BILINEAR), dtype=np.float64)
    return base + tint[None, None, :] + up[:, :, None]


def _place(rng, size, r_lo, r_hi, taken, tries=50):
    for _ in range(tries):
        r = rng.uniform(r_lo, r_hi)
        cx = rng.uniform(r + 1, size - r - 1)
        cy = rng.uniform(r + 1, size - r - 1)
        if all((cx - ox) ** 2 + (cy - oy) ** 2 > (r + orad + 2) ** 2 for ox, oy, orad in taken):
            return cx, cy, r
    return None


def render_image(config: SynthConfig, category: str, rng: np.random.Generator):
    """Render one image; returns (uint8 HxWx3 array, annotated boxes, raster boxes)."""
    color_name, shape = category.split(" ", 1)
    size = config.image_size
    img = _background(rng, size, config.background)
    lo, hi = config.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    taken, boxes, raster = [], [], []
    color = np.asarray(config.colors[color_name], dtype=np.float64)
    for _ in range(n_obj):
        spot = _place(rng, size, *config.radius_range, taken)
        if spot is None:
            break
        cx, cy, r = spot
        taken.append(spot)
        m = shape_mask(shape, cx, cy, r, size)
        jitter = rng.uniform(-15, 15, size=3)
        img[m] = np.clip(color + jitter, 0, 255)
        boxes.append(shape_box(cx, cy, r))
        raster.append(mask_box(m))
    if rng.random() < config.distractor_rate:
        spot = _place(rng, size, *config.radius_range, taken)
        if spot is not None:
            gray = rng.uniform(20, 60) if rng.random() < 0.5 else rng.uniform(170, 210)
            img[shape_mask("cross", *spot, size)] = gray
    img = img + rng.normal(0.0, config.noise_std, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), boxes, raster


def synthetic_taxonomy(config: SynthConfig) -> TaxonomyRegistry:
    recs = []
    for name in config.categories:
        color, shape = name.split(" ", 1)
        ranks = {
            "Kingdom": "Figura",
            "Phylum": "Planaria",
            "Class": shape,
            "Order": shape,
            "Family": shape,
            "Genus": shape,
            "Species": name,
        }
        recs.append(CategoryRecord(name=name, common_name=name, ranks=ranks))
    return TaxonomyRegistry(recs)


def gen_synthetic(config: SynthConfig, out_dir: str | os.PathLike):
    """Render the dataset to ``out_dir``.

    Writes ``images/*.png``, ``annotations.json``, ``taxonomy.json`` and
    ``manifest.json``; returns (out_dir, DatasetIndex, TaxonomyRegistry).
    """
    out = Path(out_dir)
    if not out.parent.exists():
        raise OSError(f"parent directory {out.parent} does not exist")
    (out / "images").mkdir(parents=True, exist_ok=True)

    records = []
    per_cat = {}
    tight = 0
    for ci, name in enumerate(config.categories):
        n_boxes = 0
        for k in range(config.images_per_category):
            rng = np.random.default_rng([config.seed, ci, k])
            pixels, boxes, raster = render_image(config, name, rng)
            # quantise exactly as the annotation file does so a reload compares equal
            boxes = [BBox.from_xywh([round(v, 4) for v in b.to_xywh()]) for b in boxes]
            image_id = str(len(records) + 1)
            rel = f"images/{image_id.zfill(6)}.png"
            Image.fromarray(pixels).save(out / rel, optimize=False, compress_level=6)
            records.append(ImageRecord(image_id, rel, config.image_size, config.image_size, name, tuple(boxes)))
            n_boxes += len(boxes)
            tight = max(tight, max(_box_gap(a, b) for a, b in zip(boxes, raster)))
        per_cat[name] = {"images": config.images_per_category, "boxes": n_boxes}

    index = DatasetIndex(tuple(records), root=str(out))
    registry = synthetic_taxonomy(config)
    write_annotations(index, out / "annotations.json")
    registry.save(out / "taxonomy.json")
    manifest = {
        "config": config.to_json(),
        "categories": per_cat,
        "totals": {
            "categories": len(per_cat),
            "images": len(records),
            "boxes": sum(v["boxes"] for v in per_cat.values()),
        },
        "max_box_raster_gap_px": round(tight, 4),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return out, index, registry


def _box_gap(a: BBox, b: BBox) -> float:
    return max(abs(x - y) for x, y in zip(a.as_tuple(), b.as_tuple()))


def load_images(index: DatasetIndex) -> dict[str, np.ndarray]:
    """Decode every image of the index into memory, keyed by image id."""
    return {im.image_id: np.asarray(Image.open(index.resolve(im)).convert("RGB")) for im in index.images}
