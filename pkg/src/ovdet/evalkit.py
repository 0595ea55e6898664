"""IoU, greedy matching, average precision and seen/unseen mAP50."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .datakit import BBox, DatasetIndex, load_annotations
from .taxonomy import Protocol, SplitSpec, TaxonomyRegistry


def _xyxy(b) -> tuple[float, float, float, float]:
    if isinstance(b, BBox):
        return b.as_tuple()
    return tuple(float(v) for v in b)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _xyxy(a)
    bx0, by0, bx1, by1 = _xyxy(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def match_detections(dets: Sequence, gts: Sequence, iou_threshold: float = 0.5, scores: Sequence[float] | None = None) -> np.ndarray:
    """Greedy TP/FP flags for one image and one category, in input order.

    ``dets`` are boxes (or ``(box, score)`` pairs when ``scores`` is None).
    Detections are visited by descending score, ties by input order; each
    takes the highest-IoU still-unmatched GT at or above the threshold.
    """
    if scores is None:
        boxes = [d[0] for d in dets]
        scores = [d[1] for d in dets]
    else:
        boxes = list(dets)
    flags = np.zeros(len(boxes), dtype=bool)
    if not boxes or not gts:
        return flags
    ious = iou_matrix(np.array([_xyxy(b) for b in boxes]), np.array([_xyxy(g) for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    for i in np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"):
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            taken[j] = True
            flags[i] = True
    return flags


def precision_recall(flags, scores, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    flags = np.asarray(flags, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(flags[order])
    fp = np.cumsum(~flags[order])
    recall = tp / n_gt if n_gt else np.zeros_like(tp, dtype=float)
    precision = tp / np.maximum(tp + fp, 1)
    return precision.astype(float), recall.astype(float)


def average_precision(flags, scores, n_gt: int, interpolation: str = "all") -> float:
    """Area under the PR curve; ``nan`` when there is no ground truth.

    ``interpolation="all"`` integrates the monotone precision envelope over
    every recall step; ``"coco101"`` samples it at 101 recall points.
    """
    if len(flags) != len(scores):
        raise ValueError("flags and scores must have the same length")
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    if n_gt == 0:
        return float("nan")
    if len(flags) == 0:
        return 0.0
    precision, recall = precision_recall(flags, scores, n_gt)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    if interpolation == "all":
        step = np.where(mrec[1:] != mrec[:-1])[0]
        return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    if interpolation == "coco101":
        pts = np.linspace(0, 1, 101)
        idx = np.searchsorted(mrec[1:-1], pts, side="left")
        env = np.concatenate([mpre[1:-1], [0.0]])
        return float(np.mean(env[np.minimum(idx, len(env) - 1)]))
    raise ValueError(f"unknown interpolation {interpolation!r}")


# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Detection:
    image_id: str
    category: str
    box: tuple[float, float, float, float]
    score: float

    def to_json(self) -> dict:
        x0, y0, x1, y1 = self.box
        return {
            "image_id": self.image_id,
            "category": self.category,
            "bbox": [round(x0, 4), round(y0, 4), round(x1 - x0, 4), round(y1 - y0, 4)],
            "score": round(float(self.score), 8),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Detection":
        x, y, w, h = (float(v) for v in obj["bbox"])
        return cls(str(obj["image_id"]), obj["category"], (x, y, x + w, y + h), float(obj["score"]))


def write_results(dets: Iterable[Detection], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps([d.to_json() for d in dets], indent=0) + "\n", encoding="utf-8")
    return path


def load_results(path: str | os.PathLike) -> list[Detection]:
    return [Detection.from_json(o) for o in json.loads(Path(path).read_text(encoding="utf-8"))]


@dataclass
class EvalResult:
    per_category_ap: dict[str, float]
    map50_seen: float
    map50_unseen: float
    map50_all: float
    counts: dict[str, dict[str, int]]
    per_class_ap: dict[str, float] = field(default_factory=dict)
    protocol: str = ""
    no_gt: list[str] = field(default_factory=list)
    stray_categories: list[str] = field(default_factory=list)
    seen_groups: list[str] = field(default_factory=list)
    unseen_groups: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else round(v, 10)

        return {
            "protocol": self.protocol,
            "map50_all": num(self.map50_all),
            "map50_seen": num(self.map50_seen),
            "map50_unseen": num(self.map50_unseen),
            "per_category_ap": {k: num(v) for k, v in sorted(self.per_category_ap.items())},
            "per_class_ap": {k: num(v) for k, v in sorted(self.per_class_ap.items())},
            "counts": {k: self.counts[k] for k in sorted(self.counts)},
            "no_gt": sorted(self.no_gt),
            "stray_categories": sorted(self.stray_categories),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"


def _mean(values) -> float:
    # fsum is exactly rounded, so the result does not depend on set iteration order.
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else float("nan")


def category_ap(dets: Sequence[Detection], gts: Mapping[str, Sequence], iou_threshold=0.5, interpolation="all") -> tuple[float, np.ndarray, np.ndarray]:
    """AP for one category over many images; ``gts`` maps image id -> boxes."""
    by_image: dict[str, list[int]] = {}
    for k, d in enumerate(dets):
        by_image.setdefault(d.image_id, []).append(k)
    flags = np.zeros(len(dets), dtype=bool)
    for iid, ks in by_image.items():
        f = match_detections([dets[k].box for k in ks], gts.get(iid, ()), iou_threshold, scores=[dets[k].score for k in ks])
        flags[ks] = f
    scores = np.array([d.score for d in dets], dtype=np.float64)
    n_gt = sum(len(v) for v in gts.values())
    return average_precision(flags, scores, n_gt, interpolation), flags, scores


def evaluate(
    results,
    annotations,
    split: SplitSpec,
    registry: TaxonomyRegistry | None = None,
    iou_threshold: float = 0.5,
    interpolation: str = "all",
) -> EvalResult:
    """Per-category AP and seen/unseen/all means under ``split``.

    Under a ClassLevel split a Class's AP is the unweighted mean of its
    member categories' APs (a category named exactly like a Class counts as
    its own member), and the group means run over Classes.
    """
    if isinstance(results, (str, os.PathLike)):
        results = load_results(results)
    if isinstance(annotations, (str, os.PathLike)):
        annotations = load_annotations(annotations)
    results = list(results)

    if split.class_level:
        if registry is None:
            raise ValueError("ClassLevel evaluation needs the taxonomy registry")
        group_of = {}
        for c in (*split.seen, *split.unseen):
            group_of[c] = c
            for member in registry.class_index.get(c, ()):
                group_of[member] = c
    else:
        group_of = {c: c for c in (*split.seen, *split.unseen)}
    vocab = list(group_of)

    gts: dict[str, dict[str, list]] = {c: {} for c in vocab}
    for im in annotations.images:
        if im.dominant_category in gts:
            gts[im.dominant_category].setdefault(im.image_id, []).extend(b.as_tuple() for b in im.boxes)
    dets: dict[str, list[Detection]] = {c: [] for c in vocab}
    stray = set()
    stray_count = 0
    for d in results:
        if d.category in dets:
            dets[d.category].append(d)
        else:
            stray.add(d.category)
            stray_count += 1

    ap: dict[str, float] = {}
    counts: dict[str, dict[str, int]] = {}
    no_gt = []
    for c in vocab:
        n_gt = sum(len(v) for v in gts[c].values())
        a, flags, _ = category_ap(dets[c], gts[c], iou_threshold, interpolation)
        counts[c] = {"gt": n_gt, "detections": len(dets[c]), "tp": int(flags.sum())}
        if n_gt == 0:
            no_gt.append(c)
        else:
            ap[c] = a
    if stray_count:
        counts["__stray__"] = {"gt": 0, "detections": stray_count, "tp": 0}

    per_class: dict[str, float] = {}
    if split.class_level:
        members: dict[str, list[float]] = {}
        for c, a in ap.items():
            members.setdefault(group_of[c], []).append(a)
        per_class = {g: _mean(v) for g, v in members.items()}
        seen_vals = [per_class[g] for g in split.seen if g in per_class]
        unseen_vals = [per_class[g] for g in split.unseen if g in per_class]
        all_vals = list(per_class.values())
    else:
        seen_vals = [ap[c] for c in split.seen if c in ap]
        unseen_vals = [ap[c] for c in split.unseen if c in ap]
        all_vals = list(ap.values())

    return EvalResult(
        per_category_ap=ap,
        map50_seen=_mean(seen_vals),
        map50_unseen=_mean(unseen_vals),
        map50_all=_mean(all_vals),
        counts=counts,
        per_class_ap=per_class,
        protocol=split.protocol.value,
        no_gt=no_gt,
        stray_categories=sorted(stray),
        seen_groups=sorted(split.seen),
        unseen_groups=sorted(split.unseen),
    )


def _cell(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    return f"{100 * v:.1f}"


def render_table(
    rows: Sequence[tuple[str, EvalResult]],
    seen_columns: Sequence[str] = (),
    unseen_columns: Sequence[str] = (),
) -> str:
    """Plain-text table: method | seen mAP50 | seen groups... | unseen mAP50 | unseen groups...

    Values are percentages with one decimal; ``-`` marks a value that
    cannot be computed.
    """

    def group_ap(res: EvalResult, g: str):
        return res.per_class_ap.get(g, res.per_category_ap.get(g))

    header = ["Method", "Seen mAP50", *seen_columns, "Unseen mAP50", *unseen_columns]
    body = []
    for name, res in rows:
        body.append(
            [
                name,
                _cell(res.map50_seen),
                *(_cell(group_ap(res, g)) for g in seen_columns),
                _cell(res.map50_unseen),
                *(_cell(group_ap(res, g)) for g in unseen_columns),
            ]
        )
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]

    def fmt(r):
        return " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths)))

    rule = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), rule, *(fmt(r) for r in body)]) + "\n"


def plot_pr_curves(results, annotations, categories: Sequence[str], out_dir: str | os.PathLike, iou_threshold=0.5) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    results = list(results)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in categories:
        gts: dict[str, list] = {}
        for im in annotations.images:
            if im.dominant_category == c:
                gts.setdefault(im.image_id, []).extend(b.as_tuple() for b in im.boxes)
        dets = [d for d in results if d.category == c]
        n_gt = sum(len(v) for v in gts.values())
        if not n_gt:
            continue
        a, flags, scores = category_ap(dets, gts, iou_threshold)
        precision, recall = precision_recall(flags, scores, n_gt)
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(recall, precision, drawstyle="steps-post")
        ax.set(xlim=(0, 1.02), ylim=(0, 1.02), xlabel="recall", ylabel="precision", title=f"{c} (AP50 {100 * a:.1f})")
        fig.tight_layout()
        p = out / f"pr_{c.replace(' ', '_')}.png"
        fig.savefig(p, dpi=80)
        plt.close(fig)
        paths.append(p)
    return paths
