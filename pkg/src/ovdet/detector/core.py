"""Proposal, region-feature, prototype-classification and loss operations."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from ..datakit import BBox
from ..evalkit import Detection
from ..textspace import PrototypeBank
from .model import (
    ROI_WEIGHTS,
    DetectorConfig,
    DetectorNet,
    box_iou,
    clip_boxes,
    decode_boxes,
    encode_boxes,
    nms,
    preprocess,
)

logger = logging.getLogger(__name__)


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float


@dataclass(frozen=True)
class RegionFeature:
    vector: np.ndarray
    source_box: BBox
    degenerate: bool = False


# --------------------------------------------------------------------------
# proposals


def _valid_boxes(boxes: torch.Tensor, size: int) -> torch.Tensor:
    boxes = clip_boxes(boxes, size)
    x0, y0, x1, y1 = boxes.unbind(1)
    x1 = torch.maximum(x1, x0 + 1).clamp(max=float(size))
    y1 = torch.maximum(y1, y0 + 1).clamp(max=float(size))
    x0 = torch.minimum(x0, x1 - 1)
    y0 = torch.minimum(y0, y1 - 1)
    return torch.stack([x0, y0, x1, y1], dim=1)


def proposals_from_rpn(logits: torch.Tensor, deltas: torch.Tensor, anchors: torch.Tensor, cfg: DetectorConfig, k: int):
    """Per image: top-``k`` (boxes, objectness) after NMS.

    When NMS leaves fewer than ``k`` boxes the list is topped up with the
    best suppressed ones, so every image yields exactly ``k``.
    """
    out = []
    for lg, dl in zip(logits.detach(), deltas.detach()):
        score = torch.sigmoid(lg)
        n_pre = min(cfg.rpn_pre_nms, score.numel())
        top = torch.topk(score, n_pre, sorted=True).indices
        boxes = _valid_boxes(decode_boxes(anchors[top], dl[top]), cfg.image_size)
        s = score[top]
        keep = nms(boxes, s, cfg.rpn_nms_iou)[:k]
        if keep.numel() < k:
            rest = torch.ones(n_pre, dtype=torch.bool)
            rest[keep] = False
            extra = torch.nonzero(rest).squeeze(1)[: k - keep.numel()]
            keep = torch.cat([keep, extra])
        out.append((boxes[keep], s[keep]))
    return out


def propose(net: DetectorNet, images, k: int | None = None, fmap: torch.Tensor | None = None):
    """Objectness-ranked proposals for each image: list of (boxes (k, 4), objectness (k,))."""
    cfg = net.cfg
    x = preprocess(images)
    if x.shape[-1] != cfg.image_size or x.shape[-2] != cfg.image_size:
        raise DimensionError(f"expected {cfg.image_size}px images, got {tuple(x.shape[-2:])}")
    if fmap is None:
        fmap = net.features(x)
    logits, deltas = net.rpn(fmap)
    return proposals_from_rpn(logits, deltas, net.anchors, cfg, k or cfg.proposals_test)


def to_proposals(boxes: torch.Tensor, scores: torch.Tensor) -> list[Proposal]:
    return [Proposal(BBox(*map(float, b)), float(s)) for b, s in zip(boxes, scores)]


# --------------------------------------------------------------------------
# region features and the prototype classifier


def _snap_degenerate(boxes: torch.Tensor, stride: int, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    w = (boxes[:, 2] - boxes[:, 0]) / stride
    h = (boxes[:, 3] - boxes[:, 1]) / stride
    bad = (w * h) < 1.0
    if bad.any():
        cx = (boxes[bad, 0] + boxes[bad, 2]) / 2
        cy = (boxes[bad, 1] + boxes[bad, 3]) / 2
        n = size // stride
        ix = torch.clamp((cx / stride).floor(), 0, n - 1)
        iy = torch.clamp((cy / stride).floor(), 0, n - 1)
        cell = torch.stack([ix, iy, ix + 1, iy + 1], dim=1) * stride
        boxes = boxes.clone()
        boxes[bad] = cell
    return boxes, bad


def region_embeddings(net: DetectorNet, fmap: torch.Tensor, boxes: list[torch.Tensor]):
    """Differentiable path: (unit embeddings (M, d), box deltas (M, 4), degenerate flags (M,))."""
    snapped, flags = [], []
    for b in boxes:
        s, f = _snap_degenerate(b, net.cfg.stride, net.cfg.image_size)
        snapped.append(s)
        flags.append(f)
    emb, box_deltas = net.head(net.pool(fmap, snapped))
    return F.normalize(emb, dim=1), box_deltas, torch.cat(flags) if flags else torch.zeros(0, dtype=torch.bool)


def extract_region_features(net: DetectorNet, fmap: torch.Tensor, boxes: list[torch.Tensor]) -> list[list[RegionFeature]]:
    """One unit-norm feature per box, per image, in input order."""
    with torch.no_grad():
        emb, _, flags = region_embeddings(net, fmap, boxes)
    out, k = [], 0
    for b in boxes:
        feats = []
        for box in b:
            feats.append(RegionFeature(emb[k].double().numpy(), BBox(*map(float, box)), bool(flags[k])))
            k += 1
        out.append(feats)
    return out


def global_feature(net: DetectorNet, fmap: torch.Tensor) -> torch.Tensor:
    """Whole-image descriptor: the region embedding of the full-image box."""
    s = float(net.cfg.image_size)
    whole = [torch.tensor([[0.0, 0.0, s, s]]) for _ in range(fmap.shape[0])]
    emb, _, _ = region_embeddings(net, fmap, whole)
    return emb


def prototype_matrix(bank) -> torch.Tensor:
    if isinstance(bank, PrototypeBank):
        return torch.tensor(bank.full_matrix())
    return torch.as_tensor(bank)


def classify_regions(features, bank) -> torch.Tensor:
    """Softmax over cosine similarities to every prototype row (no temperature).

    ``features`` is (M, d) or a list of :class:`RegionFeature`; ``bank`` a
    :class:`PrototypeBank` (background row last, if present) or a matrix.
    """
    if isinstance(features, (list, tuple)):
        features = torch.as_tensor(np.stack([f.vector for f in features])) if features else torch.zeros(0, 1)
    protos = prototype_matrix(bank)
    features = torch.as_tensor(features, dtype=protos.dtype)
    if features.numel() and features.shape[-1] != protos.shape[-1]:
        raise DimensionError(f"feature dim {features.shape[-1]} != prototype dim {protos.shape[-1]}")
    sims = F.normalize(features, dim=-1) @ F.normalize(protos, dim=-1).T
    return torch.softmax(sims, dim=-1)


def assign_labels(probs, categories=None, background: bool = False) -> list[tuple]:
    """Per row: (category index or name, probability) of the argmax; first row wins ties.

    With ``background`` set, the last column is background and rows whose
    argmax lands there come back as ``(None, p)``.
    """
    p = probs if isinstance(probs, torch.Tensor) else torch.as_tensor(np.asarray(probs, dtype=np.float64))
    out = []
    for row in p:
        k = int(torch.argmax(row))  # torch.argmax returns the first maximal index
        score = float(row[k])
        if background and k == row.numel() - 1:
            out.append((None, score))
        else:
            out.append((categories[k] if categories is not None else k, score))
    return out


# --------------------------------------------------------------------------
# targets and losses


@dataclass
class DetectionPredictions:
    objectness_logits: torch.Tensor  # (A,)
    rpn_deltas: torch.Tensor  # (A, 4)
    class_log_probs: torch.Tensor  # (R, K + 1), log prototype-classifier probabilities
    roi_deltas: torch.Tensor  # (R, 4)


@dataclass
class DetectionTargets:
    objectness: torch.Tensor  # (A,) 1 positive, 0 negative, -1 ignored
    rpn_deltas: torch.Tensor  # (A, 4), read at positives
    labels: torch.Tensor  # (R,) category index, K for background
    roi_deltas: torch.Tensor  # (R, 4), read where labels < K
    background_index: int


def smooth_l1(x: torch.Tensor, beta: float) -> torch.Tensor:
    a = x.abs()
    return torch.where(a < beta, 0.5 * a * a / beta, a - 0.5 * beta)


def detection_loss(pred: DetectionPredictions, target: DetectionTargets, cfg: DetectorConfig) -> dict[str, torch.Tensor]:
    """Objectness BCE, smooth-L1 box regression on positives, prototype-classifier cross-entropy.

    Returns ``objectness``, ``box_reg``, ``classification`` and the weighted ``total``.
    """
    sampled = target.objectness >= 0
    n_anchor = max(int(sampled.sum()), 1)
    obj = F.binary_cross_entropy_with_logits(
        pred.objectness_logits[sampled], target.objectness[sampled].to(pred.objectness_logits.dtype), reduction="sum"
    ) / n_anchor

    pos = target.objectness == 1
    fg = target.labels < target.background_index
    zero = pred.rpn_deltas.sum() * 0
    if not pos.any() and not fg.any():
        logger.warning("no positive anchors or regions in batch; box regression set to 0")
    rpn_box = smooth_l1(pred.rpn_deltas[pos] - target.rpn_deltas[pos], 1.0 / 9).sum() / n_anchor if pos.any() else zero
    n_roi = max(int(target.labels.numel()), 1)
    roi_box = smooth_l1(pred.roi_deltas[fg] - target.roi_deltas[fg], 1.0).sum() / n_roi if fg.any() else zero

    if target.labels.numel():
        picked = pred.class_log_probs.gather(1, target.labels.view(-1, 1)).squeeze(1)
        cls = -picked.mean()
    else:
        cls = zero
    box = rpn_box + roi_box
    total = cfg.w_objectness * obj + cfg.w_box_reg * box + cfg.w_classification * cls
    return {"objectness": obj, "box_reg": box, "classification": cls, "total": total}


def _sample(mask_pos, mask_neg, n_total, pos_fraction, generator):
    pos = torch.nonzero(mask_pos).squeeze(1)
    neg = torch.nonzero(mask_neg).squeeze(1)
    n_pos = min(pos.numel(), int(n_total * pos_fraction))
    n_neg = min(neg.numel(), n_total - n_pos)
    pos = pos[torch.randperm(pos.numel(), generator=generator)[:n_pos]]
    neg = neg[torch.randperm(neg.numel(), generator=generator)[:n_neg]]
    return pos, neg


def anchor_targets(anchors, gt_boxes, cfg: DetectorConfig, generator):
    """(labels (A,), delta targets (A, 4)) for one image."""
    labels = torch.full((anchors.shape[0],), -1, dtype=torch.long)
    deltas = torch.zeros_like(anchors)
    if gt_boxes.numel() == 0:
        labels[:] = 0
        _, neg = _sample(torch.zeros_like(labels, dtype=torch.bool), labels == 0, cfg.rpn_batch, 0.5, generator)
        out = torch.full_like(labels, -1)
        out[neg] = 0
        return out, deltas
    ious = box_iou(anchors, gt_boxes)
    best, which = ious.max(dim=1)
    pos = best >= cfg.rpn_pos_iou
    pos[ious.argmax(dim=0)] = True
    neg = (best < cfg.rpn_neg_iou) & ~pos
    p, n = _sample(pos, neg, cfg.rpn_batch, 0.5, generator)
    labels[p] = 1
    labels[n] = 0
    deltas = encode_boxes(anchors, gt_boxes[which])
    return labels, deltas


def region_targets(proposals, gt_boxes, gt_labels, background_index: int, cfg: DetectorConfig, generator):
    """Sample regions for the second stage: (boxes, labels, delta targets)."""
    boxes = torch.cat([proposals, gt_boxes]) if gt_boxes.numel() else proposals
    if gt_boxes.numel() == 0:
        _, neg = _sample(torch.zeros(boxes.shape[0], dtype=torch.bool), torch.ones(boxes.shape[0], dtype=torch.bool), cfg.roi_batch, 0.0, generator)
        return boxes[neg], torch.full((neg.numel(),), background_index, dtype=torch.long), torch.zeros(neg.numel(), 4)
    ious = box_iou(boxes, gt_boxes)
    best, which = ious.max(dim=1)
    p, n = _sample(best >= cfg.roi_pos_iou, best < cfg.roi_neg_iou, cfg.roi_batch, cfg.roi_pos_fraction, generator)
    keep = torch.cat([p, n])
    labels = torch.cat([gt_labels[which[p]], torch.full((n.numel(),), background_index, dtype=torch.long)])
    deltas = encode_boxes(boxes[keep], gt_boxes[which[keep]], ROI_WEIGHTS)
    return boxes[keep], labels, deltas


def finetune_forward(net: DetectorNet, x, targets, protos: torch.Tensor, generator):
    """Forward pass with sampled targets for one training batch.

    ``targets`` is a list of (gt boxes (G, 4), gt label indices (G,)) and
    ``protos`` the (K + 1, d) prototype matrix with background last.
    """
    cfg = net.cfg
    fmap = net.features(x)
    logits, deltas = net.rpn(fmap)
    props = proposals_from_rpn(logits, deltas, net.anchors, cfg, cfg.proposals_train)
    bg = protos.shape[0] - 1
    obj_t, rpn_t, roi_boxes, roi_labels, roi_t = [], [], [], [], []
    for (gt_b, gt_l), (pb, _) in zip(targets, props):
        lab, dt = anchor_targets(net.anchors, gt_b, cfg, generator)
        obj_t.append(lab)
        rpn_t.append(dt)
        rb, rl, rd = region_targets(pb, gt_b, gt_l, bg, cfg, generator)
        roi_boxes.append(rb)
        roi_labels.append(rl)
        roi_t.append(rd)
    emb, roi_deltas, _ = region_embeddings(net, fmap, roi_boxes)
    sims = emb @ F.normalize(protos, dim=1).T
    pred = DetectionPredictions(logits.reshape(-1), deltas.reshape(-1, 4), torch.log_softmax(sims / cfg.cls_temperature, dim=1), roi_deltas)
    tgt = DetectionTargets(torch.cat(obj_t), torch.cat(rpn_t), torch.cat(roi_labels), torch.cat(roi_t), bg)
    return pred, tgt


# --------------------------------------------------------------------------
# inference


def _per_category_nms(boxes, scores, labels, iou_thr):
    # offset trick: boxes of different labels never overlap
    offsets = labels.to(boxes.dtype) * (boxes.max() + 1.0)
    return nms(boxes + offsets[:, None], scores, iou_thr)


@torch.no_grad()
def infer(net: DetectorNet, images, bank: PrototypeBank, cfg: DetectorConfig | None = None, image_ids=None) -> list[list[Detection]]:
    """Propose, embed, classify against ``bank``, threshold, per-category NMS.

    Labels come only from ``bank.categories``; regions whose argmax is the
    background row are dropped. Score = max probability x objectness.
    """
    cfg = cfg or net.cfg
    if bank.d != cfg.feature_dim:
        raise DimensionError(f"bank dim {bank.d} != detector feature dim {cfg.feature_dim}")
    net.eval()
    x = preprocess(images)
    if image_ids is None:
        image_ids = [str(i) for i in range(x.shape[0])]
    fmap = net.features(x)
    props = propose(net, x, cfg.proposals_test, fmap=fmap)
    protos = prototype_matrix(bank).float()
    has_bg = bank.background is not None
    boxes = [b for b, _ in props]
    emb, roi_deltas, _ = region_embeddings(net, fmap, boxes)
    probs = classify_regions(emb, protos)
    out, k = [], 0
    for iid, (pb, obj) in zip(image_ids, props):
        n = pb.shape[0]
        p = probs[k : k + n]
        refined = _valid_boxes(decode_boxes(pb, roi_deltas[k : k + n], ROI_WEIGHTS), cfg.image_size)
        k += n
        top_p, top_k = p.max(dim=1)  # first maximal index on ties
        keep = torch.ones(n, dtype=torch.bool)
        if has_bg:
            keep &= top_k != p.shape[1] - 1
        score = top_p * obj
        keep &= score >= cfg.score_threshold
        if cfg.score_threshold >= 1.0:
            keep &= score > 1.0
        idx = torch.nonzero(keep).squeeze(1)
        dets = []
        if idx.numel():
            kept = _per_category_nms(refined[idx], score[idx], top_k[idx], cfg.nms_iou)[: cfg.max_detections]
            for j in idx[kept]:
                dets.append(Detection(str(iid), bank.categories[int(top_k[j])], tuple(float(v) for v in refined[j]), float(score[j])))
        out.append(dets)
    return out
