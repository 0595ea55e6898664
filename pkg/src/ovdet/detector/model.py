"""Torch modules for the desk-scale two-stage detector."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou, nms

BBOX_CLIP = math.log(1000.0 / 16)


@dataclass(frozen=True)
class DetectorConfig:
    image_size: int = 64
    backbone_channels: tuple[int, ...] = (16, 32, 48, 64)
    backbone_strides: tuple[int, ...] = (2, 2, 2, 1)
    feature_dim: int = 64
    head_dim: int = 256
    pool_size: int = 7
    anchor_sizes: tuple[float, ...] = (12.0, 18.0, 26.0)
    anchor_aspects: tuple[float, ...] = (1.0,)
    rpn_pre_nms: int = 200
    rpn_nms_iou: float = 0.7
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    proposals_train: int = 32
    proposals_test: int = 24
    roi_batch: int = 32
    roi_pos_fraction: float = 0.25
    roi_pos_iou: float = 0.5
    roi_neg_iou: float = 0.3
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 20
    w_objectness: float = 1.0
    w_box_reg: float = 1.0
    w_classification: float = 1.0
    cls_temperature: float = 1.0  # training-time only; inference softmax is untempered

    def __post_init__(self):
        for k in ("backbone_channels", "backbone_strides", "anchor_sizes", "anchor_aspects"):
            object.__setattr__(self, k, tuple(getattr(self, k)))
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("backbone_channels and backbone_strides must align")
        for k in ("rpn_nms_iou", "nms_iou", "rpn_pos_iou", "roi_pos_iou", "roi_pos_fraction"):
            if not 0 < getattr(self, k) < 1:
                raise ValueError(f"{k} must lie in (0, 1)")
        if self.cls_temperature <= 0:
            raise ValueError("cls_temperature must be positive")
        if not 0 <= self.score_threshold <= 1:
            raise ValueError("score_threshold must lie in [0, 1]")
        if self.image_size % self.stride:
            raise ValueError("image_size must be a multiple of the backbone stride")

    @property
    def stride(self) -> int:
        return math.prod(self.backbone_strides)

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_aspects)

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_json(cls, obj) -> "DetectorConfig":
        return cls(**obj)


# --------------------------------------------------------------------------
# boxes


def make_anchors(cfg: DetectorConfig) -> torch.Tensor:
    """(H*W*A, 4) anchors in xyxy, ordered row, column, anchor."""
    n = cfg.image_size // cfg.stride
    centers = (torch.arange(n, dtype=torch.float32) + 0.5) * cfg.stride
    cy, cx = torch.meshgrid(centers, centers, indexing="ij")
    wh = []
    for s in cfg.anchor_sizes:
        for a in cfg.anchor_aspects:
            wh.append((s * math.sqrt(a), s / math.sqrt(a)))
    wh = torch.tensor(wh, dtype=torch.float32)
    ctr = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2)
    half = wh.reshape(1, -1, 2) / 2
    return torch.cat([ctr - half, ctr + half], dim=-1).reshape(-1, 4)


def encode_boxes(ref: torch.Tensor, gt: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack(
        [wx * (gx - rx) / rw, wy * (gy - ry) / rh, ww * torch.log(gw / rw), wh * torch.log(gh / rh)], dim=1
    )


def decode_boxes(ref: torch.Tensor, deltas: torch.Tensor, weights=(1.0, 1.0, 1.0, 1.0)) -> torch.Tensor:
    wx, wy, ww, wh = weights
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = (deltas[:, 2] / ww).clamp(max=BBOX_CLIP)
    dh = (deltas[:, 3] / wh).clamp(max=BBOX_CLIP)
    x, y = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, size: int) -> torch.Tensor:
    return boxes.clamp(min=0, max=float(size))


ROI_WEIGHTS = (10.0, 10.0, 5.0, 5.0)


# --------------------------------------------------------------------------
# networks


def _stage(cin: int, cout: int, stride: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.GroupNorm(min(8, cout // 4), cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, bias=False),
        nn.GroupNorm(min(8, cout // 4), cout),
        nn.ReLU(inplace=True),
    )


class Backbone(nn.Module):
    """Plain conv stages; any module mapping images to a stride-s map fits."""

    def __init__(self, channels=(16, 32, 48, 64), strides=(2, 2, 2, 1)):
        super().__init__()
        stages, cin = [], 3
        for c, s in zip(channels, strides):
            stages.append(_stage(cin, c, s))
            cin = c
        self.stages = nn.Sequential(*stages)
        self.out_channels = cin

    def forward(self, x):
        return self.stages(x)


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.cls = nn.Conv2d(channels, num_anchors, 1)
        self.reg = nn.Conv2d(channels, 4 * num_anchors, 1)
        for m in (self.cls, self.reg):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)

    def forward(self, fmap):
        h = F.relu(self.conv(fmap))
        B, _, H, W = h.shape
        logits = self.cls(h).permute(0, 2, 3, 1).reshape(B, -1)
        deltas = self.reg(h).view(B, -1, 4, H, W).permute(0, 3, 4, 1, 2).reshape(B, -1, 4)
        return logits, deltas


class RegionHead(nn.Module):
    """Pooled region -> (d-dim embedding, class-agnostic box deltas)."""

    def __init__(self, channels: int, pool_size: int, head_dim: int, feature_dim: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.fc = nn.Linear(channels * pool_size * pool_size, head_dim)
        self.embed = nn.Linear(head_dim, feature_dim)
        self.box = nn.Linear(head_dim, 4)
        nn.init.normal_(self.box.weight, std=0.001)
        nn.init.zeros_(self.box.bias)

    def forward(self, pooled):
        h = F.relu(self.conv(pooled)).flatten(1)
        h = F.relu(self.fc(h))
        return self.embed(h), self.box(h)


class DetectorNet(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.backbone_channels, cfg.backbone_strides)
        c = self.backbone.out_channels
        self.rpn = RPNHead(c, cfg.num_anchors)
        self.head = RegionHead(c, cfg.pool_size, cfg.head_dim, cfg.feature_dim)
        self.register_buffer("anchors", make_anchors(cfg), persistent=False)

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return self.backbone(images)

    def pool(self, fmap: torch.Tensor, boxes: list[torch.Tensor]) -> torch.Tensor:
        return roi_pool_bilinear(fmap, boxes, self.cfg.pool_size, 1.0 / self.cfg.stride)


def roi_pool_bilinear(fmap: torch.Tensor, boxes: list[torch.Tensor], out: int, scale: float) -> torch.Tensor:
    """Bilinear samples at the centres of an ``out`` x ``out`` grid over each box.

    Equivalent in spirit to RoIAlign with one sample per bin; implemented on
    ``grid_sample`` because that is several times faster on CPU.
    """
    B, C, H, W = fmap.shape
    idx = torch.cat([torch.full((b.shape[0],), i, dtype=torch.long) for i, b in enumerate(boxes)])
    bx = torch.cat(boxes).to(fmap.dtype)
    if bx.numel() == 0:
        return fmap.new_zeros((0, C, out, out))
    t = (torch.arange(out, dtype=fmap.dtype) + 0.5) / out
    xs = bx[:, 0:1] + t[None] * (bx[:, 2:3] - bx[:, 0:1])
    ys = bx[:, 1:2] + t[None] * (bx[:, 3:4] - bx[:, 1:2])
    gx = 2 * xs * scale / W - 1
    gy = 2 * ys * scale / H - 1
    grid = torch.stack([gx[:, None, :].expand(-1, out, -1), gy[:, :, None].expand(-1, -1, out)], dim=-1)
    return F.grid_sample(fmap[idx], grid, mode="bilinear", padding_mode="border", align_corners=False)


def preprocess(images) -> torch.Tensor:
    """uint8 (B, H, W, 3) or float (B, 3, H, W) -> float (B, 3, H, W) centred at 0."""
    x = torch.as_tensor(images)
    if x.dtype == torch.uint8:
        return x.permute(0, 3, 1, 2).float() / 255.0 - 0.5
    return x
