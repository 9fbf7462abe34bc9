"""Compact residual detection backbone with an anchor-free dense head.

The stem downsamples by 4; the structural prior, when present, is fused
into the stem output by the guidance module before stage 1. The head is
center-based: per level, one objectness logit map and a 4-channel offset
map (dx, dy, log w, log h) relative to the cell center and level stride.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidParameterError

# box sizes (max side) that route a ground truth to each pyramid level
LEVEL_SIZE_BOUNDS = (16, 32, 64)
OFFSET_CLAMP = 6.0  # keeps exp(log-size) finite on wild logits


@dataclass
class BackboneConfig:
    stem_channels: int = 32
    stage_channels: tuple = (32, 64, 128, 256)
    blocks_per_stage: int = 2
    stage_strides: tuple = (1, 2, 2, 2)

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        if tuple(self.stage_strides) != (1, 2, 2, 2):
            raise ConfigError("stage strides are fixed at (1, 2, 2, 2)")
        self.stage_strides = (1, 2, 2, 2)


@dataclass
class StageFeatures:
    """The four backbone stage outputs at 1/4, 1/8, 1/16, 1/32 resolution."""

    maps: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.maps)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, i):
        return self.maps[i]


@dataclass
class Detection:
    box: tuple  # (x, y, w, h) in image pixels
    score: float


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class Stem(nn.Module):
    """Two stride-2 convs: input image to 1/4-resolution features."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        mid = max(out_channels // 2, 1)
        self.conv1 = nn.Conv2d(in_channels, mid, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(mid, out_channels, 3, stride=2, padding=1)

    def forward(self, x):
        return F.leaky_relu(self.conv2(F.leaky_relu(self.conv1(x), 0.1)), 0.1)


class DetectionBackbone(nn.Module):
    def __init__(self, config: BackboneConfig | None = None, in_channels=1, fsgm=None):
        super().__init__()
        self.config = config or BackboneConfig()
        self.stem = Stem(in_channels, self.config.stem_channels)
        self.fsgm = fsgm

        stages = []
        prev = self.config.stem_channels
        for ch, stride in zip(self.config.stage_channels, self.config.stage_strides):
            layers = []
            if stride != 1 or ch != prev:
                layers += [nn.Conv2d(prev, ch, 3, stride=stride, padding=1), nn.LeakyReLU(0.1)]
            layers += [ResidualBlock(ch) for _ in range(self.config.blocks_per_stage)]
            stages.append(nn.Sequential(*layers))
            prev = ch
        self.stages = nn.ModuleList(stages)

    def stem_forward(self, restored):
        return self.stem(restored)

    def forward(self, restored, prior=None) -> StageFeatures:
        f = self.stem(restored)
        if prior is not None:
            if self.fsgm is None:
                raise InvalidParameterError("backbone has no guidance module but got a prior")
            if prior.shape[-2:] != f.shape[-2:]:
                raise InvalidParameterError(
                    f"prior resolution {tuple(prior.shape[-2:])} does not match "
                    f"stem output {tuple(f.shape[-2:])}"
                )
            f = self.fsgm(prior, f)
        maps = []
        for stage in self.stages:
            f = stage(f)
            maps.append(f)
        return StageFeatures(maps)


@dataclass
class HeadOutputs:
    """Per-level dense predictions plus their image strides."""

    obj: list  # (B, 1, h, w) logits per level
    box: list  # (B, 4, h, w) offsets per level
    strides: tuple = (4, 8, 16, 32)


class DetectionHead(nn.Module):
    """Shared conv head over per-level lateral projections."""

    def __init__(self, stage_channels=(32, 64, 128, 256), head_channels=64):
        super().__init__()
        self.laterals = nn.ModuleList(nn.Conv2d(c, head_channels, 1) for c in stage_channels)
        self.trunk = nn.Conv2d(head_channels, head_channels, 3, padding=1)
        self.obj_out = nn.Conv2d(head_channels, 1, 1)
        self.box_out = nn.Conv2d(head_channels, 4, 1)
        # rare-positive prior keeps early objectness loss tame
        nn.init.constant_(self.obj_out.bias, -math.log(99.0))

    def forward(self, features: StageFeatures) -> HeadOutputs:
        obj, box = [], []
        for lat, f in zip(self.laterals, features):
            t = F.leaky_relu(self.trunk(F.leaky_relu(lat(f), 0.1)), 0.1)
            obj.append(self.obj_out(t))
            box.append(self.box_out(t))
        return HeadOutputs(obj=obj, box=box)


def assign_level(box):
    """Pyramid level for a ground-truth box, by its larger side."""
    side = max(box[2], box[3])
    for lvl, bound in enumerate(LEVEL_SIZE_BOUNDS):
        if side < bound:
            return lvl
    return len(LEVEL_SIZE_BOUNDS)


def encode_box(box, stride, cell):
    """Offsets (dx, dy, log w, log h) of a box relative to a cell center."""
    x, y, w, h = box
    i, j = cell
    cx, cy = x + w / 2.0, y + h / 2.0
    return (
        cx / stride - (j + 0.5),
        cy / stride - (i + 0.5),
        math.log(w / stride),
        math.log(h / stride),
    )


def decode_cell(offsets, stride, cell):
    """Inverse of encode_box."""
    dx, dy, pw, ph = offsets
    i, j = cell
    cx = (j + 0.5 + dx) * stride
    cy = (i + 0.5 + dy) * stride
    w = math.exp(min(pw, OFFSET_CLAMP)) * stride
    h = math.exp(min(ph, OFFSET_CLAMP)) * stride
    return (cx - w / 2.0, cy - h / 2.0, w, h)


def center_cells(box, stride, shape, radius_strides=1.5):
    """Center-sampled positive cells for a box at one level.

    Cells whose centers fall inside the box and within radius_strides
    strides of the box center; the nearest in-bounds cell is always
    included so every box has at least one positive.
    """
    h, w = shape
    x, y, bw, bh = box
    cx, cy = x + bw / 2.0, y + bh / 2.0
    jc = min(max(int(cx / stride), 0), w - 1)
    ic = min(max(int(cy / stride), 0), h - 1)
    cells = {(ic, jc)}
    r = radius_strides * stride
    j_lo = max(int((max(cx - r, x)) / stride), 0)
    j_hi = min(int((min(cx + r, x + bw)) / stride), w - 1)
    i_lo = max(int((max(cy - r, y)) / stride), 0)
    i_hi = min(int((min(cy + r, y + bh)) / stride), h - 1)
    for i in range(i_lo, i_hi + 1):
        for j in range(j_lo, j_hi + 1):
            px, py = (j + 0.5) * stride, (i + 0.5) * stride
            if x <= px <= x + bw and y <= py <= y + bh:
                if abs(px - cx) <= r and abs(py - cy) <= r:
                    cells.add((i, j))
    return sorted(cells)


def nms(boxes, scores, iou_threshold):
    """Greedy non-maximum suppression; returns kept indices, score order."""
    from .metrics import box_iou

    order = sorted(range(len(boxes)), key=lambda i: -scores[i])
    keep = []
    for i in order:
        if all(box_iou(boxes[i], boxes[k]) <= iou_threshold for k in keep):
            keep.append(i)
    return keep


def decode_detections(predictions: HeadOutputs, image_size, score_threshold=0.3, iou_nms=0.5):
    """Decode dense maps into per-image Detection lists (score-sorted)."""
    if not 0.0 <= score_threshold <= 1.0 or not 0.0 <= iou_nms <= 1.0:
        raise InvalidParameterError("thresholds must lie in [0, 1]")
    img_h, img_w = image_size
    batch = predictions.obj[0].shape[0]
    results = []
    for b in range(batch):
        boxes, scores = [], []
        for lvl, stride in enumerate(predictions.strides):
            obj = torch.sigmoid(predictions.obj[lvl][b, 0].detach())
            offs = predictions.box[lvl][b].detach()
            mask = obj > score_threshold
            for i, j in zip(*torch.nonzero(mask, as_tuple=True)):
                i, j = int(i), int(j)
                x, y, w, h = decode_cell([float(v) for v in offs[:, i, j]], stride, (i, j))
                # clip to image bounds
                x0, y0 = max(0.0, x), max(0.0, y)
                x1, y1 = min(float(img_w), x + w), min(float(img_h), y + h)
                if x1 <= x0 or y1 <= y0:
                    continue
                boxes.append((x0, y0, x1 - x0, y1 - y0))
                scores.append(float(obj[i, j]))
        keep = nms(boxes, scores, iou_nms)
        results.append([Detection(box=boxes[k], score=scores[k]) for k in keep])
    return results
