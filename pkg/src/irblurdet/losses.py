"""Training losses: feature restoration, stage consistency, detection, total.

The restoration loss is mean L1 over encoder taps plus (1 - SSIM) over
decoder taps. The consistency loss is mean (1 - cosine) over backbone
stages. Detection is focal objectness plus complete-IoU regression over
center-sampled positives. The total applies the stepped weight schedule.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .backbone import assign_level, center_cells, encode_box
from .errors import InvalidParameterError

NORM_EPS = 1e-8
RANGE_EPS = 1e-3  # floor for the SSIM dynamic range on feature maps

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


def _gaussian_window(size, sigma, device, dtype):
    x = torch.arange(size, device=device, dtype=dtype) - (size - 1) / 2.0
    g = torch.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _window_mean(x, win):
    """Separable windowed mean over valid positions, per channel."""
    c = x.shape[1]
    k = win.numel()
    wrow = win.view(1, 1, 1, k).expand(c, 1, 1, k)
    wcol = win.view(1, 1, k, 1).expand(c, 1, k, 1)
    t = F.conv2d(x, wrow, groups=c)
    return F.conv2d(t, wcol, groups=c)


def ssim_map(x, y, window_size=11, sigma=1.5):
    """Mean windowed SSIM between two feature maps.

    Gaussian window (shrunk to fit small inputs), stability constants
    C1 = (0.01 L)^2 and C2 = (0.03 L)^2 with the dynamic range L taken as
    the pair's max absolute value floored at 1e-3, since feature maps have
    no fixed range. Channels are treated as independent images and averaged.
    """
    if x.shape != y.shape:
        raise InvalidParameterError(f"ssim_map: shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 3:
        x, y = x.unsqueeze(0), y.unsqueeze(0)
    h, w = x.shape[-2:]
    win = min(window_size, h, w)
    if win % 2 == 0:
        win -= 1
    window = _gaussian_window(win, sigma, x.device, x.dtype)

    # range held constant wrt the graph: if it were differentiable, growing
    # feature amplitude would inflate C1/C2 until SSIM reads 1 for free
    dyn_range = torch.maximum(x.abs().amax(), y.abs().amax()).detach()
    dyn_range = torch.clamp(dyn_range, min=RANGE_EPS)
    c1 = (0.01 * dyn_range) ** 2
    c2 = (0.03 * dyn_range) ** 2

    mu_x = _window_mean(x, window)
    mu_y = _window_mean(y, window)
    var_x = _window_mean(x * x, window) - mu_x**2
    var_y = _window_mean(y * y, window) - mu_y**2
    cov = _window_mean(x * y, window) - mu_x * mu_y

    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return (num / den).mean()


def deb_loss(taps_b, taps_c):
    """Feature restoration loss: encoder L1 plus decoder (1 - SSIM)."""
    for eb, ec in zip(taps_b.E, taps_c.E):
        if eb.shape != ec.shape:
            raise InvalidParameterError("deb_loss: encoder tap shapes differ")
    for db, dc in zip(taps_b.D, taps_c.D):
        if db.shape != dc.shape:
            raise InvalidParameterError("deb_loss: decoder tap shapes differ")
    loss = 0.0
    for eb, ec in zip(taps_b.E, taps_c.E):
        loss = loss + (eb - ec).abs().mean()
    for db, dc in zip(taps_b.D, taps_c.D):
        loss = loss + (1.0 - ssim_map(db, dc))
    return loss


def fcss_loss(stages_b, stages_c):
    """Mean (1 - cosine similarity) between vectorized stage features."""
    maps_b, maps_c = list(stages_b), list(stages_c)
    if len(maps_b) != len(maps_c):
        raise InvalidParameterError("fcss_loss: stage counts differ")
    loss = 0.0
    for fb, fc in zip(maps_b, maps_c):
        if fb.shape != fc.shape:
            raise InvalidParameterError("fcss_loss: stage shapes differ")
        vb, vc = fb.reshape(-1), fc.reshape(-1)
        cos = (vc @ vb) / ((vc.norm() + NORM_EPS) * (vb.norm() + NORM_EPS))
        loss = loss + (1.0 - cos)
    return loss / len(maps_b)


def ciou(pred, target, eps=1e-9):
    """Complete IoU between (x, y, w, h) box tensors of shape (N, 4)."""
    px0, py0 = pred[:, 0], pred[:, 1]
    px1, py1 = px0 + pred[:, 2], py0 + pred[:, 3]
    tx0, ty0 = target[:, 0], target[:, 1]
    tx1, ty1 = tx0 + target[:, 2], ty0 + target[:, 3]

    iw = (torch.minimum(px1, tx1) - torch.maximum(px0, tx0)).clamp(min=0)
    ih = (torch.minimum(py1, ty1) - torch.maximum(py0, ty0)).clamp(min=0)
    inter = iw * ih
    union = pred[:, 2] * pred[:, 3] + target[:, 2] * target[:, 3] - inter
    iou = inter / (union + eps)

    # squared center distance over squared enclosing-box diagonal
    c2 = (torch.maximum(px1, tx1) - torch.minimum(px0, tx0)) ** 2 + (
        torch.maximum(py1, ty1) - torch.minimum(py0, ty0)
    ) ** 2
    rho2 = ((px0 + px1) - (tx0 + tx1)) ** 2 / 4 + ((py0 + py1) - (ty0 + ty1)) ** 2 / 4

    v = (4 / math.pi**2) * (
        torch.atan(target[:, 2] / (target[:, 3] + eps)) - torch.atan(pred[:, 2] / (pred[:, 3] + eps))
    ) ** 2
    alpha = v / (1 - iou + v + eps)
    return iou - rho2 / (c2 + eps) - alpha * v


def build_targets(predictions, gt_boxes_batch):
    """Objectness targets and positive-cell assignments for a batch.

    Each box goes to one pyramid level by size; positives are its
    center-sampled cells. Returns per-level target maps and a list of
    (batch, level, cell, box) assignments.
    """
    obj_targets = [torch.zeros_like(o) for o in predictions.obj]
    positives = []
    for b, boxes in enumerate(gt_boxes_batch):
        for box in boxes:
            lvl = assign_level(box)
            stride = predictions.strides[lvl]
            shape = predictions.obj[lvl].shape[-2:]
            for cell in center_cells(box, stride, shape):
                obj_targets[lvl][b, 0, cell[0], cell[1]] = 1.0
                positives.append((b, lvl, cell, box))
    return obj_targets, positives


def det_loss(predictions, gt_boxes_batch):
    """Focal objectness plus CIoU box loss, normalized by positive count."""
    obj_targets, positives = build_targets(predictions, gt_boxes_batch)
    n_pos = max(len(positives), 1)

    focal = 0.0
    for logits, target in zip(predictions.obj, obj_targets):
        ce = F.binary_cross_entropy_with_logits(logits, target, reduction="none")
        p = torch.sigmoid(logits)
        p_t = p * target + (1 - p) * (1 - target)
        alpha_t = FOCAL_ALPHA * target + (1 - FOCAL_ALPHA) * (1 - target)
        focal = focal + (alpha_t * (1 - p_t) ** FOCAL_GAMMA * ce).sum()

    if positives:
        preds, targets = [], []
        for b, lvl, (i, j), box in positives:
            stride = predictions.strides[lvl]
            off = predictions.box[lvl][b, :, i, j]
            cx = (j + 0.5 + off[0]) * stride
            cy = (i + 0.5 + off[1]) * stride
            w = torch.exp(torch.clamp(off[2], max=6.0)) * stride
            h = torch.exp(torch.clamp(off[3], max=6.0)) * stride
            preds.append(torch.stack([cx - w / 2, cy - h / 2, w, h]))
            targets.append(torch.tensor([float(v) for v in box], dtype=off.dtype, device=off.device))
        box_term = (1.0 - ciou(torch.stack(preds), torch.stack(targets))).sum()
    else:
        box_term = 0.0

    return (focal + box_term) / n_pos


@dataclass
class LossSchedule:
    """Constant restoration weight; consistency weight steps down once."""

    lambda1: float = 0.4
    lambda2_initial: float = 0.2
    lambda2_final: float = 0.01
    switch_epoch: int = 20

    def lambda2(self, epoch):
        return self.lambda2_initial if epoch <= self.switch_epoch else self.lambda2_final


@dataclass
class LossBreakdown:
    l_det: float
    l_deb: float
    l_fcss: float
    total: float


def total_loss(l_det, l_deb, l_fcss, epoch, schedule: LossSchedule | None = None):
    """Weighted sum of the three terms under the epoch's schedule."""
    schedule = schedule or LossSchedule()
    lam2 = schedule.lambda2(epoch)
    total = l_det + schedule.lambda1 * l_deb + lam2 * l_fcss
    return LossBreakdown(l_det=l_det, l_deb=l_deb, l_fcss=l_fcss, total=total)
