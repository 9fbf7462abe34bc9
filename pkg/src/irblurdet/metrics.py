"""Image-quality and detection metrics.

PSNR for blur severity, SCR for target salience in feature maps, and a
COCO-style AP/AR evaluator for single-class detections.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidParameterError

EPS = 1e-8

IOU_THRESHOLDS = np.arange(0.50, 0.951, 0.05)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def psnr(x, y, peak=1.0):
    """Peak signal-to-noise ratio in dB.

    Parameters
    ----------
    x, y : ndarray
        Arrays of identical shape.
    peak : float
        Dynamic range of the signal (1.0 for normalized images).

    Returns
    -------
    float
        10 * log10(peak^2 / MSE); +inf when the inputs are identical.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidParameterError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if peak <= 0:
        raise InvalidParameterError("psnr: peak must be positive")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def scr(feature, box):
    """Signal-to-clutter ratio of a box region in a feature map.

    The feature map is averaged over channels, the target statistics come
    from the box interior, and the background from a surrounding ring whose
    width equals the larger box side (clipped to the map bounds).

    Parameters
    ----------
    feature : ndarray
        (H, W) or (C, H, W) feature map.
    box : tuple
        (x, y, w, h) at the feature map's resolution.

    Returns
    -------
    (float, bool)
        SCR value and a degenerate flag, set when the background has
        (near-)zero variance and the ratio is epsilon-limited.
    """
    feat = np.asarray(feature, dtype=np.float64)
    if feat.ndim == 3:
        feat = feat.mean(axis=0)
    if feat.ndim != 2:
        raise InvalidParameterError(f"scr: expected 2-D or 3-D feature, got {feat.ndim}-D")
    h, w = feat.shape
    x0, y0, bw, bh = box
    x1, y1 = x0 + bw, y0 + bh
    xi0, yi0 = int(math.floor(x0)), int(math.floor(y0))
    xi1, yi1 = int(math.ceil(x1)), int(math.ceil(y1))
    if xi0 < 0 or yi0 < 0 or xi1 > w or yi1 > h or bw <= 0 or bh <= 0:
        raise InvalidParameterError(f"scr: box {box} outside {w}x{h} map")

    ring = int(math.ceil(max(bw, bh)))
    rx0, ry0 = max(0, xi0 - ring), max(0, yi0 - ring)
    rx1, ry1 = min(w, xi1 + ring), min(h, yi1 + ring)

    target = feat[yi0:yi1, xi0:xi1]
    mask = np.ones(feat.shape, dtype=bool)
    mask[yi0:yi1, xi0:xi1] = False
    outer = np.zeros(feat.shape, dtype=bool)
    outer[ry0:ry1, rx0:rx1] = True
    bg = feat[mask & outer]
    if bg.size == 0:
        raise InvalidParameterError("scr: background ring is empty")

    mu_t = float(target.mean())
    mu_b = float(bg.mean())
    sigma_b = float(bg.std())
    value = abs(mu_t - mu_b) / (sigma_b + EPS)
    return value, sigma_b < EPS


def box_iou(a, b):
    """IoU of two (x, y, w, h) boxes."""
    ax0, ay0, aw, ah = a
    bx0, by0, bw, bh = b
    ix0, iy0 = max(ax0, bx0), max(ay0, by0)
    ix1, iy1 = min(ax0 + aw, bx0 + bw), min(ay0 + ah, by0 + bh)
    iw, ih = max(0.0, ix1 - ix0), max(0.0, iy1 - iy0)
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    if union <= 0:
        return 0.0
    return inter / union


@dataclass
class EvalReport:
    """Summary of a detection evaluation run."""

    ap50: float
    ap: float
    ar50: float
    ar: float
    per_image: list = field(default_factory=list)

    def as_dict(self):
        return {
            "ap50": self.ap50,
            "ap": self.ap,
            "ar50": self.ar50,
            "ar": self.ar,
            "per_image": self.per_image,
        }


@dataclass
class ScrReport:
    """Per-stage SCR statistics over a dataset."""

    per_stage: dict  # stage name -> mean SCR
    degenerate: dict  # stage name -> count of epsilon-limited boxes

    @property
    def mean(self):
        vals = [v for v in self.per_stage.values() if not math.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def _match_image(dets, gts, thr, max_dets):
    """Greedy per-image matching: detections in score order claim the
    unmatched ground truth with the highest IoU >= thr."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])[:max_dets]
    gt_taken = [False] * len(gts)
    flags = []  # (score, tp) in score order
    for i in order:
        box, score = dets[i]
        best_iou, best_j = thr, -1
        for j, gt in enumerate(gts):
            if gt_taken[j]:
                continue
            iou = box_iou(box, gt)
            if iou >= best_iou:
                best_iou, best_j = iou, j
        if best_j >= 0:
            gt_taken[best_j] = True
            flags.append((score, True))
        else:
            flags.append((score, False))
    return flags


def _ap_from_flags(scored_flags, n_gt):
    """101-point interpolated AP from (sort_key, tp) pairs."""
    if n_gt == 0:
        return 0.0, 0.0
    if not scored_flags:
        return 0.0, 0.0
    scored_flags = sorted(scored_flags, key=lambda t: t[0])
    tp = np.cumsum([f for _, f in scored_flags])
    fp = np.cumsum([not f for _, f in scored_flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope, then sample at the 101 recall points
    prec_env = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r, side="left")
        if idx < len(prec_env):
            ap += prec_env[idx]
    return ap / len(RECALL_POINTS), float(recall[-1])


def evaluate_detections(detections, ground_truths, max_dets=100):
    """COCO-style single-class evaluation.

    Parameters
    ----------
    detections : dict
        image_id -> list of ((x, y, w, h), score), any order.
    ground_truths : dict
        image_id -> list of (x, y, w, h).
    max_dets : int
        Per-image detection cap (COCO default 100).

    Returns
    -------
    EvalReport
        ap50 / ap (mean over IoU 0.50:0.05:0.95) and ar50 / ar
        (recall at the same thresholds, maxDets capped).
    """
    image_ids = sorted(set(ground_truths) | set(detections))
    n_gt = sum(len(ground_truths.get(i, [])) for i in image_ids)

    aps, recalls = [], []
    per_image = []
    for t_idx, thr in enumerate(IOU_THRESHOLDS):
        scored = []
        tp_total = 0
        for img in image_ids:
            flags = _match_image(
                detections.get(img, []), ground_truths.get(img, []), thr, max_dets
            )
            for k, (score, tp) in enumerate(flags):
                # tie-break by (image id, rank) so image ordering is irrelevant
                scored.append(((-score, str(img), k), tp))
            tp_total += sum(f for _, f in flags)
            if t_idx == 0:
                per_image.append(
                    {
                        "image_id": img,
                        "n_gt": len(ground_truths.get(img, [])),
                        "n_det": len(detections.get(img, [])),
                        "tp_at_50": int(sum(f for _, f in flags)),
                    }
                )
        ap, _ = _ap_from_flags(scored, n_gt)
        aps.append(ap)
        recalls.append(tp_total / n_gt if n_gt > 0 else 0.0)

    return EvalReport(
        ap50=float(aps[0]),
        ap=float(np.mean(aps)),
        ar50=float(recalls[0]),
        ar=float(np.mean(recalls)),
        per_image=per_image,
    )
