"""Dual-branch training loop, checkpointing, and clear-free inference.

Both passes run through the same module instances, so weight sharing is
structural. The clear pass is a no-grad teacher by default; inference
never touches a sharp image.
"""

import hashlib
import json
import math
from pathlib import Path

import numpy as np
import torch

from .config import EvalConfig, ExperimentConfig, TrainConfig, config_from_dict, config_to_dict
from .dataset import PairDataset, load_manifest
from .errors import InvalidParameterError
from .losses import LossBreakdown, deb_loss, det_loss, fcss_loss, total_loss
from .metrics import ScrReport, evaluate_detections, scr
from .model import DeblurDetector

__all__ = [
    "TrainConfig",
    "train_step",
    "run_training",
    "infer",
    "evaluate_model",
    "scr_report",
    "save_checkpoint",
    "load_checkpoint",
    "model_from_checkpoint",
]


def make_optimizer(model, config: TrainConfig):
    return torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)


def train_step(batch, model, epoch, optimizer, config: TrainConfig):
    """One optimizer update from a paired batch; returns realized loss values.

    Blurred pass drives detection; the clear pass supplies restoration and
    consistency targets and is skipped entirely when neither term is active.
    """
    sharp, blurred, boxes = batch[0], batch[1], batch[2]
    model.train()
    taps_b, stages_b, preds = model(blurred)
    l_det = det_loss(preds, boxes)

    l_deb = l_det.new_zeros(())
    l_fcss = l_det.new_zeros(())
    if model.fdd is not None or config.use_fcss:
        if config.detach_clear:
            with torch.no_grad():
                taps_c, stages_c = model.extract(sharp)
        else:
            taps_c, stages_c = model.extract(sharp)
        if model.fdd is not None:
            l_deb = deb_loss(taps_b, taps_c)
        if config.use_fcss:
            l_fcss = fcss_loss(stages_b, stages_c)

    breakdown = total_loss(l_det, l_deb, l_fcss, epoch, config.schedule)

    def _val(t):
        return float(t.detach()) if torch.is_tensor(t) else float(t)

    values = LossBreakdown(
        l_det=_val(breakdown.l_det),
        l_deb=_val(breakdown.l_deb),
        l_fcss=_val(breakdown.l_fcss),
        total=_val(breakdown.total),
    )
    if not math.isfinite(values.total):
        raise RuntimeError(
            "non-finite loss at epoch "
            f"{epoch}: l_det={values.l_det} l_deb={values.l_deb} "
            f"l_fcss={values.l_fcss} total={values.total}"
        )
    optimizer.zero_grad()
    breakdown.total.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
    optimizer.step()
    return values


def evaluate_model(model, dataset: PairDataset, eval_cfg: EvalConfig | None = None, batch_size=8):
    """AP/AR over a split, detections decoded from the blurred images."""
    eval_cfg = eval_cfg or EvalConfig()
    model.eval()
    detections, ground_truths = {}, {}
    with torch.no_grad():
        for _, blurred, _, idx in dataset.batches(batch_size):
            batch_dets = model.detect(blurred, eval_cfg.score_threshold, eval_cfg.iou_nms)
            for i, dets in zip(idx, batch_dets):
                rec = dataset.records[i]
                detections[rec.id] = [(tuple(d.box), float(d.score)) for d in dets]
                ground_truths[rec.id] = [tuple(b) for b in rec.boxes]
    return evaluate_detections(detections, ground_truths, eval_cfg.max_dets)


def scr_report(model, dataset: PairDataset, max_images=None, batch_size=8):
    """Mean per-stage target-to-clutter separability of backbone features."""
    model.eval()
    sums, counts, degenerate = {}, {}, {}
    seen = 0
    with torch.no_grad():
        for _, blurred, boxes, _ in dataset.batches(batch_size):
            _, stages = model.extract(blurred)
            for b in range(blurred.shape[0]):
                if max_images is not None and seen >= max_images:
                    break
                seen += 1
                for s, fmap in enumerate(stages):
                    name = f"stage{s + 1}"
                    scale = fmap.shape[-1] / blurred.shape[-1]
                    for box in boxes[b]:
                        sbox = tuple(v * scale for v in box)
                        value, degen = scr(fmap[b].numpy(), sbox)
                        if math.isnan(value):
                            continue
                        sums[name] = sums.get(name, 0.0) + value
                        counts[name] = counts.get(name, 0) + 1
                        if degen:
                            degenerate[name] = degenerate.get(name, 0) + 1
    per_stage = {k: sums[k] / counts[k] for k in sorted(sums)}
    return ScrReport(per_stage=per_stage, degenerate=degenerate)


def save_checkpoint(path, model, optimizer, epoch, config: ExperimentConfig, best_ap50, metric_at_save=None):
    """Single-parameter-set archive plus a sidecar JSON metadata file."""
    path = Path(path)
    payload = {
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "epoch": epoch,
        "best_ap50": best_ap50,
        "config": config_to_dict(config),
    }
    torch.save(payload, path)
    tau = float(model.backbone.fsgm.tau.detach()) if model.backbone.fsgm is not None else None
    meta = {
        "epoch": epoch,
        "config": payload["config"],
        "tau": tau,
        "param_counts": model.param_counts(),
        "metric_at_save": metric_at_save,
        "content_hash": hashlib.sha256(path.read_bytes()).hexdigest(),
    }
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return torch.load(path, map_location="cpu", weights_only=False)


def model_from_checkpoint(payload):
    """Rebuild the detector from a checkpoint's config snapshot."""
    cfg = config_from_dict(payload["config"])
    model = DeblurDetector(cfg.model)
    model.load_state_dict(payload["model_state"])
    model.eval()
    return model, cfg


def run_training(config: ExperimentConfig, manifest_path, out_dir, resume=False, quiet=False):
    """Epoch loop with per-epoch reshuffles, periodic validation, checkpoints.

    Data order depends only on (seed, epoch), so a resumed run replays the
    exact batches the unbroken run would have seen.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest_path)
    train_set = PairDataset(records, "train")
    try:
        val_set = PairDataset(records, "val")
    except InvalidParameterError:
        val_set = None

    tcfg = config.train
    torch.manual_seed(tcfg.seed)
    model = DeblurDetector(config.model)
    optimizer = make_optimizer(model, tcfg)

    last_path = out_dir / "last.pt"
    best_path = out_dir / "best.pt"
    log_path = out_dir / "train_log.jsonl"

    start_epoch, best_ap50 = 1, -1.0
    if resume and last_path.exists():
        payload = load_checkpoint(last_path)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"] + 1
        best_ap50 = payload.get("best_ap50", -1.0)

    prev_lambda2 = None
    last_val_ap50 = None
    with open(log_path, "a" if start_epoch > 1 else "w") as log:
        for epoch in range(start_epoch, tcfg.epochs + 1):
            lam2 = tcfg.schedule.lambda2(epoch)
            if prev_lambda2 is not None and lam2 != prev_lambda2:
                log.write(json.dumps({"event": "lambda2_switch", "epoch": epoch, "lambda2": lam2}) + "\n")
            prev_lambda2 = lam2

            rng = np.random.default_rng([tcfg.seed, epoch])
            epoch_total = 0.0
            n_steps = 0
            for step, batch in enumerate(train_set.batches(tcfg.batch_size, rng)):
                values = train_step(batch, model, epoch, optimizer, tcfg)
                log.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "step": step,
                            "l_det": values.l_det,
                            "l_deb": values.l_deb,
                            "l_fcss": values.l_fcss,
                            "total": values.total,
                            "lambda1": tcfg.schedule.lambda1,
                            "lambda2": lam2,
                        }
                    )
                    + "\n"
                )
                epoch_total += values.total
                n_steps += 1

            is_last = epoch == tcfg.epochs
            if val_set is not None and (epoch % tcfg.val_interval == 0 or is_last):
                report = evaluate_model(model, val_set, config.eval, tcfg.batch_size)
                last_val_ap50 = report.ap50
                log.write(json.dumps({"event": "val", "epoch": epoch, "ap50": report.ap50, "ap": report.ap}) + "\n")
                if report.ap50 >= best_ap50:
                    best_ap50 = report.ap50
                    save_checkpoint(best_path, model, optimizer, epoch, config, best_ap50, report.ap50)
            save_checkpoint(last_path, model, optimizer, epoch, config, best_ap50, last_val_ap50)
            if not quiet:
                mean_total = epoch_total / max(n_steps, 1)
                msg = f"epoch {epoch}/{tcfg.epochs} loss {mean_total:.4f} lambda2 {lam2}"
                if last_val_ap50 is not None:
                    msg += f" val_ap50 {last_val_ap50:.3f}"
                print(msg)
            log.flush()

    if not best_path.exists():
        save_checkpoint(best_path, model, optimizer, tcfg.epochs, config, best_ap50, last_val_ap50)
    return {"last": last_path, "best": best_path, "log": log_path, "best_ap50": best_ap50}


def infer(checkpoint_path, blurred, score_threshold=0.3, iou_nms=0.5):
    """Detections for a single blurred image; no sharp counterpart exists here."""
    payload = load_checkpoint(checkpoint_path)
    model, _ = model_from_checkpoint(payload)
    x = torch.as_tensor(np.asarray(blurred), dtype=torch.float32)
    if x.dim() == 2:
        x = x.unsqueeze(0)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[0] != 1:
        raise InvalidParameterError(f"infer expects one image, got shape {tuple(x.shape)}")
    with torch.no_grad():
        return model.detect(x, score_threshold, iou_nms)[0]
