"""Synthetic infrared scenes with small bright targets and linear motion blur.

Scenes are low-frequency clutter plus pixel noise with anisotropic Gaussian
target blobs. Blur kernels are normalized rasterized line segments; each
generated pair records its achieved PSNR and severity band.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter
from scipy.signal import convolve2d

from .errors import GenerationError, InvalidParameterError
from .metrics import psnr

SUPERSAMPLE = 4  # line samples per pixel of kernel length


class BlurLevel(Enum):
    """Blur severity bands over achieved PSNR, half-open in dB."""

    SEVERE = ("Severe", (10.0, 20.0))
    MODERATE = ("Moderate", (20.0, 22.5))
    MILD = ("Mild", (22.5, 32.0))

    @property
    def label(self):
        return self.value[0]

    @property
    def psnr_band(self):
        return self.value[1]

    @classmethod
    def from_label(cls, label):
        for level in cls:
            if level.label == label:
                return level
        raise InvalidParameterError(f"unknown blur level label {label!r}")


def classify_blur_level(psnr_db):
    """Map an achieved PSNR to its severity band.

    Returns None when the value falls outside [10, 32); raises on NaN.
    """
    if isinstance(psnr_db, float) and math.isnan(psnr_db):
        raise InvalidParameterError("classify_blur_level: NaN psnr")
    for level in BlurLevel:
        lo, hi = level.psnr_band
        if lo <= psnr_db < hi:
            return level
    return None


@dataclass
class MotionKernel:
    """Rasterized linear point-spread function."""

    length: int
    angle: float  # radians in [0, pi)
    size: int  # odd side length
    weights: np.ndarray  # (size, size), nonnegative, sums to 1


def make_linear_kernel(length, angle):
    """Rasterize a centered line segment of the given pixel length and angle.

    The continuous segment is sampled at 4x supersampling and binned into
    cells, then symmetrized about the center and normalized.
    """
    if not np.isfinite(angle):
        raise InvalidParameterError("make_linear_kernel: non-finite angle")
    if int(length) != length or length < 1:
        raise InvalidParameterError(f"make_linear_kernel: length must be an integer >= 1, got {length}")
    length = int(length)
    angle = float(angle) % math.pi

    if length == 1:
        return MotionKernel(1, angle, 1, np.ones((1, 1)))

    size = length if length % 2 == 1 else length + 1
    half = size // 2
    n = SUPERSAMPLE * length
    t = -length / 2 + (np.arange(n) + 0.5) * length / n
    xs = t * math.cos(angle)
    ys = t * math.sin(angle)
    cx = np.floor(xs + 0.5).astype(int) + half
    cy = np.floor(ys + 0.5).astype(int) + half

    weights = np.zeros((size, size))
    np.add.at(weights, (cy, cx), 1.0)
    weights = (weights + weights[::-1, ::-1]) / 2.0  # enforce point symmetry
    weights /= weights.sum()
    return MotionKernel(length, angle, size, weights)


def apply_blur(image, kernel):
    """Convolve a single-channel image with a motion kernel.

    Boundaries use reflection padding; the output shape equals the input's.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise InvalidParameterError(f"apply_blur: expected 2-D image, got {image.ndim}-D")
    if kernel.size > min(image.shape):
        raise InvalidParameterError(
            f"apply_blur: kernel size {kernel.size} exceeds image {image.shape}"
        )
    pad = kernel.size // 2
    if pad == 0:
        out = image.astype(np.float64) * kernel.weights[0, 0]
    else:
        padded = np.pad(image.astype(np.float64), pad, mode="reflect")
        out = convolve2d(padded, kernel.weights, mode="valid")
    return out.astype(image.dtype, copy=False)


@dataclass
class SceneSpec:
    """Parameters of one synthetic scene."""

    height: int = 96
    width: int = 96
    n_targets: int = 2
    target_size: tuple = (3, 15)  # box side range in px
    target_amplitude: tuple = (0.3, 0.7)
    clutter_amplitude: float = 0.15
    noise_sigma: float = 0.05
    background_level: float = 0.3


def synth_scene(spec, rng):
    """Generate one sharp scene and its tight target boxes.

    Background is smoothed white noise (low-frequency clutter) plus pixel
    noise; each target is an anisotropic Gaussian blob whose box is sampled
    first and sets the blob's spread.
    """
    h, w = spec.height, spec.width
    smax = spec.target_size[1]
    if smax + 2 > min(h, w):
        raise InvalidParameterError(
            f"synth_scene: target size {smax} does not fit a {h}x{w} image"
        )

    clutter = rng.standard_normal((h, w))
    clutter = gaussian_filter(clutter, sigma=min(h, w) / 8.0)
    peak = np.abs(clutter).max()
    if peak > 0:
        clutter /= peak
    img = spec.background_level + spec.clutter_amplitude * clutter

    yy, xx = np.mgrid[0:h, 0:w]
    boxes = []
    for _ in range(spec.n_targets):
        for _attempt in range(50):
            bw = int(rng.integers(spec.target_size[0], spec.target_size[1] + 1))
            bh = int(rng.integers(spec.target_size[0], spec.target_size[1] + 1))
            x0 = int(rng.integers(1, w - bw))
            y0 = int(rng.integers(1, h - bh))
            if not any(
                x0 < bx + bbw and bx < x0 + bw and y0 < by + bbh and by < y0 + bh
                for bx, by, bbw, bbh in boxes
            ):
                break
        amp = rng.uniform(*spec.target_amplitude)
        cx, cy = x0 + bw / 2.0, y0 + bh / 2.0
        # +-2.5 sigma spans the box, so it covers the blob tightly
        sx, sy = max(bw / 5.0, 0.5), max(bh / 5.0, 0.5)
        img = img + amp * np.exp(
            -(((xx - cx + 0.5) ** 2) / (2 * sx**2) + ((yy - cy + 0.5) ** 2) / (2 * sy**2))
        )
        boxes.append((x0, y0, bw, bh))

    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, (h, w))
    return np.clip(img, 0.0, 1.0), boxes


def quantize(img):
    """Snap a [0, 1] float image onto the 8-bit grid it will be stored on."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def save_png(img, path):
    Image.fromarray(np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8), mode="L").save(path)


def load_png(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


@dataclass
class SynthConfig:
    """Dataset generation parameters; generation is a pure function of these."""

    counts: dict = field(default_factory=lambda: {"train": 8, "val": 1, "test": 1})
    height: int = 96
    width: int = 96
    targets_per_image: tuple = (1, 3)
    target_size: tuple = (3, 15)
    target_amplitude: tuple = (0.3, 0.7)
    clutter_amplitude: tuple = (0.05, 0.2)
    noise_sigma: tuple = (0.04, 0.16)
    background_level: float = 0.3
    blur_length: tuple = (3, 11)
    blur_angle: tuple = (0.0, math.pi)
    post_blur_noise_sigma: float = 0.0
    seed: int = 0
    max_retries: int = 20


def generate_sample(config, split, index, global_index):
    """Generate one sample pair; pure function of (config, global_index)."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, global_index]))
    spec = SceneSpec(
        height=config.height,
        width=config.width,
        n_targets=int(rng.integers(config.targets_per_image[0], config.targets_per_image[1] + 1)),
        target_size=config.target_size,
        target_amplitude=config.target_amplitude,
        clutter_amplitude=float(rng.uniform(*config.clutter_amplitude)),
        noise_sigma=float(rng.uniform(*config.noise_sigma)),
        background_level=config.background_level,
    )
    sharp, boxes = synth_scene(spec, rng)
    sharp = quantize(sharp)

    for _retry in range(config.max_retries):
        length = int(rng.integers(config.blur_length[0], config.blur_length[1] + 1))
        angle = float(rng.uniform(*config.blur_angle))
        kernel = make_linear_kernel(length, angle)
        blurred = apply_blur(sharp, kernel)
        if config.post_blur_noise_sigma > 0:
            blurred = blurred + rng.normal(0.0, config.post_blur_noise_sigma, blurred.shape)
        blurred = quantize(blurred)
        achieved = psnr(sharp, blurred, peak=1.0)
        level = classify_blur_level(achieved)
        if level is not None:
            break
    else:
        raise GenerationError(
            f"sample {split}/{index}: PSNR stayed outside [10, 32) after "
            f"{config.max_retries} kernel retries"
        )

    sample_id = f"{split}_{index:05d}"
    meta = {
        "length": length,
        "angle_deg": math.degrees(angle),
        "psnr": achieved,
        "level": level.label,
    }
    return sample_id, sharp, blurred, boxes, meta


def build_dataset(config, out_dir):
    """Write paired sharp/blurred PNGs and a JSONL manifest; returns its path."""
    out_dir = Path(out_dir)
    (out_dir / "sharp").mkdir(parents=True, exist_ok=True)
    (out_dir / "blurred").mkdir(parents=True, exist_ok=True)

    records = []
    global_index = 0
    for split in ("train", "val", "test"):
        for i in range(config.counts.get(split, 0)):
            sample_id, sharp, blurred, boxes, meta = generate_sample(
                config, split, i, global_index
            )
            global_index += 1
            save_png(sharp, out_dir / "sharp" / f"{sample_id}.png")
            save_png(blurred, out_dir / "blurred" / f"{sample_id}.png")
            records.append(
                {
                    "id": sample_id,
                    "split": split,
                    "sharp_path": f"sharp/{sample_id}.png",
                    "blurred_path": f"blurred/{sample_id}.png",
                    "boxes": [list(b) for b in boxes],
                    "blur": meta,
                }
            )

    manifest_path = out_dir / "manifest.jsonl"
    with open(manifest_path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    return manifest_path
