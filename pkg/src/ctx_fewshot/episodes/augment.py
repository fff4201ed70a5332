"""Image transformations for SimCLR episodes and BOHB-style augmentation.

Images are float arrays in [0, 1] of shape (H, W, C). Every transformation
draws its randomness from the generator it is handed, so outputs are a pure
function of (image, spec, generator state).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import color

PIPELINES = ("simclr-rho", "bohb-lite", "none")
BOHB_OPS = ("rotate", "posterize", "solarize", "color", "contrast", "brightness",
            "sharpness", "shear", "translate", "cutout", "downsample")


@dataclass(frozen=True)
class TransformSpec:
    kind: str = "simclr-rho"
    crop_scale: tuple = (0.2, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    blur_sigma: tuple = (0.1, 1.0)
    bohb_ops: tuple = BOHB_OPS
    rotate_deg: float = 30.0
    posterize_bits: tuple = (4, 8)
    solarize_threshold: tuple = (0.5, 1.0)
    enhance: float = 0.5  # magnitude for color/contrast/brightness/sharpness factors
    shear: float = 0.3
    translate: float = 0.2  # fraction of width
    cutout: float = 0.3  # side as fraction of width
    min_width_px: int = 10

    def validate(self):
        if self.kind not in PIPELINES:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise ValueError(f"crop_scale {self.crop_scale} must satisfy 0 < lo <= hi <= 1")
        if not 0 < self.crop_ratio[0] <= self.crop_ratio[1]:
            raise ValueError(f"crop_ratio {self.crop_ratio} invalid")
        if not 0 <= self.jitter_prob <= 1:
            raise ValueError("jitter_prob must lie in [0, 1]")
        for name in ("brightness", "contrast", "saturation", "enhance"):
            if not 0 <= getattr(self, name) < 1 + 1e-12:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")
        if not 0 <= self.blur_sigma[0] <= self.blur_sigma[1]:
            raise ValueError(f"blur_sigma {self.blur_sigma} invalid")
        unknown = set(self.bohb_ops) - set(BOHB_OPS)
        if unknown or not self.bohb_ops:
            raise ValueError(f"bohb_ops must be a nonempty subset of {BOHB_OPS}")
        if not 1 <= self.posterize_bits[0] <= self.posterize_bits[1] <= 8:
            raise ValueError("posterize_bits must lie in [1, 8]")
        if not 0 <= self.solarize_threshold[0] <= self.solarize_threshold[1] <= 1:
            raise ValueError("solarize_threshold must lie in [0, 1]")
        if not 0 <= self.translate <= 1 or not 0 <= self.cutout <= 1 or self.min_width_px < 1:
            raise ValueError("translate/cutout must lie in [0, 1] and min_width_px >= 1")
        return self


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got {img.shape}")
    return img


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment; exact copy when unchanged."""
    h, w, c = image.shape
    if (h, w) == (height, width):
        return image.copy()
    rows = (np.arange(height) + 0.5) * (h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (w / width) - 0.5
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([ndimage.map_coordinates(image[:, :, k], [rr, cc], order=1, mode="nearest")
                     for k in range(c)], axis=-1)


def random_resized_crop(image, scale, ratio, rng) -> np.ndarray:
    h, w, _ = image.shape
    area = h * w
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        cw = int(round(math.sqrt(target * aspect)))
        ch = int(round(math.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return resize(image[top:top + ch, left:left + cw], h, w)
    return image.copy()


def _grayscale(image):
    if image.shape[2] == 1:
        return image
    return (image @ np.array([0.299, 0.587, 0.114]))[..., None]


def _brightness(image, factor):
    return image * factor


def _contrast(image, factor):
    m = _grayscale(image).mean()
    return (image - m) * factor + m


def _saturation(image, factor):
    if image.shape[2] == 1:
        return image
    gray = _grayscale(image)
    return gray + (image - gray) * factor


def _hue(image, shift):
    if image.shape[2] == 1:
        return image
    hsv = color.rgb2hsv(np.clip(image, 0, 1))
    hsv[..., 0] = np.mod(hsv[..., 0] + shift, 1.0)
    return color.hsv2rgb(hsv)


def color_jitter(image, spec: TransformSpec, rng) -> np.ndarray:
    if rng.random() >= spec.jitter_prob:
        return image
    out = image
    if spec.brightness > 0:
        out = _brightness(out, rng.uniform(1 - spec.brightness, 1 + spec.brightness))
    if spec.contrast > 0:
        out = _contrast(out, rng.uniform(1 - spec.contrast, 1 + spec.contrast))
    if image.shape[2] == 3:
        if spec.saturation > 0:
            out = _saturation(out, rng.uniform(1 - spec.saturation, 1 + spec.saturation))
        if spec.hue > 0:
            out = _hue(np.clip(out, 0, 1), rng.uniform(-spec.hue, spec.hue))
    return out


def gaussian_blur(image, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="reflect")


def apply_rho(image, spec: TransformSpec, rng, is_query: bool = False) -> np.ndarray:
    """Random resized crop, colour jitter and, for query views only, blur."""
    img = _check_image(image)
    out = random_resized_crop(img, spec.crop_scale, spec.crop_ratio, rng)
    out = color_jitter(out, spec, rng)
    if is_query:
        out = gaussian_blur(out, rng.uniform(*spec.blur_sigma))
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _affine(image, matrix):
    h, w, _ = image.shape
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre
    return np.stack([ndimage.affine_transform(image[:, :, k], matrix, offset=offset, order=1,
                                              mode="constant", cval=0.0)
                     for k in range(image.shape[2])], axis=-1)


def _bohb_op(name: str, image, spec: TransformSpec, rng):
    h, w, _ = image.shape
    if name == "rotate":
        angle = math.radians(rng.uniform(-spec.rotate_deg, spec.rotate_deg))
        if angle == 0:
            return image.copy()
        c, s = math.cos(angle), math.sin(angle)
        return _affine(image, np.array([[c, -s], [s, c]]))
    if name == "posterize":
        bits = int(rng.integers(spec.posterize_bits[0], spec.posterize_bits[1] + 1))
        step = 2 ** (8 - bits)
        return np.floor(np.rint(image * 255) / step) * step / 255.0
    if name == "solarize":
        t = rng.uniform(*spec.solarize_threshold)
        return np.where(image >= t, 1.0 - image, image)
    if name in ("color", "contrast", "brightness", "sharpness"):
        factor = rng.uniform(1 - spec.enhance, 1 + spec.enhance)
        if name == "color":
            return _saturation(image, factor)
        if name == "contrast":
            return _contrast(image, factor)
        if name == "brightness":
            return _brightness(image, factor)
        smooth = ndimage.uniform_filter(image, size=(3, 3, 1), mode="nearest")
        return smooth + factor * (image - smooth)
    if name == "shear":
        k = rng.uniform(-spec.shear, spec.shear)
        return _affine(image, np.array([[1.0, k], [0.0, 1.0]]))
    if name == "translate":
        dy, dx = rng.uniform(-spec.translate, spec.translate, 2) * np.array([h, w])
        return np.stack([ndimage.shift(image[:, :, k], (dy, dx), order=1, mode="constant", cval=0.0)
                         for k in range(image.shape[2])], axis=-1)
    if name == "cutout":
        side = max(1, int(round(spec.cutout * w)))
        top = int(rng.integers(0, max(1, h - side + 1)))
        left = int(rng.integers(0, max(1, w - side + 1)))
        out = image.copy()
        out[top:top + side, left:left + side] = 0.0
        return out
    if name == "downsample":
        ratio = rng.uniform(min(1.0, spec.min_width_px / w), 1.0)
        small_w = max(1, int(round(w * ratio)))
        small_h = max(1, int(round(h * ratio)))
        return resize(resize(image, small_h, small_w), h, w)
    raise ValueError(f"unknown augmentation op {name!r}")


def apply_bohb_lite(image, spec: TransformSpec, rng) -> np.ndarray:
    """Two ops drawn uniformly (with replacement) from ``spec.bohb_ops``."""
    img = _check_image(image)
    ops = spec.bohb_ops
    for idx in rng.integers(0, len(ops), size=2):
        img = _bohb_op(ops[int(idx)], img, spec, rng)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def transform(image, spec: TransformSpec, rng, is_query: bool = False) -> np.ndarray:
    if spec.kind == "none":
        return np.asarray(image, dtype=np.float32).copy()
    if spec.kind == "simclr-rho":
        return apply_rho(image, spec, rng, is_query)
    return apply_bohb_lite(image, spec, rng)
