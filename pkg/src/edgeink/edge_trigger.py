"""Edge-structure trigger patterns.

A trigger is the binary edge map of the cover image painted with a single
"poison ink" colour. The colour carries the poison message (which target
label the sample should be pulled towards); the background stays black.

Images here are numpy arrays in HWC (or NHWC) layout with values in [0, 1].
Gradient operators are normalised so that a unit step produces magnitude 1,
which keeps one threshold meaningful across operators.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigError, InputError

OPERATORS = ("sobel", "scharr", "prewitt", "roberts", "canny")

# centre weight of the [1, w, 1] smoothing tap and the unit-step response;
# scharr's [3, 10, 3] is rescaled to a unit side weight
_SEPARABLE = {
    "sobel": (2.0, 4.0),
    "scharr": (10.0 / 3.0, 16.0 / 3.0),
    "prewitt": (1.0, 3.0),
}

LUMA = (0.299, 0.587, 0.114)
DEFAULT_COLOR = (80, 160, 80)
DEFAULT_THRESHOLD = 0.2
MIN_SEPARATION = 32


@dataclass(frozen=True)
class PoisonColor:
    rgb: tuple[int, int, int]
    message_id: int = 0

    def __post_init__(self):
        if len(self.rgb) != 3 or any(not 0 <= int(c) <= 255 for c in self.rgb):
            raise InputError(f"rgb channels must lie in [0, 255], got {self.rgb}")
        object.__setattr__(self, "rgb", tuple(int(c) for c in self.rgb))

    @property
    def unit(self) -> np.ndarray:
        return np.asarray(self.rgb, dtype=np.float32) / 255.0


@dataclass
class EdgeMap:
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    operator_id: str = "sobel"
    threshold: float = DEFAULT_THRESHOLD

    @property
    def density(self) -> float:
        return float(self.mask.mean())


@dataclass
class TriggerPattern:
    pixels: np.ndarray  # H x W x 3 float32
    color: PoisonColor
    source_edge: EdgeMap = field(repr=False)


def to_gray(images: np.ndarray) -> np.ndarray:
    """Luminance of an (..., H, W, 3) array."""
    images = np.asarray(images, dtype=np.float64)
    return images[..., 0] * LUMA[0] + images[..., 1] * LUMA[1] + images[..., 2] * LUMA[2]


def _shift(a, dy, dx):
    """a[y + dy, x + dx] with replicate borders, over the last two axes."""
    h, w = a.shape[-2:]
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return a[..., ys, :][..., :, xs]


def _smooth(a, axis_shift, centre):
    # (left + right) first: keeps the result exactly mirror symmetric
    if axis_shift == "x":
        side = _shift(a, 0, -1) + _shift(a, 0, 1)
    else:
        side = _shift(a, -1, 0) + _shift(a, 1, 0)
    return side + centre * a


def gradient_magnitude(gray: np.ndarray, operator_id: str = "sobel") -> np.ndarray:
    """Normalised gradient magnitude of an (..., H, W) grayscale array."""
    gray = np.asarray(gray, dtype=np.float64)
    if operator_id == "roberts":
        d1 = gray - _shift(gray, 1, 1)
        d2 = _shift(gray, 0, 1) - _shift(gray, 1, 0)
        return np.sqrt(d1 * d1 + d2 * d2)
    if operator_id not in _SEPARABLE:
        raise ConfigError(f"unknown gradient operator '{operator_id}'")
    centre, norm = _SEPARABLE[operator_id]
    col = _smooth(gray, "y", centre)
    row = _smooth(gray, "x", centre)
    gx = (_shift(col, 0, 1) - _shift(col, 0, -1)) / norm
    gy = (_shift(row, 1, 0) - _shift(row, -1, 0)) / norm
    return np.sqrt(gx * gx + gy * gy)


def _check_image(image):
    image = np.asarray(image)
    if image.ndim < 3 or image.shape[-1] != 3:
        raise InputError(f"expected (..., H, W, 3) image, got shape {image.shape}")
    if image.shape[-3] < 3 or image.shape[-2] < 3:
        raise InputError(f"image must be at least 3x3, got {image.shape[-3:-1]}")
    return image


def extract_edge_masks(
    images: np.ndarray,
    operator_id: str = "sobel",
    threshold: float = DEFAULT_THRESHOLD,
    *,
    canny_sigma: float = 1.0,
    canny_low: float | None = None,
    dilate: int = 0,
) -> np.ndarray:
    """Binary edge masks for an (N, H, W, 3) or (H, W, 3) array -> uint8 (N, H, W)."""
    images = _check_image(images)
    if operator_id not in OPERATORS:
        raise ConfigError(f"unknown edge operator '{operator_id}', expected one of {OPERATORS}")
    if threshold < 0:
        raise ConfigError(f"edge threshold must be >= 0, got {threshold}")
    gray = to_gray(images)
    if operator_id == "canny":
        from skimage.feature import canny

        low = 0.4 * threshold if canny_low is None else canny_low
        flat = gray.reshape(-1, *gray.shape[-2:])
        mask = np.stack(
            [canny(g, sigma=canny_sigma, low_threshold=low, high_threshold=threshold) for g in flat]
        ).reshape(gray.shape)
    else:
        mask = gradient_magnitude(gray, operator_id) > threshold
    if dilate > 0:
        structure = np.zeros((3,) * mask.ndim, dtype=bool)
        structure[(1,) * (mask.ndim - 2)] = ndimage.generate_binary_structure(2, 1)
        mask = ndimage.binary_dilation(mask, structure=structure, iterations=dilate)
    return mask.astype(np.uint8)


def extract_edges(image: np.ndarray, operator_id: str = "sobel", threshold: float = DEFAULT_THRESHOLD,
                  **kwargs) -> EdgeMap:
    """Edge map of a single H x W x 3 image."""
    image = _check_image(image)
    if image.ndim != 3:
        raise InputError(f"extract_edges takes one image, got shape {image.shape}")
    mask = extract_edge_masks(image, operator_id, threshold, **kwargs)
    return EdgeMap(mask=mask, operator_id=operator_id, threshold=float(threshold))


def calibrate_threshold(images: np.ndarray, operator_id: str = "sobel", edge_fraction: float = 0.10) -> float:
    """Threshold at which ``edge_fraction`` of the pixels of ``images`` are edges."""
    if not 0.0 < edge_fraction < 1.0:
        raise ConfigError(f"edge_fraction must be in (0, 1), got {edge_fraction}")
    if operator_id == "canny":
        raise ConfigError("canny thresholds are not calibrated by quantile")
    mag = gradient_magnitude(to_gray(_check_image(images)), operator_id)
    return float(np.quantile(mag, 1.0 - edge_fraction))


def _palette_grid():
    # R/B on a 16-offset lattice, G on a 0-offset lattice: (80, 160, 80) lies on it
    # and any two lattice points differ by >= 32 in some channel.
    rb = np.arange(16, 256, MIN_SEPARATION)
    g = np.arange(0, 256, MIN_SEPARATION)
    r, gg, b = np.meshgrid(rb, g, rb, indexing="ij")
    return np.stack([r.ravel(), gg.ravel(), b.ravel()], axis=1)


def make_palette(n_labels: int) -> list[PoisonColor]:
    """Deterministic palette; entry 0 is the default ink, the rest spread by farthest-point order."""
    if not 1 <= int(n_labels) <= 256:
        raise ConfigError(f"n_labels must be in [1, 256], got {n_labels}")
    grid = _palette_grid().astype(np.int64)
    chosen = [np.asarray(DEFAULT_COLOR)]
    dist = np.abs(grid - chosen[0]).max(axis=1)
    while len(chosen) < n_labels:
        # ties broken by lowest lattice index -> deterministic
        idx = int(np.argmax(dist))
        chosen.append(grid[idx])
        dist = np.minimum(dist, np.abs(grid - grid[idx]).max(axis=1))
    return [PoisonColor(tuple(int(v) for v in c), message_id=i) for i, c in enumerate(chosen)]


def colorize(masks: np.ndarray, colors: np.ndarray) -> np.ndarray:
    """Paint (N, H, W) masks with (N, 3) uint8 colours -> float32 (N, H, W, 3)."""
    masks = np.asarray(masks)
    colors = np.asarray(colors, dtype=np.float32).reshape(-1, 3) / 255.0
    if masks.ndim == 2:
        masks = masks[None]
    if len(colors) == 1:
        colors = np.repeat(colors, len(masks), axis=0)
    if len(colors) != len(masks):
        raise InputError(f"{len(masks)} masks but {len(colors)} colours")
    return masks[..., None].astype(np.float32) * colors[:, None, None, :]


def make_trigger_pattern(edge_map: EdgeMap, color: PoisonColor) -> TriggerPattern:
    pixels = colorize(edge_map.mask, np.asarray(color.rgb)[None])[0]
    return TriggerPattern(pixels=pixels, color=color, source_edge=edge_map)


def save_pattern_png(pattern: TriggerPattern | np.ndarray, path: str | Path) -> Path:
    from PIL import Image

    pixels = pattern.pixels if isinstance(pattern, TriggerPattern) else np.asarray(pattern)
    path = Path(path)
    Image.fromarray(np.round(np.clip(pixels, 0, 1) * 255).astype(np.uint8)).save(path)
    return path


@dataclass
class EdgeConfig:
    """Edge extraction settings; ``threshold: null`` means calibrate on the training images."""

    operator: str = "sobel"
    threshold: float | None = None
    edge_fraction: float = 0.10
    canny_sigma: float = 1.0
    canny_low: float | None = None
    dilate: int = 0

    def validate(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"unknown edge operator '{self.operator}', expected one of {OPERATORS}")
        if self.threshold is not None and self.threshold < 0:
            raise ConfigError(f"edge threshold must be >= 0, got {self.threshold}")
        if self.threshold is None and self.operator == "canny":
            raise ConfigError("canny needs an explicit edge.threshold")
        if self.dilate < 0:
            raise ConfigError("edge.dilate must be >= 0")
        return self

    def resolved(self, images) -> "EdgeConfig":
        """Copy with a concrete threshold, calibrating on ``images`` if needed."""
        if self.threshold is not None:
            return self
        from dataclasses import replace

        sample = np.asarray(images[:2000])
        if sample.dtype == np.uint8:
            sample = sample.astype(np.float32) / 255.0
        thr = calibrate_threshold(sample, self.operator, self.edge_fraction)
        return replace(self, threshold=round(thr, 6))

    def masks(self, images, chunk=4096) -> np.ndarray:
        if self.threshold is None:
            raise ConfigError("edge threshold unresolved; call resolved() first")
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images.astype(np.float32) / 255.0
            return self.masks(images, chunk)
        if images.ndim == 3:
            return self._masks(images)
        return np.concatenate([self._masks(images[i:i + chunk]) for i in range(0, len(images), chunk)]) \
            if len(images) else np.zeros((0, *images.shape[1:3]), np.uint8)

    def _masks(self, images):
        return extract_edge_masks(images, self.operator, self.threshold, canny_sigma=self.canny_sigma,
                                  canny_low=self.canny_low, dilate=self.dilate)
