"""Layout conversion and differentiable resampling helpers.

Datasets are stored as NHWC arrays (uint8 or float in [0, 1]); networks see
float32 NCHW tensors. All warps use bilinear sampling with half-pixel
centres (``align_corners=False``) so they are differentiable in the pixels.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F


def to_tensor(images, device=None) -> torch.Tensor:
    """NHWC / HWC array (uint8 or float) -> float32 NCHW tensor in [0, 1]."""
    if isinstance(images, torch.Tensor):
        return images.to(device=device, dtype=torch.float32)
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr))
    t = t.float() / 255.0 if arr.dtype == np.uint8 else t.float()
    return t.permute(0, 3, 1, 2).contiguous().to(device)


def to_numpy(images: torch.Tensor) -> np.ndarray:
    """float NCHW tensor -> float32 NHWC array."""
    return images.detach().cpu().permute(0, 2, 3, 1).numpy().astype(np.float32)


def quantize(images: np.ndarray) -> np.ndarray:
    """float [0, 1] -> uint8, round-to-nearest."""
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def affine_warp(x: torch.Tensor, theta: torch.Tensor, size=None) -> torch.Tensor:
    """Bilinear warp with a batch of 2x3 output->input maps in normalised coords; zero fill."""
    n, c, h, w = x.shape
    oh, ow = size if size is not None else (h, w)
    grid = F.affine_grid(theta.to(x.dtype), [n, c, oh, ow], align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def crop_theta(scale: torch.Tensor, cx: torch.Tensor, cy: torch.Tensor) -> torch.Tensor:
    """Map full output frame onto a window of relative size ``scale`` centred at (cx, cy)."""
    zeros = torch.zeros_like(scale)
    row0 = torch.stack([scale, zeros, cx], dim=-1)
    row1 = torch.stack([zeros, scale, cy], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def rotation_theta(degrees: torch.Tensor, h: int, w: int) -> torch.Tensor:
    """Rotate content by ``degrees`` counter-clockwise about the image centre."""
    rad = degrees * (math.pi / 180.0)
    cos, sin = torch.cos(rad), torch.sin(rad)
    zeros = torch.zeros_like(rad)
    # normalised coords are anisotropic for h != w
    row0 = torch.stack([cos, -sin * h / w, zeros], dim=-1)
    row1 = torch.stack([sin * w / h, cos, zeros], dim=-1)
    return torch.stack([row0, row1], dim=-2)


def resize(x: torch.Tensor, size) -> torch.Tensor:
    return F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)


def center_crop_resize(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Central crop of ``round(scale * side)`` pixels, resampled back to the input size."""
    h, w = x.shape[-2:]
    ch, cw = max(1, round(scale * h)), max(1, round(scale * w))
    top, left = (h - ch) // 2, (w - cw) // 2
    return resize(x[..., top:top + ch, left:left + cw], (h, w))


def shrink_pad(x: torch.Tensor, scale: float) -> torch.Tensor:
    """Shrink to ``round(scale * side)`` pixels and centre in a zero frame."""
    h, w = x.shape[-2:]
    sh, sw = max(1, round(scale * h)), max(1, round(scale * w))
    small = resize(x, (sh, sw))
    top, left = (h - sh) // 2, (w - sw) // 2
    return F.pad(small, (left, w - sw - left, top, h - sh - top))
