"""Segmentation losses and the signed distance field behind the boundary terms.

Loss functions take torch tensors (numpy arrays are converted) holding the
tumour-channel probability.  A leading batch axis is allowed: Dice pools over
the whole batch, the boundary integral is averaged over samples.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import ConfigError, DegenerateError, ParameterError, ShapeError
from .volgrid import BinaryMask, _Grid

BCE_CLIP = 1e-7


BOUNDARY_REDUCTIONS = ("mean", "integral")


@dataclass(frozen=True)
class LossConfig:
    w_dice: float = 1.0
    w_boundary: float = 1.0
    w_distmap: float = 0.0
    w_focal: float = 0.0
    boundary_alpha: float = 0.01
    # "mean": alpha scales L_B per unit of integration volume; "integral": raw L_B
    boundary_reduction: str = "mean"
    focal_beta: float = 2.0
    dice_smooth: float = 1e-5

    def __post_init__(self):
        weights = (self.w_dice, self.w_boundary, self.w_distmap, self.w_focal)
        if not all(np.isfinite(w) and w >= 0 for w in weights):
            raise ConfigError(f"loss weights must be finite and >= 0, got {weights}")
        if not any(w > 0 for w in weights):
            raise ConfigError("at least one loss weight must be positive")
        if self.focal_beta < 1:
            raise ConfigError("focal_beta must be >= 1")
        if self.boundary_reduction not in BOUNDARY_REDUCTIONS:
            raise ConfigError(f"boundary_reduction must be one of {BOUNDARY_REDUCTIONS}")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(a, b):
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype if a.is_floating_point() else None)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return a, b.to(a.dtype)


def soft_dice(probs, gt, eps: float = 1e-5) -> torch.Tensor:
    """(2 sum(s g) + eps) / (sum(s^2) + sum(g^2) + eps)."""
    s, g = _pair(probs, gt)
    return (2 * (s * g).sum() + eps) / ((s * s).sum() + (g * g).sum() + eps)


def dice_loss(probs, gt, eps: float = 1e-5) -> torch.Tensor:
    return 1 - soft_dice(probs, gt, eps)


def boundary_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background 6-neighbour; outside the volume counts as background."""
    m = np.asarray(mask, dtype=bool)
    interior = ndimage.binary_erosion(m, structure=ndimage.generate_binary_structure(3, 1),
                                      border_value=0)
    return m & ~interior


@dataclass(frozen=True, eq=False)
class SignedDistanceField(_Grid):
    """Signed distance in mm, kept in float64 so it matches exact references."""

    voxels: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        arr = np.array(self.voxels, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "voxels", arr)
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))


def signed_distance_map(mask) -> SignedDistanceField:
    """Euclidean distance (mm) to the mask boundary voxels, negative inside.

    Boundary voxels are zero.  For a background voxel the nearest foreground
    voxel is always a boundary voxel, so one transform of the boundary set
    serves both sides.
    """
    if isinstance(mask, BinaryMask):
        arr, spacing, origin = mask.voxels, mask.spacing, mask.origin
    else:
        arr, spacing, origin = np.asarray(mask, dtype=bool), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)
    if not arr.any() or arr.all():
        raise DegenerateError("signed distance needs a mask that is neither empty nor full")
    edge = boundary_mask(arr)
    dist = ndimage.distance_transform_edt(~edge, sampling=spacing)
    phi = np.where(arr, -dist, dist)
    return SignedDistanceField(phi, spacing, origin)


def boundary_loss(probs, sdf, voxel_volume: float = 1.0) -> torch.Tensor:
    """Quadrature of the integral of phi_G * s over the domain."""
    s, phi = _pair(probs, sdf)
    if s.ndim == 4:
        return (phi * s).flatten(1).sum(1).mean() * voxel_volume
    return (phi * s).sum() * voxel_volume


def distance_map_loss(probs, gt, sdf) -> torch.Tensor:
    """Mean BCE weighted by 1 + |phi| / max|phi|."""
    s, g = _pair(probs, gt)
    _, phi = _pair(s, sdf)
    s = s.clamp(BCE_CLIP, 1 - BCE_CLIP)
    bce = -(g * torch.log(s) + (1 - g) * torch.log(1 - s))
    mag = phi.abs()
    peak = mag.max()
    weight = 1 + mag / peak if peak > 0 else torch.ones_like(mag)
    return (weight * bce).mean()


def focal_dice_loss(probs, gt, beta: float = 2.0, eps: float = 1e-5) -> torch.Tensor:
    """1 - DSC^(1/beta)."""
    if beta < 1:
        raise ParameterError(f"beta must be >= 1, got {beta}")
    return 1 - soft_dice(probs, gt, eps) ** (1.0 / beta)


def combined_loss(cfg: LossConfig, probs, gt, sdf=None, voxel_volume: float = 1.0) -> torch.Tensor:
    """Weighted sum of the enabled terms.

    With ``boundary_reduction="mean"`` the boundary integral is divided by
    the volume of one patch, so alpha weighs the mean of phi * s; the raw
    integral grows with patch size and swamps the Dice term.
    """
    total = 0.0
    if cfg.w_dice:
        total = total + cfg.w_dice * dice_loss(probs, gt, cfg.dice_smooth)
    if cfg.w_boundary:
        bl = boundary_loss(probs, sdf, voxel_volume)
        if cfg.boundary_reduction == "mean":
            shape = torch.as_tensor(probs).shape
            bl = bl / (math.prod(shape[-3:]) * voxel_volume)
        total = total + cfg.w_boundary * cfg.boundary_alpha * bl
    if cfg.w_distmap:
        total = total + cfg.w_distmap * distance_map_loss(probs, gt, sdf)
    if cfg.w_focal:
        total = total + cfg.w_focal * focal_dice_loss(probs, gt, cfg.focal_beta, cfg.dice_smooth)
    return total
