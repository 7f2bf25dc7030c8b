"""Training objectives: masked photometric reconstruction, edge-aware disparity
smoothness and coarse-depth consistency."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericError, ParameterError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class MaskedLoss(NamedTuple):
    value: torch.Tensor
    degenerate: bool  # True when the mask selected no pixel


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def masked_mean(values, mask):
    """Mean of ``values`` (B,1,H,W) over ``mask``; zero and flagged when empty."""
    if mask is None:
        return MaskedLoss(values.mean(), False)
    _same_shape(values, mask, "mask")
    m = mask.to(values.dtype)
    n = m.sum()
    if n == 0:
        return MaskedLoss((values * m).sum(), True)
    return MaskedLoss((values * m).sum() / n, False)


def ssim(x, y):
    """Per-pixel SSIM over 3x3 windows with reflection padding, clamped to [0, 1]."""
    _same_shape(x, y, "ssim inputs")
    x = F.pad(x, (1, 1, 1, 1), mode="reflect")
    y = F.pad(y, (1, 1, 1, 1), mode="reflect")
    mu_x = F.avg_pool2d(x, 3, 1)
    mu_y = F.avg_pool2d(y, 3, 1)
    sigma_x = F.avg_pool2d(x * x, 3, 1) - mu_x**2
    sigma_y = F.avg_pool2d(y * y, 3, 1) - mu_y**2
    sigma_xy = F.avg_pool2d(x * y, 3, 1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return torch.clamp(num / den, 0, 1)


def photometric_error(I_t, I_t_prime, a=0.15, b=0.85):
    """Per-pixel ``a * L1 + b * (1 - SSIM) / 2`` averaged over channels, ``(B, 1, H, W)``."""
    _same_shape(I_t, I_t_prime, "photometric inputs")
    if a < 0 or b < 0:
        raise ParameterError(f"photometric weights must be non-negative, got a={a}, b={b}")
    l1 = (I_t - I_t_prime).abs().mean(1, keepdim=True)
    if b == 0:
        return a * l1
    dssim = ((1 - ssim(I_t, I_t_prime)) / 2).mean(1, keepdim=True)
    return a * l1 + b * dssim


def photometric_loss(I_t, I_t_prime, auto_mask=None, validity=None, a=0.15, b=0.85) -> MaskedLoss:
    """Masked mean of the photometric error over ``auto_mask & validity``."""
    err = photometric_error(I_t, I_t_prime, a, b)
    mask = None
    for m in (auto_mask, validity):
        if m is not None:
            mask = m if mask is None else mask & m
    return masked_mean(err, mask)


def compute_auto_mask(I_t, I_r, I_t_prime, a=0.15, b=0.85):
    """Keep pixels whose reconstruction beats the unwarped reference (ties dropped)."""
    _same_shape(I_t, I_r, "auto-mask inputs")
    return photometric_error(I_t, I_t_prime, a, b) < photometric_error(I_t, I_r, a, b)


def smoothness_loss(depth, I_t):
    """Edge-aware first-order smoothness of mean-normalized disparity."""
    if depth.shape[0] != I_t.shape[0] or depth.shape[-2:] != I_t.shape[-2:] or depth.shape[1] != 1:
        raise DimensionError(f"depth {tuple(depth.shape)} does not match image {tuple(I_t.shape)}")
    disp = 1.0 / depth
    d = disp / disp.mean((2, 3), keepdim=True)
    dx = (d[..., :, 1:] - d[..., :, :-1]).abs()
    dy = (d[..., 1:, :] - d[..., :-1, :]).abs()
    ix = (I_t[..., :, 1:] - I_t[..., :, :-1]).abs().mean(1, keepdim=True)
    iy = (I_t[..., 1:, :] - I_t[..., :-1, :]).abs().mean(1, keepdim=True)
    return (dx * torch.exp(-ix)).mean() + (dy * torch.exp(-iy)).mean()


def consistency_mask(volume_depth, D_c, threshold=1.0):
    """Pixels where the cost-volume argmin and the coarse depth disagree in log depth."""
    _same_shape(volume_depth, D_c, "consistency-mask inputs")
    return (torch.log(volume_depth) - torch.log(D_c.detach())).abs() > threshold


def consistency_loss(D_c, D_t, mask=None) -> MaskedLoss:
    """Masked mean of ``|D_c - D_t|``; ``D_c`` is a fixed target."""
    _same_shape(D_c, D_t, "consistency inputs")
    return masked_mean((D_c.detach() - D_t).abs(), mask)


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted loss terms; ``total`` is their sum."""

    photometric: torch.Tensor
    smoothness: torch.Tensor
    consistency: torch.Tensor
    total: torch.Tensor

    def as_dict(self):
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in ("photometric", "smoothness", "consistency", "total")}


def total_loss(photometric, smoothness, consistency, lambda_s=1e-3, lambda_c=1.0) -> LossBreakdown:
    def as_tensor(x):
        return x if torch.is_tensor(x) else torch.tensor(float(x), dtype=torch.float64)

    terms = {
        "photometric": as_tensor(photometric),
        "smoothness": lambda_s * as_tensor(smoothness),
        "consistency": lambda_c * as_tensor(consistency),
    }
    for name, value in terms.items():
        v = float(value.detach())
        if not math.isfinite(v):
            raise NumericError(f"{name} loss is not finite ({v})", term=name)
    total = terms["photometric"] + terms["smoothness"] + terms["consistency"]
    return LossBreakdown(total=total, **terms)
