"""Plane-sweep matching cost volume and its channel-attention fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, NumericError, ParameterError
from .geometry import warp_backward


@dataclass(frozen=True)
class DepthHypothesisSet:
    bins: np.ndarray
    d_min: float
    d_max: float

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.ndim != 1 or len(bins) < 2:
            raise ParameterError("need at least two depth hypotheses")
        if not np.all(np.diff(bins) > 0) or bins[0] <= 0:
            raise ParameterError("depth hypotheses must be positive and strictly increasing")
        if bins[0] != self.d_min or bins[-1] != self.d_max:
            raise ParameterError("d_min/d_max must equal the first/last hypothesis")
        object.__setattr__(self, "bins", bins)

    def __len__(self):
        return len(self.bins)

    def nearest(self, depth):
        """Index of the hypothesis closest to ``depth`` in inverse depth."""
        inv = 1.0 / self.bins
        return np.abs(1.0 / np.asarray(depth)[..., None] - inv).argmin(-1)


def make_depth_bins(d_min: float, d_max: float, count: int) -> DepthHypothesisSet:
    """Depth hypotheses spaced uniformly in inverse depth, ascending in depth."""
    if not (0 < d_min < d_max):
        raise ParameterError(f"need 0 < d_min < d_max, got {d_min}, {d_max}")
    if count < 2:
        raise ParameterError(f"need at least two planes, got {count}")
    inv = np.linspace(1.0 / d_min, 1.0 / d_max, count)
    bins = 1.0 / inv
    bins[0], bins[-1] = d_min, d_max
    return DepthHypothesisSet(bins, float(d_min), float(d_max))


def blend_reference(I_r_hat, I_r, alpha: float):
    """``alpha * I_r_hat + (1 - alpha) * I_r``."""
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"alpha must lie in [0, 1], got {alpha}")
    if I_r_hat.shape != I_r.shape:
        raise DimensionError(f"blend inputs differ: {tuple(I_r_hat.shape)} vs {tuple(I_r.shape)}")
    if alpha == 0.0:
        return I_r
    if alpha == 1.0:
        return I_r_hat
    return alpha * I_r_hat + (1.0 - alpha) * I_r


def warp_feature_plane(F_ref, depth, K_t, K_r, T_rt):
    """Sample reference features as if the target saw a plane at ``depth``.

    Returns ``(features, valid)``; invalid samples are zero.
    """
    if not depth > 0:
        raise ParameterError(f"plane depth must be positive, got {depth}")
    B, _, H, W = F_ref.shape
    plane = torch.full((B, 1, H, W), float(depth), dtype=F_ref.dtype, device=F_ref.device)
    warped, valid = warp_backward(F_ref, plane, K_t, K_r, T_rt)
    return warped * valid.to(warped.dtype), valid


def build_cost_volume(F_t, F_ref_list, bins: DepthHypothesisSet, K_t, K_r, T_list, return_valid=False):
    """Mean absolute feature difference per pixel and depth plane.

    Costs average over the reference frames with a valid sample. A plane with
    no valid sample at a pixel takes that pixel's largest valid cost (or zero
    when nothing is valid) so it can never be the argmin.
    """
    if len(F_ref_list) == 0:
        raise ParameterError("cost volume needs at least one reference")
    if len(F_ref_list) != len(T_list):
        raise ParameterError(f"{len(F_ref_list)} references but {len(T_list)} transforms")
    for F in F_ref_list:
        if F.shape[:2] != F_t.shape[:2]:
            raise DimensionError(f"reference features {tuple(F.shape)} vs target {tuple(F_t.shape)}")

    planes, counts = [], []
    for d in bins.bins:
        total = 0
        count = 0
        for F_ref, T in zip(F_ref_list, T_list):
            warped, valid = warp_feature_plane(F_ref, d, K_t, K_r, T)
            vf = valid.to(F_t.dtype)
            total = total + (warped - F_t).abs().mean(1, keepdim=True) * vf
            count = count + vf
        planes.append(total / count.clamp(min=1))
        counts.append(count)
    volume = torch.cat(planes, 1)
    valid = torch.cat(counts, 1) > 0

    fill = torch.where(valid, volume, torch.zeros_like(volume)).amax(1, keepdim=True).detach()
    volume = torch.where(valid, volume, fill.expand_as(volume))
    if not bool(torch.isfinite(volume).all()) or bool((volume < 0).any()):
        raise NumericError("cost volume has negative or non-finite entries", term="cost_volume")
    return (volume, valid) if return_valid else volume


def argmin_depth(volume, bins: DepthHypothesisSet):
    """Depth of the lowest-cost plane at every pixel, ``(B, 1, H, W)``."""
    idx = volume.argmin(1, keepdim=True)
    depths = torch.as_tensor(bins.bins, dtype=volume.dtype, device=volume.device)
    return depths[idx]


class ChannelGate(nn.Module):
    """Squeeze-excite gate: global pool, bottleneck MLP, sigmoid per channel."""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def forward(self, x):
        s = x.mean((2, 3))
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(s))))[:, :, None, None]


class VolumeFusion(nn.Module):
    """Concatenate cost volume and target features, reweighted by channel attention."""

    def __init__(self, volume_channels, feature_channels, reduction=4, attention=True):
        super().__init__()
        self.out_channels = volume_channels + feature_channels
        self.gate = ChannelGate(self.out_channels, reduction) if attention else None

    def forward(self, V_m, F_t):
        if V_m.shape[0] != F_t.shape[0] or V_m.shape[-2:] != F_t.shape[-2:]:
            raise DimensionError(f"volume {tuple(V_m.shape)} and features {tuple(F_t.shape)} disagree")
        x = torch.cat([V_m, F_t], 1)
        if self.gate is None:
            return x
        return x * self.gate(x)


def fuse_volume(V_m, F_t, fusion: VolumeFusion):
    return fusion(V_m, F_t)
