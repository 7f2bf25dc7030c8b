"""Pinhole camera geometry and differentiable image warping.

Conventions used throughout the package:

* pixel coordinates sit at pixel centres, origin top-left, ``u`` is the
  column and ``v`` the row;
* images are ``(B, C, H, W)``, depth ``(B, 1, H, W)``, flow ``(B, 2, H, W)``
  with channel 0 the horizontal displacement, masks ``(B, 1, H, W)`` bool;
* ``T_rt`` maps points from the target camera into the reference camera,
  ``X_r = R X_t + t``.

Unbatched inputs (no leading batch axis) are accepted and returned unbatched.
Out-of-bounds and behind-camera pixels never raise; they are reported through
validity masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionError, InvalidDepthError, ParameterError

__all__ = [
    "CameraIntrinsics",
    "RigidTransform",
    "pixel_grid",
    "axis_angle_to_matrix",
    "transform_points",
    "backproject",
    "project",
    "bilinear_sample",
    "warp_backward",
    "compute_static_flow",
    "decompose_flow",
    "compute_motion_mask",
    "propagate_mask",
    "forward_splat",
    "build_pseudo_static_frame",
]


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ParameterError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ParameterError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ParameterError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of an image downsampled by ``stride`` (pixel-centre aware)."""
        if self.width % stride or self.height % stride:
            raise DimensionError(f"{self.width}x{self.height} not divisible by stride {stride}")
        return CameraIntrinsics(
            fx=self.fx / stride,
            fy=self.fy / stride,
            cx=(self.cx + 0.5) / stride - 0.5,
            cy=(self.cy + 0.5) / stride - 0.5,
            width=self.width // stride,
            height=self.height // stride,
        )

    def resized(self, width: int, height: int) -> "CameraIntrinsics":
        sx, sy = width / self.width, height / self.height
        return CameraIntrinsics(
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=(self.cx + 0.5) * sx - 0.5,
            cy=(self.cy + 0.5) * sy - 0.5,
            width=width,
            height=height,
        )


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise DimensionError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ParameterError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_axis_angle(cls, axis_angle, translation) -> "RigidTransform":
        R = axis_angle_to_matrix(torch.as_tensor(np.asarray(axis_angle, dtype=np.float64)))
        return cls(R.numpy(), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )


def pixel_grid(height, width, dtype=torch.float64, device=None):
    """Return ``(u, v)`` with ``u[r, c] = c`` and ``v[r, c] = r``."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return u, v


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues formula, ``(..., 3) -> (..., 3, 3)``; differentiable at zero."""
    theta2 = (axis_angle * axis_angle).sum(-1, keepdim=True)[..., None]
    theta = torch.sqrt(theta2 + 1e-24)
    small = theta2 < 1e-12
    # Taylor expansions keep the zero-angle case exact and smooth
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / torch.where(small, 1.0, theta2))
    x, y, z = axis_angle.unbind(-1)
    zero = torch.zeros_like(x)
    K = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1).reshape(*axis_angle.shape[:-1], 3, 3)
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device).expand_as(K)
    return eye + a * K + b * (K @ K)


# -- input normalisation -----------------------------------------------------


def _batched(x: torch.Tensor, ndim: int):
    x = torch.as_tensor(x)
    if x.ndim == ndim:
        return x, True
    if x.ndim == ndim - 1:
        return x.unsqueeze(0), False
    raise DimensionError(f"expected a {ndim - 1}- or {ndim}-dimensional array, got shape {tuple(x.shape)}")


def _depth_batched(depth):
    depth = torch.as_tensor(depth)
    if depth.ndim == 2:
        return depth[None, None], False
    if depth.ndim == 3 and depth.shape[0] == 1:
        return depth[None], False
    if depth.ndim == 4 and depth.shape[1] == 1:
        return depth, True
    raise DimensionError(f"single-channel map must be (H, W), (1, H, W) or (B, 1, H, W), got {tuple(depth.shape)}")


def _unbatch(x, batched):
    return x if batched else x[0]


def _k_matrix(K, batch, dtype, device):
    if isinstance(K, CameraIntrinsics):
        M = torch.as_tensor(K.matrix(), dtype=dtype, device=device)
    else:
        M = torch.as_tensor(K, dtype=dtype, device=device)
    if M.ndim == 2:
        M = M.expand(batch, 3, 3)
    if M.shape[-2:] != (3, 3) or M.shape[0] not in (1, batch):
        raise DimensionError(f"intrinsics must be 3x3 or (B, 3, 3), got {tuple(M.shape)}")
    return M.expand(batch, 3, 3)


def _t_matrix(T, batch, dtype, device):
    if isinstance(T, RigidTransform):
        M = torch.as_tensor(T.matrix(), dtype=dtype, device=device)
    else:
        M = torch.as_tensor(T, device=device).to(dtype)
    if M.ndim == 2:
        M = M.unsqueeze(0)
    if M.shape[-2:] != (4, 4) or M.shape[0] not in (1, batch):
        raise DimensionError(f"transform must be 4x4 or (B, 4, 4), got {tuple(M.shape)}")
    return M.expand(batch, 4, 4)


def _check_size(K, height, width, name):
    if isinstance(K, CameraIntrinsics) and (K.height, K.width) != (height, width):
        raise DimensionError(f"{name} describe a {K.width}x{K.height} image, got {width}x{height}")


def _check_depth(depth, valid):
    """Raise on bad depth at valid pixels; return depth with invalid pixels set to 1."""
    bad = ~(torch.isfinite(depth) & (depth > 0))
    if valid is not None:
        bad = bad & valid
    if bool(bad.any()):
        raise InvalidDepthError(f"{int(bad.sum())} valid pixel(s) with non-positive or non-finite depth")
    if valid is None:
        return depth
    return torch.where(valid, depth, torch.ones_like(depth))


# -- projection ---------------------------------------------------------------


def transform_points(points: torch.Tensor, T) -> torch.Tensor:
    """Apply ``(B, 4, 4)`` rigid transforms to ``(B, 3, H, W)`` points."""
    M = _t_matrix(T, points.shape[0], points.dtype, points.device)
    R, t = M[:, :3, :3], M[:, :3, 3]
    return torch.einsum("bij,bjhw->bihw", R, points) + t[:, :, None, None]


def backproject(depth, K, valid=None) -> torch.Tensor:
    """Lift every pixel to a camera-frame 3D point ``depth * K^-1 [u, v, 1]``."""
    depth, batched = _depth_batched(depth)
    if valid is not None:
        valid, _ = _depth_batched(torch.as_tensor(valid, dtype=torch.bool))
    depth = _check_depth(depth, valid)
    B, _, H, W = depth.shape
    _check_size(K, H, W, "intrinsics")
    Km = _k_matrix(K, B, depth.dtype, depth.device)
    u, v = pixel_grid(H, W, depth.dtype, depth.device)
    fx, fy = Km[:, 0, 0, None, None], Km[:, 1, 1, None, None]
    cx, cy = Km[:, 0, 2, None, None], Km[:, 1, 2, None, None]
    d = depth[:, 0]
    points = torch.stack([d * (u - cx) / fx, d * (v - cy) / fy, d], dim=1)
    return _unbatch(points, batched)


def project(points, K):
    """Project camera-frame points; returns ``(pixels, depth, valid)``.

    ``points`` is ``(B, 3, ...)`` (four-dimensional) or ``(3, ...)``. Points with
    ``z <= 0`` are flagged invalid and receive finite placeholder coordinates.
    """
    points = torch.as_tensor(points)
    batched = points.ndim == 4
    if not batched:
        points = points.unsqueeze(0)
    if points.shape[1] != 3:
        raise DimensionError(f"points need 3 coordinates along the channel axis, got {points.shape[1]}")
    B = points.shape[0]
    Km = _k_matrix(K, B, points.dtype, points.device)
    extra = (None,) * (points.ndim - 2)
    fx, fy = Km[(slice(None), 0, 0) + extra], Km[(slice(None), 1, 1) + extra]
    cx, cy = Km[(slice(None), 0, 2) + extra], Km[(slice(None), 1, 2) + extra]
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    valid = z > 0
    z_safe = torch.where(valid, z, torch.ones_like(z))
    pixels = torch.stack([fx * x / z_safe + cx, fy * y / z_safe + cy], dim=1)
    return _unbatch(pixels, batched), _unbatch(z.unsqueeze(1), batched), _unbatch(valid.unsqueeze(1), batched)


def _displacement(depth, K_t, K_r, T_rt):
    """Pixel displacement induced by rigid motion, with reference depth and validity.

    The displacement is taken against the re-projection of the back-projected
    point rather than the integer grid, so an identity motion yields exactly zero.
    """
    points = backproject(depth, K_t)
    moved = transform_points(points, T_rt)
    p_src, _, _ = project(points, K_t)
    p_dst, z_dst, valid = project(moved, K_r)
    return p_dst - p_src, z_dst, valid


def compute_static_flow(depth_c, K_t, K_r, T_rt, valid=None):
    """Flow that camera motion alone induces given target depth.

    Returns ``(flow, valid)``; pixels whose transformed point lies behind the
    reference camera are flagged invalid.
    """
    depth_c, batched = _depth_batched(depth_c)
    if valid is not None:
        valid, _ = _depth_batched(torch.as_tensor(valid, dtype=torch.bool))
    depth_c = _check_depth(depth_c, valid)
    flow, _, ok = _displacement(depth_c, K_t, K_r, T_rt)
    if valid is not None:
        ok = ok & valid
    return _unbatch(flow, batched), _unbatch(ok, batched)


def bilinear_sample(image, u, v):
    """Sample ``image`` at real-valued pixel positions with zero padding.

    ``image`` is ``(B, C, H, W)``; ``u``/``v`` are ``(B, H', W')``. Returns the
    samples and a ``(B, 1, H', W')`` mask of positions inside the image.
    """
    B, C, H, W = image.shape
    finite = torch.isfinite(u) & torch.isfinite(v)
    u = torch.where(finite, u, torch.full_like(u, -2.0))
    v = torch.where(finite, v, torch.full_like(v, -2.0))
    inside = finite & (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)

    u0 = torch.floor(u).detach()
    v0 = torch.floor(v).detach()
    wu = u - u0
    wv = v - v0
    flat = image.reshape(B, C, H * W)
    out = 0
    for du, dv, w in (
        (0, 0, (1 - wu) * (1 - wv)),
        (1, 0, wu * (1 - wv)),
        (0, 1, (1 - wu) * wv),
        (1, 1, wu * wv),
    ):
        uu, vv = u0 + du, v0 + dv
        in_range = (uu >= 0) & (uu <= W - 1) & (vv >= 0) & (vv <= H - 1)
        idx = (vv.clamp(0, H - 1) * W + uu.clamp(0, W - 1)).long().reshape(B, 1, -1).expand(B, C, -1)
        vals = torch.gather(flat, 2, idx).reshape(B, C, *u.shape[1:])
        out = out + (w * in_range.to(w.dtype)).unsqueeze(1) * vals
    return out, inside.unsqueeze(1)


def warp_backward(reference, depth_t, K_t, K_r, T_rt, valid=None):
    """Reconstruct the target view by sampling ``reference`` (inverse warping).

    Returns ``(image, valid)``. Differentiable w.r.t. image values, depth and
    the transform when given as a tensor.
    """
    reference, batched = _batched(reference, 4)
    depth_t, _ = _depth_batched(depth_t)
    if valid is not None:
        valid, _ = _depth_batched(torch.as_tensor(valid, dtype=torch.bool))
    if depth_t.shape[0] != reference.shape[0]:
        raise DimensionError(f"batch mismatch: reference {reference.shape[0]} vs depth {depth_t.shape[0]}")
    _check_size(K_r, reference.shape[2], reference.shape[3], "reference intrinsics")
    depth_t = _check_depth(depth_t, valid)
    H, W = depth_t.shape[-2:]
    flow, _, ok = _displacement(depth_t, K_t, K_r, T_rt)
    u, v = pixel_grid(H, W, flow.dtype, flow.device)
    su = torch.where(ok[:, 0], u + flow[:, 0], torch.full_like(flow[:, 0], -2.0))
    sv = torch.where(ok[:, 0], v + flow[:, 1], torch.full_like(flow[:, 1], -2.0))
    out, inside = bilinear_sample(reference.to(flow.dtype), su, sv)
    ok = ok & inside
    if valid is not None:
        ok = ok & valid
    return _unbatch(out, batched), _unbatch(ok, batched)


def decompose_flow(flow, static_flow):
    """Dynamic flow: the residual of the observed flow after removing camera motion."""
    flow, static_flow = torch.as_tensor(flow), torch.as_tensor(static_flow)
    if flow.shape != static_flow.shape:
        raise DimensionError(f"flow shapes differ: {tuple(flow.shape)} vs {tuple(static_flow.shape)}")
    return flow - static_flow


def compute_motion_mask(flow, static_flow, epsilon=1.0, valid=None):
    """Pixels whose squared flow residual exceeds ``epsilon`` (squared pixels)."""
    if not epsilon > 0:
        raise ParameterError(f"epsilon must be positive, got {epsilon}")
    residual = decompose_flow(flow, static_flow)
    channel = 1 if residual.ndim == 4 else 0
    mask = (residual * residual).sum(channel, keepdim=True) > epsilon
    if valid is not None:
        mask = mask & torch.as_tensor(valid, dtype=torch.bool)
    return mask


def _splat_indices(flow, height, width):
    """Nearest reference pixel index for every source pixel, ``-1`` when outside."""
    B, _, H, W = flow.shape
    u, v = pixel_grid(H, W, flow.dtype, flow.device)
    tu = torch.floor(u + flow[:, 0] + 0.5)
    tv = torch.floor(v + flow[:, 1] + 0.5)
    ok = torch.isfinite(tu) & torch.isfinite(tv)
    ok = ok & (tu >= 0) & (tu < width) & (tv >= 0) & (tv < height)
    idx = torch.where(ok, tv * width + tu, torch.full_like(tu, -1)).long()
    return idx.reshape(B, -1)


def propagate_mask(mask_t, flow, height=None, width=None):
    """Carry a target-frame mask into the reference frame along ``flow``."""
    mask_t, batched = _depth_batched(torch.as_tensor(mask_t, dtype=torch.bool))
    flow, _ = _batched(flow, 4)
    if flow.shape[0] != mask_t.shape[0] or flow.shape[-2:] != mask_t.shape[-2:]:
        raise DimensionError(f"mask {tuple(mask_t.shape)} and flow {tuple(flow.shape)} disagree")
    B, _, H, W = mask_t.shape
    height = H if height is None else height
    width = W if width is None else width
    idx = _splat_indices(flow.detach(), height, width)
    keep = mask_t.reshape(B, -1) & (idx >= 0)
    out = torch.zeros(B, height * width + 1, dtype=torch.bool, device=mask_t.device)
    # index height*width is a dump slot for dropped pixels
    idx = torch.where(keep, idx, torch.full_like(idx, height * width))
    out.scatter_(1, idx, torch.ones_like(keep))
    out = out[:, :-1].reshape(B, 1, height, width)
    return _unbatch(out, batched)


@torch.no_grad()
def forward_splat(target, depth_t, K_t, K_r, T_rt, valid=None):
    """Push target pixels into the reference view (nearest pixel, z-buffered).

    Returns ``(image, coverage)``. Not differentiable by design.
    """
    target, batched = _batched(target, 4)
    depth_t, _ = _depth_batched(depth_t)
    if valid is not None:
        valid, _ = _depth_batched(torch.as_tensor(valid, dtype=torch.bool))
    depth_t = _check_depth(depth_t, valid)
    B, C, H, W = target.shape
    if depth_t.shape[0] != B or depth_t.shape[-2:] != (H, W):
        raise DimensionError(f"target {tuple(target.shape)} and depth {tuple(depth_t.shape)} disagree")
    if isinstance(K_r, CameraIntrinsics):
        Hr, Wr = K_r.height, K_r.width
    else:
        Hr, Wr = H, W
    flow, z_r, ok = _displacement(depth_t, K_t, K_r, T_rt)
    if valid is not None:
        ok = ok & valid
    idx = _splat_indices(flow, Hr, Wr)
    ok = ok.reshape(B, -1) & (idx >= 0)
    z = torch.where(ok, z_r.reshape(B, -1), torch.full_like(z_r.reshape(B, -1), float("inf")))
    dump = Hr * Wr
    idx = torch.where(ok, idx, torch.full_like(idx, dump))

    zbuf = torch.full((B, dump + 1), float("inf"), dtype=z.dtype, device=z.device)
    zbuf.scatter_reduce_(1, idx, z, reduce="amin")
    winner = ok & (z == torch.gather(zbuf, 1, idx))
    # equal-depth ties go to the lowest source index
    src = torch.arange(H * W, device=z.device).expand(B, -1)
    src = torch.where(winner, src, torch.full_like(src, H * W))
    owner = torch.full((B, dump + 1), H * W, dtype=src.dtype, device=z.device)
    owner.scatter_reduce_(1, idx, src, reduce="amin")
    owner = owner[:, :dump]
    covered = owner < H * W

    flat = target.reshape(B, C, H * W)
    gathered = torch.gather(flat, 2, owner.clamp(max=H * W - 1).unsqueeze(1).expand(B, C, -1))
    out = torch.where(covered.unsqueeze(1), gathered, torch.zeros_like(gathered))
    out = out.reshape(B, C, Hr, Wr)
    coverage = covered.reshape(B, 1, Hr, Wr)
    return _unbatch(out, batched), _unbatch(coverage, batched)


def build_pseudo_static_frame(I_r, I_t, depth_t, mask_r, K_t, K_r, T_rt):
    """Reference image with moving-object pixels replaced by splatted target content.

    Masked pixels that receive no splat keep the reference value.
    """
    I_r, batched = _batched(I_r, 4)
    I_t, _ = _batched(I_t, 4)
    mask_r, _ = _depth_batched(torch.as_tensor(mask_r, dtype=torch.bool))
    if mask_r.shape[0] != I_r.shape[0] or mask_r.shape[-2:] != I_r.shape[-2:]:
        raise DimensionError(f"mask {tuple(mask_r.shape)} does not match reference {tuple(I_r.shape)}")
    if I_t.shape[:2] != I_r.shape[:2]:
        raise DimensionError(f"target {tuple(I_t.shape)} and reference {tuple(I_r.shape)} disagree")
    splat, coverage = forward_splat(I_t, depth_t, K_t, K_r, T_rt)
    take = mask_r & coverage
    out = torch.where(take, splat.to(I_r.dtype), I_r)
    return _unbatch(out, batched)
