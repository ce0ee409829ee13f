"""Differentiable pinhole geometry: reprojection, warping, visibility, pyramids.

Tensor conventions shared across the package:

    images       (B, C, H, W) float in [0, 1]
    depth maps   (B, 1, H, W) strictly positive, scene length units
    flow fields  (B, 2, H, W), channels (dx, dy) in pixels
    masks        (B, 1, H, W) float in [0, 1]

Pixel centers sit at integer coordinates: pixel (x, y) of a WxH image covers
x in [0, W-1], y in [0, H-1].  All functions are pure and dtype-agnostic
(float32 for training, float64 for gradient checks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import Tensor
from torch.nn import functional as F

_TAYLOR_EPS = 1e-8  # small-angle branch of the exponential map


def _as_scalar_ok(v) -> bool:
    return not isinstance(v, Tensor)


@dataclass
class Intrinsics:
    """Pinhole parameters, normalized: fx, cx by image width; fy, cy by height.

    Fields may be python floats (ground truth, configs) or tensors of shape
    (B,) (network predictions, kept differentiable).
    """

    fx: float | Tensor
    fy: float | Tensor
    cx: float | Tensor
    cy: float | Tensor

    def __post_init__(self):
        for name, lo, hi in (("fx", 0.0, None), ("fy", 0.0, None),
                             ("cx", 0.0, 1.0), ("cy", 0.0, 1.0)):
            v = getattr(self, name)
            t = torch.as_tensor(v)
            if not torch.isfinite(t).all():
                raise ValueError(f"intrinsics {name} must be finite")
            if not (t > lo).all():
                raise ValueError(f"intrinsics {name} must be > {lo}")
            if hi is not None and not (t < hi).all():
                raise ValueError(f"intrinsics {name} must be < {hi}")

    def matrix(self, width: int, height: int, *, dtype=None, device=None) -> Tensor:
        """Pixel-unit 3x3 camera matrix; (3, 3) for scalar fields, (B, 3, 3) for batched."""
        vals = [torch.as_tensor(v, dtype=dtype if _as_scalar_ok(v) else None,
                                device=device if _as_scalar_ok(v) else None)
                for v in (self.fx, self.fy, self.cx, self.cy)]
        fx, fy, cx, cy = torch.broadcast_tensors(*vals)
        zero = torch.zeros_like(fx)
        one = torch.ones_like(fx)
        rows = torch.stack([fx * width, zero, cx * width,
                            zero, fy * height, cy * height,
                            zero, zero, one], dim=-1)
        return rows.reshape(*fx.shape, 3, 3)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (float(self.fx), float(self.fy), float(self.cx), float(self.cy))


@dataclass
class EgoMotion:
    """SE(3) transform: x -> R @ x + t.  Supports leading batch dims."""

    rotation: Tensor     # (..., 3, 3)
    translation: Tensor  # (..., 3)

    @classmethod
    def identity(cls, *, dtype=torch.float32, device=None) -> "EgoMotion":
        return cls(torch.eye(3, dtype=dtype, device=device),
                   torch.zeros(3, dtype=dtype, device=device))

    @classmethod
    def from_axisangle(cls, axisangle: Tensor, translation: Tensor) -> "EgoMotion":
        return cls(axisangle_to_rotation(axisangle), translation)

    def validate(self, atol: float = 1e-6) -> "EgoMotion":
        rt_r = self.rotation.mT @ self.rotation
        eye = torch.eye(3, dtype=self.rotation.dtype, device=self.rotation.device)
        if not torch.allclose(rt_r, eye.expand_as(rt_r), atol=atol):
            raise ValueError("rotation is not orthonormal")
        det = torch.linalg.det(self.rotation)
        if not torch.allclose(det, torch.ones_like(det), atol=atol):
            raise ValueError("rotation determinant is not +1")
        if not torch.isfinite(self.translation).all():
            raise ValueError("translation must be finite")
        return self

    def matrix(self) -> Tensor:
        """Homogeneous (..., 4, 4)."""
        batch = self.rotation.shape[:-2]
        m = torch.zeros(*batch, 4, 4, dtype=self.rotation.dtype, device=self.rotation.device)
        m[..., :3, :3] = self.rotation
        m[..., :3, 3] = self.translation
        m[..., 3, 3] = 1.0
        return m

    def inverse(self) -> "EgoMotion":
        r_inv = self.rotation.mT
        return EgoMotion(r_inv, -(r_inv @ self.translation.unsqueeze(-1)).squeeze(-1))

    def compose(self, other: "EgoMotion") -> "EgoMotion":
        """self after other: x -> self(other(x))."""
        return EgoMotion(self.rotation @ other.rotation,
                         (self.rotation @ other.translation.unsqueeze(-1)).squeeze(-1)
                         + self.translation)


class SampleGrid(NamedTuple):
    """Absolute source-pixel coordinates per target pixel plus validity."""

    coords: Tensor     # (B, H, W, 2): (x, y) source coordinates
    in_bounds: Tensor  # (B, 1, H, W): 1.0 where the sample lands inside the frame


def skew(v: Tensor) -> Tensor:
    """Cross-product matrix of (..., 3) vectors."""
    zero = torch.zeros_like(v[..., 0])
    return torch.stack([zero, -v[..., 2], v[..., 1],
                        v[..., 2], zero, -v[..., 0],
                        -v[..., 1], v[..., 0], zero], dim=-1).reshape(*v.shape[:-1], 3, 3)


def axisangle_to_rotation(v: Tensor) -> Tensor:
    """Exponential map (..., 3) -> (..., 3, 3), Taylor branch below 1e-8 rad."""
    theta_sq = (v * v).sum(dim=-1)
    small = theta_sq < _TAYLOR_EPS ** 2
    theta = theta_sq.clamp(min=_TAYLOR_EPS ** 2).sqrt()
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq.clamp(min=_TAYLOR_EPS ** 2))
    k = skew(v)
    eye = torch.eye(3, dtype=v.dtype, device=v.device).expand_as(k)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def identity_grid(height: int, width: int, *, dtype=torch.float32, device=None) -> Tensor:
    """(H, W, 2) grid of pixel coordinates, channels (x, y)."""
    ys = torch.arange(height, dtype=dtype, device=device)
    xs = torch.arange(width, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def _bounds_mask(coords: Tensor, height: int, width: int) -> Tensor:
    eps = 1e-6  # border pixels stay valid under float round-off
    x, y = coords[..., 0], coords[..., 1]
    ok = (x >= -eps) & (x <= width - 1 + eps) & (y >= -eps) & (y <= height - 1 + eps)
    return ok.unsqueeze(1).to(coords.dtype)


def rigid_reproject(depth: Tensor, motion: EgoMotion, intrinsics: Intrinsics) -> tuple[SampleGrid, Tensor]:
    """Map each target pixel to its source-image coordinate via depth + SE(3) + pinhole.

    For target pixel p with depth D(p): p_src ~ K (R * D(p) * K^-1 p_h + t).
    Returns the sampling grid (points behind the camera are flagged out of
    bounds, never raised) and the transformed per-pixel depth.
    """
    if depth.dim() != 4 or depth.shape[1] != 1:
        raise ValueError(f"depth must be (B, 1, H, W), got {tuple(depth.shape)}")
    b, _, h, w = depth.shape
    k = intrinsics.matrix(w, h, dtype=depth.dtype, device=depth.device)
    if k.dim() == 2:
        k = k.unsqueeze(0)
    k_inv = torch.linalg.inv(k)

    pix = identity_grid(h, w, dtype=depth.dtype, device=depth.device).reshape(-1, 2)
    ones = torch.ones(pix.shape[0], 1, dtype=depth.dtype, device=depth.device)
    homog = torch.cat([pix, ones], dim=1)                        # (HW, 3)

    rays = homog @ k_inv.mT                                      # (B|1, HW, 3)
    pts = rays * depth.reshape(b, 1, h * w).mT                   # (B, HW, 3)

    rot = motion.rotation.reshape(-1, 3, 3)
    trans = motion.translation.reshape(-1, 1, 3)
    pts_src = pts @ rot.mT + trans

    z = pts_src[..., 2]
    z_safe = z.clamp(min=1e-6)
    uv = pts_src @ k.mT
    coords = uv[..., :2] / z_safe.unsqueeze(-1)
    coords = coords.reshape(b, h, w, 2)

    in_front = (z > 0).reshape(b, 1, h, w).to(depth.dtype)
    mask = _bounds_mask(coords, h, w) * in_front
    return SampleGrid(coords, mask), z.reshape(b, 1, h, w)


def warp_bilinear(image: Tensor, grid: SampleGrid) -> Tensor:
    """Sample `image` at `grid.coords` with bilinear weights and border clamping.

    Differentiable w.r.t. both the image values and the grid coordinates.
    """
    b, c, h, w = image.shape
    if grid.coords.shape[:3] != (b, h, w):
        raise ValueError(f"grid {tuple(grid.coords.shape)} does not match image {tuple(image.shape)}")
    x = grid.coords[..., 0].clamp(0, w - 1)
    y = grid.coords[..., 1].clamp(0, h - 1)

    x0 = x.floor().clamp(0, w - 2)
    y0 = y.floor().clamp(0, h - 2)
    wx = (x - x0).to(image.dtype)
    wy = (y - y0).to(image.dtype)
    x0l, y0l = x0.long(), y0.long()

    flat = image.reshape(b, c, h * w)

    def sample(yi, xi):
        idx = (yi * w + xi).reshape(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).reshape(b, c, h, w)

    i00 = sample(y0l, x0l)
    i01 = sample(y0l, x0l + 1)
    i10 = sample(y0l + 1, x0l)
    i11 = sample(y0l + 1, x0l + 1)

    wx = wx.unsqueeze(1)
    wy = wy.unsqueeze(1)
    top = i00 * (1 - wx) + i01 * wx
    bot = i10 * (1 - wx) + i11 * wx
    return top * (1 - wy) + bot * wy


def flow_to_grid(flow: Tensor) -> SampleGrid:
    """coords = identity grid + offsets."""
    if flow.dim() != 4 or flow.shape[1] != 2:
        raise ValueError(f"flow must be (B, 2, H, W), got {tuple(flow.shape)}")
    b, _, h, w = flow.shape
    base = identity_grid(h, w, dtype=flow.dtype, device=flow.device)
    coords = base.unsqueeze(0) + flow.permute(0, 2, 3, 1)
    return SampleGrid(coords, _bounds_mask(coords, h, w))


def visibility_from_backward_flow(backward: Tensor, threshold: float = 0.75) -> Tensor:
    """Occlusion weights by forward-splat counting along the backward flow.

    Every source pixel bilinearly votes weight 1 at its flow target; target
    pixels accumulating less than `threshold` are zeroed, the rest clamped
    to [0, 1].
    """
    b, _, h, w = backward.shape
    pos = flow_to_grid(backward).coords          # (B, H, W, 2)
    x, y = pos[..., 0], pos[..., 1]
    x0, y0 = x.floor(), y.floor()
    wx, wy = x - x0, y - y0

    acc = torch.zeros(b, h * w, dtype=backward.dtype, device=backward.device)
    for dy, dx, wgt in ((0, 0, (1 - wx) * (1 - wy)), (0, 1, wx * (1 - wy)),
                        (1, 0, (1 - wx) * wy), (1, 1, wx * wy)):
        xi, yi = x0 + dx, y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
        acc.scatter_add_(1, idx.reshape(b, -1), (wgt * valid).reshape(b, -1))

    acc = acc.clamp(0.0, 1.0)
    acc = torch.where(acc < threshold, torch.zeros_like(acc), acc)
    return acc.reshape(b, 1, h, w)


def scale_pyramid(image: Tensor) -> list[Tensor]:
    """[x1, x0.75, x0.5] scales by exact area averaging; H, W must divide by 4."""
    h, w = image.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"pyramid needs dims divisible by 4, got {h}x{w}")
    x075 = F.avg_pool2d(image.repeat_interleave(3, dim=-2).repeat_interleave(3, dim=-1), 4)
    x050 = F.avg_pool2d(image, 2)
    return [image, x075, x050]


def disparity_to_depth(sigma: Tensor, d_min: float = 0.1, d_max: float = 150.0) -> Tensor:
    """Map scaled disparity in (0, 1) to depth in [d_min, d_max]."""
    return 1.0 / (sigma * (1.0 / d_min - 1.0 / d_max) + 1.0 / d_max)
