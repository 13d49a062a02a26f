"""Differentiable pinhole view synthesis.

Tensors follow the torch layout: images ``(B, C, H, W)``, depth ``(B, 1, H, W)``,
point clouds ``(B, 3, H, W)`` and poses ``(B, 4, 4)``.  Pixel centres sit on
integer coordinates, so pixel ``(u, v)`` is column ``u``, row ``v``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import torch

Z_EPS = 1e-4
# slack on the image bounds so round-off at border pixels does not flip validity
BOUNDS_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside the image")

    def matrix(self, dtype=torch.float32, device=None) -> torch.Tensor:
        return torch.tensor([[self.fx, 0.0, self.cx],
                             [0.0, self.fy, self.cy],
                             [0.0, 0.0, 1.0]], dtype=dtype, device=device)

    def flipped(self) -> "CameraIntrinsics":
        """Intrinsics after a horizontal image flip."""
        return CameraIntrinsics(self.fx, self.fy, self.width - 1 - self.cx, self.cy,
                                self.width, self.height)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


Intrinsics = Union[CameraIntrinsics, torch.Tensor]


class SampleCoords(NamedTuple):
    uv: torch.Tensor  # (B, 2, H, W) continuous pixel coordinates
    valid: torch.Tensor  # (B, 1, H, W) bool


def _k_matrix(k: Intrinsics, batch: int, like: torch.Tensor) -> torch.Tensor:
    if isinstance(k, CameraIntrinsics):
        k = k.matrix(dtype=like.dtype, device=like.device)
    k = k.to(dtype=like.dtype, device=like.device)
    if k.dim() == 2:
        k = k.unsqueeze(0)
    return k.expand(batch, 3, 3)


def make_pixel_grid(intrinsics: CameraIntrinsics, dtype=torch.float32, device=None) -> torch.Tensor:
    """Homogeneous pixel coordinates ``(3, H, W)`` with rows ``u``, ``v``, ``1``."""
    h, w = intrinsics.height, intrinsics.width
    v, u = torch.meshgrid(torch.arange(h, dtype=dtype, device=device),
                          torch.arange(w, dtype=dtype, device=device), indexing="ij")
    return torch.stack([u, v, torch.ones_like(u)], dim=0)


def backproject(depth: torch.Tensor, k: Intrinsics, grid: torch.Tensor | None = None) -> torch.Tensor:
    """Lift every pixel to the 3-D point ``d * K^-1 p``."""
    b, _, h, w = depth.shape
    if grid is None:
        v, u = torch.meshgrid(torch.arange(h, dtype=depth.dtype, device=depth.device),
                              torch.arange(w, dtype=depth.dtype, device=depth.device),
                              indexing="ij")
        grid = torch.stack([u, v, torch.ones_like(u)], dim=0)
    if grid.shape[-2:] != (h, w):
        raise ValueError(f"depth is {h}x{w} but pixel grid is {grid.shape[-2]}x{grid.shape[-1]}")
    grid = grid.to(depth.dtype)
    k_inv = torch.linalg.inv(_k_matrix(k, b, depth))
    rays = (k_inv @ grid.reshape(3, -1)).reshape(b, 3, h, w)
    return rays * depth


def transform_points(points: torch.Tensor, pose: torch.Tensor) -> torch.Tensor:
    """Apply ``R X + t`` to a ``(B, 3, H, W)`` point cloud."""
    b, _, h, w = points.shape
    if pose.dim() == 2:
        pose = pose.unsqueeze(0)
    pose = pose.expand(b, 4, 4)
    flat = points.reshape(b, 3, -1)
    out = pose[:, :3, :3] @ flat + pose[:, :3, 3:]
    return out.reshape(b, 3, h, w)


def _inside(u, v, w, h):
    return (u >= -BOUNDS_TOL) & (u <= w - 1 + BOUNDS_TOL) & (v >= -BOUNDS_TOL) & (v <= h - 1 + BOUNDS_TOL)


def project(points: torch.Tensor, k: Intrinsics, z_eps: float = Z_EPS,
            image_size: tuple[int, int] | None = None) -> SampleCoords:
    """Perspective projection ``K (X / Z)``.

    Points behind ``z_eps`` and coordinates outside ``[0, W-1] x [0, H-1]``
    are flagged invalid; their coordinates stay finite.  The bounds come from
    ``image_size`` (W, H), else the intrinsics, else the point grid itself.
    """
    b, _, h, w = points.shape
    if image_size is not None:
        w, h = image_size
    elif isinstance(k, CameraIntrinsics):
        w, h = k.width, k.height
    kmat = _k_matrix(k, b, points)
    z = points[:, 2:3]
    in_front = z > z_eps
    z_safe = torch.where(in_front, z, torch.full_like(z, z_eps))
    fx = kmat[:, 0, 0].view(b, 1, 1, 1)
    fy = kmat[:, 1, 1].view(b, 1, 1, 1)
    cx = kmat[:, 0, 2].view(b, 1, 1, 1)
    cy = kmat[:, 1, 2].view(b, 1, 1, 1)
    u = fx * points[:, 0:1] / z_safe + cx
    v = fy * points[:, 1:2] / z_safe + cy
    inside = _inside(u, v, w, h)
    return SampleCoords(torch.cat([u, v], dim=1), in_front & inside)


def bilinear_sample(image: torch.Tensor, coords: SampleCoords) -> tuple[torch.Tensor, torch.Tensor]:
    """Four-neighbour bilinear lookup with zero padding.

    Returns the sampled image and the validity mask.  Invalid pixels are zero.
    A coordinate on the last row or column is valid; the out-of-range
    neighbour it touches carries zero weight.
    """
    b, c, h, w = image.shape
    uv, valid = coords
    if uv.shape[0] != b:
        raise ValueError(f"batch mismatch: image {b}, coords {uv.shape[0]}")
    u, v = uv[:, 0], uv[:, 1]
    valid = valid.reshape(u.shape) & _inside(u, v, w, h)

    # left/top neighbour clamped so that the right/bottom one stays in range
    u0 = torch.floor(u).clamp(0, max(w - 2, 0))
    v0 = torch.floor(v).clamp(0, max(h - 2, 0))
    # weights in the image dtype; coordinates may be wider
    fu = (u - u0).to(image.dtype)
    fv = (v - v0).to(image.dtype)
    u0i, v0i = u0.long(), v0.long()
    u1i = (u0i + 1).clamp(max=w - 1)
    v1i = (v0i + 1).clamp(max=h - 1)

    flat = image.reshape(b, c, h * w)

    def gather(vi, ui):
        idx = (vi * w + ui).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *u.shape[1:])

    fu, fv = fu.unsqueeze(1), fv.unsqueeze(1)
    out = ((1 - fu) * (1 - fv) * gather(v0i, u0i) + fu * (1 - fv) * gather(v0i, u1i)
           + (1 - fu) * fv * gather(v1i, u0i) + fu * fv * gather(v1i, u1i))
    valid = valid.reshape(b, 1, *u.shape[1:])
    return out * valid.to(out.dtype), valid


def synthesize_view(source: torch.Tensor, depth: torch.Tensor, pose: torch.Tensor,
                    k: Intrinsics) -> tuple[torch.Tensor, torch.Tensor]:
    """Reconstruct the target frame from ``source`` using target depth and the
    target-to-source pose.

    Pixel coordinates are computed in double precision so that a pose which
    maps pixels onto pixel centres samples them exactly.
    """
    if source.shape[-2:] != depth.shape[-2:]:
        raise ValueError(f"source {tuple(source.shape[-2:])} and depth {tuple(depth.shape[-2:])} differ")
    points = transform_points(backproject(depth.double(), k), pose.double())
    h, w = source.shape[-2:]
    return bilinear_sample(source, project(points, k, image_size=(w, h)))


# -- SE(3) helpers ---------------------------------------------------------

def pose_matrix(rotation: torch.Tensor, translation: torch.Tensor) -> torch.Tensor:
    """Assemble ``(..., 4, 4)`` from ``(..., 3, 3)`` and ``(..., 3)``."""
    top = torch.cat([rotation, translation.unsqueeze(-1)], dim=-1)
    bottom = torch.zeros_like(top[..., :1, :])
    bottom[..., 0, 3] = 1
    return torch.cat([top, bottom], dim=-2)


def axis_angle_to_matrix(axis_angle: torch.Tensor) -> torch.Tensor:
    """Rotation matrix from an axis-angle vector via the matrix exponential."""
    x, y, z = axis_angle.unbind(-1)
    zero = torch.zeros_like(x)
    skew = torch.stack([zero, -z, y, z, zero, -x, -y, x, zero], dim=-1)
    return torch.linalg.matrix_exp(skew.reshape(*axis_angle.shape[:-1], 3, 3))


def pose_from_vector(vec: torch.Tensor) -> torch.Tensor:
    """``(..., 6)`` = (axis-angle, translation) -> ``(..., 4, 4)``."""
    return pose_matrix(axis_angle_to_matrix(vec[..., :3]), vec[..., 3:])


def compose(second: torch.Tensor, first: torch.Tensor) -> torch.Tensor:
    """Pose applying ``first`` then ``second``."""
    return second @ first


def invert_pose(pose: torch.Tensor) -> torch.Tensor:
    r = pose[..., :3, :3]
    t = pose[..., :3, 3]
    r_t = r.transpose(-1, -2)
    return pose_matrix(r_t, -(r_t @ t.unsqueeze(-1)).squeeze(-1))
