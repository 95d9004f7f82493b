"""Camera geometry: rigid poses, pinhole rays, and sinusoidal encodings.

One set of conventions is shared by the synthetic renderer, the denoiser's
conditioning pathway, and the neural-field scorer:

* poses are world-from-camera: ``x_world = R @ x_cam + t``
* the camera looks along +z in its own frame, +x right, +y down
* pixel (row v, col u) casts its ray through the pixel center
  ``(u + 0.5, v + 0.5)``
* ray directions are unit length
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
import torch

__all__ = [
    "Pose",
    "Camera",
    "RayBundle",
    "make_rays",
    "ray_grid",
    "look_at",
    "orbit_poses",
    "posenc_nerf",
    "posenc_ddpm",
]

_ROTATION_ATOL = 1e-5


@dataclasses.dataclass(frozen=True)
class Pose:
    """World-from-camera rigid transform.

    Attributes:
        R: (3, 3) rotation matrix, orthonormal with det +1.
        t: (3,) camera position in world/scene units.
    """

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError(f"pose needs a 3x3 R and 3-vector t, got {R.shape}, {t.shape}")
        if not np.allclose(R @ R.T, np.eye(3), atol=_ROTATION_ATOL):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > _ROTATION_ATOL:
            raise ValueError("rotation must have det +1")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def inverse(self) -> "Pose":
        return Pose(R=self.R.T, t=-self.R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """Transform equal to applying `other` first, then `self`."""
        return Pose(R=self.R @ other.R, t=self.R @ other.t + self.t)

    def matrix34(self) -> np.ndarray:
        """3x4 [R | t] matrix (row-major when flattened)."""
        return np.concatenate([self.R, self.t[:, None]], axis=1)

    @classmethod
    def from_matrix34(cls, m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(3, 4)
        return cls(R=m[:, :3], t=m[:, 3])

    @classmethod
    def identity(cls) -> "Pose":
        return cls(R=np.eye(3), t=np.zeros(3))


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics plus pixel resolution.

    Attributes:
        K: (3, 3) upper-triangular intrinsics, fx/fy/cx/cy in pixels.
        height, width: image size in pixels.
    """

    K: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"intrinsics must be 3x3, got {K.shape}")
        if not np.allclose(K, np.triu(K)):
            raise ValueError("intrinsics must be upper-triangular")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or K[2, 2] != 1.0:
            raise ValueError("degenerate intrinsics")
        if self.height <= 0 or self.width <= 0:
            raise ValueError("resolution must be positive")
        object.__setattr__(self, "K", K)

    @classmethod
    def from_focal(cls, focal: float, height: int, width: int) -> "Camera":
        K = np.array(
            [[focal, 0.0, width / 2.0], [0.0, focal, height / 2.0], [0.0, 0.0, 1.0]]
        )
        return cls(K=K, height=height, width=width)


@dataclasses.dataclass(frozen=True)
class RayBundle:
    """Per-pixel rays: origins and unit directions, both (H, W, 3)."""

    origins: np.ndarray
    directions: np.ndarray


def make_rays(pose: Pose, camera: Camera) -> RayBundle:
    """Cast one ray per pixel of `camera` placed at `pose`."""
    u = np.arange(camera.width, dtype=np.float64) + 0.5
    v = np.arange(camera.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    pix = np.stack([uu, vv, np.ones_like(uu)], axis=-1)  # (H, W, 3)
    try:
        k_inv = np.linalg.inv(camera.K)
    except np.linalg.LinAlgError as e:
        raise ValueError("degenerate intrinsics") from e
    dirs = pix @ k_inv.T @ pose.R.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pose.t, dirs.shape).copy()
    return RayBundle(origins=origins, directions=dirs)


def ray_grid(R: torch.Tensor, t: torch.Tensor, K: torch.Tensor, height: int, width: int):
    """Batched torch twin of :func:`make_rays`.

    Args:
        R: (..., 3, 3) world-from-camera rotations.
        t: (..., 3) camera positions.
        K: (..., 3, 3) intrinsics.

    Returns:
        (origins, directions), each (..., height, width, 3); directions unit.
    """
    dtype, device = R.dtype, R.device
    u = torch.arange(width, dtype=dtype, device=device) + 0.5
    v = torch.arange(height, dtype=dtype, device=device) + 0.5
    vv, uu = torch.meshgrid(v, u, indexing="ij")
    pix = torch.stack([uu, vv, torch.ones_like(uu)], dim=-1)  # (H, W, 3)
    k_inv = torch.linalg.inv(K)
    # (..., 1, 1, 3, 3) @ pixel homogeneous coords
    m = (R @ k_inv)[..., None, None, :, :]
    dirs = (m * pix[..., None, :]).sum(-1)
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = t[..., None, None, :].expand_as(dirs)
    return origins, dirs


def look_at(
    position: np.ndarray,
    target: np.ndarray | None = None,
    world_up: np.ndarray | None = None,
) -> Pose:
    """Pose for a camera at `position` looking at `target` (default origin)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.zeros(3) if target is None else np.asarray(target, dtype=np.float64)
    up = np.array([0.0, 0.0, 1.0]) if world_up is None else np.asarray(world_up, np.float64)
    forward = target - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera position coincides with the look-at target")
    forward = forward / norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Looking straight along `up`; pick an arbitrary perpendicular.
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward], axis=1)  # columns: camera x, y, z in world
    return Pose(R=R, t=position)


def orbit_poses(
    num: int,
    radius: float,
    elevation_deg: float = 30.0,
    start_azimuth_deg: float = 0.0,
    full_turns: float = 1.0,
) -> list[Pose]:
    """Equally spaced look-at-origin poses on a circle of constant elevation."""
    el = math.radians(elevation_deg)
    poses = []
    for i in range(num):
        az = math.radians(start_azimuth_deg) + full_turns * 2.0 * math.pi * i / num
        p = radius * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )
        poses.append(look_at(p))
    return poses


def posenc_nerf(x: torch.Tensor, min_deg: int, max_deg: int) -> torch.Tensor:
    """Concatenate x with sin/cos features at octave frequencies.

    Output width is ``d + 2 * d * (max_deg - min_deg)`` for d input channels;
    ``min_deg == max_deg`` returns x unchanged.
    """
    if min_deg > max_deg:
        raise ValueError("min_deg must not exceed max_deg")
    if min_deg == max_deg:
        return x
    scales = 2.0 ** torch.arange(min_deg, max_deg, dtype=x.dtype, device=x.device)
    xb = (x[..., None, :] * scales[:, None]).reshape(*x.shape[:-1], -1)
    emb = torch.sin(torch.cat([xb, xb + math.pi / 2.0], dim=-1))
    return torch.cat([x, emb], dim=-1)


def posenc_ddpm(timesteps: torch.Tensor, emb_ch: int, max_time: float = 1000.0) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of (rescaled) time values."""
    if emb_ch % 2 != 0:
        raise ValueError("emb_ch must be even")
    timesteps = timesteps * (1000.0 / max_time)
    half = emb_ch // 2
    # 10000 is the usual transformer base frequency.
    step = math.log(10000.0) / (half - 1)
    freqs = torch.exp(-step * torch.arange(half, dtype=timesteps.dtype, device=timesteps.device))
    args = timesteps[..., None] * freqs
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
