"""Six-parameter rigid registration maximizing normalized cross-correlation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import optimize

from .errors import Diverged
from .phantoms import rotation_matrix
from .volume import ImageVolume, scaled_affine

DTYPE = torch.float64


@dataclass(frozen=True)
class RigidConfig:
    levels: tuple = (4, 2, 1)
    max_iter: int = 100
    tol: float = 1e-9


def _euler_t(angles: torch.Tensor) -> torch.Tensor:
    """``Rz @ Ry @ Rx`` for angles in radians (differentiable)."""
    ax, ay, az = angles[0], angles[1], angles[2]
    one, zero = torch.ones((), dtype=DTYPE), torch.zeros((), dtype=DTYPE)
    rx = torch.stack([torch.stack([one, zero, zero]),
                      torch.stack([zero, torch.cos(ax), -torch.sin(ax)]),
                      torch.stack([zero, torch.sin(ax), torch.cos(ax)])])
    ry = torch.stack([torch.stack([torch.cos(ay), zero, torch.sin(ay)]),
                      torch.stack([zero, one, zero]),
                      torch.stack([-torch.sin(ay), zero, torch.cos(ay)])])
    rz = torch.stack([torch.stack([torch.cos(az), -torch.sin(az), zero]),
                      torch.stack([torch.sin(az), torch.cos(az), zero]),
                      torch.stack([zero, zero, one])])
    return rz @ ry @ rx


def rigid_matrix(params, center) -> np.ndarray:
    """World transform ``p -> R (p - c) + c + t`` from (rx, ry, rz [deg], tx, ty, tz [mm])."""
    params = np.asarray(params, dtype=np.float64)
    m = np.eye(4)
    r = rotation_matrix(params[:3])
    m[:3, :3] = r
    m[:3, 3] = np.asarray(center) - r @ np.asarray(center) + params[3:]
    return m


class _Level:
    """Fixed-image world points and the moving image at one resolution."""

    def __init__(self, moving: ImageVolume, fixed: ImageVolume, factor: int):
        shape_f = tuple(max(2, int(np.ceil(n / factor))) for n in fixed.shape)
        shape_m = tuple(max(2, int(np.ceil(n / factor))) for n in moving.shape)
        scale_f = np.asarray(fixed.shape) / np.asarray(shape_f)
        scale_m = np.asarray(moving.shape) / np.asarray(shape_m)
        aff_f = scaled_affine(fixed.affine, scale_f)
        aff_m = scaled_affine(moving.affine, scale_m)
        self.fixed = _shrink(fixed.data, shape_f).flatten()
        self.moving = _shrink(moving.data, shape_m)
        idx = np.indices(shape_f, dtype=np.float64).reshape(3, -1)
        self.points = torch.from_numpy(aff_f[:3, :3] @ idx + aff_f[:3, 3:4])  # (3, N) world
        inv = np.linalg.inv(aff_m)
        # world -> normalized grid_sample coordinates of the moving grid
        norm = np.diag(2.0 / (np.asarray(shape_m) - 1.0))
        self.to_norm = torch.from_numpy(norm @ inv[:3, :3])
        self.to_norm_t = torch.from_numpy(norm @ inv[:3, 3] - 1.0)
        self.shape_f = shape_f


def _shrink(data: np.ndarray, shape) -> torch.Tensor:
    t = torch.from_numpy(np.asarray(data, dtype=np.float64))[None, None]
    if tuple(shape) != tuple(data.shape):
        t = F.interpolate(t, size=tuple(shape), mode="area")
    return t


def _transform_points(level: _Level, x: torch.Tensor, center: torch.Tensor, length: float) -> torch.Tensor:
    r = _euler_t(x[:3] / length)
    t = x[3:]
    q = r @ (level.points - center[:, None]) + (center + t)[:, None]
    return level.to_norm @ q + level.to_norm_t[:, None]


def _ncc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a - a.mean()
    b = b - b.mean()
    denom = torch.sqrt((a * a).sum() * (b * b).sum())
    return (a * b).sum() / denom


def _warped(level: _Level, x, center, length):
    g = _transform_points(level, x, center, length)  # (3, N) in (i, j, k) normalized order
    grid = g.flip(0).T.reshape(1, 1, 1, -1, 3)
    return F.grid_sample(level.moving, grid, mode="bilinear", padding_mode="zeros", align_corners=True).flatten()


def _overlap(level: _Level, x, center, length) -> int:
    """Fixed voxels whose warped moving value and own value are both nonzero."""
    with torch.no_grad():
        w = _warped(level, x, center, length)
    return int(((w != 0) & (level.fixed != 0)).sum())


def rigid_register(moving: ImageVolume, fixed: ImageVolume, cfg: RigidConfig = RigidConfig()) -> np.ndarray:
    """Rigid transform aligning ``moving`` to ``fixed``.

    Returns a 4x4 world-space matrix ``T`` mapping fixed-image world points
    to moving-image world points, so ``moving(T p)`` approximates
    ``fixed(p)``.  Rotation is about the fixed field-of-view centre.
    """
    if np.ptp(fixed.data) == 0 or np.ptp(moving.data) == 0:
        raise Diverged("rigid registration needs non-constant images")
    centre_idx = (np.asarray(fixed.shape) - 1) / 2.0
    center = fixed.affine[:3, :3] @ centre_idx + fixed.affine[:3, 3]
    extent = np.linalg.norm(fixed.spacing * np.asarray(fixed.shape))
    length = max(extent / 2.0, 1.0)  # rotation params are arc lengths at this radius (mm)
    center_t = torch.from_numpy(center)
    x = np.zeros(6)
    for factor in cfg.levels:
        level = _Level(moving, fixed, factor)
        if _overlap(level, torch.from_numpy(x), center_t, length) == 0:
            raise Diverged("moving and fixed images have no overlapping support")

        def fun(p):
            xt = torch.from_numpy(p).requires_grad_(True)
            w = _warped(level, xt, center_t, length)
            loss = 1.0 - _ncc(w, level.fixed)
            if not torch.isfinite(loss):
                raise Diverged("NCC became non-finite")
            (g,) = torch.autograd.grad(loss, [xt])
            return float(loss.detach()), g.numpy().copy()

        res = optimize.minimize(fun, x, jac=True, method="L-BFGS-B",
                                options={"maxiter": cfg.max_iter, "ftol": cfg.tol, "gtol": 1e-10})
        if not np.all(np.isfinite(res.x)):
            raise Diverged("rigid parameters became non-finite")
        x = res.x
    params = np.concatenate([np.rad2deg(x[:3] / length), x[3:]])
    return rigid_matrix(params, center)


def rigid_parameters(matrix, center) -> np.ndarray:
    """Inverse of :func:`rigid_matrix`: (rx, ry, rz [deg], tx, ty, tz [mm])."""
    m = np.asarray(matrix, dtype=np.float64)
    r = m[:3, :3]
    ay = np.arcsin(-np.clip(r[2, 0], -1.0, 1.0))
    ax = np.arctan2(r[2, 1], r[2, 2])
    az = np.arctan2(r[1, 0], r[0, 0])
    t = m[:3, 3] - (np.asarray(center) - r @ np.asarray(center))
    return np.concatenate([np.rad2deg([ax, ay, az]), t])
