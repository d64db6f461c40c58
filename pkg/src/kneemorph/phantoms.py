"""Synthetic knee-like and shell phantoms with known geometry.

Geometry is evaluated analytically at voxel centres in world millimetres, so
rotated or shifted twins are generated exactly rather than resampled.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .volume import DEFAULT_SCHEMA, ImageVolume, LabelMap

INTENSITY = {"femur": 0.35, "FC": 0.8, "tibia": 0.3, "TC": 0.7}
BACKGROUND = 0.1


def grid_affine(shape, spacing=1.0, origin=None) -> np.ndarray:
    """Axis-aligned RAS+ affine; default origin puts the grid centre at world 0."""
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    affine = np.diag(list(spacing) + [1.0])
    if origin is None:
        origin = -(np.asarray(shape) - 1) / 2.0 * spacing
    affine[:3, 3] = origin
    return affine


def rotation_matrix(angles_deg) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from Euler angles in degrees."""
    ax, ay, az = np.deg2rad(np.asarray(angles_deg, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _world_points(shape, affine):
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    return (affine[:3, :3] @ idx + affine[:3, 3:4]).reshape((3,) + tuple(shape))


def _body_coords(shape, affine, rotation_deg, shift_mm):
    """World points expressed in the phantom's own frame (inverse pose)."""
    p = _world_points(shape, affine) - np.asarray(shift_mm, dtype=np.float64).reshape(3, 1, 1, 1)
    r = rotation_matrix(rotation_deg)
    return np.einsum("ji,j...->i...", r, p)


def _texture(shape, seed, sigma=2.0, amplitude=0.08):
    rng = np.random.default_rng(seed)
    t = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return amplitude * t / (np.abs(t).max() + 1e-12)


def body_texture(points, seed, amplitude=0.08, waves=16):
    """Smooth texture attached to the phantom frame: a sum of random plane waves (wavelengths 4-12 mm)."""
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    k = 2 * np.pi / rng.uniform(4.0, 12.0, waves)
    phase = rng.uniform(0, 2 * np.pi, waves)
    t = sum(np.cos(k[w] * np.tensordot(dirs[w], points, axes=1) + phase[w]) for w in range(waves))
    return amplitude * t / waves * 2.0


def knee_labels(shape=(64, 64, 64), spacing=1.0, rotation_deg=(0.0, 0.0, 0.0), shift_mm=(0.0, 0.0, 0.0),
                femur_radius=11.0, cartilage_mm=3.0, gap_mm=2.0, half_width=20.0,
                fc_defect=None, mtc_defect=None) -> LabelMap:
    """Label map of a simplified right knee in RAS+ world coordinates.

    The femoral condyles are a cylinder along x capped by cartilage on its
    lower half; the tibia is a slab below whose plateau carries two separate
    cartilage lobes (medial at negative x, lateral at positive x).  Defects
    are ``(centre_mm, radius_mm)`` balls removed from the cartilage.
    """
    affine = grid_affine(shape, spacing)
    x, y, z = _body_coords(shape, affine, rotation_deg, shift_mm)
    out = np.zeros(shape, dtype=np.uint8)
    zf = femur_radius + cartilage_mm + gap_mm / 2.0  # femur axis height
    rho = np.hypot(y, z - zf)
    in_x = np.abs(x) <= half_width
    femur = in_x & (rho <= femur_radius)
    fc = in_x & (rho > femur_radius) & (rho <= femur_radius + cartilage_mm) & (z < zf)
    plateau = -gap_mm / 2.0 - cartilage_mm
    tibia = (np.abs(x) <= half_width) & (np.abs(y) <= 14.0) & (z <= plateau) & (z > plateau - 16.0)
    lobe = (np.abs(y) <= 11.0) & (z > plateau) & (z <= plateau + cartilage_mm)
    mtc = lobe & (x >= -half_width + 1.0) & (x <= -3.0)
    ltc = lobe & (x >= 3.0) & (x <= half_width - 1.0)
    for defect, target in ((fc_defect, fc), (mtc_defect, mtc)):
        if defect is not None:
            c, r = defect
            d2 = (x - c[0]) ** 2 + (y - c[1]) ** 2 + (z - c[2]) ** 2
            target &= d2 > r * r
    s = DEFAULT_SCHEMA
    out[femur] = s.value("femur")
    out[tibia] = s.value("tibia")
    out[fc] = s.value("FC")
    out[mtc | ltc] = s.value("TC")
    return LabelMap(out, affine, s)


def intensity_image(labels: LabelMap, seed: int = 0, texture: float = 0.08) -> ImageVolume:
    """MR-like image: per-structure intensity plus smooth texture."""
    data = np.full(labels.shape, BACKGROUND)
    for name, value in INTENSITY.items():
        if name in labels.schema:
            data[labels.data == labels.schema.value(name)] = value
    data += _texture(labels.shape, seed, amplitude=texture)
    return ImageVolume(data, labels.affine)


def knee_phantom(shape=(64, 64, 64), spacing=1.0, seed: int = 0, **kw):
    """``(image, labels)`` of :func:`knee_labels` with texture that moves with the anatomy."""
    labels = knee_labels(shape, spacing, **kw)
    body = _body_coords(shape, labels.affine, kw.get("rotation_deg", (0.0, 0.0, 0.0)),
                        kw.get("shift_mm", (0.0, 0.0, 0.0)))
    data = np.full(labels.shape, BACKGROUND)
    for name, value in INTENSITY.items():
        data[labels.data == labels.schema.value(name)] = value
    data += body_texture(body, seed)
    return ImageVolume(data, labels.affine), labels


def shell_phantom(shape=(96, 96, 96), spacing=0.5, bone_radius=12.0, thickness=2.0,
                  defect_fraction: float = 0.0, center=(0.0, 0.0, 0.0), seed: int = 0):
    """Bone ball (femur label) wrapped in a cartilage shell (FC label).

    ``defect_fraction`` removes the cartilage inside a cone about +z covering
    that fraction of the sphere's solid angle, leaving bare bone.  Defects
    with larger fractions contain the smaller ones.
    """
    if not 0 <= defect_fraction < 1:
        raise ValueError("defect_fraction must be in [0, 1)")
    affine = grid_affine(shape, spacing)
    x, y, z = _world_points(shape, affine) - np.asarray(center, dtype=np.float64).reshape(3, 1, 1, 1)
    r = np.sqrt(x * x + y * y + z * z)
    bone = r <= bone_radius
    shell = (r > bone_radius) & (r <= bone_radius + thickness)
    if defect_fraction > 0:
        cos_limit = 1.0 - 2.0 * defect_fraction
        shell &= z <= cos_limit * np.maximum(r, 1e-12)
    data = np.zeros(shape, dtype=np.uint8)
    data[bone] = DEFAULT_SCHEMA.value("femur")
    data[shell] = DEFAULT_SCHEMA.value("FC")
    labels = LabelMap(data, affine)
    return intensity_image(labels, seed), labels


def ball(shape, radius_vox: float, center=None) -> np.ndarray:
    """Digital ball indicator (voxel centres within ``radius_vox``)."""
    c = (np.asarray(shape) - 1) / 2.0 if center is None else np.asarray(center, dtype=np.float64)
    idx = np.indices(shape, dtype=np.float64)
    d2 = sum((idx[k] - c[k]) ** 2 for k in range(3))
    return d2 <= radius_vox**2


def smooth_displacement(shape, max_disp: float, seed: int = 0, sigma: float = 6.0, margin: int = 4) -> np.ndarray:
    """Random smooth (X, Y, Z, 3) voxel displacement scaled to ``max_disp``.

    The field tapers to zero within ``margin`` voxels of the border.
    """
    rng = np.random.default_rng(seed)
    u = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap") for _ in range(3)], -1)
    taper = np.ones(shape)
    for ax, n in enumerate(shape):
        i = np.arange(n, dtype=np.float64)
        w = np.clip(np.minimum(i, n - 1 - i) / max(margin, 1), 0.0, 1.0)
        w = 0.5 - 0.5 * np.cos(np.pi * w)
        taper *= w.reshape([-1 if k == ax else 1 for k in range(3)])
    u *= taper[..., None]
    mag = np.linalg.norm(u, axis=-1).max()
    return u * (max_disp / mag)
