"""Volume containers and image standardization.

Volumes are indexed ``data[i, j, k]`` with a 4x4 affine mapping voxel indices
to world millimetres.  Standardized volumes are RAS+: voxel axes increase
toward the subject's right, anterior and superior directions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

from .errors import (
    ConstantImage,
    EmptyOutput,
    GridMismatch,
    NotRasOriented,
    ObliqueAffine,
    SingularAffine,
    UnknownLabel,
)

OBLIQUE_TOLERANCE_DEG = 5.0

DEFAULT_LABELS = {
    "femur": 1,
    "FC": 2,
    "tibia": 3,
    "TC": 4,
    "MTC": 5,
    "LTC": 6,
}


@dataclass(frozen=True)
class LabelSchema:
    """Name to integer mapping for the knee structures."""

    labels: Mapping[str, int] = field(default_factory=lambda: dict(DEFAULT_LABELS))

    def __post_init__(self):
        values = list(self.labels.values())
        if len(set(values)) != len(values) or any(int(v) <= 0 for v in values):
            raise ValueError(f"label integers must be distinct and > 0: {dict(self.labels)}")
        object.__setattr__(self, "labels", MappingProxyType({k: int(v) for k, v in self.labels.items()}))

    def value(self, name: str) -> int:
        try:
            return self.labels[name]
        except KeyError:
            raise UnknownLabel(name) from None

    def name(self, value: int) -> str:
        for k, v in self.labels.items():
            if v == value:
                return k
        raise UnknownLabel(value)

    def __contains__(self, name) -> bool:
        return name in self.labels

    def __hash__(self):
        return hash(tuple(sorted(self.labels.items())))

    def __reduce__(self):
        return (LabelSchema, (dict(self.labels),))

    def __eq__(self, other):
        return isinstance(other, LabelSchema) and dict(self.labels) == dict(other.labels)


DEFAULT_SCHEMA = LabelSchema()


def _check_affine(affine) -> np.ndarray:
    affine = np.array(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise SingularAffine("voxel-to-world matrix is singular")
    affine.setflags(write=False)
    return affine


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, order="C", copy=True)
    a.setflags(write=False)
    return a


class _Grid:
    data: np.ndarray
    affine: np.ndarray

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[:3])

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def same_grid(self, other, atol: float = 1e-5) -> bool:
        return self.shape == tuple(other.shape[:3]) and np.allclose(self.affine, other.affine, atol=atol)


@dataclass(frozen=True, eq=False)
class ImageVolume(_Grid):
    """Scalar 3-D image stored as float32."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"ImageVolume needs a 3-D array, got shape {data.shape}")
        object.__setattr__(self, "data", _freeze(data.astype(np.float32, copy=False)))
        object.__setattr__(self, "affine", _check_affine(self.affine))

    def with_data(self, data) -> "ImageVolume":
        return ImageVolume(data, self.affine)


@dataclass(frozen=True, eq=False)
class LabelMap(_Grid):
    """Integer label volume (uint8) tied to a :class:`LabelSchema`."""

    data: np.ndarray
    affine: np.ndarray
    schema: LabelSchema = DEFAULT_SCHEMA

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"LabelMap needs a 3-D array, got shape {data.shape}")
        if data.dtype != np.uint8:
            if data.size and (data.min() < 0 or data.max() > 255):
                raise ValueError("label values must fit in uint8")
            data = data.astype(np.uint8)
        present = set(np.unique(data).tolist()) - {0}
        unknown = present - set(self.schema.labels.values())
        if unknown:
            raise UnknownLabel(f"label values {sorted(unknown)} not in schema")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "affine", _check_affine(self.affine))

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.affine, self.schema)

    def indicator(self, *names: str) -> np.ndarray:
        values = [self.schema.value(n) for n in names]
        return np.isin(self.data, values)

    def present(self) -> list:
        """Nonzero label integers present in the map, ascending."""
        return [int(v) for v in np.unique(self.data) if v != 0]


def check_same_grid(a, b, what: str = "volumes") -> None:
    if not a.same_grid(b):
        raise GridMismatch(f"{what} are not on the same grid: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- orientation

def _nearest_axes(affine: np.ndarray):
    """Map each voxel axis to its nearest world axis and sign."""
    m = affine[:3, :3]
    if abs(np.linalg.det(m)) < 1e-12:
        raise SingularAffine("voxel-to-world matrix is singular")
    dirs = m / np.linalg.norm(m, axis=0)
    axes = np.argmax(np.abs(dirs), axis=0)
    if len(set(axes.tolist())) != 3:
        raise ObliqueAffine("voxel axes do not map to distinct world axes")
    cosines = np.abs(dirs[axes, [0, 1, 2]])
    if np.any(cosines < np.cos(np.deg2rad(OBLIQUE_TOLERANCE_DEG))):
        raise ObliqueAffine(
            f"affine is more than {OBLIQUE_TOLERANCE_DEG} degrees oblique; resample to a grid first"
        )
    signs = np.sign(dirs[axes, [0, 1, 2]])
    return axes, signs


def is_ras(affine) -> bool:
    """True when the dominant entry of every column is positive and on the diagonal."""
    m = np.asarray(affine)[:3, :3]
    dom = np.argmax(np.abs(m), axis=0)
    return bool(np.array_equal(dom, [0, 1, 2]) and np.all(np.diag(m) > 0))


def reorient_to_ras(v):
    """Permute and flip voxel axes so the volume is RAS+.

    Only nearest-axis permutations and flips are applied, so voxel values are
    carried over exactly; world coordinates of every voxel are unchanged.
    """
    axes, signs = _nearest_axes(v.affine)
    if np.array_equal(axes, [0, 1, 2]) and np.all(signs > 0):
        return v
    shape = v.data.shape[:3]
    order = np.argsort(axes)  # new axis k takes old axis order[k]
    data = np.transpose(v.data, tuple(order) + tuple(range(3, v.data.ndim)))
    # new index -> old index
    t = np.zeros((4, 4))
    t[3, 3] = 1.0
    for k, j in enumerate(order):
        if signs[j] < 0:
            data = np.flip(data, axis=k)
            t[j, k] = -1.0
            t[j, 3] = shape[j] - 1
        else:
            t[j, k] = 1.0
    affine = v.affine @ t
    return _rebuild(v, np.ascontiguousarray(data), affine)


def _rebuild(v, data, affine):
    if isinstance(v, LabelMap):
        return LabelMap(data, affine, v.schema)
    return type(v)(data, affine)


def flip_lr(v):
    """Mirror a RAS+ volume along its left-right axis.

    The affine is kept, so the mirrored data occupies the same world box and
    stays RAS+; applying the flip twice restores the input exactly.
    """
    if not is_ras(v.affine):
        raise NotRasOriented("flip_lr expects a RAS+ volume; call reorient_to_ras first")
    return _rebuild(v, np.ascontiguousarray(v.data[::-1]), v.affine)


# ----------------------------------------------------------------- resampling

def grid_for_spacing(shape, affine, target_spacing):
    """Extents and affine of a grid covering the same field of view at a new spacing."""
    target = np.broadcast_to(np.asarray(target_spacing, dtype=np.float64), (3,))
    if np.any(target <= 0):
        raise ValueError(f"target spacing must be positive, got {target}")
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    extent = np.asarray(shape[:3], dtype=np.float64) * spacing / target
    new_shape = tuple(int(n) for n in np.ceil(extent - 1e-6))
    if min(new_shape) < 1:
        raise EmptyOutput(f"resampling to {target} mm gives extents {new_shape}")
    return new_shape, scaled_affine(affine, target / spacing)


def scaled_affine(affine, scale) -> np.ndarray:
    """Affine of a grid whose voxels are ``scale`` times larger, same first corner.

    New index ``m`` sits at old fractional index ``(m + 0.5) * scale - 0.5``.
    """
    scale = np.broadcast_to(np.asarray(scale, dtype=np.float64), (3,))
    new_affine = np.eye(4)
    new_affine[:3, :3] = affine[:3, :3] * scale
    new_affine[:3, 3] = affine[:3, :3] @ (0.5 * scale - 0.5) + affine[:3, 3]
    return new_affine


def resample_to_grid(v, shape, affine, order: int | None = None, cval: float | None = None):
    """Sample ``v`` at the voxel centres of another grid (world-space lookup)."""
    if order is None:
        order = 0 if isinstance(v, LabelMap) else 1
    to_src = np.linalg.solve(v.affine, affine)
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    src = to_src[:3, :3] @ idx + to_src[:3, 3:4]
    kwargs = {"mode": "nearest"} if cval is None else {"mode": "constant", "cval": cval}
    out = ndimage.map_coordinates(np.asarray(v.data, dtype=np.float64) if order else v.data,
                                  src, order=order, **kwargs)
    return _rebuild(v, out.reshape(shape), affine)


def resample(v, target_spacing):
    """Resample to ``target_spacing`` mm, trilinear for images and nearest for labels.

    The new grid covers the same field of view: its first voxel corner
    coincides with the input's first voxel corner.
    """
    shape, affine = grid_for_spacing(v.shape, v.affine, target_spacing)
    return resample_to_grid(v, shape, affine)


# -------------------------------------------------------------- normalization

def normalize_intensity(v: ImageVolume, percentiles=(0.5, 99.5)) -> ImageVolume:
    """Clip to a percentile window and map it linearly onto [0, 1]."""
    p_lo, p_hi = percentiles
    if not 0 <= p_lo < p_hi <= 100:
        raise ValueError(f"bad percentile window {percentiles}")
    data = np.asarray(v.data, dtype=np.float64)
    lo, hi = np.percentile(data, [p_lo, p_hi])
    if not hi > lo:
        raise ConstantImage("intensity window is empty; image is (near) constant")
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return v.with_data(out)


def mask_image(image: ImageVolume, labels: LabelMap, names: Iterable[str]) -> ImageVolume:
    """Keep image values where the label is one of ``names``; zero elsewhere."""
    names = list(names)
    values = [labels.schema.value(n) for n in names]
    check_same_grid(image, labels, "image and labels")
    keep = np.isin(labels.data, values)
    return image.with_data(np.where(keep, image.data, np.float32(0)))
