"""Stationary velocity fields, dense deformations and warping.

Displacements are stored in voxel units of the working grid, channel-last
``(X, Y, Z, 3)`` in the public types.  A deformation ``u`` maps index ``x``
to ``x + u(x)``; warping pulls values back, ``out(x) = in(x + u(x))``.

The differentiable kernels operate on torch tensors shaped ``(N, C, X, Y, Z)``
and are shared with the optimizer in :mod:`kneemorph.registration`.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn.functional as F

from . import nifti
from .errors import EmptyOutput, GridMismatch, NonFinite, WrongSize
from .volume import ImageVolume, LabelMap, _check_affine, _freeze, scaled_affine

DTYPE = torch.float64
DEFAULT_SQUARING_STEPS = 7


# ------------------------------------------------------------ torch kernels

_BASE_GRIDS: dict = {}


def base_grid(shape) -> torch.Tensor:
    """Identity sampling grid for ``grid_sample`` (align_corners=True), (1, X, Y, Z, 3)."""
    shape = tuple(int(n) for n in shape)
    grid = _BASE_GRIDS.get(shape)
    if grid is None:
        if min(shape) < 2:
            raise ValueError(f"every axis needs at least 2 voxels, got {shape}")
        axes = [torch.linspace(-1.0, 1.0, n, dtype=DTYPE) for n in shape]
        mesh = torch.meshgrid(*axes, indexing="ij")
        # grid_sample expects (x, y, z) = (last, middle, first) tensor axes
        grid = torch.stack(mesh[::-1], dim=-1).unsqueeze(0)
        _BASE_GRIDS[shape] = grid
    return grid


def _to_normalized(disp: torch.Tensor) -> torch.Tensor:
    shape = disp.shape[2:]
    scale = torch.tensor([2.0 / (n - 1) for n in shape[::-1]], dtype=disp.dtype)
    return disp.permute(0, 2, 3, 4, 1).flip(-1) * scale


def sample(vol: torch.Tensor, disp: torch.Tensor, padding: str = "zeros") -> torch.Tensor:
    """Trilinearly sample ``vol`` at ``x + disp(x)``.

    ``padding="zeros"`` treats everything outside the grid as 0 (images);
    ``"border"`` clamps to the edge (displacement fields).
    """
    grid = base_grid(disp.shape[2:]) + _to_normalized(disp)
    if vol.shape[0] != grid.shape[0]:
        grid = grid.expand(vol.shape[0], *grid.shape[1:])
    return F.grid_sample(vol, grid, mode="bilinear", padding_mode=padding, align_corners=True)


def compose_disp(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Displacement of ``a ∘ b``: ``b(x) + a(x + b(x))``."""
    return b + sample(a, b, padding="border")


def exp_velocity(v: torch.Tensor, steps: int = DEFAULT_SQUARING_STEPS) -> torch.Tensor:
    """Group exponential by scaling and squaring."""
    u = v / (2**steps)
    for _ in range(steps):
        u = compose_disp(u, u)
    return u


def resize_disp(u: torch.Tensor, shape) -> torch.Tensor:
    """Resample a displacement field to ``shape`` and rescale it to the new voxel units."""
    shape = tuple(int(n) for n in shape)
    old = u.shape[2:]
    if tuple(old) == shape:
        return u
    out = F.interpolate(u, size=shape, mode="trilinear", align_corners=False)
    factor = torch.tensor([n / o for n, o in zip(shape, old)], dtype=u.dtype).view(1, 3, 1, 1, 1)
    return out * factor


def resize_image(img: torch.Tensor, shape) -> torch.Tensor:
    shape = tuple(int(n) for n in shape)
    if tuple(img.shape[2:]) == shape:
        return img
    return F.interpolate(img, size=shape, mode="trilinear", align_corners=False)


def field_to_torch(data: np.ndarray) -> torch.Tensor:
    """(X, Y, Z, 3) numpy -> (1, 3, X, Y, Z) tensor."""
    return torch.from_numpy(np.ascontiguousarray(np.moveaxis(np.asarray(data, dtype=np.float64), -1, 0)))[None]


def field_from_torch(t: torch.Tensor) -> np.ndarray:
    return np.moveaxis(t.detach()[0].numpy(), 0, -1)


def image_to_torch(data: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.asarray(data, dtype=np.float64).copy())[None, None]


# ------------------------------------------------------------ public types

@dataclass(frozen=True, eq=False)
class DeformationField:
    """Dense displacement ``u`` in voxel units; maps ``x`` to ``x + u(x)``."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[-1] != 3:
            raise ValueError(f"field data must be (X, Y, Z, 3), got {data.shape}")
        object.__setattr__(self, "data", _freeze(data))
        object.__setattr__(self, "affine", _check_affine(self.affine))

    @property
    def shape(self) -> tuple:
        return tuple(self.data.shape[:3])

    @property
    def spacing(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    def same_grid(self, other, atol: float = 1e-5) -> bool:
        return self.shape == tuple(other.shape[:3]) and np.allclose(self.affine, other.affine, atol=atol)

    def with_data(self, data):
        return type(self)(data, self.affine)

    @classmethod
    def identity(cls, shape, affine=None):
        return cls(np.zeros(tuple(shape) + (3,)), np.eye(4) if affine is None else affine)

    def to_torch(self) -> torch.Tensor:
        return field_to_torch(self.data)


@dataclass(frozen=True, eq=False)
class VelocityField(DeformationField):
    """Stationary velocity ``v`` in voxel units; ``exp(v)`` via ``squaring_steps`` squarings."""

    squaring_steps: int = DEFAULT_SQUARING_STEPS

    def __post_init__(self):
        super().__post_init__()
        if int(self.squaring_steps) < 1:
            raise ValueError("squaring_steps must be >= 1")

    def with_data(self, data):
        return VelocityField(data, self.affine, self.squaring_steps)

    @classmethod
    def identity(cls, shape, affine=None, squaring_steps: int = DEFAULT_SQUARING_STEPS):
        return cls(np.zeros(tuple(shape) + (3,)), np.eye(4) if affine is None else affine, squaring_steps)


def _check_grid(a, b, what):
    if not a.same_grid(b):
        raise GridMismatch(f"{what}: grids differ ({a.shape} vs {b.shape})")


def exponentiate(v: VelocityField):
    """Return ``(exp(v), exp(-v))`` as deformation fields."""
    if not np.all(np.isfinite(v.data)):
        raise NonFinite("velocity field has non-finite components")
    with torch.no_grad():
        vt = v.to_torch()
        both = exp_velocity(torch.cat([vt, -vt]), v.squaring_steps)
    if not torch.isfinite(both).all():
        raise NonFinite("scaling and squaring overflowed")
    fwd = DeformationField(field_from_torch(both[:1]), v.affine)
    inv = DeformationField(field_from_torch(both[1:]), v.affine)
    return fwd, inv


def compose(a: DeformationField, b: DeformationField) -> DeformationField:
    """``a ∘ b``: apply ``b`` first, then ``a``; ``a``'s displacement is sampled trilinearly."""
    _check_grid(a, b, "compose")
    with torch.no_grad():
        out = compose_disp(a.to_torch(), b.to_torch())
    return DeformationField(field_from_torch(out), b.affine)


def warp_image(image: ImageVolume, f: DeformationField) -> ImageVolume:
    """Pull ``image`` back through ``f``; samples outside the grid are 0."""
    _check_grid(image, f, "warp_image")
    with torch.no_grad():
        out = sample(image_to_torch(image.data), f.to_torch(), padding="zeros")
    return image.with_data(out[0, 0].numpy())


def warp_probabilities(labels: LabelMap, f: DeformationField, values=None) -> tuple[list, np.ndarray]:
    """Warp each label indicator trilinearly; returns ``(values, probs[len(values), X, Y, Z])``."""
    _check_grid(labels, f, "warp_mask")
    values = labels.present() if values is None else list(values)
    if not values:
        return [], np.zeros((0,) + labels.shape)
    ind = np.stack([labels.data == v for v in values]).astype(np.float64)
    with torch.no_grad():
        out = sample(torch.from_numpy(ind)[None], f.to_torch(), padding="zeros")
    return values, out[0].numpy()


def labels_from_probabilities(values, probs: np.ndarray, threshold: float | None = None) -> np.ndarray:
    """Per-voxel argmax with background ``1 - sum``; ties go to the lowest label.

    With ``threshold`` set, background is used instead of the argmax rule:
    a voxel gets the label of its largest probability when that is >= threshold.
    """
    if len(values) == 0:
        return np.zeros(probs.shape[1:], dtype=np.uint8)
    lut = np.array([0] + list(values), dtype=np.uint8)
    if threshold is None:
        bg = 1.0 - probs.sum(axis=0, keepdims=True)
        return lut[np.argmax(np.concatenate([bg, probs]), axis=0)]
    best = np.argmax(probs, axis=0)
    keep = np.take_along_axis(probs, best[None], axis=0)[0] >= threshold
    return np.where(keep, lut[best + 1], 0).astype(np.uint8)


def warp_mask(labels: LabelMap, f: DeformationField) -> LabelMap:
    """Warp a label map by interpolating per-label indicators and taking the argmax."""
    values, probs = warp_probabilities(labels, f)
    return labels.with_data(labels_from_probabilities(values, probs))


def resize_field(f: DeformationField, shape) -> DeformationField:
    """Resample a field onto a grid with the same field of view and ``shape`` voxels."""
    shape = tuple(int(n) for n in shape)
    if min(shape) < 1:
        raise EmptyOutput(f"resampled field would have extents {shape}")
    with torch.no_grad():
        out = resize_disp(f.to_torch(), shape)
    scale = np.array(f.shape, dtype=np.float64) / np.array(shape, dtype=np.float64)
    affine = scaled_affine(f.affine, scale)
    if isinstance(f, VelocityField):
        return VelocityField(field_from_torch(out), affine, f.squaring_steps)
    return DeformationField(field_from_torch(out), affine)


def resample_field(f: DeformationField, factor) -> DeformationField:
    """Resample by a rational ``factor`` (½ halves the extents) with unit rescaling."""
    factor = Fraction(factor).limit_denominator(1000)
    if factor <= 0:
        raise ValueError("factor must be positive")
    shape = tuple(int(np.ceil(float(n * factor) - 1e-9)) for n in f.shape)
    if min(shape) < 1:
        raise EmptyOutput(f"factor {factor} leaves no voxels")
    return resize_field(f, shape)


def jacobian_determinant(f: DeformationField) -> ImageVolume:
    """det(I + Du): central differences inside, one-sided at the borders."""
    if min(f.shape) < 2:
        raise ValueError("jacobian needs at least 2 voxels per axis")
    grads = np.stack([np.stack(np.gradient(f.data[..., c], axis=(0, 1, 2)), axis=-1) for c in range(3)], axis=-2)
    jac = grads + np.eye(3)
    return ImageVolume(np.linalg.det(jac), f.affine)


# ------------------------------------------------------------------ file io

def write_field(f: DeformationField, path) -> None:
    """Store as 4-D NIfTI (X, Y, Z, 3); units and kind go in the description."""
    if isinstance(f, VelocityField):
        descrip = f"velocity voxel-units K={f.squaring_steps}"
    else:
        descrip = "displacement voxel-units"
    nifti.write_array(f.data.astype(np.float32), f.affine, path, descrip=descrip, intent_code=1007)


def read_field(path) -> DeformationField:
    data, affine, h = nifti.read_array(path)
    if data.ndim != 4 or data.shape[3] != 3:
        raise WrongSize(f"{path}: expected (X, Y, Z, 3) field, got {data.shape}")
    descrip = h.descrip.rstrip(b"\x00").decode("ascii", "replace")
    if descrip.startswith("velocity"):
        steps = DEFAULT_SQUARING_STEPS
        for tok in descrip.split():
            if tok.startswith("K="):
                steps = int(tok[2:])
        return VelocityField(data.astype(np.float64), affine, steps)
    return DeformationField(data.astype(np.float64), affine)
