"""Segmentation and surface evaluation metrics."""
from __future__ import annotations

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import EmptyMask, GridMismatch, ZeroPseudoArea
from .volume import LabelMap

_FACE_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def _as_mask(m):
    """``(bool array, affine or None)`` from a bool array or a LabelMap (nonzero voxels)."""
    if isinstance(m, LabelMap):
        return m.data > 0, m.affine
    return np.asarray(m, dtype=bool), None


def _pair(a, b):
    ma, aa = _as_mask(a)
    mb, ab = _as_mask(b)
    if ma.shape != mb.shape:
        raise GridMismatch(f"mask shapes differ: {ma.shape} vs {mb.shape}")
    if aa is not None and ab is not None and not np.allclose(aa, ab, atol=1e-5):
        raise GridMismatch("masks have different affines")
    return ma, mb, aa if aa is not None else ab


def dsc(a, b) -> float:
    """Dice coefficient ``2|A & B| / (|A| + |B|)``; 1.0 when both masks are empty."""
    ma, mb, _ = _pair(a, b)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-neighbour outside the mask (grid edge counts as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, _FACE_NEIGHBOURS, border_value=0)


def _points(mask, affine):
    idx = np.argwhere(mask).astype(np.float64)
    if affine is None:
        return idx
    return idx @ affine[:3, :3].T + affine[:3, 3]


def surface_distances(a, b, affine=None) -> np.ndarray:
    """Pooled nearest boundary-to-boundary distances, A to B followed by B to A (mm)."""
    ma, mb, aff = _pair(a, b)
    if affine is not None:
        aff = np.asarray(affine, dtype=np.float64)
    if not ma.any() or not mb.any():
        raise EmptyMask("surface distances need two nonempty masks")
    pa = _points(boundary(ma), aff)
    pb = _points(boundary(mb), aff)
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return np.concatenate([d_ab, d_ba])


def hd95(a, b, affine=None) -> float:
    """95th percentile of the pooled bidirectional boundary distances (linear interpolation).

    Distances are in world mm when an affine is known (from a LabelMap or the
    ``affine`` argument), otherwise in voxels.
    """
    return float(np.percentile(surface_distances(a, b, affine), 95))


def relative_area_difference(measured, pseudo) -> float:
    """Signed ``(A - A_pseudo) / A_pseudo``; arguments are areas or objects with ``.area``."""
    a = float(getattr(measured, "area", measured))
    ref = float(getattr(pseudo, "area", pseudo))
    if ref <= 0:
        raise ZeroPseudoArea("reference area must be > 0")
    return (a - ref) / ref
