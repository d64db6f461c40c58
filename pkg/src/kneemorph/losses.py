"""Image similarity losses and deformation regularizers.

The ``*_t`` functions are differentiable torch kernels on ``(N, C, X, Y, Z)``
tensors and return one value per batch element.  The unsuffixed functions are
thin numpy wrappers over the public volume and field types.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .errors import ConstantImage, GridMismatch
from .volume import ImageVolume

LNCC_EPS = 1e-5
LNCC_MIN_VARIANCE_PRODUCT = 1e-10


def mse_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a - b).pow(2).flatten(1).mean(1)


def ncc_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a.flatten(1)
    b = b.flatten(1)
    a = a - a.mean(1, keepdim=True)
    b = b - b.mean(1, keepdim=True)
    cov = (a * b).mean(1)
    return 1.0 - cov.pow(2) / (a.pow(2).mean(1) * b.pow(2).mean(1))


def _prefix_padded(x: torch.Tensor, dim: int, r: int) -> torch.Tensor:
    """Cumulative sums padded so that ``P[i + 2r + 1] - P[i]`` is the truncated window sum."""
    n = x.shape[dim]
    s = torch.cumsum(x, dim)
    zeros_shape = list(x.shape)
    zeros_shape[dim] = r + 1
    tail = s.narrow(dim, n - 1, 1).expand(*[r if d == dim else -1 for d in range(x.dim())])
    return torch.cat([x.new_zeros(zeros_shape), s, tail], dim)


def box_sum(x: torch.Tensor, edge: int) -> torch.Tensor:
    """Sum over a cubic window of odd ``edge`` centred on each voxel, clipped at the borders."""
    r = edge // 2
    for dim in (2, 3, 4):
        n = x.shape[dim]
        p = _prefix_padded(x, dim, r)
        x = p.narrow(dim, 2 * r + 1, n) - p.narrow(dim, 0, n)
    return x


def window_counts(shape, edge: int) -> torch.Tensor:
    r = edge // 2
    counts = []
    for n in shape:
        i = np.arange(n)
        counts.append(np.minimum(i + r, n - 1) - np.maximum(i - r, 0) + 1)
    c = counts[0][:, None, None] * counts[1][None, :, None] * counts[2][None, None, :]
    return torch.from_numpy(c.astype(np.float64))


def lncc_t(a: torch.Tensor, b: torch.Tensor, edge: int, eps: float = LNCC_EPS) -> torch.Tensor:
    """``1 - mean(cov^2 / (var_a var_b + eps))`` over all window centres.

    Windows are clipped at the grid border.  Windows whose variance product is
    below ``1e-10`` (flat background) contribute a similarity of 0.
    """
    n = window_counts(a.shape[2:], edge).to(a.dtype)
    mean_a = box_sum(a, edge) / n
    mean_b = box_sum(b, edge) / n
    cov = box_sum(a * b, edge) / n - mean_a * mean_b
    var_a = box_sum(a * a, edge) / n - mean_a * mean_a
    var_b = box_sum(b * b, edge) / n - mean_b * mean_b
    vv = var_a * var_b
    informative = vv >= LNCC_MIN_VARIANCE_PRODUCT
    sim = torch.where(informative, cov * cov / (vv + eps), torch.zeros_like(vv))
    return 1.0 - sim.flatten(1).mean(1)


def smoothness_t(u: torch.Tensor) -> torch.Tensor:
    """Mean squared forward-difference gradient, summed over axes and components."""
    total = 0.0
    for dim in (2, 3, 4):
        d = u.narrow(dim, 1, u.shape[dim] - 1) - u.narrow(dim, 0, u.shape[dim] - 1)
        total = total + d.pow(2).sum(1).flatten(1).mean(1)
    return total


def centering_t(v: torch.Tensor) -> torch.Tensor:
    """Mean squared magnitude of the cohort-average field; ``v`` is (n, 3, X, Y, Z)."""
    return v.mean(0).pow(2).sum(0).mean()


SIMILARITIES = {"mse": mse_t, "ncc": ncc_t, "lncc": lncc_t}


def similarity_t(kind: str, a: torch.Tensor, b: torch.Tensor, window_edge: int = 27) -> torch.Tensor:
    kind = kind.lower()
    if kind == "lncc":
        return lncc_t(a, b, window_edge)
    try:
        return SIMILARITIES[kind](a, b)
    except KeyError:
        raise ValueError(f"unknown similarity {kind!r}") from None


# --------------------------------------------------------------- numpy API

def _pair(a: ImageVolume, b: ImageVolume):
    if a.shape != b.shape:
        raise GridMismatch(f"images differ in shape: {a.shape} vs {b.shape}")
    ta = torch.from_numpy(np.asarray(a.data, dtype=np.float64))[None, None]
    tb = torch.from_numpy(np.asarray(b.data, dtype=np.float64))[None, None]
    return ta, tb


def loss_mse(a: ImageVolume, b: ImageVolume) -> float:
    return float(mse_t(*_pair(a, b))[0])


def loss_ncc(a: ImageVolume, b: ImageVolume) -> float:
    for v in (a, b):
        if np.ptp(v.data) == 0:
            raise ConstantImage("NCC is undefined for a constant image")
    return float(ncc_t(*_pair(a, b))[0])


def loss_lncc(a: ImageVolume, b: ImageVolume, window_edge: int = 27) -> float:
    if window_edge < 3 or window_edge % 2 == 0:
        raise ValueError("window_edge must be odd and >= 3")
    return float(lncc_t(*_pair(a, b), window_edge)[0])


def reg_smoothness(u) -> float:
    if min(u.shape) < 2:
        raise ValueError("smoothness needs at least 2 voxels per axis")
    return float(smoothness_t(u.to_torch())[0])


def reg_centering(fields: Sequence) -> float:
    if not fields:
        raise ValueError("need at least one field")
    ref = fields[0]
    for f in fields[1:]:
        if not f.same_grid(ref):
            raise GridMismatch("centering needs fields on one grid")
    return float(centering_t(torch.cat([f.to_torch() for f in fields])))
