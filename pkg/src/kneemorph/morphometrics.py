"""Regional cartilage morphometrics: laterality, pose, MTC/LTC split and full-thickness loss."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import EmptyRegion, NoTibialCartilage, NotRasOriented
from .mesh import DEFAULT_SIGMA, TriMesh, extract_interface, marching_cubes, thickness_map
from .rigid import RigidConfig, rigid_register
from .volume import ImageVolume, LabelMap, check_same_grid, flip_lr, is_ras, mask_image, resample_to_grid

_CUBE = ndimage.generate_binary_structure(3, 3)
TIBIAL = ("TC", "MTC", "LTC")


class Region(str, Enum):
    FC = "FC"
    MTC = "MTC"
    LTC = "LTC"

    @property
    def bone(self) -> str:
        return "femur" if self is Region.FC else "tibia"

    @property
    def parent(self) -> tuple:
        """Observed labels that count as cartilage covering this region."""
        return ("FC",) if self is Region.FC else TIBIAL


@dataclass(frozen=True)
class RegionMetrics:
    region: Region
    volume_mm3: float
    mean_thickness_mm: float
    interface_area_mm2: float
    fcl_fraction: float

    FIELDS = ("region", "volume_mm3", "mean_thickness_mm", "interface_area_mm2", "fcl_fraction")

    def __post_init__(self):
        object.__setattr__(self, "region", Region(self.region))
        values = [self.volume_mm3, self.mean_thickness_mm, self.interface_area_mm2, self.fcl_fraction]
        if not all(np.isfinite(v) and v >= 0 for v in values):
            raise ValueError(f"region metrics must be finite and >= 0: {values}")
        if self.fcl_fraction > 1:
            raise ValueError(f"fcl_fraction {self.fcl_fraction} > 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region"] = self.region.value
        return d


def write_metrics_csv(rows, path) -> None:
    """Write ``(subject_id, RegionMetrics)`` pairs as CSV rows."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("subject_id",) + RegionMetrics.FIELDS)
        for sid, m in rows:
            d = m.to_dict()
            w.writerow([sid] + [d[k] if k == "region" else repr(float(d[k])) for k in RegionMetrics.FIELDS])


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        out = []
        for row in csv.DictReader(fh):
            sid = row.pop("subject_id")
            out.append((sid, RegionMetrics(row["region"], *(float(row[k]) for k in RegionMetrics.FIELDS[1:]))))
    return out


def write_metrics_json(subject_id: str, metrics, path, **extra) -> None:
    doc = {"subject_id": subject_id, "regions": [m.to_dict() for m in metrics], **extra}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)


def read_metrics_json(path):
    with open(path) as fh:
        doc = json.load(fh)
    return doc["subject_id"], [RegionMetrics(**r) for r in doc["regions"]]


# ------------------------------------------------------------------ laterality

def standardize_laterality(image: ImageVolume, labels: LabelMap, side: str):
    """Mirror left knees so that all downstream rules see right-knee geometry.

    Returns ``(image, labels, flipped)``; keep ``flipped`` to undo the mirror
    on exported meshes and maps.
    """
    side = side.lower()
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    for v in (image, labels):
        if not is_ras(v.affine):
            raise NotRasOriented("laterality standardization expects RAS+ volumes")
    if side == "right":
        return image, labels, False
    return flip_lr(image), flip_lr(labels), True


def flip_matrix(shape, affine) -> np.ndarray:
    """World-space 4x4 equivalent of :func:`flip_lr` on a grid (its own inverse)."""
    f = np.eye(4)
    f[0, 0] = -1.0
    f[0, 3] = shape[0] - 1
    return affine @ f @ np.linalg.inv(affine)


def unflip_mesh(mesh: TriMesh, shape, affine) -> TriMesh:
    """Map a mesh built on a mirrored grid back to the original side (keeps outward orientation)."""
    m = mesh.transformed(flip_matrix(shape, affine))
    return TriMesh(m.vertices, m.faces[:, ::-1].copy(), m.scalars)


# ------------------------------------------------------------------------ pose

def pose_normalize(image: ImageVolume, labels: LabelMap, template, cfg: RigidConfig = RigidConfig(),
                   cartilage=("FC", "TC", "MTC", "LTC")):
    """Rigidly align a subject to the template pose and resample it onto the template grid.

    The cartilage-masked image is registered to ``template.image``; the image
    is resampled trilinearly and the labels by nearest neighbour, with zeros
    outside the subject's field of view.  Returns ``(image, labels, T)`` where
    ``T`` maps template world points to subject world points.
    """
    check_same_grid(image, labels, "image and labels")
    present = [n for n in cartilage if n in labels.schema]
    moving = mask_image(image, labels, present)
    t = rigid_register(moving, template.image, cfg)
    shape, affine = template.image.shape, template.image.affine
    src = t @ affine
    img = resample_to_grid(image, shape, src, order=1, cval=0.0)
    lab = resample_to_grid(labels, shape, src, order=0, cval=0)
    return ImageVolume(img.data, affine), LabelMap(lab.data.astype(labels.data.dtype), affine, labels.schema), t


# ---------------------------------------------------------------- parcellation

def _lr_coordinate(labels: LabelMap) -> np.ndarray:
    """World x of each index along axis 0 (the LR axis of a RAS+ grid)."""
    return labels.affine[0, 0] * np.arange(labels.shape[0]) + labels.affine[0, 3]


def _split_single(mask: np.ndarray):
    """Split one component at the between-lobe density minimum along LR, if there is one."""
    profile = ndimage.gaussian_filter1d(mask.sum(axis=(1, 2)).astype(np.float64), 1.0)
    nz = np.nonzero(profile > 0.05 * profile.max())[0]
    lo, hi = nz[0], nz[-1]
    best = None
    for m in range(lo + 1, hi):
        left, right = profile[lo:m].max(), profile[m + 1:hi + 1].max()
        if profile[m] < 0.5 * min(left, right) and (best is None or profile[m] < profile[best]):
            best = m
    return best


def parcellate_tc(labels: LabelMap, medial_sign: int = -1) -> LabelMap:
    """Split tibial cartilage into MTC and LTC.

    Components are 26-connected.  The two largest are assigned by the world-x
    centroid: for a right knee in RAS+ the medial side has the smaller x
    (``medial_sign=-1``).  Remaining components go to the side of the midpoint
    between those two centroids.  A single component is cut at the LR density
    minimum between two lobes; without such a minimum the whole component is
    assigned by its centroid relative to the tibia (or the grid centre).
    """
    if medial_sign not in (-1, 1):
        raise ValueError("medial_sign must be -1 or +1")
    s = labels.schema
    tc = labels.indicator(*[n for n in TIBIAL if n in s])
    if not tc.any():
        raise NoTibialCartilage("no tibial cartilage voxels to parcellate")
    x = _lr_coordinate(labels)
    comp, n = ndimage.label(tc, _CUBE)
    medial = np.zeros(labels.shape, dtype=bool)
    if n >= 2:
        sizes = np.bincount(comp.ravel())[1:]
        order = np.argsort(-sizes, kind="stable")[:2] + 1
        cx = np.array(ndimage.mean(x[:, None, None] * np.ones(labels.shape), comp, index=np.arange(1, n + 1)))
        mid = 0.5 * (cx[order[0] - 1] + cx[order[1] - 1])
        for k in range(1, n + 1):
            if medial_sign * (cx[k - 1] - mid) > 0:
                medial |= comp == k
    else:
        cut = _split_single(tc)
        if cut is not None:
            side = (x > x[cut])[:, None, None] if medial_sign > 0 else (x <= x[cut])[:, None, None]
            medial = tc & side
        else:
            ref = labels.indicator("tibia") if "tibia" in s else np.zeros_like(tc)
            if ref.any():
                centre = x[np.nonzero(ref)[0]].mean()
            else:
                centre = x.mean()
            cxs = x[np.nonzero(tc)[0]].mean()
            if medial_sign * (cxs - centre) > 0:
                medial = tc.copy()
    data = labels.data.copy()
    data[tc & medial] = s.value("MTC")
    data[tc & ~medial] = s.value("LTC")
    return labels.with_data(data)


# ------------------------------------------------------------------------- FCL

def _region_labels(labels: LabelMap, region: Region) -> LabelMap:
    if region is not Region.FC and not labels.indicator(region.value).any() and labels.indicator("TC").any():
        return parcellate_tc(labels)
    return labels


def _bone_mask(bone, region: Region, shape) -> np.ndarray:
    m = bone.indicator(region.bone) if isinstance(bone, LabelMap) else np.asarray(bone, dtype=bool)
    if m.shape != tuple(shape):
        raise ValueError("bone mask is on a different grid")
    return m


def fcl_fraction(pseudo_interface, observed: LabelMap, region) -> float:
    """Uncovered share of a pseudo-healthy interface patch.

    A face is covered when the observed parent cartilage has a voxel within
    the 26-neighbourhood of the voxel holding the face centroid.
    """
    region = Region(region)
    covered = ndimage.binary_dilation(observed.indicator(*region.parent), _CUBE)
    mesh = pseudo_interface.mesh
    faces = pseudo_interface.faces
    inv = np.linalg.inv(observed.affine)
    c = mesh.face_centroids()[faces] @ inv[:3, :3].T + inv[:3, 3]
    idx = np.clip(np.rint(c).astype(np.int64), 0, np.asarray(observed.shape) - 1)
    hit = covered[idx[:, 0], idx[:, 1], idx[:, 2]]
    areas = mesh.face_areas()[faces]
    total = areas.sum()
    return float(min(1.0, max(0.0, areas[~hit].sum() / total)))


def pseudo_interface(warped_template: LabelMap, bone, region, sigma: float = DEFAULT_SIGMA):
    """Bone-facing surface of the warped template region."""
    region = Region(region)
    labels = _region_labels(warped_template, region)
    if not labels.indicator(region.value).any():
        raise EmptyRegion(f"warped template has no {region.value} voxels")
    mesh = marching_cubes(labels, region.value, sigma=sigma)
    return extract_interface(labels, region.value, _bone_mask(bone, region, labels.shape), mesh)


def estimate_fcl(warped_template: LabelMap, observed: LabelMap, bone, region,
                 sigma: float = DEFAULT_SIGMA) -> float:
    """Full-thickness cartilage loss fraction of ``region``.

    ``bone`` is a label map holding the femur/tibia labels (usually the
    observed segmentation) or a boolean bone mask.
    """
    check_same_grid(warped_template, observed, "warped template and observed labels")
    patch = pseudo_interface(warped_template, bone, region, sigma)
    return fcl_fraction(patch, observed, region)


# ---------------------------------------------------------------------- report

def region_surfaces(labels: LabelMap, region, sigma: float = DEFAULT_SIGMA):
    """``(interface patch, thickness mesh)`` of one region, or ``(None, None)`` when absent."""
    region = Region(region)
    if not labels.indicator(region.value).any():
        return None, None
    mesh = marching_cubes(labels, region.value, sigma=sigma)
    interface = extract_interface(labels, region.value, region.bone, mesh)
    return interface, thickness_map(interface, interface.complement())


def regional_report(labels: LabelMap, thickness: dict, interfaces: dict, fcl: dict) -> list:
    """Assemble :class:`RegionMetrics` per region.

    ``thickness`` maps a region to its thickness mesh (``"thickness"`` vertex
    scalar), ``interfaces`` to its interface patch and ``fcl`` to the value
    from :func:`estimate_fcl`.  Missing surfaces report zero thickness and area.
    """
    out = []
    for region in Region:
        count = int(labels.indicator(region.value).sum())
        tm = thickness.get(region)
        patch = interfaces.get(region)
        mean_t = float(np.mean(tm.scalars["thickness"])) if tm is not None else 0.0
        area = float(patch.area) if patch is not None else 0.0
        out.append(RegionMetrics(region, count * labels.voxel_volume, mean_t, area, float(fcl.get(region, 0.0))))
    return out


def measure(labels: LabelMap, warped_template: LabelMap | None = None, sigma: float = DEFAULT_SIGMA):
    """Parcellate and measure all regions; returns ``(metrics, thickness meshes)``.

    FCL is estimated against ``warped_template`` when given (regions missing
    from it report 0), otherwise reported as 0.
    """
    if not any(labels.indicator(n).any() for n in TIBIAL if n in labels.schema):
        parcellated = labels
    else:
        parcellated = parcellate_tc(labels)
    thickness, interfaces, fcl = {}, {}, {}
    for region in Region:
        interfaces[region], thickness[region] = region_surfaces(parcellated, region, sigma)
        if warped_template is not None:
            try:
                fcl[region] = estimate_fcl(warped_template, parcellated, parcellated, region, sigma)
            except EmptyRegion:
                fcl[region] = 0.0
    thickness = {k: v for k, v in thickness.items() if v is not None}
    interfaces = {k: v for k, v in interfaces.items() if v is not None}
    return regional_report(parcellated, thickness, interfaces, fcl), thickness
