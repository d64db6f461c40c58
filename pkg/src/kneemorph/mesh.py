"""Triangle meshes from label maps: extraction, interface patches, thickness and PLY export."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from skimage import measure

from .errors import EmptyLabel, EmptyPatch, NoBoneAdjacency
from .volume import LabelMap

MIN_FACE_AREA = 1e-12
DEFAULT_SIGMA = 1.0


def _face_areas(vertices, faces) -> np.ndarray:
    a, b, c = (vertices[faces[:, k]] for k in range(3))
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Vertices in world mm, faces as vertex index triples, optional per-vertex scalars."""

    vertices: np.ndarray
    faces: np.ndarray
    scalars: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise ValueError("mesh vertices must be finite")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ValueError("face index out of range")
        if f.size and _face_areas(v, f).min() <= MIN_FACE_AREA:
            raise ValueError("mesh contains degenerate faces")
        scalars = {}
        for name, values in self.scalars.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape != (len(v),):
                raise ValueError(f"scalar {name!r} needs one value per vertex")
            scalars[name] = values
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "scalars", scalars)

    def face_areas(self) -> np.ndarray:
        return _face_areas(self.vertices, self.faces)

    def face_centroids(self) -> np.ndarray:
        return self.vertices[self.faces].mean(axis=1)

    @property
    def area(self) -> float:
        return float(self.face_areas().sum())

    def with_scalar(self, name: str, values) -> "TriMesh":
        return TriMesh(self.vertices, self.faces, {**self.scalars, name: values})

    def transformed(self, matrix) -> "TriMesh":
        """Apply a 4x4 world transform to the vertices."""
        m = np.asarray(matrix, dtype=np.float64)
        return TriMesh(self.vertices @ m[:3, :3].T + m[:3, 3], self.faces, self.scalars)

    def euler_characteristic(self) -> int:
        edges = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_vertices = len(np.unique(self.faces))
        return n_vertices - n_edges + len(self.faces)


@dataclass(frozen=True, eq=False)
class SurfacePatch:
    """A subset of a parent mesh's faces."""

    mesh: TriMesh
    faces: np.ndarray

    def __post_init__(self):
        idx = np.unique(np.asarray(self.faces, dtype=np.int64))
        if idx.size and (idx[0] < 0 or idx[-1] >= len(self.mesh.faces)):
            raise ValueError("patch face index out of range")
        object.__setattr__(self, "faces", idx)

    @property
    def area(self) -> float:
        return float(self.mesh.face_areas()[self.faces].sum())

    def __len__(self) -> int:
        return len(self.faces)

    def complement(self) -> "SurfacePatch":
        keep = np.ones(len(self.mesh.faces), dtype=bool)
        keep[self.faces] = False
        return SurfacePatch(self.mesh, np.flatnonzero(keep))

    def to_mesh(self) -> TriMesh:
        """Standalone mesh of the patch faces, with unused vertices dropped."""
        tri = self.mesh.faces[self.faces]
        used, inverse = np.unique(tri, return_inverse=True)
        scalars = {k: v[used] for k, v in self.mesh.scalars.items()}
        return TriMesh(self.mesh.vertices[used], inverse.reshape(-1, 3), scalars)


def surface_area(m) -> float:
    """Total triangle area in mm^2 of a :class:`TriMesh` or :class:`SurfacePatch`."""
    return m.area


def _names(label):
    return (label,) if isinstance(label, str) else tuple(label)


def marching_cubes(labels: LabelMap, label, iso: float = 0.5, sigma: float = DEFAULT_SIGMA) -> TriMesh:
    """Isosurface of a label indicator (optionally Gaussian-smoothed, sigma in voxels).

    The indicator is zero-padded so that surfaces touching the grid border are
    still closed.  Vertices are returned in world millimetres.
    """
    ind = labels.indicator(*_names(label))
    if not ind.any():
        raise EmptyLabel(f"label {label!r} is absent")
    pad = 2 + int(np.ceil(3 * sigma))
    vol = np.pad(ind.astype(np.float64), pad)
    if sigma > 0:
        vol = ndimage.gaussian_filter(vol, sigma, mode="constant")
    if not vol.max() > iso > vol.min():
        raise EmptyLabel(f"label {label!r} has no {iso} isosurface after smoothing")
    verts, faces, _, _ = measure.marching_cubes(vol, level=iso, method="lorensen", allow_degenerate=False)
    verts = verts.astype(np.float64) - pad
    world = verts @ labels.affine[:3, :3].T + labels.affine[:3, 3]
    faces = faces.astype(np.int64)
    faces = faces[_face_areas(world, faces) > MIN_FACE_AREA]
    used, inverse = np.unique(faces, return_inverse=True)
    return TriMesh(world[used], inverse.reshape(-1, 3))


def _world_to_index(points, affine):
    inv = np.linalg.inv(affine)
    return points @ inv[:3, :3].T + inv[:3, 3]


def extract_interface(labels: LabelMap, cartilage, bone, mesh: TriMesh) -> SurfacePatch:
    """Faces of a cartilage mesh that touch bone.

    A face belongs to the interface when the voxel nearest its centroid lies
    within one voxel (26-neighbourhood) of a bone voxel.  The remaining faces
    are the articular side, available via :meth:`SurfacePatch.complement`.
    ``bone`` is a label name (or names) in ``labels`` or a boolean mask on
    the same grid.
    """
    if not labels.indicator(*_names(cartilage)).any():
        raise EmptyLabel(f"cartilage label {cartilage!r} is absent")
    bone_mask = np.asarray(bone, dtype=bool) if isinstance(bone, np.ndarray) else labels.indicator(*_names(bone))
    if bone_mask.shape != labels.shape:
        raise ValueError("bone mask and labels differ in shape")
    near_bone = ndimage.binary_dilation(bone_mask, ndimage.generate_binary_structure(3, 3))
    if len(mesh.faces) == 0:
        raise NoBoneAdjacency("mesh has no faces")
    idx = np.rint(_world_to_index(mesh.face_centroids(), labels.affine)).astype(np.int64)
    inside = np.all((idx >= 0) & (idx < np.asarray(labels.shape)), axis=1)
    hit = np.zeros(len(idx), dtype=bool)
    hit[inside] = near_bone[tuple(idx[inside].T)]
    if not hit.any():
        raise NoBoneAdjacency("no cartilage surface lies next to bone")
    return SurfacePatch(mesh, np.flatnonzero(hit))


# ------------------------------------------------------------- distances

def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Euclidean distance from points ``p`` to triangles ``(a, b, c)``, all (N, 3), rowwise."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    # interior projection by default; regions below override it
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = vb / denom
        w = vc / denom
    q = a + ab * v[:, None] + ac * w[:, None]

    def put(mask, value):
        q[mask] = value[mask]

    with np.errstate(divide="ignore", invalid="ignore"):
        # edge bc
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        put(m, b + (c - b) * t[:, None])
        # edge ac
        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        put(m, a + ac * t[:, None])
        # edge ab
        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        put(m, a + ab * t[:, None])
    put((d6 >= 0) & (d5 <= d6), c)
    put((d3 >= 0) & (d4 <= d3), b)
    put((d1 <= 0) & (d2 <= 0), a)
    return np.linalg.norm(p - q, axis=1)


class TriangleIndex:
    """Exact nearest-triangle distance queries over a fixed triangle set."""

    def __init__(self, mesh: TriMesh, faces=None):
        tri = mesh.faces if faces is None else mesh.faces[faces]
        if len(tri) == 0:
            raise EmptyPatch("no triangles to index")
        self.a, self.b, self.c = (mesh.vertices[tri[:, k]] for k in range(3))
        self.centroids = (self.a + self.b + self.c) / 3.0
        self.radius = float(max(np.linalg.norm(x - self.centroids, axis=1).max() for x in (self.a, self.b, self.c)))
        self.tree = cKDTree(self.centroids)

    def distance(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d0, _ = self.tree.query(points)
        out = np.empty(len(points))
        # any triangle containing a closer point has its centroid within d0 + 2 * radius
        for i, cand in enumerate(self.tree.query_ball_point(points, d0 + 2.0 * self.radius + 1e-9)):
            cand = np.asarray(cand, dtype=np.int64)
            p = np.broadcast_to(points[i], (len(cand), 3))
            out[i] = point_triangle_distance(p, self.a[cand], self.b[cand], self.c[cand]).min()
        return out


def thickness_map(interface: SurfacePatch, outer: SurfacePatch) -> TriMesh:
    """Interface mesh with per-vertex ``thickness``: distance (mm) to the nearest outer triangle."""
    if len(interface) == 0 or len(outer) == 0:
        raise EmptyPatch("thickness needs nonempty interface and outer patches")
    inner = interface.to_mesh()
    index = TriangleIndex(outer.mesh, outer.faces)
    return inner.with_scalar("thickness", index.distance(inner.vertices))


# ------------------------------------------------------------------- PLY

def write_ply(mesh: TriMesh, path) -> None:
    """ASCII PLY with vertex positions, any per-vertex scalars, and triangle faces."""
    names = list(mesh.scalars)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
             "property double x", "property double y", "property double z"]
    lines += [f"property double {n}" for n in names]
    lines += [f"element face {len(mesh.faces)}", "property list uchar int vertex_indices", "end_header"]
    cols = np.column_stack([mesh.vertices] + [mesh.scalars[n] for n in names])
    body = [" ".join(repr(float(x)) for x in row) for row in cols]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.faces]
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write("\n".join(lines + body) + "\n")
    os.replace(tmp, path)


def read_ply(path) -> TriMesh:
    """Read the ASCII PLY layout written by :func:`write_ply`."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    n_vertices = n_faces = 0
    props = []
    i = 0
    while tokens[i] != "end_header":
        parts = tokens[i].split()
        if parts[:2] == ["element", "vertex"]:
            n_vertices = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            n_faces = int(parts[2])
        elif parts[0] == "property" and parts[1] != "list":
            props.append(parts[2])
        i += 1
    rows = np.array([t.split() for t in tokens[i + 1 : i + 1 + n_vertices]], dtype=np.float64).reshape(-1, len(props))
    faces = np.array([t.split()[1:4] for t in tokens[i + 1 + n_vertices : i + 1 + n_vertices + n_faces]],
                     dtype=np.int64).reshape(-1, 3)
    scalars = {p: rows[:, k] for k, p in enumerate(props) if p not in ("x", "y", "z")}
    xyz = [props.index(a) for a in ("x", "y", "z")]
    return TriMesh(rows[:, xyz], faces, scalars)
