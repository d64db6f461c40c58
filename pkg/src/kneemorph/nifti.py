"""NIfTI-1 single-file reader and writer (``.nii`` and ``.nii.gz``).

Only the subset needed by the pipeline is supported: single-file ``n+1``
images, seven scalar datatypes, both byte orders on read, native (little
endian) order on write.  Detached ``ni1`` header/image pairs are rejected.
"""
from __future__ import annotations

import gzip
import io
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .errors import (
    BadMagic,
    InvalidQuaternion,
    LabelRangeError,
    RejectedNonFinite,
    Truncated,
    UnsupportedDatatype,
    WrongSize,
)
from .volume import DEFAULT_SCHEMA, ImageVolume, LabelMap, LabelSchema

HEADER_SIZE = 348
VOX_OFFSET = 352  # header + 4-byte empty extension flag

# field order and formats follow the NIfTI-1 C struct (348 bytes, no padding)
_HEADER_LAYOUT = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype([(f[0], byteorder + f[1], *f[2:]) if f[1][0] not in "SU" else f for f in _HEADER_LAYOUT])


assert _header_dtype("<").itemsize == HEADER_SIZE

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    256: np.dtype(np.int8),
    512: np.dtype(np.uint16),
}
DATATYPE_CODES = {v: k for k, v in DATATYPES.items()}

XFORM_SCANNER_ANAT = 1
UNITS_MM_SEC = 2 | 8


@dataclass
class NiftiHeader:
    """Decoded NIfTI-1 header fields used by the pipeline."""

    dim: tuple = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype_code: int = 16
    pixdim: tuple = (1.0,) * 8
    sform_code: int = 0
    qform_code: int = 0
    srow_x: tuple = (1.0, 0.0, 0.0, 0.0)
    srow_y: tuple = (0.0, 1.0, 0.0, 0.0)
    srow_z: tuple = (0.0, 0.0, 1.0, 0.0)
    quatern_b: float = 0.0
    quatern_c: float = 0.0
    quatern_d: float = 0.0
    qoffset_x: float = 0.0
    qoffset_y: float = 0.0
    qoffset_z: float = 0.0
    scl_slope: float = 0.0
    scl_inter: float = 0.0
    magic: bytes = b"n+1\x00"
    sizeof_hdr: int = HEADER_SIZE
    vox_offset: float = float(VOX_OFFSET)
    bitpix: int = 32
    intent_code: int = 0
    xyzt_units: int = UNITS_MM_SEC
    descrip: bytes = b""
    byteorder: str = field(default="<", compare=False)

    @property
    def shape(self) -> tuple:
        return tuple(int(n) for n in self.dim[1 : self.dim[0] + 1])

    @property
    def dtype(self) -> np.dtype:
        return DATATYPES[self.datatype_code].newbyteorder(self.byteorder)


def decode_header(raw: bytes) -> NiftiHeader:
    """Decode a 348-byte NIfTI-1 header, detecting byte order from ``sizeof_hdr``."""
    if len(raw) != HEADER_SIZE:
        raise WrongSize(f"NIfTI-1 header must be {HEADER_SIZE} bytes, got {len(raw)}")
    byteorder = "<"
    if int(np.frombuffer(raw[:4], "<i4")[0]) != HEADER_SIZE:
        if int(np.frombuffer(raw[:4], ">i4")[0]) != HEADER_SIZE:
            raise WrongSize("sizeof_hdr is not 348 in either byte order")
        byteorder = ">"
    rec = np.frombuffer(raw, _header_dtype(byteorder))[0]
    magic = bytes(rec["magic"]).ljust(4, b"\x00")
    if magic == b"ni1\x00":
        raise BadMagic("detached header/image pairs (ni1) are not supported")
    if magic != b"n+1\x00":
        raise BadMagic(f"bad NIfTI-1 magic {magic!r}")
    code = int(rec["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {code}")
    dim = tuple(int(d) for d in rec["dim"])
    if not 1 <= dim[0] <= 7 or any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise WrongSize(f"invalid dim field {dim}")
    return NiftiHeader(
        dim=dim,
        datatype_code=code,
        pixdim=tuple(float(p) for p in rec["pixdim"]),
        sform_code=int(rec["sform_code"]),
        qform_code=int(rec["qform_code"]),
        srow_x=tuple(float(x) for x in rec["srow_x"]),
        srow_y=tuple(float(x) for x in rec["srow_y"]),
        srow_z=tuple(float(x) for x in rec["srow_z"]),
        quatern_b=float(rec["quatern_b"]),
        quatern_c=float(rec["quatern_c"]),
        quatern_d=float(rec["quatern_d"]),
        qoffset_x=float(rec["qoffset_x"]),
        qoffset_y=float(rec["qoffset_y"]),
        qoffset_z=float(rec["qoffset_z"]),
        scl_slope=float(rec["scl_slope"]),
        scl_inter=float(rec["scl_inter"]),
        magic=magic,
        sizeof_hdr=HEADER_SIZE,
        vox_offset=float(rec["vox_offset"]),
        bitpix=int(rec["bitpix"]),
        intent_code=int(rec["intent_code"]),
        xyzt_units=int(rec["xyzt_units"]),
        descrip=bytes(rec["descrip"]),
        byteorder=byteorder,
    )


def encode_header(h: NiftiHeader, byteorder: str = "<") -> bytes:
    rec = np.zeros((), _header_dtype(byteorder))
    for f in fields(NiftiHeader):
        if f.name in ("byteorder", "datatype_code"):
            continue
        rec[f.name] = getattr(h, f.name)
    rec["datatype"] = h.datatype_code
    rec["regular"] = b"r"
    return rec.tobytes()


def quaternion_matrix(b: float, c: float, d: float) -> np.ndarray:
    """Rotation matrix of the unit quaternion (a, b, c, d) with a >= 0 implied."""
    s = b * b + c * c + d * d
    if s > 1.0 + 1e-5:
        raise InvalidQuaternion(f"b^2 + c^2 + d^2 = {s:.6g} exceeds 1")
    a = np.sqrt(max(0.0, 1.0 - s))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )


def affine_from_header(h: NiftiHeader) -> np.ndarray:
    """Voxel-to-world affine: sform if set, else qform, else scaled identity."""
    affine = np.eye(4)
    if h.sform_code > 0:
        affine[0] = h.srow_x
        affine[1] = h.srow_y
        affine[2] = h.srow_z
    elif h.qform_code > 0:
        rot = quaternion_matrix(h.quatern_b, h.quatern_c, h.quatern_d)
        qfac = -1.0 if h.pixdim[0] < 0 else 1.0
        zooms = np.array([h.pixdim[1], h.pixdim[2], h.pixdim[3] * qfac])
        affine[:3, :3] = rot * zooms
        affine[:3, 3] = (h.qoffset_x, h.qoffset_y, h.qoffset_z)
    else:
        affine[:3, :3] = np.diag(h.pixdim[1:4])
    return affine


def _is_gzip(path, head: bytes) -> bool:
    return str(path).endswith(".gz") or head[:2] == b"\x1f\x8b"


def _read_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if _is_gzip(path, raw):
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise Truncated(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def read_array(path):
    """Read any supported NIfTI-1 file as ``(array, affine, header)``.

    The array is in index order ``[i, j, k, ...]`` with scaling applied when
    ``scl_slope`` is nonzero and not the identity.
    """
    raw = _read_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise Truncated(f"{path}: only {len(raw)} bytes, header needs {HEADER_SIZE}")
    h = decode_header(raw[:HEADER_SIZE])
    dtype = h.dtype
    offset = max(int(h.vox_offset), HEADER_SIZE)
    count = int(np.prod(h.shape))
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise Truncated(f"{path}: expected {need} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype, count=count, offset=offset).reshape(h.shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    if h.scl_slope != 0 and not (h.scl_slope == 1 and h.scl_inter == 0):
        data = data.astype(np.float64) * h.scl_slope + h.scl_inter
    return data, affine_from_header(h), h


def read_volume(path) -> tuple[ImageVolume, NiftiHeader]:
    """Read a 3-D scalar image as float32."""
    data, affine, h = read_array(path)
    data = _squeeze3(data, path)
    if data.dtype == np.float64:
        finite = data[np.isfinite(data)]
        if finite.size and np.abs(finite).max() > np.finfo(np.float32).max:
            raise UnsupportedDatatype(f"{path}: values exceed float32 range")
    return ImageVolume(data.astype(np.float32), affine), h


def read_labels(path, schema: LabelSchema = DEFAULT_SCHEMA) -> tuple[LabelMap, NiftiHeader]:
    """Read an integer label image, normalising storage to uint8."""
    data, affine, h = read_array(path)
    data = _squeeze3(data, path)
    if data.dtype.kind == "f":
        if not np.all(np.isfinite(data)) or not np.array_equal(data, np.round(data)):
            raise LabelRangeError(f"{path}: non-integral label values")
    if data.size and (data.min() < 0 or data.max() > 255):
        raise LabelRangeError(f"{path}: label values outside 0..255")
    return LabelMap(data.astype(np.uint8), affine, schema), h


def _squeeze3(data, path):
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise WrongSize(f"{path}: expected a 3-D volume, got shape {data.shape}")
    return data


def header_for(data: np.ndarray, affine: np.ndarray, descrip: str = "", intent_code: int = 0) -> NiftiHeader:
    dtype = np.dtype(data.dtype).newbyteorder("=")
    code = DATATYPE_CODES[dtype]
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    pixdim = [1.0] + [float(s) for s in spacing] + [1.0] * 4
    return NiftiHeader(
        dim=tuple(dim),
        datatype_code=code,
        pixdim=tuple(pixdim),
        sform_code=XFORM_SCANNER_ANAT,
        qform_code=0,
        srow_x=tuple(affine[0]),
        srow_y=tuple(affine[1]),
        srow_z=tuple(affine[2]),
        scl_slope=1.0,
        scl_inter=0.0,
        bitpix=dtype.itemsize * 8,
        intent_code=intent_code,
        descrip=descrip.encode("ascii")[:79],
    )


def write_array(data: np.ndarray, affine: np.ndarray, path, descrip: str = "", intent_code: int = 0) -> None:
    """Write ``data`` with an sform affine; gzip when ``path`` ends in ``.gz``.

    Gzip output carries no timestamp or filename, so identical inputs give
    identical bytes.
    """
    data = np.asarray(data)
    if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise RejectedNonFinite(f"{path}: refusing to write NaN/inf voxels")
    if data.dtype.newbyteorder("=") not in DATATYPE_CODES:
        raise UnsupportedDatatype(f"cannot store dtype {data.dtype}")
    data = data.astype(data.dtype.newbyteorder("<"), copy=False)
    h = header_for(data, np.asarray(affine, dtype=np.float64), descrip, intent_code)
    buf = io.BytesIO()
    buf.write(encode_header(h))
    buf.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
    buf.write(data.tobytes(order="F"))
    payload = buf.getvalue()
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        if str(path).endswith(".gz"):
            with gzip.GzipFile(filename="", mode="wb", fileobj=fh, mtime=0, compresslevel=6) as gz:
                gz.write(payload)
        else:
            fh.write(payload)
    os.replace(tmp, path)


def write_volume(v, path, descrip: str = "") -> None:
    """Write an :class:`ImageVolume` (float32) or :class:`LabelMap` (uint8)."""
    dtype = np.uint8 if isinstance(v, LabelMap) else np.float32
    write_array(np.asarray(v.data, dtype=dtype), v.affine, path, descrip)
