"""Read and write the NIfTI-1 subset that carries label volumes.

Only single-file images (``.nii`` / ``.nii.gz``, magic ``n+1``) are spoken.
The 348-byte header is decoded through a numpy structured dtype that mirrors
the reference layout field for field; byte order is whatever makes
``sizeof_hdr`` read as 348. Voxel data is x-fastest on disk and is held in
memory as an ``(nx, ny, nz)`` array, so flattening with ``order="F"`` gives
the on-disk order back.

The voxel-to-world affine prefers sform, then qform, then a plain pixdim
diagonal. Float-typed or scaled label files are accepted only when every
value sits within 2**-6 of a non-negative integer.
"""

from __future__ import annotations

import gzip
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence, Union

import numpy as np

from .errors import KoosError

logger = logging.getLogger(__name__)

HEADER_SIZE = 348
SINGLE_FILE_MAGIC = b"n+1\x00"
PAIRED_MAGIC = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"
INTEGRALITY_TOLERANCE = 2.0**-6
MAX_LABEL = 65535

# first number in comments is the byte offset in the header
_HEADER_FIELDS = [
    ("sizeof_hdr", "i4"),  # 0
    ("data_type", "S10"),  # 4
    ("db_name", "S18"),  # 14
    ("extents", "i4"),  # 32
    ("session_error", "i2"),  # 36
    ("regular", "S1"),  # 38
    ("dim_info", "u1"),  # 39
    ("dim", "i2", (8,)),  # 40
    ("intent_p1", "f4"),  # 56
    ("intent_p2", "f4"),  # 60
    ("intent_p3", "f4"),  # 64
    ("intent_code", "i2"),  # 68
    ("datatype", "i2"),  # 70
    ("bitpix", "i2"),  # 72
    ("slice_start", "i2"),  # 74
    ("pixdim", "f4", (8,)),  # 76
    ("vox_offset", "f4"),  # 108
    ("scl_slope", "f4"),  # 112
    ("scl_inter", "f4"),  # 116
    ("slice_end", "i2"),  # 120
    ("slice_code", "u1"),  # 122
    ("xyzt_units", "u1"),  # 123
    ("cal_max", "f4"),  # 124
    ("cal_min", "f4"),  # 128
    ("slice_duration", "f4"),  # 132
    ("toffset", "f4"),  # 136
    ("glmax", "i4"),  # 140
    ("glmin", "i4"),  # 144
    ("descrip", "S80"),  # 148
    ("aux_file", "S24"),  # 228
    ("qform_code", "i2"),  # 252
    ("sform_code", "i2"),  # 254
    ("quatern_b", "f4"),  # 256
    ("quatern_c", "f4"),  # 260
    ("quatern_d", "f4"),  # 264
    ("qoffset_x", "f4"),  # 268
    ("qoffset_y", "f4"),  # 272
    ("qoffset_z", "f4"),  # 276
    ("srow_x", "f4", (4,)),  # 280
    ("srow_y", "f4", (4,)),  # 296
    ("srow_z", "f4", (4,)),  # 312
    ("intent_name", "S16"),  # 328
    ("magic", "S4"),  # 344
]

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    512: np.dtype(np.uint16),
}
DATATYPE_NAMES = {2: "uint8", 4: "int16", 8: "int32", 16: "float32", 512: "uint16"}

_XFORM_SCANNER = 1
_UNITS_MM = 2


class NiftiError(KoosError):
    code = "nifti_error"


class MalformedHeader(NiftiError):
    code = "malformed_header"


class UnsupportedDatatype(NiftiError):
    code = "unsupported_datatype"


class NonIntegralLabel(NiftiError):
    code = "non_integral_label"


class NegativeLabel(NiftiError):
    code = "negative_label"


class LabelOutOfRange(NiftiError):
    code = "label_out_of_range"


class TruncatedData(NiftiError):
    code = "truncated_data"


def _header_dtype(byteorder: str) -> np.dtype:
    return np.dtype(_HEADER_FIELDS).newbyteorder(byteorder)


@dataclass(frozen=True, eq=False)
class VolumeHeader:
    dims: tuple[int, int, int]
    pixdim: tuple[float, float, float]
    datatype_code: int
    scl_slope: float
    scl_inter: float
    vox_offset: int
    affine: np.ndarray
    magic: bytes
    byteorder: str = "<"

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.pixdim

    @property
    def datatype_name(self) -> str:
        return DATATYPE_NAMES[self.datatype_code]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer label grid indexed ``[i, j, k]`` with x (``i``) fastest on disk."""

    labels: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"labels must be a non-empty 3D array; got {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() > MAX_LABEL):
            raise ValueError("labels must fit in 16 unsigned bits")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals; got {self.spacing}")
        affine = (
            np.diag([*spacing, 1.0])
            if self.affine is None
            else np.asarray(self.affine, dtype=np.float64)
        )
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4; got {affine.shape}")
        object.__setattr__(self, "labels", labels.astype(np.uint16, copy=False))
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_flat(
        cls,
        flat: Sequence[int],
        dims: Sequence[int],
        spacing: Sequence[float],
        affine: np.ndarray | None = None,
    ) -> "LabelVolume":
        """Build from an x-fastest flat label list (the on-disk order)."""
        values = np.asarray(flat, dtype=np.int64)
        if values.size != int(np.prod(dims)):
            raise ValueError(f"{values.size} labels do not fill dims {tuple(dims)}")
        return cls(values.reshape(tuple(dims), order="F"), tuple(spacing), affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.labels.shape)  # type: ignore[return-value]

    @property
    def flat(self) -> np.ndarray:
        return self.labels.ravel(order="F")


def _quaternion_affine(hdr: np.void, pixdim: np.ndarray) -> np.ndarray:
    b, c, d = (float(hdr[name]) for name in ("quatern_b", "quatern_c", "quatern_d"))
    a = 1.0 - (b * b + c * c + d * d)
    if a < 1e-7:
        # b, c, d describe a 180 degree rotation; renormalize them
        norm = 1.0 / np.sqrt(b * b + c * c + d * d)
        b, c, d = b * norm, c * norm, d * norm
        a = 0.0
    else:
        a = np.sqrt(a)
    rotation = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if float(pixdim[0]) < 0 else 1.0
    scale = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]], dtype=np.float64)
    affine = np.eye(4)
    affine[:3, :3] = rotation * scale
    affine[:3, 3] = [float(hdr[name]) for name in ("qoffset_x", "qoffset_y", "qoffset_z")]
    return affine


def _header_affine(hdr: np.void, pixdim: np.ndarray) -> np.ndarray:
    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0] = hdr["srow_x"]
        affine[1] = hdr["srow_y"]
        affine[2] = hdr["srow_z"]
        return affine
    if int(hdr["qform_code"]) > 0:
        return _quaternion_affine(hdr, pixdim)
    return np.diag([float(pixdim[1]), float(pixdim[2]), float(pixdim[3]), 1.0])


def _byteorder(buf: bytes) -> str:
    if int.from_bytes(buf[:4], "little", signed=True) == HEADER_SIZE:
        return "<"
    if int.from_bytes(buf[:4], "big", signed=True) == HEADER_SIZE:
        return ">"
    raise MalformedHeader(
        f"sizeof_hdr reads {int.from_bytes(buf[:4], 'little', signed=True)} "
        f"in either byte order; expected {HEADER_SIZE}"
    )


def parse_header(buf: bytes) -> VolumeHeader:
    """Decode a 348-byte NIfTI-1 header in whichever byte order it was written."""
    buf = bytes(buf)
    if len(buf) < HEADER_SIZE:
        raise MalformedHeader(f"header needs {HEADER_SIZE} bytes; got {len(buf)}")
    order = _byteorder(buf)
    hdr = np.frombuffer(buf[:HEADER_SIZE], dtype=_header_dtype(order), count=1)[0]

    magic = buf[344:348]
    if magic == PAIRED_MAGIC:
        raise MalformedHeader("magic 'ni1' marks a detached .hdr/.img pair; unsupported")
    if magic != SINGLE_FILE_MAGIC:
        raise MalformedHeader(f"magic {magic!r} is not 'n+1\\0'")

    dim = [int(v) for v in hdr["dim"]]
    rank = dim[0]
    if rank not in (3, 4) or (rank == 4 and dim[4] != 1):
        raise MalformedHeader(
            f"dim {dim} is not a 3D volume "
            "(rank 3, or rank 4 with a singleton 4th extent)"
        )
    dims = (dim[1], dim[2], dim[3])
    if min(dims) < 1:
        raise MalformedHeader(f"dims {dims} must all be >= 1")

    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    spacing = tuple(float(v) for v in pixdim[1:4])
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise MalformedHeader(f"pixdim {spacing} must all be positive and finite")

    datatype = int(hdr["datatype"])
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(
            f"datatype {datatype} unsupported; expected one of {sorted(DATATYPES)}"
        )

    vox_offset = float(hdr["vox_offset"])
    if not np.isfinite(vox_offset) or vox_offset < HEADER_SIZE or vox_offset % 1:
        raise MalformedHeader(f"vox_offset {vox_offset} is not a byte offset >= 348")

    with np.errstate(all="ignore"):
        affine = _header_affine(hdr, pixdim)
        det = np.linalg.det(affine[:3, :3]) if np.isfinite(affine).all() else 0.0
    if not np.isfinite(affine).all() or not np.isfinite(det) or det == 0.0:
        raise MalformedHeader("voxel-to-world affine is not invertible")

    return VolumeHeader(
        dims=dims,
        pixdim=spacing,  # type: ignore[arg-type]
        datatype_code=datatype,
        scl_slope=float(hdr["scl_slope"]),
        scl_inter=float(hdr["scl_inter"]),
        vox_offset=int(vox_offset),
        affine=affine,
        magic=magic,
        byteorder=order,
    )


def _scaling(header: VolumeHeader) -> tuple[float, float] | None:
    slope, inter = header.scl_slope, header.scl_inter
    if not np.isfinite(slope) or slope in (0.0, 1.0):
        return None
    if not np.isfinite(inter):
        inter = 0.0
    return slope, inter


def _first(mask: np.ndarray) -> int:
    return int(np.flatnonzero(mask)[0])


def _to_labels(values: np.ndarray, header: VolumeHeader) -> np.ndarray:
    scaling = _scaling(header)
    if scaling is None and values.dtype.kind in "iu":
        ints = values.astype(np.int64)
        if (ints < 0).any():
            at = _first(ints < 0)
            raise NegativeLabel(f"voxel {at} holds negative label {ints[at]}")
        if (ints > MAX_LABEL).any():
            at = _first(ints > MAX_LABEL)
            raise LabelOutOfRange(f"voxel {at} holds label {ints[at]} > {MAX_LABEL}")
        return ints.astype(np.uint16)

    scaled = values.astype(np.float64)
    if scaling is not None:
        slope, inter = scaling
        with np.errstate(all="ignore"):
            scaled = scaled * slope + inter
    finite = np.isfinite(scaled)
    if not finite.all():
        raise NonIntegralLabel(f"voxel {_first(~finite)} holds a non-finite value")
    rounded = np.rint(scaled)
    off = np.abs(scaled - rounded) > INTEGRALITY_TOLERANCE
    if off.any():
        at = _first(off)
        raise NonIntegralLabel(
            f"voxel {at} value {scaled[at]!r} is more than 2**-6 from an integer"
        )
    if (rounded < 0).any():
        at = _first(rounded < 0)
        raise NegativeLabel(f"voxel {at} holds negative label {rounded[at]:g}")
    if (rounded > MAX_LABEL).any():
        at = _first(rounded > MAX_LABEL)
        raise LabelOutOfRange(f"voxel {at} holds label {rounded[at]:g} > {MAX_LABEL}")
    return rounded.astype(np.uint16)


def _read_all(stream: Union[bytes, bytearray, memoryview, BinaryIO]) -> bytes:
    raw = stream.read() if hasattr(stream, "read") else bytes(stream)  # type: ignore[union-attr]
    if raw[:2] != GZIP_MAGIC:
        return raw
    try:
        return gzip.decompress(raw)
    except EOFError as exc:
        raise TruncatedData("gzip stream ends before its end-of-stream marker") from exc
    except (gzip.BadGzipFile, zlib.error) as exc:
        raise MalformedHeader(f"corrupt gzip stream: {exc}") from exc


def inspect_volume(
    stream: Union[bytes, bytearray, memoryview, BinaryIO]
) -> tuple[VolumeHeader, LabelVolume]:
    """Decode a (possibly gzipped) single-file NIfTI-1 stream and keep its header."""
    raw = _read_all(stream)
    if len(raw) < HEADER_SIZE:
        raise TruncatedData(f"stream holds {len(raw)} bytes; the header alone is 348")
    header = parse_header(raw[:HEADER_SIZE])
    dtype = DATATYPES[header.datatype_code].newbyteorder(header.byteorder)
    count = int(np.prod(header.dims))
    payload = raw[header.vox_offset : header.vox_offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise TruncatedData(
            f"expected {count} voxels of {header.datatype_name} after byte "
            f"{header.vox_offset}; found {len(payload) // dtype.itemsize}"
        )
    values = np.frombuffer(payload, dtype=dtype, count=count)
    labels = _to_labels(values, header).reshape(header.dims, order="F")
    return header, LabelVolume(labels, header.spacing, header.affine)


def read_volume(stream: Union[bytes, bytearray, memoryview, BinaryIO]) -> LabelVolume:
    return inspect_volume(stream)[1]


def write_volume(vol: LabelVolume, compress: bool = False, byteorder: str = "<") -> bytes:
    """Encode ``vol`` as uint8 when every label fits, else uint16; sform carries the affine."""
    if byteorder not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>'; got {byteorder!r}")
    code = 2 if int(vol.labels.max()) <= 255 else 512
    data_dtype = DATATYPES[code].newbyteorder(byteorder)

    hdr = np.zeros((), dtype=_header_dtype(byteorder))
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [3, *vol.dims, 1, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = data_dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *vol.spacing, 1.0, 1.0, 1.0, 1.0]
    hdr["vox_offset"] = HEADER_SIZE + 4
    hdr["scl_slope"] = 1.0
    hdr["xyzt_units"] = _UNITS_MM
    hdr["sform_code"] = _XFORM_SCANNER
    hdr["srow_x"] = vol.affine[0]
    hdr["srow_y"] = vol.affine[1]
    hdr["srow_z"] = vol.affine[2]
    hdr["magic"] = SINGLE_FILE_MAGIC

    # 4 zero bytes: empty extension block between header and data
    payload = (
        hdr.tobytes()
        + b"\x00" * 4
        + vol.labels.astype(data_dtype).tobytes(order="F")
    )
    if compress:
        return gzip.compress(payload, mtime=0)
    return payload


def label_histogram(vol: LabelVolume) -> list[tuple[int, int]]:
    values, counts = np.unique(vol.labels, return_counts=True)
    return [(int(v), int(c)) for v, c in zip(values, counts)]


def is_nifti_path(path: Path) -> bool:
    return path.name.endswith((".nii", ".nii.gz"))


def case_id_for(path: Path) -> str:
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def load_volume(path: Union[str, Path]) -> LabelVolume:
    with open(path, "rb") as handle:
        return read_volume(handle)


def save_volume(
    path: Union[str, Path], vol: LabelVolume, compress: bool | None = None
) -> None:
    path = Path(path)
    if compress is None:
        compress = path.name.endswith(".gz")
    path.write_bytes(write_volume(vol, compress=compress))
    logger.debug("wrote %s (%s)", path, "x".join(str(n) for n in vol.dims))
