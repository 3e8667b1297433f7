"""Single-file NIfTI-1 reader and writer.

Only 3D volumes on axis-aligned grids are supported. Headers are kept as the
raw 348-byte record so that untouched fields survive a read/write cycle.
"""

from __future__ import annotations

import gzip
import logging
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CapacityError,
    DimensionError,
    GeometryError,
    NiftiError,
    TruncatedError,
    UnsupportedDatatypeError,
)
from .volume import Kind, Volume3D

log = logging.getLogger(__name__)

HEADER_SIZE = 348
DATA_OFFSET = 352

_HEADER_FIELDS = [
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


def header_dtype(endian: str = "<") -> np.dtype:
    return np.dtype([(f[0], endian + f[1], *f[2:]) for f in _HEADER_FIELDS])


assert header_dtype().itemsize == HEADER_SIZE

# datatype code -> (numpy type, bitpix)
DATATYPES = {
    2: (np.uint8, 8),
    4: (np.int16, 16),
    8: (np.int32, 32),
    16: (np.float32, 32),
    64: (np.float64, 64),
}
_CODE_FOR_DTYPE = {np.dtype(t): code for code, (t, _) in DATATYPES.items()}


class NiftiHeader:
    """A NIfTI-1 header record plus any extension bytes that followed it.

    Field access goes through ``header["name"]``; ``to_bytes`` returns the record
    exactly as stored.
    """

    def __init__(self, record: np.ndarray | None = None, endian: str = "<", extensions: bytes = b""):
        if record is None:
            record = np.zeros((), dtype=header_dtype(endian))
            record["sizeof_hdr"] = HEADER_SIZE
            record["magic"] = b"n+1"
            record["vox_offset"] = DATA_OFFSET
            record["scl_slope"] = 1.0
            record["pixdim"] = [1, 1, 1, 1, 1, 1, 1, 1]
            record["xyzt_units"] = 2  # mm
            record["regular"] = b"r"
        self.record = record
        self.endian = endian
        self.extensions = extensions

    @classmethod
    def from_bytes(cls, raw: bytes) -> "NiftiHeader":
        if len(raw) < HEADER_SIZE:
            raise TruncatedError(f"header needs {HEADER_SIZE} bytes, got {len(raw)}")
        raw = raw[:HEADER_SIZE]
        little = int.from_bytes(raw[:4], "little")
        big = int.from_bytes(raw[:4], "big")
        if little == HEADER_SIZE:
            endian = "<"
        elif big == HEADER_SIZE:
            endian = ">"
        else:
            raise NiftiError(f"sizeof_hdr is {little} (or {big} byte-swapped), expected {HEADER_SIZE}")
        record = np.frombuffer(raw, dtype=header_dtype(endian), count=1).reshape(()).copy()
        return cls(record, endian)

    def to_bytes(self) -> bytes:
        return self.record.tobytes()

    def __getitem__(self, name):
        value = self.record[name]
        return value.copy() if isinstance(value, np.ndarray) else value

    def __setitem__(self, name, value):
        self.record[name] = value

    def copy(self) -> "NiftiHeader":
        return NiftiHeader(self.record.copy(), self.endian, self.extensions)

    @property
    def magic(self) -> bytes:
        return self.record["magic"].item()

    @property
    def shape(self) -> tuple:
        dim = self.record["dim"]
        return tuple(int(d) for d in dim[1 : 1 + int(dim[0])])

    @property
    def spacing(self) -> tuple:
        return tuple(float(p) for p in self.record["pixdim"][1:4])

    def affine(self) -> np.ndarray:
        """4x4 voxel-to-world matrix. sform wins over qform; pixdim is the fallback."""
        if int(self.record["sform_code"]) > 0:
            aff = np.eye(4)
            aff[0] = self.record["srow_x"]
            aff[1] = self.record["srow_y"]
            aff[2] = self.record["srow_z"]
            return aff
        if int(self.record["qform_code"]) > 0:
            return self._qform_affine()
        aff = np.diag([*self.spacing, 1.0])
        return aff

    def _qform_affine(self) -> np.ndarray:
        b, c, d = (float(self.record[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
        a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
        rot = np.array(
            [
                [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
                [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
                [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ]
        )
        qfac = -1.0 if self.record["pixdim"][0] < 0 else 1.0
        zooms = np.array([*self.spacing[:2], self.spacing[2] * qfac])
        aff = np.eye(4)
        aff[:3, :3] = rot * zooms
        aff[:3, 3] = [self.record[k] for k in ("qoffset_x", "qoffset_y", "qoffset_z")]
        return aff

    def set_geometry(self, spacing, origin, direction) -> None:
        """Write an axis-aligned geometry into pixdim, qform and sform."""
        sign = np.asarray(direction, dtype=float)
        self.record["pixdim"][1:4] = spacing
        srows = np.zeros((3, 4))
        srows[:, :3] = np.diag(sign * np.asarray(spacing))
        srows[:, 3] = origin
        self.record["srow_x"], self.record["srow_y"], self.record["srow_z"] = srows
        self.record["sform_code"] = max(1, int(self.record["sform_code"]))

        # qform: a proper rotation times a z-flip (qfac) reproduces any sign pattern
        qfac = 1.0
        if np.prod(sign) < 0:
            qfac = -1.0
            sign = sign * np.array([1, 1, -1])
        quat = {
            (1, 1, 1): (0, 0, 0),
            (1, -1, -1): (1, 0, 0),
            (-1, 1, -1): (0, 1, 0),
            (-1, -1, 1): (0, 0, 1),
        }[tuple(int(s) for s in sign)]
        self.record["pixdim"][0] = qfac
        self.record["quatern_b"], self.record["quatern_c"], self.record["quatern_d"] = quat
        self.record["qoffset_x"], self.record["qoffset_y"], self.record["qoffset_z"] = origin
        self.record["qform_code"] = max(1, int(self.record["qform_code"]))


def _axis_aligned_geometry(header: NiftiHeader):
    aff = header.affine()
    lin = aff[:3, :3]
    diag = np.diag(lin)
    off = lin - np.diag(diag)
    scale = max(np.abs(lin).max(), 1e-12)
    if np.abs(off).max() > 1e-5 * scale or np.any(diag == 0):
        raise GeometryError(f"only axis-aligned grids are supported; affine rotation block is\n{lin}")
    direction = tuple(1 if v > 0 else -1 for v in diag)
    # the affine that won (sform or qform) also defines the voxel size
    spacing = tuple(float(abs(v)) for v in diag)
    origin = tuple(float(v) for v in aff[:3, 3])
    return spacing, origin, direction


def _maybe_gunzip(payload: bytes) -> bytes:
    if payload[:2] == b"\x1f\x8b":
        try:
            return gzip.decompress(payload)
        except (EOFError, OSError) as exc:
            raise TruncatedError(f"corrupt gzip stream: {exc}") from exc
    return payload


def read_header(payload: bytes) -> NiftiHeader:
    payload = _maybe_gunzip(payload)
    header = NiftiHeader.from_bytes(payload)
    magic = header.magic
    if magic == b"ni1":
        raise BadMagicError("two-file (.hdr/.img) NIfTI is not supported")
    if magic != b"n+1":
        raise BadMagicError(f"bad magic {magic!r}, expected b'n+1\\x00'")
    vox_offset = int(header["vox_offset"])
    if vox_offset > HEADER_SIZE + 4 and len(payload) >= HEADER_SIZE + 4 and payload[HEADER_SIZE] != 0:
        header.extensions = payload[HEADER_SIZE + 4 : vox_offset]
    return header


def read_volume(payload: bytes, kind: Kind | str = Kind.RAW) -> tuple[Volume3D, NiftiHeader]:
    """Decode a ``.nii`` or ``.nii.gz`` payload.

    Voxel values have ``scl_slope``/``scl_inter`` applied (a zero or non-finite
    slope means no scaling).
    """
    payload = _maybe_gunzip(payload)
    header = read_header(payload)
    dim = header["dim"]
    if int(dim[0]) != 3:
        raise DimensionError(f"only 3D volumes are supported, dim[0] = {int(dim[0])}")
    shape = tuple(int(d) for d in dim[1:4])
    if min(shape) < 1:
        raise DimensionError(f"invalid dimensions {shape}")
    code = int(header["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatypeError(f"datatype code {code} is not supported")
    np_type, bitpix = DATATYPES[code]
    if int(header["bitpix"]) != bitpix:
        raise NiftiError(f"bitpix {int(header['bitpix'])} inconsistent with datatype code {code}")

    offset = int(header["vox_offset"])
    count = int(np.prod(shape))
    dtype = np.dtype(np_type).newbyteorder(header.endian)
    nbytes = count * dtype.itemsize
    if len(payload) < offset + nbytes:
        raise TruncatedError(f"data section needs {nbytes} bytes at offset {offset}, stream has {len(payload) - offset}")
    raw = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    raw = raw.reshape(shape, order="F").astype(np_type)

    slope = float(header["scl_slope"])
    inter = float(header["scl_inter"])
    if slope == 0 or not np.isfinite(slope):
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if slope == 1.0 and inter == 0.0:
        values = raw
    else:
        values = raw.astype(np.float64) * slope + inter

    kind = Kind(kind)
    if kind is Kind.RAW and values.dtype != np.float64:
        values = values.astype(np.float64 if np_type in (np.int32, np.float64) else np.float32)
    spacing, origin, direction = _axis_aligned_geometry(header)
    return Volume3D(values, spacing, origin, kind, direction), header


def write_volume(volume: Volume3D, template: NiftiHeader | None = None) -> bytes:
    """Encode ``volume`` as an uncompressed single-file NIfTI-1 payload.

    MASK volumes are stored as uint8, other kinds in their float dtype, always
    with slope 1 and intercept 0. Extensions on the template are dropped.
    """
    if any(n > 32767 for n in volume.shape):
        raise CapacityError(f"shape {volume.shape} exceeds the 32767 limit of the dim fields")
    data = volume.data
    if volume.kind is Kind.MASK:
        data = data.astype(np.uint8)
    code = _CODE_FOR_DTYPE[data.dtype]

    if template is None:
        header = NiftiHeader()
    else:
        header = template.copy()
        header.extensions = b""
        header["magic"] = b"n+1"
    header["dim"] = [3, *volume.shape, 1, 1, 1, 1]
    header["datatype"] = code
    header["bitpix"] = DATATYPES[code][1]
    header["vox_offset"] = DATA_OFFSET
    header["scl_slope"] = 1.0
    header["scl_inter"] = 0.0
    header["cal_min"] = 0.0
    header["cal_max"] = 0.0
    header.set_geometry(volume.spacing, volume.origin, volume.direction)

    body = data.astype(np.dtype(data.dtype).newbyteorder(header.endian)).tobytes(order="F")
    return header.to_bytes() + b"\x00\x00\x00\x00" + body


def load(path, kind: Kind | str = Kind.RAW) -> Volume3D:
    return read_volume(Path(path).read_bytes(), kind)[0]


def save(volume: Volume3D, path, template: NiftiHeader | None = None) -> None:
    """Write ``volume`` to ``path``; a ``.gz`` suffix selects gzip compression."""
    payload = write_volume(volume, template)
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps compressed output byte-identical across runs
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)
