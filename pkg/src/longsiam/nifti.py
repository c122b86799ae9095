"""NIfTI-1 single-file (.nii / .nii.gz) reader and writer.

Only the pieces needed to move 3D intensity grids around are interpreted.
Orientation fields are parsed into :class:`NiftiHeader` but never applied:
volumes come back in stored axis order, axis 0 being left-right.
"""

import gzip
import os
import struct
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np

HEADER_SIZE = 348
SINGLE_FILE_OFFSET = 352
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"
GZIP_MAGIC = b"\x1f\x8b"

_FIELDS = (
    ("sizeof_hdr", "i"),
    ("data_type", "10s"),
    ("db_name", "18s"),
    ("extents", "i"),
    ("session_error", "h"),
    ("regular", "B"),
    ("dim_info", "B"),
    ("dim", "8h"),
    ("intent_p", "3f"),
    ("intent_code", "h"),
    ("datatype", "h"),
    ("bitpix", "h"),
    ("slice_start", "h"),
    ("pixdim", "8f"),
    ("vox_offset", "f"),
    ("scl_slope", "f"),
    ("scl_inter", "f"),
    ("slice_end", "h"),
    ("slice_code", "B"),
    ("xyzt_units", "B"),
    ("cal_max", "f"),
    ("cal_min", "f"),
    ("slice_duration", "f"),
    ("toffset", "f"),
    ("glmax", "i"),
    ("glmin", "i"),
    ("descrip", "80s"),
    ("aux_file", "24s"),
    ("qform_code", "h"),
    ("sform_code", "h"),
    ("quatern", "3f"),
    ("qoffset", "3f"),
    ("srow_x", "4f"),
    ("srow_y", "4f"),
    ("srow_z", "4f"),
    ("intent_name", "16s"),
    ("magic", "4s"),
)
_LAYOUT = "".join(fmt for _, fmt in _FIELDS)
assert struct.calcsize("<" + _LAYOUT) == HEADER_SIZE

# datatype code -> (numpy kind, bits)
DATATYPES = {
    2: ("u1", 8),
    4: ("i2", 16),
    8: ("i4", 32),
    16: ("f4", 32),
    64: ("f8", 64),
    256: ("i1", 8),
    512: ("u2", 16),
    768: ("u4", 32),
}
FLOAT32 = 16

# kinds that convert to float32 without loss
_EXACT_IN_SINGLE = {"u1", "i1", "i2", "u2", "f4"}


class NiftiError(ValueError):
    pass


@dataclass(frozen=True)
class NiftiHeader:
    sizeof_hdr: int
    dim: tuple
    datatype: int
    bitpix: int
    pixdim: tuple
    vox_offset: float
    scl_slope: float
    scl_inter: float
    magic: bytes
    byteorder: str
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: tuple = ()
    descrip: bytes = b""

    @property
    def shape(self):
        ndim = self.dim[0]
        return tuple(int(d) for d in self.dim[1 : ndim + 1])


@dataclass
class Volume:
    """3D intensity grid indexed (x, y, z) with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValueError(f"volume must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume intensities must be finite")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(not s > 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive reals, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape


def _maybe_gunzip(buf):
    if buf[:2] == GZIP_MAGIC:
        try:
            return gzip.decompress(buf)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"corrupt gzip container: {exc}") from exc
    return buf


def _detect_byteorder(buf):
    for order in ("<", ">"):
        (size,) = struct.unpack_from(order + "i", buf, 0)
        if size == HEADER_SIZE:
            return order
        if size == 540:
            raise NiftiError("NIfTI-2 files are not supported")
    raise NiftiError("not a NIfTI-1 file: sizeof_hdr is not 348 in either byte order")


def parse_header(buf):
    """Decode the 348-byte header of a (possibly gzipped) NIfTI-1 file."""
    buf = _maybe_gunzip(bytes(buf))
    if len(buf) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(buf)} bytes")
    order = _detect_byteorder(buf)
    values = struct.unpack_from(order + _LAYOUT, buf, 0)
    raw = {}
    i = 0
    for name, fmt in _FIELDS:
        count = int(fmt[:-1]) if fmt[:-1] and fmt[-1] != "s" else 1
        if count == 1:
            raw[name] = values[i]
        else:
            raw[name] = tuple(values[i : i + count])
        i += count

    magic = raw["magic"]
    if magic == MAGIC_PAIR:
        raise NiftiError("header/image file pairs (.hdr/.img) are not supported")
    if magic != MAGIC_SINGLE:
        raise NiftiError(f"bad magic {magic!r}")
    dim = raw["dim"]
    if not 1 <= dim[0] <= 7:
        raise NiftiError(f"dim[0] = {dim[0]} outside 1..7")
    if any(d < 1 for d in dim[1 : dim[0] + 1]):
        raise NiftiError(f"non-positive extent in dim {dim}")
    if raw["datatype"] not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {raw['datatype']}")
    if raw["bitpix"] != DATATYPES[raw["datatype"]][1]:
        raise NiftiError(
            f"bitpix {raw['bitpix']} inconsistent with datatype {raw['datatype']}"
        )
    return NiftiHeader(
        sizeof_hdr=raw["sizeof_hdr"],
        dim=dim,
        datatype=raw["datatype"],
        bitpix=raw["bitpix"],
        pixdim=raw["pixdim"],
        vox_offset=raw["vox_offset"],
        scl_slope=raw["scl_slope"],
        scl_inter=raw["scl_inter"],
        magic=magic,
        byteorder=order,
        qform_code=raw["qform_code"],
        sform_code=raw["sform_code"],
        quatern=raw["quatern"],
        qoffset=raw["qoffset"],
        srow=(raw["srow_x"], raw["srow_y"], raw["srow_z"]),
        descrip=raw["descrip"].rstrip(b"\x00"),
    )


def read_nifti(buf):
    """Decode a NIfTI-1 byte stream into a :class:`Volume`.

    Trailing extents of 1 (e.g. a 4D file with one time point) collapse to 3D;
    lower-dimensional images gain unit axes.  Values are scaled by
    ``scl_slope``/``scl_inter`` when the slope is non-zero.
    """
    buf = _maybe_gunzip(bytes(buf))
    hdr = parse_header(buf)
    shape = hdr.shape
    if any(d != 1 for d in shape[3:]):
        raise NiftiError(f"only 3D volumes are supported, got extents {shape}")
    shape = (shape + (1, 1, 1))[:3]

    kind, bits = DATATYPES[hdr.datatype]
    offset = int(hdr.vox_offset)
    if offset < HEADER_SIZE:
        raise NiftiError(f"vox_offset {hdr.vox_offset} points inside the header")
    count = shape[0] * shape[1] * shape[2]
    nbytes = count * bits // 8
    if len(buf) < offset + nbytes:
        raise NiftiError(
            f"truncated data section: need {nbytes} bytes at offset {offset}, "
            f"file has {len(buf) - offset}"
        )
    raw = np.frombuffer(buf, dtype=np.dtype(hdr.byteorder + kind), count=count, offset=offset)
    # voxel data is stored with x varying fastest
    data = raw.reshape(shape, order="F")

    slope, inter = float(hdr.scl_slope), float(hdr.scl_inter)
    scaled = slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0)
    if scaled:
        data = data.astype(np.float64) * slope + inter
    elif kind in _EXACT_IN_SINGLE:
        data = data.astype(np.float32)
    else:
        data = data.astype(np.float64)
    data = np.ascontiguousarray(data)

    spacing = []
    for s in hdr.pixdim[1:4]:
        s = abs(float(s))
        spacing.append(s if s > 0 and np.isfinite(s) else 1.0)
    try:
        return Volume(data, tuple(spacing))
    except ValueError as exc:
        raise NiftiError(str(exc)) from exc


def write_nifti(v):
    """Encode a volume as a native-endian float32 single-file NIfTI-1 stream."""
    data = np.asarray(v.data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise NiftiError("volume does not fit in float32")
    nx, ny, nz = data.shape
    sx, sy, sz = v.spacing
    order = "<" if sys.byteorder == "little" else ">"
    fields = {
        "sizeof_hdr": HEADER_SIZE,
        "data_type": b"",
        "db_name": b"",
        "extents": 0,
        "session_error": 0,
        "regular": ord("r"),
        "dim_info": 0,
        "dim": (3, nx, ny, nz, 1, 1, 1, 1),
        "intent_p": (0.0, 0.0, 0.0),
        "intent_code": 0,
        "datatype": FLOAT32,
        "bitpix": 32,
        "slice_start": 0,
        "pixdim": (1.0, sx, sy, sz, 0.0, 0.0, 0.0, 0.0),
        "vox_offset": float(SINGLE_FILE_OFFSET),
        "scl_slope": 1.0,
        "scl_inter": 0.0,
        "slice_end": 0,
        "slice_code": 0,
        "xyzt_units": 2,  # millimetres
        "cal_max": 0.0,
        "cal_min": 0.0,
        "slice_duration": 0.0,
        "toffset": 0.0,
        "glmax": 0,
        "glmin": 0,
        "descrip": b"",
        "aux_file": b"",
        "qform_code": 0,
        "sform_code": 2,
        "quatern": (0.0, 0.0, 0.0),
        "qoffset": (0.0, 0.0, 0.0),
        "srow_x": (sx, 0.0, 0.0, 0.0),
        "srow_y": (0.0, sy, 0.0, 0.0),
        "srow_z": (0.0, 0.0, sz, 0.0),
        "intent_name": b"",
        "magic": MAGIC_SINGLE,
    }
    values = []
    for name, _ in _FIELDS:
        val = fields[name]
        values.extend(val if isinstance(val, tuple) else (val,))
    header = struct.pack(order + _LAYOUT, *values)
    extension = b"\x00\x00\x00\x00"
    body = data.astype(np.dtype(order + "f4")).tobytes(order="F")
    return header + extension + body


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via a temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        return read_nifti(fh.read())


def save(path, v):
    """Save a volume; a ``.gz`` suffix selects a gzip container (mtime fixed at 0)."""
    payload = write_nifti(v)
    if os.fspath(path).endswith(".gz"):
        payload = gzip.compress(payload, compresslevel=6, mtime=0)
    atomic_write_bytes(path, payload)
