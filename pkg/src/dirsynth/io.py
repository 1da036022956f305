"""File formats: a single-file NIfTI-1 subset for volumes, plus CSV and JSON writers.

Only little-endian ``.nii`` files with a 348-byte header are handled. Scalar
volumes are stored as float32, label maps as int16 and displacement fields
as 3-component float32 vectors in millimetres (``dim[0] = 5``,
``dim[5] = 3``). Orientation is limited to per-axis spacing and an origin,
written as a diagonal sform.
"""

from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, FormatError, InvalidArgumentError, UnsupportedFormatError
from .grid import LabelMap, Volume
from .transform import DisplacementField

HEADER_SIZE = 348
VOX_OFFSET = 352
MAGIC = b"n+1\x00"
DT_UINT8, DT_INT16, DT_FLOAT32, DT_FLOAT64 = 2, 4, 16, 64
_DTYPES = {DT_UINT8: np.dtype("<u1"), DT_INT16: np.dtype("<i2"), DT_FLOAT32: np.dtype("<f4"), DT_FLOAT64: np.dtype("<f8")}
INTENT_VECTOR = 1007
XFORM_SCANNER = 1
UNITS_MM = 2

# (offset, struct format) of the header fields used here
_FIELDS = {
    "sizeof_hdr": (0, "<i"),
    "dim": (40, "<8h"),
    "intent_code": (68, "<h"),
    "datatype": (70, "<h"),
    "bitpix": (72, "<h"),
    "pixdim": (76, "<8f"),
    "vox_offset": (108, "<f"),
    "scl_slope": (112, "<f"),
    "scl_inter": (116, "<f"),
    "xyzt_units": (123, "<B"),
    "qform_code": (252, "<h"),
    "sform_code": (254, "<h"),
    "srow_x": (280, "<4f"),
    "srow_y": (296, "<4f"),
    "srow_z": (312, "<4f"),
    "magic": (344, "<4s"),
}


def _pack(buf, name, *values):
    offset, fmt = _FIELDS[name]
    struct.pack_into(fmt, buf, offset, *values)


def _unpack(buf, name):
    offset, fmt = _FIELDS[name]
    out = struct.unpack_from(fmt, buf, offset)
    return out if len(out) > 1 else out[0]


def _atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _header(dims, spacing, origin, datatype, components):
    buf = bytearray(VOX_OFFSET)
    _pack(buf, "sizeof_hdr", HEADER_SIZE)
    if components == 1:
        dim = (3,) + tuple(dims) + (1, 1, 1, 1)
    else:
        dim = (5,) + tuple(dims) + (1, components, 1, 1)
    _pack(buf, "dim", *dim)
    _pack(buf, "intent_code", INTENT_VECTOR if components > 1 else 0)
    _pack(buf, "datatype", datatype)
    _pack(buf, "bitpix", _DTYPES[datatype].itemsize * 8)
    _pack(buf, "pixdim", 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    _pack(buf, "vox_offset", float(VOX_OFFSET))
    _pack(buf, "scl_slope", 1.0)
    _pack(buf, "scl_inter", 0.0)
    _pack(buf, "xyzt_units", UNITS_MM)
    _pack(buf, "sform_code", XFORM_SCANNER)
    _pack(buf, "srow_x", spacing[0], 0.0, 0.0, origin[0])
    _pack(buf, "srow_y", 0.0, spacing[1], 0.0, origin[1])
    _pack(buf, "srow_z", 0.0, 0.0, spacing[2], origin[2])
    _pack(buf, "magic", MAGIC)
    return buf


def _payload(array, dtype):
    # x fastest: Fortran order over (x, y, z[, component])
    return np.asarray(array, dtype=dtype).tobytes(order="F")


def encode_volume(obj) -> bytes:
    """Serialise a Volume, LabelMap or DisplacementField to NIfTI-1 bytes."""
    if isinstance(obj, DisplacementField):
        vec = obj.vectors
        spacing = tuple(float(s) for s in obj.spacing)
        dims = vec.shape[:3]
        origin = (0.0, 0.0, 0.0)
        mm = vec * np.asarray(spacing)
        return bytes(_header(dims, spacing, origin, DT_FLOAT32, 3)) + _payload(mm, "<f4")
    if isinstance(obj, LabelMap):
        labels = obj.labels
        if labels.min() < -32768 or labels.max() > 32767:
            raise InvalidArgumentError("labels outside the int16 range cannot be stored")
        return bytes(_header(obj.dims, obj.spacing, obj.origin, DT_INT16, 1)) + _payload(labels, "<i2")
    if isinstance(obj, Volume):
        return bytes(_header(obj.dims, obj.spacing, obj.origin, DT_FLOAT32, 1)) + _payload(obj.data, "<f4")
    raise InvalidArgumentError(f"cannot write {type(obj).__name__}")


def write_volume(obj, path):
    """Write ``obj`` atomically; equal inputs give byte-identical files."""
    try:
        _atomic_write_bytes(path, encode_volume(obj))
    except OSError as exc:
        raise OSError(f"could not write {path}: {exc}") from exc


def decode_volume(raw: bytes, source="<bytes>"):
    """Parse NIfTI-1 bytes into a Volume, LabelMap or DisplacementField."""
    if len(raw) < HEADER_SIZE:
        raise CorruptFileError(f"{source}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    if _unpack(raw, "magic") != MAGIC:
        if _unpack(raw, "magic") == b"ni1\x00":
            raise UnsupportedFormatError(f"{source}: two-file NIfTI (.hdr/.img) is not supported")
        if raw[:2] == b"\x1f\x8b":
            raise UnsupportedFormatError(f"{source}: gzip-compressed files are not supported")
        raise FormatError(f"{source}: bad magic {_unpack(raw, 'magic')!r}, expected {MAGIC!r}")
    if _unpack(raw, "sizeof_hdr") != HEADER_SIZE:
        raise UnsupportedFormatError(f"{source}: sizeof_hdr {_unpack(raw, 'sizeof_hdr')} (big-endian or NIfTI-2?)")
    dim = _unpack(raw, "dim")
    datatype = _unpack(raw, "datatype")
    if datatype not in _DTYPES:
        raise UnsupportedFormatError(f"{source}: unsupported datatype code {datatype}")
    ndim = dim[0]
    if ndim == 3 or (ndim in (4, 5) and all(d == 1 for d in dim[4:ndim + 1])):
        components = 1
    elif ndim == 5 and dim[4] == 1 and dim[5] == 3:
        components = 3
    else:
        raise UnsupportedFormatError(f"{source}: unsupported dim {dim[:ndim + 1]}")
    dims = tuple(int(d) for d in dim[1:4])
    if min(dims) < 1:
        raise CorruptFileError(f"{source}: non-positive dimensions {dims}")
    offset = int(_unpack(raw, "vox_offset"))
    if offset < VOX_OFFSET:
        raise CorruptFileError(f"{source}: vox_offset {offset} is below {VOX_OFFSET}")
    dtype = _DTYPES[datatype]
    count = int(np.prod(dims)) * components
    need = offset + count * dtype.itemsize
    if len(raw) < need:
        raise CorruptFileError(f"{source}: truncated data ({len(raw)} of {need} bytes)")

    pixdim = _unpack(raw, "pixdim")
    spacing = tuple(float(p) for p in pixdim[1:4])
    if min(spacing) <= 0:
        raise CorruptFileError(f"{source}: non-positive spacing {spacing}")
    if _unpack(raw, "sform_code") > 0:
        origin = tuple(float(_unpack(raw, row)[3]) for row in ("srow_x", "srow_y", "srow_z"))
    else:
        origin = (0.0, 0.0, 0.0)
    shape = dims + ((components,) if components > 1 else ())
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")

    slope, inter = float(_unpack(raw, "scl_slope")), float(_unpack(raw, "scl_inter"))
    scaled = slope != 0.0 and math.isfinite(slope) and (slope, inter) != (1.0, 0.0)
    if components == 3:
        vec = data.astype(np.float64)
        if scaled:
            vec = vec * slope + inter
        return DisplacementField(vec / np.asarray(spacing), spacing)
    if np.issubdtype(dtype, np.integer) and not scaled:
        return LabelMap(data.astype(np.int64), spacing, origin)
    values = data.astype(np.float64)
    if scaled:
        values = values * slope + inter
    return Volume(values, spacing, origin)


def read_volume(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    return decode_volume(path.read_bytes(), str(path))


def read_labels(path) -> LabelMap:
    obj = read_volume(path)
    if isinstance(obj, LabelMap):
        return obj
    if isinstance(obj, Volume) and np.array_equal(obj.data, np.round(obj.data)):
        return LabelMap(obj.data.astype(np.int64), obj.spacing, obj.origin)
    raise FormatError(f"{path}: not a label map")


def read_mask(path) -> np.ndarray:
    obj = read_volume(path)
    data = obj.labels if isinstance(obj, LabelMap) else getattr(obj, "data", None)
    if data is None:
        raise FormatError(f"{path}: not a scalar volume")
    return np.asarray(data) != 0


def write_mask(mask, path, like: Volume):
    write_volume(LabelMap(np.asarray(mask, dtype=np.int64), like.spacing, like.origin), path)


# -- tabular and JSON outputs ------------------------------------------------

def _format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def encode_csv(header, rows) -> bytes:
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_format_cell(v) for v in row])
    return buf.getvalue().encode("utf-8")


def write_csv(path, header, rows):
    """Write a UTF-8 CSV with a header row; floats use ``repr`` so they round-trip."""
    _atomic_write_bytes(path, encode_csv(header, rows))


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def encode_json(obj) -> bytes:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
    return (text + "\n").encode("utf-8")


def write_json(path, obj):
    """Write sorted, indented JSON atomically."""
    _atomic_write_bytes(path, encode_json(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
