"""MetaImage volumes, network checkpoints and CSV reports."""
import csv
import io
import json
import math
import os
import struct
import zlib
from pathlib import Path

import numpy as np

from .volcore import BinaryMask3D, Volume3D

__all__ = [
    "MetaImageError",
    "UnsupportedElementTypeError",
    "TruncatedPayloadError",
    "MissingDataFileError",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "ChecksumError",
    "ShapeMismatchError",
    "read_metaimage_header",
    "read_metaimage",
    "write_metaimage",
    "save_checkpoint",
    "load_checkpoint",
    "REPORT_COLUMNS",
    "write_report",
    "read_report",
    "write_history",
    "read_history",
]


# ---------------------------------------------------------------------------
# MetaImage
# ---------------------------------------------------------------------------

class MetaImageError(ValueError):
    pass


class UnsupportedElementTypeError(MetaImageError):
    pass


class TruncatedPayloadError(MetaImageError):
    pass


class MissingDataFileError(MetaImageError, FileNotFoundError):
    pass


_MET_TYPES = {"MET_SHORT": np.dtype("i2"), "MET_UCHAR": np.dtype("u1"), "MET_FLOAT": np.dtype("f4")}


def _atomic_write(path, data):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_metaimage_header(path):
    """Parse the text header; returns (fields dict, byte offset of LOCAL data)."""
    path = Path(path)
    raw = path.read_bytes()
    fields = {}
    pos = 0
    while pos < len(raw):
        end = raw.find(b"\n", pos)
        if end < 0:
            end = len(raw)
        line = raw[pos:end].decode("latin-1").strip()
        pos = end + 1
        if not line:
            continue
        if "=" not in line:
            raise MetaImageError(f"{path}: malformed header line {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        fields[key] = value
        if key == "ElementDataFile":
            return fields, pos
    raise MetaImageError(f"{path}: header has no ElementDataFile entry")


def _floats(text, n, key):
    vals = [float(v) for v in text.split()]
    if len(vals) != n:
        raise MetaImageError(f"{key} needs {n} values, got {text!r}")
    return vals


def read_metaimage(path, as_mask=None):
    """Read a .mhd/.mha file.

    MET_UCHAR files load as :class:`BinaryMask3D` (nonzero -> True) unless
    ``as_mask`` is False; other types load as :class:`Volume3D`.
    """
    path = Path(path)
    hdr, data_offset = read_metaimage_header(path)
    ndims = int(hdr.get("NDims", "3"))
    if ndims != 3:
        raise MetaImageError(f"NDims must be 3, got {ndims}")
    if int(hdr.get("ElementNumberOfChannels", "1")) != 1:
        raise MetaImageError("ElementNumberOfChannels must be 1")
    if hdr.get("CompressedData", "False").lower() == "true":
        raise MetaImageError("compressed MetaImage data is not supported")
    etype = hdr.get("ElementType")
    if etype not in _MET_TYPES:
        raise UnsupportedElementTypeError(f"ElementType {etype!r} not supported (MET_SHORT, MET_UCHAR, MET_FLOAT)")
    dims = [int(v) for v in hdr["DimSize"].split()]
    if len(dims) != 3 or min(dims) < 1:
        raise MetaImageError(f"DimSize must be 3 positive integers, got {hdr['DimSize']!r}")
    spacing = _floats(hdr.get("ElementSpacing", "1 1 1"), 3, "ElementSpacing")
    origin = _floats(hdr.get("Offset", hdr.get("Origin", hdr.get("Position", "0 0 0"))), 3, "Offset")
    msb = hdr.get("BinaryDataByteOrderMSB", hdr.get("ElementByteOrderMSB", "False")).lower() == "true"
    dtype = _MET_TYPES[etype].newbyteorder(">" if msb else "<")
    datafile = hdr["ElementDataFile"]
    if datafile == "LOCAL":
        payload = path.read_bytes()[data_offset:]
    else:
        raw_path = path.parent / datafile
        if not raw_path.is_file():
            raise MissingDataFileError(f"ElementDataFile {datafile!r} not found next to {path.name}")
        payload = raw_path.read_bytes()
    need = math.prod(dims) * dtype.itemsize
    if len(payload) < need:
        raise TruncatedPayloadError(
            f"ElementDataFile payload has {len(payload)} bytes, DimSize {dims} x {dtype.itemsize} needs {need}"
        )
    if len(payload) > need:
        raise MetaImageError(f"ElementDataFile payload has {len(payload)} bytes, expected {need}")
    nx, ny, nz = dims
    arr = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx)
    if as_mask is None:
        as_mask = etype == "MET_UCHAR"
    if as_mask:
        return BinaryMask3D(arr != 0, spacing, origin)
    return Volume3D(arr.astype(np.float32), spacing, origin)


def write_metaimage(image, path, element_type=None):
    """Write a Volume3D (MET_FLOAT) or BinaryMask3D (MET_UCHAR 0/1).

    ``.mha`` paths embed the payload (ElementDataFile = LOCAL); ``.mhd``
    paths write a sibling ``.raw``.
    """
    path = Path(path)
    if min(image.data.shape) < 1:
        raise MetaImageError("cannot write an image with empty dims")
    if element_type is None:
        element_type = "MET_UCHAR" if isinstance(image, BinaryMask3D) else "MET_FLOAT"
    if element_type not in _MET_TYPES:
        raise UnsupportedElementTypeError(f"ElementType {element_type!r} not supported")
    payload = np.ascontiguousarray(image.data).astype(_MET_TYPES[element_type].newbyteorder("<")).tobytes()
    local = path.suffix.lower() == ".mha"
    raw_name = path.with_suffix(".raw").name
    nx, ny, nz = image.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        "Offset = " + " ".join(repr(float(v)) for v in image.origin),
        "ElementSpacing = " + " ".join(repr(float(v)) for v in image.spacing),
        f"DimSize = {nx} {ny} {nz}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {'LOCAL' if local else raw_name}",
    ]
    header = ("\n".join(lines) + "\n").encode("ascii")
    if local:
        _atomic_write(path, header + payload)
    else:
        _atomic_write(path.with_suffix(".raw"), payload)
        _atomic_write(path, header)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------
#
# layout (little-endian):
#   8s   magic "HED3DSG1"
#   u32  format version
#   u32  config length, config JSON bytes
#   u32  tensor count
#   per tensor: u32 name length, name bytes, u32 rank, u32 dims[rank], f32 data
#   u32  CRC-32 of every preceding byte

MAGIC = b"HED3DSG1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def save_checkpoint(net, path):
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = json.dumps(net.config.to_dict(), sort_keys=True).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(net.params)))
    for name, prm in net.params.items():
        value = prm.value
        if not np.isfinite(value).all():
            raise CheckpointError(f"parameter {name!r} is not finite")
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", value.ndim))
        buf.write(struct.pack(f"<{value.ndim}I", *value.shape))
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    body = buf.getvalue()
    _atomic_write(path, body + struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path):
    from .hed3d import Hed3DConfig, Hed3DNet, parameter_shapes
    from .engine import Parameter

    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) or data[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: checkpoint truncated")
    version = struct.unpack("<I", data[8:12])[0]
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    body, tail = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", tail)[0]:
        raise ChecksumError(f"{path}: checksum mismatch")
    r = _Reader(body)
    r.take(12)
    try:
        cfg = Hed3DConfig.from_dict(json.loads(r.take(r.u32()).decode()))
        cfg.validate()
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid architecture config: {exc}") from exc
    expected = parameter_shapes(cfg)
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode()
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        if name not in expected:
            raise ShapeMismatchError(f"tensor {name!r} is not part of the configured architecture")
        if tuple(dims) != tuple(expected[name]):
            raise ShapeMismatchError(f"tensor {name!r} has dims {tuple(dims)}, config implies {expected[name]}")
        n = math.prod(dims)
        tensors[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor table")
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise ShapeMismatchError(f"checkpoint lacks tensors: {', '.join(missing)}")
    params = {n: Parameter(n, tensors[n]) for n in expected}
    return Hed3DNet(cfg, params)


# ---------------------------------------------------------------------------
# CSV reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = [
    "case_id",
    "stage",
    "dice",
    "jaccard",
    "max_diameter_mm",
    "gt_max_diameter_mm",
    "diameter_abs_err_mm",
    "slice_index",
    "gt_slice_index",
    "volume_mm3",
    "gt_volume_mm3",
    "rel_vol_diff",
]
_NUMERIC = REPORT_COLUMNS[2:]
SUMMARY_ID = "summary"


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(rows, path):
    """Per-case rows then one ``summary`` row of ``mean±std`` (population std)."""
    rows = list(rows)
    out = io.StringIO()
    out.write("# summary row: mean±std over cases, population standard deviation (ddof=0)\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        d = r.as_row()
        w.writerow([_cell(d.get(c)) for c in REPORT_COLUMNS])
    summary = [SUMMARY_ID, ""]
    for col in _NUMERIC:
        vals = [float(r.as_row()[col]) for r in rows if r.as_row().get(col) is not None]
        summary.append(f"{float(np.mean(vals))!r}±{float(np.std(vals))!r}" if vals else "")
    w.writerow(summary)
    _atomic_write(path, out.getvalue().encode("utf-8"))


def read_report(path):
    """Return (per-case list of dicts, summary dict of (mean, std) or None)."""
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = []
    summary = None
    for rec in csv.DictReader(lines):
        if rec["case_id"] == SUMMARY_ID:
            summary = {}
            for col in _NUMERIC:
                cell = rec[col]
                if cell:
                    m, s = cell.split("±")
                    summary[col] = (float(m), float(s))
                else:
                    summary[col] = None
            continue
        rows.append({c: (float(rec[c]) if c in _NUMERIC and rec[c] != "" else rec[c]) for c in REPORT_COLUMNS})
    return rows, summary


def write_history(history, path):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_loss", "lr"])
    for h in history:
        w.writerow([h.epoch, repr(float(h.train_loss)), repr(float(h.val_loss)), repr(float(h.lr))])
    _atomic_write(path, out.getvalue().encode())


def read_history(path):
    with open(path, newline="") as fh:
        return [
            (int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]), float(r["lr"]))
            for r in csv.DictReader(fh)
        ]
