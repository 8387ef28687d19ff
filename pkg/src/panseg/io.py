"""Volume file I/O: MetaImage (MHD+RAW) read/write and NIfTI-1 read.

MetaImage is the canonical format. Payloads are little-endian raw; supported
element types are MET_SHORT, MET_UCHAR and MET_FLOAT. Integer payloads
round-trip bit-exact through the internal float32 representation.

The NIfTI reader is deliberately minimal: it takes dims from ``dim``,
spacing from ``pixdim`` and origin from the q-offset fields, and ignores
rotation matrices (oblique orientations are out of scope).
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

from .volume import Volume3D


class VolumeIOError(Exception):
    """Malformed header, payload mismatch or unsupported encoding."""


_MET_DTYPES = {
    "MET_SHORT": np.dtype("<i2"),
    "MET_UCHAR": np.dtype("<u1"),
    "MET_FLOAT": np.dtype("<f4"),
}

_NIFTI_DTYPES = {
    2: np.dtype("u1"),
    4: np.dtype("i2"),
    8: np.dtype("i4"),
    16: np.dtype("f4"),
    64: np.dtype("f8"),
    256: np.dtype("i1"),
    512: np.dtype("u2"),
}


def read_volume(path: str | os.PathLike, fmt: str | None = None) -> Volume3D:
    """Read a volume from disk.

    ``fmt`` may be ``"mhd"`` or ``"nifti"``; when omitted it is inferred from
    the file extension (.mhd / .nii / .nii.gz).
    """
    p = Path(path)
    if fmt is None:
        name = p.name.lower()
        if name.endswith(".mhd"):
            fmt = "mhd"
        elif name.endswith(".nii") or name.endswith(".nii.gz"):
            fmt = "nifti"
        else:
            raise VolumeIOError(f"cannot infer format from filename: {p.name}")
    if fmt == "mhd":
        return _read_mhd(p)
    if fmt == "nifti":
        return _read_nifti(p)
    raise VolumeIOError(f"unsupported format: {fmt}")


def write_volume(path: str | os.PathLike, v: Volume3D,
                 element_type: str = "MET_FLOAT") -> None:
    """Write a volume as an MHD header plus a sibling .raw payload.

    ``element_type`` selects the payload encoding; MET_SHORT and MET_UCHAR
    round to the nearest integer and clip to the type's range.
    """
    p = Path(path)
    if p.suffix.lower() != ".mhd":
        raise VolumeIOError(f"MetaImage output path must end in .mhd: {p.name}")
    if element_type not in _MET_DTYPES:
        raise VolumeIOError(f"unsupported element type: {element_type}")
    dt = _MET_DTYPES[element_type]
    data = v.data
    if dt.kind in "iu":
        info = np.iinfo(dt)
        data = np.clip(np.rint(data), info.min, info.max)
    payload = np.ascontiguousarray(data.astype(dt))
    raw_name = p.stem + ".raw"
    nx, ny, nz = v.dims
    header = (
        "ObjectType = Image\n"
        "NDims = 3\n"
        "BinaryData = True\n"
        "BinaryDataByteOrderMSB = False\n"
        "CompressedData = False\n"
        f"DimSize = {nx} {ny} {nz}\n"
        f"ElementSpacing = {v.spacing[0]:.10g} {v.spacing[1]:.10g} {v.spacing[2]:.10g}\n"
        f"Offset = {v.origin[0]:.10g} {v.origin[1]:.10g} {v.origin[2]:.10g}\n"
        f"ElementType = {element_type}\n"
        f"ElementDataFile = {raw_name}\n"
    )
    p.write_text(header)
    (p.parent / raw_name).write_bytes(payload.tobytes())


def _read_mhd(path: Path) -> Volume3D:
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise VolumeIOError(f"cannot read {path}: {e}") from e

    fields: dict[str, str] = {}
    data_offset = None
    consumed = 0
    # header is line-oriented text; a LOCAL payload follows it byte-for-byte
    while consumed < len(blob):
        nl = blob.find(b"\n", consumed)
        end = len(blob) if nl < 0 else nl + 1
        try:
            line = blob[consumed:end].decode("ascii")
        except UnicodeDecodeError as e:
            raise VolumeIOError(f"malformed MHD header line at byte "
                                f"{consumed}") from e
        consumed = end
        stripped = line.strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise VolumeIOError(f"malformed MHD header line: {stripped!r}")
        key, val = (s.strip() for s in stripped.split("=", 1))
        fields[key] = val
        if key == "ElementDataFile":
            if val.upper() == "LOCAL":
                data_offset = consumed
            break

    for req in ("NDims", "DimSize", "ElementType", "ElementDataFile"):
        if req not in fields:
            raise VolumeIOError(f"MHD header missing {req}")
    if fields.get("ObjectType", "Image") != "Image":
        raise VolumeIOError(f"unsupported ObjectType: {fields['ObjectType']}")
    if fields["NDims"] != "3":
        raise VolumeIOError(f"only NDims = 3 supported, got {fields['NDims']}")
    if fields.get("BinaryDataByteOrderMSB", "False").lower() == "true":
        raise VolumeIOError("big-endian payloads are not supported")
    if fields.get("CompressedData", "False").lower() == "true":
        raise VolumeIOError("compressed payloads are not supported")
    et = fields["ElementType"]
    if et not in _MET_DTYPES:
        raise VolumeIOError(f"unsupported element type: {et}")

    try:
        nx, ny, nz = (int(t) for t in fields["DimSize"].split())
    except ValueError as e:
        raise VolumeIOError(f"malformed DimSize: {fields['DimSize']!r}") from e
    spacing = _parse_triple(fields.get("ElementSpacing", "1 1 1"), "ElementSpacing")
    origin = _parse_triple(fields.get("Offset", "0 0 0"), "Offset")

    dt = _MET_DTYPES[et]
    expected = nx * ny * nz * dt.itemsize
    if data_offset is not None:
        raw = blob[data_offset:]
    else:
        raw_path = path.parent / fields["ElementDataFile"]
        if not raw_path.exists():
            raise VolumeIOError(f"payload file not found: {raw_path}")
        raw = raw_path.read_bytes()
    if len(raw) < expected:
        raise VolumeIOError(
            f"payload too short: {len(raw)} bytes, expected {expected} "
            f"for dims {nx}x{ny}x{nz} {et}")
    arr = np.frombuffer(raw[:expected], dtype=dt).reshape(nz, ny, nx)
    return Volume3D(arr, spacing, origin)


def _parse_triple(text: str, name: str) -> tuple[float, float, float]:
    try:
        a, b, c = (float(t) for t in text.split())
    except ValueError as e:
        raise VolumeIOError(f"malformed {name}: {text!r}") from e
    return (a, b, c)


def _read_nifti(path: Path) -> Volume3D:
    opener = gzip.open if path.name.lower().endswith(".gz") else open
    try:
        with opener(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise VolumeIOError(f"cannot read {path}: {e}") from e
    if len(blob) < 348:
        raise VolumeIOError("NIfTI file shorter than its 348-byte header")

    sizeof_hdr = struct.unpack("<i", blob[:4])[0]
    endian = "<"
    if sizeof_hdr != 348:
        sizeof_hdr = struct.unpack(">i", blob[:4])[0]
        if sizeof_hdr != 348:
            raise VolumeIOError("not a NIfTI-1 file (bad sizeof_hdr)")
        endian = ">"
    if blob[344:348] not in (b"n+1\x00", b"ni1\x00"):
        raise VolumeIOError("missing NIfTI-1 magic")

    dim = struct.unpack(endian + "8h", blob[40:56])
    if dim[0] < 3:
        raise VolumeIOError(f"expected >= 3 dimensions, got {dim[0]}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    extra = int(np.prod([max(d, 1) for d in dim[4:dim[0] + 1]])) if dim[0] > 3 else 1
    if extra != 1:
        raise VolumeIOError("multi-frame NIfTI volumes are not supported")
    datatype = struct.unpack(endian + "h", blob[70:72])[0]
    if datatype not in _NIFTI_DTYPES:
        raise VolumeIOError(f"unsupported NIfTI datatype code: {datatype}")
    pixdim = struct.unpack(endian + "8f", blob[76:108])
    vox_offset = int(struct.unpack(endian + "f", blob[108:112])[0])
    scl_slope, scl_inter = struct.unpack(endian + "2f", blob[112:120])
    qoffset = struct.unpack(endian + "3f", blob[268:280])

    dt = _NIFTI_DTYPES[datatype].newbyteorder(endian)
    count = nx * ny * nz
    expected = count * dt.itemsize
    if len(blob) < vox_offset + expected:
        raise VolumeIOError(
            f"payload too short: {len(blob) - vox_offset} bytes, expected {expected}")
    arr = np.frombuffer(blob[vox_offset:vox_offset + expected], dtype=dt)
    arr = arr.reshape(nz, ny, nx).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        if scl_slope == 0.0:
            scl_slope = 1.0
        arr = arr * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = tuple(abs(s) if s != 0 else 1.0 for s in pixdim[1:4])
    return Volume3D(arr, spacing, tuple(float(q) for q in qoffset))
