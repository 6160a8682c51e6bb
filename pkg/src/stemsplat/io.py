"""On-disk interchange: MRC2014 volumes/stacks, cloud checkpoints, PNG export.

MRC files are mode 2 (32-bit float), little-endian, x-fastest; volumes map
file sections to the z axis, stacks map them to views. Cloud checkpoints are
a small binary format (magic ``DZGC``) holding float32 parameter arrays. All
writes go through a temp-file-then-rename so partial files never appear.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .classical import Volume
from .errors import DomainError, FormatError
from .gaussians import GaussianCloud
from .splatter import ProjectionStack

_MRC_HEADER_BYTES = 1024
_MRC_MODE_FLOAT32 = 2
_MRC_NVERSION = 20140

_CLOUD_MAGIC = b"DZGC"
_CLOUD_VERSION = 1

_LABEL = b"stemsplat reconstruction data"


# ------------------------------------------------------------ atomic writes


def _atomic_write_bytes(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path: str, text: str) -> None:
    _atomic_write_bytes(path, text.encode("utf-8"))


# ------------------------------------------------------------------- MRC


def _mrc_header(shape_zyx, cell, origin, stats, is_volume: bool) -> bytes:
    nz, ny, nx = shape_zyx
    ints = np.zeros(256, dtype="<i4")
    floats = ints.view("<f4")
    ints[0:3] = (nx, ny, nz)
    ints[3] = _MRC_MODE_FLOAT32
    ints[7:10] = (nx, ny, nz)               # sampling grid MX, MY, MZ
    floats[10:13] = cell                    # cell dimensions in world units
    floats[13:16] = (90.0, 90.0, 90.0)
    ints[16:19] = (1, 2, 3)                 # column/row/section axis mapping
    floats[19:22] = stats[:3]               # min, max, mean
    ints[22] = 1 if is_volume else 0        # space group: volume vs image stack
    ints[23] = 0                            # no extended header
    ints[27] = int.from_bytes(b"MRCO", "little")
    ints[28] = _MRC_NVERSION
    floats[49:52] = origin
    ints[52] = int.from_bytes(b"MAP ", "little")
    ints[53] = int.from_bytes(bytes([0x44, 0x44, 0x00, 0x00]), "little")
    floats[54] = stats[3]                   # RMS deviation from mean
    ints[55] = 1                            # one label
    header = bytearray(ints.tobytes())
    header[224:224 + len(_LABEL)] = _LABEL
    return bytes(header)


def write_mrc(path: str, data: Union[Volume, ProjectionStack, np.ndarray],
              voxel_size: float = 1.0,
              origin: Sequence[float] = (0.0, 0.0, 0.0)) -> None:
    """Write a volume ([x,y,z] axes) or stack ([view,v,u]) as MRC2014 mode 2."""
    if isinstance(data, Volume):
        raw = data.data.transpose(2, 1, 0)       # file order: z, y, x
        voxel_size = data.voxel_size
        origin = data.origin
        is_volume = True
    elif isinstance(data, ProjectionStack):
        raw = data.data
        is_volume = False
    else:
        raw = np.asarray(data)
        if raw.ndim != 3:
            raise DomainError("MRC payload must be 3D")
        raw = raw.transpose(2, 1, 0)
        is_volume = True
    if raw.size == 0:
        raise DomainError("refusing to write an empty MRC")
    payload = np.ascontiguousarray(raw, dtype="<f4")
    stats = (float(payload.min()), float(payload.max()), float(payload.mean()),
             float(np.sqrt(np.mean((payload - payload.mean()) ** 2))))
    nz, ny, nx = payload.shape
    cell = (nx * voxel_size, ny * voxel_size, nz * voxel_size)
    header = _mrc_header(payload.shape, cell, tuple(origin)[:3], stats, is_volume)
    _atomic_write_bytes(path, header + payload.tobytes())


def _parse_mrc(path: str):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _MRC_HEADER_BYTES:
        raise FormatError(f"{path}: file shorter than the 1024-byte MRC header")
    ints = np.frombuffer(blob[:_MRC_HEADER_BYTES], dtype="<i4")
    floats = ints.view("<f4")
    if ints[52].tobytes() != b"MAP ":
        raise FormatError(f"{path}: bad map magic {ints[52].tobytes()!r}")
    if ints[3] != _MRC_MODE_FLOAT32:
        raise FormatError(f"{path}: unsupported mode {int(ints[3])} (need 2)")
    nx, ny, nz = (int(v) for v in ints[0:3])
    if min(nx, ny, nz) <= 0:
        raise FormatError(f"{path}: non-positive dimensions {(nx, ny, nz)}")
    nsymbt = int(ints[23])
    expected = _MRC_HEADER_BYTES + nsymbt + 4 * nx * ny * nz
    if len(blob) < expected:
        raise FormatError(f"{path}: truncated data, {len(blob)} bytes "
                          f"< expected {expected}")
    raw = np.frombuffer(blob[_MRC_HEADER_BYTES + nsymbt:expected], dtype="<f4")
    data = raw.reshape(nz, ny, nx).astype(np.float64)
    mx = int(ints[7]) or nx
    xlen = float(floats[10])
    voxel = xlen / mx if xlen > 0 else 1.0
    origin = tuple(float(v) for v in floats[49:52])
    return data, voxel, origin


def read_mrc(path: str, angles_deg: Optional[Sequence[float]] = None):
    """Read an MRC file as a Volume, or as a ProjectionStack if angles given."""
    data, voxel, origin = _parse_mrc(path)
    if angles_deg is not None:
        if len(angles_deg) != data.shape[0]:
            raise FormatError(f"{path}: {data.shape[0]} sections but "
                              f"{len(angles_deg)} tilt angles")
        return ProjectionStack(data, np.asarray(angles_deg, dtype=np.float64))
    return Volume(data.transpose(2, 1, 0), voxel, origin)


# ---------------------------------------------------------------- tilt file


def write_angles(path: str, angles_deg: Sequence[float]) -> None:
    lines = "".join(f"{float(a):.6f}\n" for a in angles_deg)
    write_text(path, lines)


def read_angles(path: str) -> np.ndarray:
    values = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text:
                continue
            try:
                values.append(float(text))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: not a tilt angle: {text!r}") \
                    from exc
    if not values:
        raise FormatError(f"{path}: no tilt angles found")
    return np.asarray(values, dtype=np.float64)


# ------------------------------------------------------- cloud checkpoints


def save_cloud(path: str, cloud: GaussianCloud) -> None:
    """Serialize a cloud as float32 little-endian arrays behind a magic tag."""
    n = cloud.count
    head = _CLOUD_MAGIC + struct.pack("<IQ", _CLOUD_VERSION, n)
    bounds = struct.pack("<ff", np.float32(cloud.scale_min),
                         np.float32(cloud.scale_max))
    body = b"".join(np.ascontiguousarray(arr, dtype="<f4").tobytes()
                    for arr in (cloud.positions, cloud.log_scales,
                                cloud.rotations, cloud.denza_raw))
    _atomic_write_bytes(path, head + bounds + body)


def load_cloud(path: str) -> GaussianCloud:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CLOUD_MAGIC:
        raise FormatError(f"{path}: bad cloud magic {blob[:4]!r}")
    if len(blob) < 24:
        raise FormatError(f"{path}: truncated cloud header")
    version, n = struct.unpack_from("<IQ", blob, 4)
    if version != _CLOUD_VERSION:
        raise FormatError(f"{path}: unsupported cloud version {version}")
    scale_min, scale_max = struct.unpack_from("<ff", blob, 16)
    offset = 24
    expected = offset + 4 * n * (3 + 3 + 4 + 1)
    if len(blob) != expected:
        raise FormatError(f"{path}: cloud payload is {len(blob)} bytes, "
                          f"expected {expected}")

    def take(count):
        nonlocal offset
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        return arr.astype(np.float64)

    positions = take(3 * n).reshape(n, 3)
    log_scales = take(3 * n).reshape(n, 3)
    rotations = take(4 * n).reshape(n, 4)
    denza_raw = take(n)
    return GaussianCloud(positions, log_scales, rotations, denza_raw,
                         scale_min=float(scale_min), scale_max=float(scale_max))


# ------------------------------------------------------------------- PNG


@dataclass(frozen=True)
class MinMax:
    pass


@dataclass(frozen=True)
class FixedRange:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DomainError("FixedRange needs hi > lo")


def export_png(image, path: str,
               normalization: Union[MinMax, FixedRange] = MinMax()) -> None:
    """Write a 16-bit grayscale PNG plus a sidecar recording the scaling."""
    data = np.asarray(getattr(image, "data", image), dtype=np.float64)
    if data.ndim != 2:
        raise DomainError("export_png expects a single 2D image")
    if not np.all(np.isfinite(data)):
        raise DomainError("image contains non-finite pixels")
    if isinstance(normalization, MinMax):
        lo, hi = float(data.min()), float(data.max())
        mode = "minmax"
    else:
        lo, hi = normalization.lo, normalization.hi
        mode = "fixed"
    if hi > lo:
        scaled = np.round((data - lo) / (hi - lo) * 65535.0)
    else:
        scaled = np.zeros_like(data)
    quantized = np.clip(scaled, 0, 65535).astype(np.uint16)

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".png")
    try:
        with os.fdopen(fd, "wb") as fh:
            Image.fromarray(quantized).save(fh, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    write_text(path + ".norm.txt", f"mode={mode}\nlo={lo!r}\nhi={hi!r}\n")
