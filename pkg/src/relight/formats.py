"""Bit-exact readers and writers for on-disk formats.

PFM: `PF` (RGB) / `Pf` (grayscale) headers; we emit little-endian only
(negative scale) and reject big-endian files on read.

RNAD v1 training slices: magic `RNAD`, u32 version, u32 width, u32 height,
u32 plane count, then a directory of (16-byte ASCII name, u32 channels),
then per plane float32 little-endian data with row-major (height, width,
channels) layout, in directory order.

All multi-byte integers are little-endian.  See formats.md for the
normative description.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

RNAD_MAGIC = b"RNAD"
RNAD_VERSION = 1

SURFACE_PLANES = {"radiance": 3, "alpha": 1, "position": 3, "omega_o": 3,
                  "omega_i": 3, "visibility": 1, "normal": 3}
FIBER_PLANES = {"radiance": 3, "alpha": 1, "position": 3, "omega_o": 3,
                "omega_i": 3, "visibility": 1, "tangent": 3, "h": 1}


class FormatError(ValueError):
    pass


@dataclass
class HdrImage:
    rgb: np.ndarray                  # (H, W, 3) float32
    alpha: np.ndarray | None = None  # (H, W) float32

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float32)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3 or min(self.rgb.shape[:2]) < 1:
            raise FormatError("HdrImage requires a (H, W, 3) array")
        if self.alpha is not None:
            self.alpha = np.asarray(self.alpha, dtype=np.float32)
            if self.alpha.shape != self.rgb.shape[:2]:
                raise FormatError("alpha plane shape mismatch")

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass
class TrainingSlice:
    """One camera's deep buffer: radiance, alpha mask and shading AOVs."""

    width: int
    height: int
    planes: dict                     # name -> (H, W, C) float32
    camera: object | None = None     # in-memory only, never serialized

    def kind_planes(self) -> dict:
        names = set(self.planes)
        if names == set(SURFACE_PLANES):
            return SURFACE_PLANES
        if names == set(FIBER_PLANES):
            return FIBER_PLANES
        raise FormatError(f"plane set {sorted(names)} matches no slice schema")

    def samples(self) -> dict:
        """Flattened arrays over alpha=1 pixels (the valid training samples)."""
        mask = self.planes["alpha"][..., 0] > 0.5
        out = {"mask": mask}
        for name, plane in self.planes.items():
            out[name] = plane[mask]
        return out


def write_pfm(image: HdrImage | np.ndarray, path) -> None:
    data = image.rgb if isinstance(image, HdrImage) else np.asarray(image, dtype=np.float32)
    if data.ndim == 2:
        data = data[..., None]
    if data.shape[2] not in (1, 3):
        raise FormatError("PFM supports 1 or 3 channels")
    if not np.all(np.isfinite(data)):
        raise FormatError("refusing to write non-finite pixel values")
    header = b"PF\n" if data.shape[2] == 3 else b"Pf\n"
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header)
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        # PFM stores rows bottom-to-top
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> HdrImage | np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise FormatError(f"not a PFM file: bad magic {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError("malformed PFM dimensions line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        if scale >= 0:
            raise FormatError("big-endian PFM rejected: this reader is little-endian only")
        channels = 3 if magic == b"PF" else 1
        raw = f.read(w * h * channels * 4)
    if len(raw) != w * h * channels * 4:
        raise FormatError("truncated PFM payload")
    data = np.frombuffer(raw, dtype="<f4").reshape(h, w, channels)[::-1].copy()
    if channels == 1:
        return data[..., 0]
    return HdrImage(rgb=data)


def write_slice(sl: TrainingSlice, path) -> None:
    schema = sl.kind_planes()
    with open(path, "wb") as f:
        f.write(RNAD_MAGIC)
        f.write(struct.pack("<III", RNAD_VERSION, sl.width, sl.height))
        f.write(struct.pack("<I", len(schema)))
        for name, channels in schema.items():
            plane = np.asarray(sl.planes[name])
            if plane.shape != (sl.height, sl.width, channels):
                raise FormatError(
                    f"plane {name!r}: expected {(sl.height, sl.width, channels)}, "
                    f"got {plane.shape}")
            f.write(struct.pack("<16sI", name.encode("ascii"), channels))
        for name in schema:
            f.write(np.ascontiguousarray(sl.planes[name], dtype="<f4").tobytes())


def read_slice(path) -> TrainingSlice:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != RNAD_MAGIC:
            raise FormatError(f"not an RNAD slice: bad magic {magic!r}")
        version, width, height = struct.unpack("<III", _read_exact(f, 12))
        if version != RNAD_VERSION:
            raise FormatError(f"unsupported RNAD version {version}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        directory = []
        for _ in range(count):
            raw_name, channels = struct.unpack("<16sI", _read_exact(f, 20))
            directory.append((raw_name.rstrip(b"\x00").decode("ascii"), channels))
        planes = {}
        for name, channels in directory:
            raw = _read_exact(f, width * height * channels * 4)
            planes[name] = np.frombuffer(raw, dtype="<f4").reshape(height, width, channels).copy()
    sl = TrainingSlice(width=width, height=height, planes=planes)
    schema = sl.kind_planes()
    for name, channels in directory:
        if schema[name] != channels:
            raise FormatError(f"plane {name!r} has {channels} channels, expected {schema[name]}")
    return sl


def _read_exact(f, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError("truncated slice file")
    return data
