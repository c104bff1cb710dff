"""Equirectangular HDR environment maps: sampling, yaw rotation, PFM I/O.

The world frame is right-handed, +y up, -z forward. A unit direction d maps to
texture coordinates by

    u = (atan2(d.x, -d.z) + pi) / (2 pi)      horizontal, wraps
    v = acos(clamp(d.y, -1, 1)) / pi          vertical, clamps

so u = 0.5 faces -z and v = 0 is the +y pole. Texel (col i, row j) has its
center at u = (i + 0.5) / width, v = (j + 0.5) / height, with row 0 at the top
of the image (v = 0). PFM files store rows bottom-to-top; the reader and
writer flip accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class PfmFormatError(ValueError):
    """Raised for malformed or unsupported PFM data."""


def normalize(v: np.ndarray) -> np.ndarray:
    """Return v scaled to unit length (over the last axis)."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / n


def rotation_y(angle: float) -> np.ndarray:
    """3x3 right-handed rotation about the +y axis."""
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class HdrEnvironmentMap:
    """Equirectangular radiance map: (height, width, 3) float32, linear, >= 0.

    Immutable after construction; all sampling operations are read-only and
    safe to call concurrently.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (height, width, 3) pixels, got shape {px.shape}")
        h, w = px.shape[:2]
        if h < 1 or w != 2 * h:
            raise ValueError(f"equirectangular aspect requires width = 2 x height, got {w}x{h}")
        if not np.isfinite(px).all():
            raise ValueError("environment map contains non-finite radiance")
        if (px < 0).any():
            raise ValueError("environment map contains negative radiance")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def constant(cls, rgb, width: int = 64, height: int = 32) -> "HdrEnvironmentMap":
        px = np.broadcast_to(np.asarray(rgb, dtype=np.float32), (height, width, 3))
        return cls(np.array(px))


def direction_to_uv(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map unit directions (..., 3) to equirectangular (u, v), u in [0,1), v in [0,1]."""
    d = np.asarray(d, dtype=np.float64)
    u = (np.arctan2(d[..., 0], -d[..., 2]) + np.pi) / (2.0 * np.pi)
    v = np.arccos(np.clip(d[..., 1], -1.0, 1.0)) / np.pi
    # atan2(0, -0.0) can return the +pi branch; fold u = 1 back onto 0
    u = np.where(u >= 1.0, u - 1.0, u)
    return u, v


def uv_to_direction(u, v) -> np.ndarray:
    """Inverse of direction_to_uv; returns unit directions with shape (..., 3)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    phi = u * (2.0 * np.pi) - np.pi
    theta = v * np.pi
    st = np.sin(theta)
    return np.stack([np.sin(phi) * st, np.cos(theta), -np.cos(phi) * st], axis=-1)


def sample_bilinear(envmap: HdrEnvironmentMap, d: np.ndarray) -> np.ndarray:
    """Bilinear lookup of directions (..., 3); wraps in u, clamps in v.

    At v in {0, 1} every u samples the pole row. Returns float64 (..., 3).
    """
    u, v = direction_to_uv(d)
    return _sample_uv(envmap.pixels, u, v)


def _sample_uv(pixels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    h, w = pixels.shape[:2]
    px = u * w - 0.5
    py = v * h - 0.5
    x0f = np.floor(px)
    y0f = np.floor(py)
    fx = (px - x0f)[..., None]
    fy = (py - y0f)[..., None]
    x0 = x0f.astype(np.int64) % w
    x1 = (x0 + 1) % w
    y0 = np.clip(y0f.astype(np.int64), 0, h - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, h - 1)
    c00 = pixels[y0, x0].astype(np.float64)
    c10 = pixels[y0, x1].astype(np.float64)
    c01 = pixels[y1, x0].astype(np.float64)
    c11 = pixels[y1, x1].astype(np.float64)
    # lerp form keeps constant maps exact
    top = c00 + fx * (c10 - c00)
    bot = c01 + fx * (c11 - c01)
    return top + fy * (bot - top)


def rotate_yaw(envmap: HdrEnvironmentMap, angle: float) -> HdrEnvironmentMap:
    """Resample the map rotated by `angle` about +y: output(d) = input(R_y(-angle) d).

    In this parameterization a yaw is a pure horizontal shift of
    angle / 2pi * width texels, so the resampling is a single linear
    interpolation per row; integral shifts (angle 0, full turns at even
    widths) reproduce texels exactly.
    """
    w = envmap.width
    shift = angle / (2.0 * np.pi) * w
    cols = np.arange(w, dtype=np.float64) + shift
    j0f = np.floor(cols)
    frac = (cols - j0f)[None, :, None]
    j0 = j0f.astype(np.int64) % w
    j1 = (j0 + 1) % w
    a = envmap.pixels[:, j0, :].astype(np.float64)
    b = envmap.pixels[:, j1, :].astype(np.float64)
    return HdrEnvironmentMap((a + frac * (b - a)).astype(np.float32))


def pfm_encode(image: np.ndarray) -> bytes:
    """Encode an (h, w, 3) float array as binary PFM (little-endian, scale -1.0)."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise PfmFormatError(f"expected (h, w, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    header = f"PF\n{w} {h}\n-1.0\n".encode("ascii")
    return header + np.ascontiguousarray(img[::-1]).tobytes()


def pfm_decode(data: bytes) -> np.ndarray:
    """Decode binary PFM bytes to an (h, w, 3) float32 array (row 0 on top)."""
    lines = data.split(b"\n", 3)
    if len(lines) < 4:
        raise PfmFormatError("malformed PFM header: expected 3 newline-terminated lines")
    magic = lines[0].strip()
    if magic == b"Pf":
        raise PfmFormatError("unsupported grayscale PFM (header 'Pf'); only color 'PF' is accepted")
    if magic != b"PF":
        raise PfmFormatError(f"not a PFM file (bad magic {magic!r})")
    dims = lines[1].split()
    if len(dims) != 2:
        raise PfmFormatError(f"malformed PFM dimensions line {lines[1]!r}")
    try:
        w, h = int(dims[0]), int(dims[1])
    except ValueError:
        raise PfmFormatError(f"malformed PFM dimensions line {lines[1]!r}") from None
    if w <= 0 or h <= 0:
        raise PfmFormatError(f"invalid PFM dimensions {w}x{h}")
    try:
        scale = float(lines[2])
    except ValueError:
        raise PfmFormatError(f"malformed PFM scale line {lines[2]!r}") from None
    if scale == 0.0:
        raise PfmFormatError("PFM scale must be non-zero")
    payload = lines[3]
    expected = w * h * 3 * 4
    if len(payload) != expected:
        raise PfmFormatError(
            f"payload size mismatch for {w}x{h}: expected {expected} bytes, got {len(payload)}"
        )
    dtype = "<f4" if scale < 0 else ">f4"
    img = np.frombuffer(payload, dtype=dtype).reshape(h, w, 3)[::-1]
    img = img.astype(np.float32)
    if np.isnan(img).any():
        j, i, c = np.argwhere(np.isnan(img))[0]
        raise PfmFormatError(f"NaN in payload at row {j}, col {i}, channel {c}")
    return img


def write_pfm(envmap: HdrEnvironmentMap) -> bytes:
    """Serialize an environment map to PFM bytes."""
    return pfm_encode(envmap.pixels)


def read_pfm(data: bytes) -> HdrEnvironmentMap:
    """Parse PFM bytes into an environment map (2:1 aspect enforced)."""
    return HdrEnvironmentMap(pfm_decode(data))


def load_pfm(path) -> HdrEnvironmentMap:
    with open(path, "rb") as f:
        return read_pfm(f.read())


def save_pfm(path, envmap: HdrEnvironmentMap) -> None:
    with open(path, "wb") as f:
        f.write(write_pfm(envmap))
