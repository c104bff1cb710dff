"""Preconvolution of an HDR map into a stack of Phong-cosine-lobe light maps.

Each light map stores, per texel direction d,

    L_n(d) = (n + 1) / (2 pi) * sum_texels H(w) * max(0, w . d)^n * dOmega

with dOmega = sin(theta) dtheta dphi per source texel. The (n + 1) / (2 pi)
factor makes a constant map a fixed point of the convolution for every n
(the continuous lobe integrates to 2 pi / (n + 1)). The first exponent is
always 1, the diffuse cosine lobe; shading then reduces to bilinear lookups
into the stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .envmap import HdrEnvironmentMap, sample_bilinear

DEFAULT_EXPONENTS = (1.0, 8.0, 32.0, 128.0)
DEFAULT_LIGHTMAP_WIDTH = 64
DEFAULT_LIGHTMAP_HEIGHT = 32

_CHUNK = 128  # output texels per matmul chunk, bounds peak memory


@dataclass(frozen=True)
class ExponentSet:
    """Strictly increasing Phong exponents; the first is always 1 (diffuse)."""

    exponents: tuple[float, ...]

    def __post_init__(self):
        exps = tuple(float(n) for n in self.exponents)
        if len(exps) == 0:
            raise ValueError("empty exponent list")
        if exps[0] != 1.0:
            raise ValueError(f"first exponent must be 1 (diffuse lobe), got {exps[0]}")
        if any(n < 1.0 for n in exps):
            raise ValueError("all exponents must be >= 1")
        if any(b <= a for a, b in zip(exps, exps[1:])):
            raise ValueError(f"exponents must be strictly increasing, got {exps}")
        object.__setattr__(self, "exponents", exps)

    @classmethod
    def default(cls) -> "ExponentSet":
        return cls(DEFAULT_EXPONENTS)

    def __len__(self) -> int:
        return len(self.exponents)

    def __iter__(self):
        return iter(self.exponents)

    def __getitem__(self, i):
        return self.exponents[i]


@dataclass(frozen=True)
class LightMapStack:
    """One preconvolved light map per exponent; index 0 is the diffuse map."""

    exponents: ExponentSet
    maps: tuple[HdrEnvironmentMap, ...]

    def __post_init__(self):
        if len(self.maps) != len(self.exponents):
            raise ValueError(
                f"{len(self.exponents)} exponents but {len(self.maps)} maps"
            )
        object.__setattr__(self, "maps", tuple(self.maps))

    def __len__(self) -> int:
        return len(self.maps)

    def sample(self, index: int, directions: np.ndarray) -> np.ndarray:
        return sample_bilinear(self.maps[index], directions)


def texel_directions(width: int, height: int) -> np.ndarray:
    """Unit directions at texel centers, shape (height, width, 3)."""
    u = (np.arange(width, dtype=np.float64) + 0.5) / width
    v = (np.arange(height, dtype=np.float64) + 0.5) / height
    phi = u * (2.0 * np.pi) - np.pi
    theta = v * np.pi
    ph, th = np.meshgrid(phi, theta)
    st = np.sin(th)
    return np.stack([np.sin(ph) * st, np.cos(th), -np.cos(ph) * st], axis=-1)


def texel_solid_angles(width: int, height: int) -> np.ndarray:
    """Per-texel solid angle sin(theta) dtheta dphi, shape (height, width)."""
    v = (np.arange(height, dtype=np.float64) + 0.5) / height
    st = np.sin(v * np.pi)
    row = st * (np.pi / height) * (2.0 * np.pi / width)
    return np.repeat(row[:, None], width, axis=1)


def _lobe_pow(base: np.ndarray, n: float) -> np.ndarray:
    # integer exponents via squaring; ~5x faster than np.power for n = 128
    if float(n).is_integer():
        e = int(n)
        result = None
        b = base
        while e:
            if e & 1:
                result = b.copy() if result is None else result * b
            e >>= 1
            if e:
                b = b * b
        return result
    return np.power(base, n)


def preconvolve(
    envmap: HdrEnvironmentMap,
    n: float,
    out_width: int = DEFAULT_LIGHTMAP_WIDTH,
    out_height: int = DEFAULT_LIGHTMAP_HEIGHT,
) -> HdrEnvironmentMap:
    """Convolve the map with the exponent-n cosine lobe onto an out_width x out_height grid."""
    if n < 1.0:
        raise ValueError(f"Phong exponent must be >= 1, got {n}")
    if out_width < 4 or out_height < 2:
        raise ValueError(f"output dimensions must be at least 4x2, got {out_width}x{out_height}")
    if out_width != 2 * out_height:
        raise ValueError(f"output must be equirectangular (width = 2 x height), got {out_width}x{out_height}")

    h, w = envmap.height, envmap.width
    src_dirs = texel_directions(w, h).reshape(-1, 3)
    weighted = envmap.pixels.reshape(-1, 3).astype(np.float64)
    weighted = weighted * texel_solid_angles(w, h).reshape(-1, 1)

    out_dirs = texel_directions(out_width, out_height).reshape(-1, 3)
    out = np.empty((out_dirs.shape[0], 3))
    scale = (n + 1.0) / (2.0 * np.pi)
    src_t = src_dirs.T
    for i0 in range(0, out_dirs.shape[0], _CHUNK):
        cosg = np.clip(out_dirs[i0 : i0 + _CHUNK] @ src_t, 0.0, None)
        out[i0 : i0 + _CHUNK] = scale * (_lobe_pow(cosg, n) @ weighted)
    return HdrEnvironmentMap(out.reshape(out_height, out_width, 3).astype(np.float32))


def build_stack(
    envmap: HdrEnvironmentMap,
    exponents: ExponentSet | None = None,
    out_width: int = DEFAULT_LIGHTMAP_WIDTH,
    out_height: int = DEFAULT_LIGHTMAP_HEIGHT,
) -> LightMapStack:
    """Preconvolve one light map per exponent; index 0 is the diffuse map."""
    if exponents is None:
        exponents = ExponentSet.default()
    maps = tuple(preconvolve(envmap, n, out_width, out_height) for n in exponents)
    return LightMapStack(exponents, maps)


def oracle_shade(envmap: HdrEnvironmentMap, direction: np.ndarray, n: float) -> np.ndarray:
    """Ground-truth lobe response at one direction by direct summation.

    Sums over every source texel with no output-grid discretization or
    interpolation; the reference against which preconvolve is validated.
    """
    if n < 1.0:
        raise ValueError(f"Phong exponent must be >= 1, got {n}")
    d = np.asarray(direction, dtype=np.float64)
    h, w = envmap.height, envmap.width
    cosg = np.clip(texel_directions(w, h) @ d, 0.0, None)
    lobe = np.power(cosg, float(n)) * texel_solid_angles(w, h)
    vals = (envmap.pixels.astype(np.float64) * lobe[..., None]).sum(axis=(0, 1))
    return (n + 1.0) / (2.0 * np.pi) * vals
