"""Intrinsic fields: per-point density, albedo, specular blend weights, feature.

A field maps 3D position to an IntrinsicSample; normals come from the density
gradient as n = -grad(sigma) / |grad(sigma)| (density grows inward, so the
outward normal opposes the gradient). Points where the gradient magnitude
falls below GRADIENT_FLOOR have no defined normal and contribute nothing to
shading. Analytic fields use closed-form gradients; the MLP field uses
central differences.

Fields are immutable after construction and safe to evaluate concurrently.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field as dc_field

import numpy as np

GRADIENT_FLOOR = 1e-6
DEFAULT_GRADIENT_STEP = 1e-3
DEFAULT_ENCODING_LEVELS = 10
DENSITY_TAP_LAYER = 4  # trunk layer whose output feeds the density head
LEAKY_SLOPE = 0.2
WEIGHT_CAP = 0.5  # cap on the softmax'd specular blend weights, keeps sum <= 1

_VXW_MAGIC = b"VXW1"


def positional_encoding(x: np.ndarray, levels: int = DEFAULT_ENCODING_LEVELS) -> np.ndarray:
    """Fourier features: per level k, sin(2^k pi x) then cos(2^k pi x) over the
    three axes; output length 6 * levels along the last axis."""
    if levels < 1:
        raise ValueError(f"encoding levels must be >= 1, got {levels}")
    x = np.asarray(x, dtype=np.float64)
    freqs = np.pi * (2.0 ** np.arange(levels))
    phases = x[..., None, :] * freqs[:, None]  # (..., levels, 3)
    enc = np.concatenate([np.sin(phases), np.cos(phases)], axis=-1)  # (..., levels, 6)
    return enc.reshape(*x.shape[:-1], 6 * levels)


@dataclass(frozen=True)
class IntrinsicSample:
    """Field output at one point."""

    sigma: float
    albedo: np.ndarray  # (3,) in [0, 1]
    weights: np.ndarray  # (N,) >= 0, sum <= 1
    feature: np.ndarray  # (feature_dim,)


@dataclass(frozen=True)
class FieldBatch:
    """Structure-of-arrays result of evaluating a field at M points."""

    sigma: np.ndarray  # (M,)
    albedo: np.ndarray  # (M, 3)
    weights: np.ndarray  # (M, N)
    feature: np.ndarray  # (M, feature_dim)


class IntrinsicField(ABC):
    """Position -> (density, albedo, blend weights, feature) with gradient normals."""

    @property
    @abstractmethod
    def exponent_count(self) -> int: ...

    @property
    @abstractmethod
    def feature_dim(self) -> int: ...

    @abstractmethod
    def sample_many(self, points: np.ndarray) -> FieldBatch:
        """Evaluate at finite points of shape (M, 3)."""

    def sigma_many(self, points: np.ndarray) -> np.ndarray:
        """Density only; overridden where that is cheaper than a full sample."""
        return self.sample_many(points).sigma

    def normal_many(
        self, points: np.ndarray, step: float = DEFAULT_GRADIENT_STEP
    ) -> tuple[np.ndarray, np.ndarray]:
        """Normals at (M, 3) points via central differences of the density.

        Returns (normals, valid); rows with gradient magnitude below
        GRADIENT_FLOOR are invalid and zeroed.
        """
        if step <= 0:
            raise ValueError(f"gradient step must be positive, got {step}")
        pts = np.asarray(points, dtype=np.float64)
        m = pts.shape[0]
        probes = np.repeat(pts[:, None, :], 6, axis=1)
        for axis in range(3):
            probes[:, 2 * axis, axis] += step
            probes[:, 2 * axis + 1, axis] -= step
        sig = self.sigma_many(probes.reshape(-1, 3)).reshape(m, 6)
        grad = (sig[:, 0::2] - sig[:, 1::2]) / (2.0 * step)
        return _normals_from_gradient(grad)

    def sample(self, x: np.ndarray) -> IntrinsicSample:
        """Evaluate at a single point; rejects non-finite input."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (3,) or not np.isfinite(x).all():
            raise ValueError(f"sample point must be a finite 3-vector, got {x!r}")
        b = self.sample_many(x[None, :])
        return IntrinsicSample(float(b.sigma[0]), b.albedo[0], b.weights[0], b.feature[0])

    def normal_at(self, x: np.ndarray, step: float = DEFAULT_GRADIENT_STEP):
        """Unit outward normal at x, or None where the density has no gradient."""
        normals, valid = self.normal_many(np.asarray(x, dtype=np.float64)[None, :], step)
        return normals[0] if valid[0] else None


def _normals_from_gradient(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mag = np.linalg.norm(grad, axis=-1)
    valid = mag >= GRADIENT_FLOOR
    safe = np.where(valid, mag, 1.0)
    normals = -grad / safe[:, None]
    normals[~valid] = 0.0
    return normals, valid


def _check_albedo_weights(albedo: np.ndarray, weights: np.ndarray) -> None:
    if albedo.shape != (3,) or (albedo < 0).any() or (albedo > 1).any():
        raise ValueError(f"albedo must be three channels in [0, 1], got {albedo!r}")
    if weights.ndim != 1 or (weights < 0).any():
        raise ValueError("blend weights must be non-negative")
    if weights.sum() > 1.0 + 1e-9:
        raise ValueError(f"blend weights must sum to at most 1, got {weights.sum()}")


@dataclass(frozen=True)
class SphereField(IntrinsicField):
    """Soft solid sphere: sigma(x) = density_scale * sigmoid(sharpness * (R - |x - c|)).

    Smooth with an analytic gradient; constant albedo, blend weights and
    feature. The reference analytic test case for the whole engine.
    """

    center: np.ndarray = (0.0, 0.0, 0.0)
    radius: float = 0.5
    sharpness: float = 40.0
    density_scale: float = 12.0
    albedo: np.ndarray = (0.8, 0.2, 0.2)
    weights: np.ndarray = (0.25, 0.15, 0.07, 0.03)
    feature: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        if self.radius <= 0 or self.sharpness <= 0 or self.density_scale <= 0:
            raise ValueError("radius, sharpness and density_scale must be positive")
        center = np.asarray(self.center, dtype=np.float64)
        albedo = np.asarray(self.albedo, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64)
        _check_albedo_weights(albedo, weights)
        feature = self.feature
        feature = np.zeros(16) if feature is None else np.asarray(feature, dtype=np.float64)
        if not np.isfinite(feature).all():
            raise ValueError("feature vector must be finite")
        for name, arr in (("center", center), ("albedo", albedo),
                          ("weights", weights), ("feature", feature)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def exponent_count(self) -> int:
        return len(self.weights)

    @property
    def feature_dim(self) -> int:
        return len(self.feature)

    def sigma_many(self, points: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(np.asarray(points, dtype=np.float64) - self.center, axis=-1)
        return self.density_scale * _sigmoid(self.sharpness * (self.radius - r))

    def sample_many(self, points: np.ndarray) -> FieldBatch:
        m = points.shape[0]
        return FieldBatch(
            sigma=self.sigma_many(points),
            albedo=np.broadcast_to(self.albedo, (m, 3)),
            weights=np.broadcast_to(self.weights, (m, len(self.weights))),
            feature=np.broadcast_to(self.feature, (m, len(self.feature))),
        )

    def gradient_many(self, points: np.ndarray) -> np.ndarray:
        """Closed-form density gradient at (M, 3) points."""
        delta = np.asarray(points, dtype=np.float64) - self.center
        r = np.linalg.norm(delta, axis=-1)
        s = _sigmoid(self.sharpness * (self.radius - r))
        mag = self.density_scale * self.sharpness * s * (1.0 - s)
        safe_r = np.where(r > 1e-12, r, 1.0)
        grad = -(mag / safe_r)[:, None] * delta
        grad[r <= 1e-12] = 0.0  # gradient vanishes by symmetry at the center
        return grad

    def normal_many(self, points, step: float = DEFAULT_GRADIENT_STEP):
        return _normals_from_gradient(self.gradient_many(points))


@dataclass(frozen=True)
class BlendField(IntrinsicField):
    """Union of soft spheres; attributes are density-weighted blends."""

    components: tuple[SphereField, ...]

    def __post_init__(self):
        comps = tuple(self.components)
        if not comps:
            raise ValueError("blend field needs at least one component")
        n = comps[0].exponent_count
        fd = comps[0].feature_dim
        if any(c.exponent_count != n or c.feature_dim != fd for c in comps):
            raise ValueError("blend components must share weight and feature dimensions")
        object.__setattr__(self, "components", comps)

    @property
    def exponent_count(self) -> int:
        return self.components[0].exponent_count

    @property
    def feature_dim(self) -> int:
        return self.components[0].feature_dim

    def sigma_many(self, points: np.ndarray) -> np.ndarray:
        return sum(c.sigma_many(points) for c in self.components)

    def sample_many(self, points: np.ndarray) -> FieldBatch:
        m = points.shape[0]
        sigmas = np.stack([c.sigma_many(points) for c in self.components])  # (K, M)
        total = sigmas.sum(axis=0)
        # where all densities vanish, fall back to the component mean
        k = len(self.components)
        share = np.where(total[None, :] > 1e-20, sigmas / np.maximum(total, 1e-20), 1.0 / k)

        def blend(attr_per_comp):
            stacked = np.stack(attr_per_comp)  # (K, dim)
            return share.T @ stacked

        return FieldBatch(
            sigma=total,
            albedo=blend([c.albedo for c in self.components]),
            weights=blend([c.weights for c in self.components]),
            feature=blend([c.feature for c in self.components]),
        )

    def normal_many(self, points, step: float = DEFAULT_GRADIENT_STEP):
        grad = sum(c.gradient_many(points) for c in self.components)
        return _normals_from_gradient(grad)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def _leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x > 0, x, LEAKY_SLOPE * x)


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class MlpWeights:
    """Weights for the intrinsic-field MLP.

    trunk: affine layers (out, in) applied with leaky-ReLU; the first expects
    the positional encoding. density taps the output of trunk layer
    DENSITY_TAP_LAYER (1 output); intrinsic_hidden + intrinsic_out form the
    two-layer head on the final trunk output producing 3 albedo + N weight
    channels; feature is a linear projection of the final trunk output.
    """

    trunk: tuple[tuple[np.ndarray, np.ndarray], ...]
    density: tuple[np.ndarray, np.ndarray]
    intrinsic_hidden: tuple[np.ndarray, np.ndarray]
    intrinsic_out: tuple[np.ndarray, np.ndarray]
    feature: tuple[np.ndarray, np.ndarray]

    def __post_init__(self):
        layers = self._named_layers()
        for name, (w, b) in layers:
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ValueError(f"{name}: matrix {w.shape} and bias {b.shape} are inconsistent")
            if not (np.isfinite(w).all() and np.isfinite(b).all()):
                raise ValueError(f"{name}: non-finite values")
        if len(self.trunk) < DENSITY_TAP_LAYER:
            raise ValueError(f"trunk needs at least {DENSITY_TAP_LAYER} layers, got {len(self.trunk)}")
        if self.trunk[0][0].shape[1] % 6 != 0:
            raise ValueError(
                f"trunk layer 1 input ({self.trunk[0][0].shape[1]}) is not 6 x encoding levels"
            )
        width = self.trunk[0][0].shape[0]
        prev = width
        for i, (w, _) in enumerate(self.trunk[1:], start=2):
            if w.shape[1] != prev:
                raise ValueError(f"trunk layer {i} expects input {prev}, matrix is {w.shape}")
            prev = w.shape[0]
        tap = self.trunk[DENSITY_TAP_LAYER - 1][0].shape[0]
        if self.density[0].shape != (1, tap):
            raise ValueError(f"density head must be (1, {tap}), got {self.density[0].shape}")
        final = self.trunk[-1][0].shape[0]
        if self.intrinsic_hidden[0].shape[1] != final:
            raise ValueError(
                f"intrinsic hidden layer expects input {final}, matrix is {self.intrinsic_hidden[0].shape}"
            )
        if self.intrinsic_out[0].shape[1] != self.intrinsic_hidden[0].shape[0]:
            raise ValueError(
                f"intrinsic output layer expects input {self.intrinsic_hidden[0].shape[0]}, "
                f"matrix is {self.intrinsic_out[0].shape}"
            )
        if self.intrinsic_out[0].shape[0] < 4:
            raise ValueError("intrinsic output must have at least 3 albedo + 1 weight channels")
        if self.feature[0].shape[1] != final:
            raise ValueError(
                f"feature projection expects input {final}, matrix is {self.feature[0].shape}"
            )

    def _named_layers(self):
        named = [(f"trunk layer {i + 1}", wb) for i, wb in enumerate(self.trunk)]
        named += [
            ("density head", self.density),
            ("intrinsic hidden layer", self.intrinsic_hidden),
            ("intrinsic output layer", self.intrinsic_out),
            ("feature projection", self.feature),
        ]
        return named

    @property
    def encoding_levels(self) -> int:
        return self.trunk[0][0].shape[1] // 6

    @property
    def n_lobes(self) -> int:
        return self.intrinsic_out[0].shape[0] - 3

    @property
    def feature_dim(self) -> int:
        return self.feature[0].shape[0]


def mlp_forward(weights: MlpWeights, encoded: np.ndarray):
    """Raw head outputs (sigma_raw, albedo_raw, weights_raw, feature) for
    encoded inputs of shape (M, 6L); heads are pre-activation."""
    h = np.asarray(encoded, dtype=np.float32)
    if h.ndim == 1:
        h = h[None, :]
    expect = weights.trunk[0][0].shape[1]
    if h.shape[-1] != expect:
        raise ValueError(f"trunk layer 1 expects input of length {expect}, got {h.shape[-1]}")
    sigma_raw = None
    for i, (w, b) in enumerate(weights.trunk, start=1):
        h = _leaky_relu(h @ w.T + b)
        if i == DENSITY_TAP_LAYER:
            wd, bd = weights.density
            sigma_raw = (h @ wd.T + bd)[:, 0]
    wh, bh = weights.intrinsic_hidden
    wo, bo = weights.intrinsic_out
    hidden = _leaky_relu(h @ wh.T + bh)
    intr = hidden @ wo.T + bo
    wf, bf = weights.feature
    feat = h @ wf.T + bf
    return sigma_raw, intr[:, :3], intr[:, 3:], feat


class MlpField(IntrinsicField):
    """Field backed by MLP weights; sigma via softplus, albedo via sigmoid,
    blend weights via WEIGHT_CAP * softmax. Normals use central differences."""

    def __init__(self, weights: MlpWeights):
        self._weights = weights
        self._levels = weights.encoding_levels

    @property
    def weights(self) -> MlpWeights:
        return self._weights

    @property
    def exponent_count(self) -> int:
        return self._weights.n_lobes

    @property
    def feature_dim(self) -> int:
        return self._weights.feature_dim

    def sample_many(self, points: np.ndarray) -> FieldBatch:
        enc = positional_encoding(points, self._levels).astype(np.float32)
        sigma_raw, albedo_raw, weights_raw, feat = mlp_forward(self._weights, enc)
        return FieldBatch(
            sigma=_softplus(sigma_raw.astype(np.float64)),
            albedo=_sigmoid(albedo_raw.astype(np.float64)),
            weights=WEIGHT_CAP * _softmax(weights_raw.astype(np.float64)),
            feature=feat.astype(np.float64),
        )

    def sigma_many(self, points: np.ndarray) -> np.ndarray:
        # density needs only the trunk up to the tap layer
        enc = positional_encoding(points, self._levels).astype(np.float32)
        h = enc
        for w, b in self._weights.trunk[:DENSITY_TAP_LAYER]:
            h = _leaky_relu(h @ w.T + b)
        wd, bd = self._weights.density
        raw = (h @ wd.T + bd)[:, 0]
        return _softplus(raw.astype(np.float64))


def save_mlp_weights(weights: MlpWeights) -> bytes:
    """Serialize to the VXW1 format: magic, uint32 layer count, then per layer
    uint32 rows, uint32 cols, row-major float32 matrix, float32 bias. All
    little-endian. Layer order: trunk, density, intrinsic hidden, intrinsic
    output, feature projection."""
    chunks = [_VXW_MAGIC, struct.pack("<I", len(weights.trunk) + 4)]
    for _, (w, b) in weights._named_layers():
        rows, cols = w.shape
        chunks.append(struct.pack("<II", rows, cols))
        chunks.append(np.ascontiguousarray(w, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return b"".join(chunks)


def load_mlp_weights(data: bytes) -> MlpWeights:
    """Parse VXW1 bytes; the last four layers are the heads, the rest the trunk."""
    if data[:4] != _VXW_MAGIC:
        raise ValueError(f"not a VXW1 weight file (magic {data[:4]!r})")
    off = 4
    if len(data) < off + 4:
        raise ValueError("truncated VXW1 file: missing layer count")
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    if count < DENSITY_TAP_LAYER + 4:
        raise ValueError(f"VXW1 file has {count} layers; need at least {DENSITY_TAP_LAYER + 4}")
    layers = []
    for i in range(count):
        if len(data) < off + 8:
            raise ValueError(f"truncated VXW1 file in layer {i + 1} header")
        rows, cols = struct.unpack_from("<II", data, off)
        off += 8
        nbytes = 4 * rows * (cols + 1)
        if len(data) < off + nbytes:
            raise ValueError(
                f"truncated VXW1 file in layer {i + 1}: expected {nbytes} bytes, "
                f"got {len(data) - off}"
            )
        w = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=off).reshape(rows, cols)
        off += 4 * rows * cols
        b = np.frombuffer(data, dtype="<f4", count=rows, offset=off)
        off += 4 * rows
        layers.append((w.astype(np.float32), b.astype(np.float32)))
    if off != len(data):
        raise ValueError(f"VXW1 file has {len(data) - off} trailing bytes")
    return MlpWeights(
        trunk=tuple(layers[:-4]),
        density=layers[-4],
        intrinsic_hidden=layers[-3],
        intrinsic_out=layers[-2],
        feature=layers[-1],
    )


@dataclass(frozen=True)
class FieldSpec:
    """Declarative field description, shared with the scene JSON schema.

    variant selects the construction: "sphere" and "blend" take geometry and
    material parameters directly, "mlp" references a VXW1 weight file.
    """

    variant: str
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    sharpness: float = 40.0
    density_scale: float = 12.0
    albedo: tuple = (0.8, 0.2, 0.2)
    weights: tuple = (0.25, 0.15, 0.07, 0.03)
    feature_dim: int = 16
    feature: tuple | None = None
    components: tuple = ()  # blend: nested sphere FieldSpecs
    weights_path: str | None = None  # mlp
    encoding_levels: int = DEFAULT_ENCODING_LEVELS

    def __post_init__(self):
        if self.variant not in ("sphere", "blend", "mlp"):
            raise ValueError(f"unknown field variant {self.variant!r}")
        if self.variant == "mlp":
            if not self.weights_path:
                raise ValueError("mlp field requires weights_path")
            if self.encoding_levels < 1:
                raise ValueError("encoding_levels must be >= 1")
        if self.variant == "blend" and not self.components:
            raise ValueError("blend field requires at least one component")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")


def _sphere_from_spec(spec: FieldSpec) -> SphereField:
    feature = spec.feature if spec.feature is not None else np.zeros(spec.feature_dim)
    return SphereField(
        center=spec.center,
        radius=spec.radius,
        sharpness=spec.sharpness,
        density_scale=spec.density_scale,
        albedo=spec.albedo,
        weights=spec.weights,
        feature=feature,
    )


def build_field(spec: FieldSpec, base_dir=None) -> IntrinsicField:
    """Construct the field described by spec; mlp weight paths resolve
    relative to base_dir when given."""
    if spec.variant == "sphere":
        return _sphere_from_spec(spec)
    if spec.variant == "blend":
        return BlendField(tuple(_sphere_from_spec(c) for c in spec.components))
    path = spec.weights_path
    if base_dir is not None:
        import os

        path = os.path.join(base_dir, path) if not os.path.isabs(path) else path
    with open(path, "rb") as f:
        weights = load_mlp_weights(f.read())
    if weights.encoding_levels != spec.encoding_levels:
        raise ValueError(
            f"weight file encodes {weights.encoding_levels} levels, spec says {spec.encoding_levels}"
        )
    return MlpField(weights)


def generate_mlp_weights(
    seed: int,
    width: int = 256,
    trunk_layers: int = 6,
    feature_dim: int = 256,
    n_lobes: int = 4,
    levels: int = DEFAULT_ENCODING_LEVELS,
) -> MlpWeights:
    """Seeded Gaussian init (std 0.2 / sqrt(fan_in), zero biases); reproducible
    per seed for test fixtures."""
    if min(width, trunk_layers, feature_dim, n_lobes, levels) < 1:
        raise ValueError("all generator dimensions must be positive")
    if trunk_layers < DENSITY_TAP_LAYER:
        raise ValueError(f"trunk needs at least {DENSITY_TAP_LAYER} layers, got {trunk_layers}")
    rng = np.random.default_rng(seed)

    def layer(rows, cols):
        w = rng.standard_normal((rows, cols), dtype=np.float32) * np.float32(0.2 / np.sqrt(cols))
        return w, np.zeros(rows, dtype=np.float32)

    dims = [6 * levels] + [width] * trunk_layers
    trunk = tuple(layer(dims[i + 1], dims[i]) for i in range(trunk_layers))
    return MlpWeights(
        trunk=trunk,
        density=layer(1, width),
        intrinsic_hidden=layer(width, width),
        intrinsic_out=layer(3 + n_lobes, width),
        feature=layer(feature_dim, width),
    )
