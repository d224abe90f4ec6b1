"""Binary tissue volumes and per-point / per-probe feature extraction.

A volume is an axis-aligned voxel grid of binary occupancy (1 = bone,
0 = soft). Surface points get a 128-sample binary depth profile plus the
sampled z positions (flattened to the 256-wide per-point feature vector);
probe lines get 128 samples of occupancy plus 3D coordinates (flattened to
the 512-wide condition vector, layout [binary; x; y; z]).

Occupancy lookups use the containing voxel (nearest center); binary labels
are never interpolated.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateProbeError,
    FormatError,
    OutOfBoundsError,
    VersionError,
)

__all__ = [
    "TissueVolume",
    "TissueProfile",
    "ProbeCondition",
    "HeightField",
    "build_heightfield_volume",
    "tissue_profile_at",
    "condition_features",
    "point_features",
    "rotate_volume_quarter_turns",
    "write_tvol",
    "read_tvol",
    "PROFILE_SAMPLES",
    "COND_WIDTH",
]

PROFILE_SAMPLES = 128
COND_WIDTH = 4 * PROFILE_SAMPLES

TVOL_MAGIC = b"TVOL"
TVOL_VERSION = 1


@dataclass
class TissueVolume:
    """Axis-aligned binary voxel grid with physical spacing and origin (mm)."""

    occupancy: np.ndarray           # uint8 [nx, ny, nz], 1 = bone
    spacing: np.ndarray             # mm per voxel per axis
    origin: np.ndarray              # mm position of the low corner

    def __post_init__(self):
        self.occupancy = np.ascontiguousarray(self.occupancy, dtype=np.uint8)
        if self.occupancy.ndim != 3:
            raise ConfigError(f"occupancy must be 3-D, got {self.occupancy.ndim}-D")
        if any(d < 2 for d in self.occupancy.shape):
            raise ConfigError(f"volume dims must be >= 2, got {self.occupancy.shape}")
        if not np.all((self.occupancy == 0) | (self.occupancy == 1)):
            raise ConfigError("occupancy must be strictly binary")
        self.spacing = np.asarray(self.spacing, dtype=np.float64)
        self.origin = np.asarray(self.origin, dtype=np.float64)
        if self.spacing.shape != (3,) or self.origin.shape != (3,):
            raise ConfigError("spacing and origin must be length-3")
        if np.any(self.spacing <= 0):
            raise ConfigError("spacing must be positive")

    @property
    def dims(self) -> tuple:
        return self.occupancy.shape

    @property
    def extent(self) -> np.ndarray:
        return self.spacing * np.asarray(self.dims)

    @property
    def top_z(self) -> float:
        return float(self.origin[2] + self.extent[2])

    def contains_footprint(self, xy: np.ndarray, tol: float = 1e-6) -> np.ndarray:
        # small tolerance: rotating boundary points yields fp noise like -1e-14
        xy = np.atleast_2d(xy)
        lo = self.origin[:2] - tol
        hi = self.origin[:2] + self.extent[:2] + tol
        return np.all((xy >= lo) & (xy <= hi), axis=1)

    def occupancy_at(self, points: np.ndarray) -> np.ndarray:
        """Binary occupancy of the voxel containing each point (clipped)."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        idx = np.floor((pts - self.origin) / self.spacing).astype(np.int64)
        dims = np.asarray(self.dims)
        idx = np.clip(idx, 0, dims - 1)
        return self.occupancy[idx[:, 0], idx[:, 1], idx[:, 2]]

    def bone_height_at(self, xy: np.ndarray) -> np.ndarray:
        """Height of the highest bone voxel (top face) under each (x, y); 0 if soft."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        idx = np.floor((xy - self.origin[:2]) / self.spacing[:2]).astype(np.int64)
        idx = np.clip(idx, 0, np.asarray(self.dims[:2]) - 1)
        cols = self.occupancy[idx[:, 0], idx[:, 1], :]
        any_bone = cols.any(axis=1)
        top = np.where(any_bone, cols.shape[1] - np.argmax(cols[:, ::-1], axis=1), 0)
        return self.origin[2] + top * self.spacing[2]


@dataclass
class TissueProfile:
    """128 binary samples under a surface point, top to bottom, with z positions."""

    binary: np.ndarray
    z_positions: np.ndarray

    def __post_init__(self):
        self.binary = np.asarray(self.binary, dtype=np.float64)
        self.z_positions = np.asarray(self.z_positions, dtype=np.float64)
        if self.binary.shape != (PROFILE_SAMPLES,):
            raise ConfigError(f"profile needs {PROFILE_SAMPLES} binaries")
        if self.z_positions.shape != (PROFILE_SAMPLES,):
            raise ConfigError(f"profile needs {PROFILE_SAMPLES} z positions")
        dz = np.diff(self.z_positions)
        if not (np.all(dz < 0) or np.all(dz > 0)):
            raise ConfigError("profile z positions must be strictly monotone")

    def flatten(self) -> np.ndarray:
        """Fixed [binary; z] order, the 256-wide per-point feature vector."""
        return np.concatenate([self.binary, self.z_positions])


@dataclass
class ProbeCondition:
    """Probe segment (contact point to tip end) plus its 512-wide features."""

    c_s: np.ndarray
    c_e: np.ndarray
    c_h: np.ndarray

    def __post_init__(self):
        self.c_s = np.asarray(self.c_s, dtype=np.float64).reshape(3)
        self.c_e = np.asarray(self.c_e, dtype=np.float64).reshape(3)
        self.c_h = np.asarray(self.c_h, dtype=np.float64).reshape(COND_WIDTH)
        if not np.linalg.norm(self.c_e - self.c_s) > 0:
            raise DegenerateProbeError("probe segment has zero length")

    @property
    def depth(self) -> float:
        return float(np.linalg.norm(self.c_e - self.c_s))

    @property
    def direction(self) -> np.ndarray:
        d = self.c_e - self.c_s
        return d / np.linalg.norm(d)


@dataclass
class HeightField:
    """Band-limited analytic bone height h(x, y) over a rectangular footprint.

    h = mid + span * sum_q a_q cos(2 pi (fx_q x + fy_q y) / period + phase_q),
    with coefficients normalized so h stays inside [mid-span, mid+span].
    """

    amplitudes: np.ndarray
    freq_x: np.ndarray
    freq_y: np.ndarray
    phases: np.ndarray
    mid: float = 15.0
    span: float = 10.0
    period: float = 100.0

    def __post_init__(self):
        self.amplitudes = np.asarray(self.amplitudes, dtype=np.float64)
        self.freq_x = np.asarray(self.freq_x, dtype=np.float64)
        self.freq_y = np.asarray(self.freq_y, dtype=np.float64)
        self.phases = np.asarray(self.phases, dtype=np.float64)
        total = np.sum(np.abs(self.amplitudes))
        self._norm = total if total > 0 else 1.0

    @classmethod
    def random(cls, rng: np.random.Generator, terms: int = 6,
               low: float = 5.0, high: float = 25.0) -> "HeightField":
        return cls(
            amplitudes=rng.uniform(0.3, 1.0, size=terms),
            freq_x=rng.integers(0, 3, size=terms).astype(float),
            freq_y=rng.integers(0, 3, size=terms).astype(float),
            phases=rng.uniform(0, 2 * np.pi, size=terms),
            mid=(low + high) / 2.0,
            span=(high - low) / 2.0,
        )

    @classmethod
    def constant(cls, height: float) -> "HeightField":
        return cls(amplitudes=np.zeros(1), freq_x=np.zeros(1), freq_y=np.zeros(1),
                   phases=np.zeros(1), mid=height, span=0.0)

    def __call__(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        s = np.zeros(np.broadcast(x, y).shape)
        for a, fx, fy, ph in zip(self.amplitudes, self.freq_x, self.freq_y,
                                 self.phases):
            s = s + a * np.cos(2 * np.pi * (fx * x + fy * y) / self.period + ph)
        return self.mid + self.span * s / self._norm

    def to_dict(self) -> dict:
        return {
            "amplitudes": self.amplitudes.tolist(),
            "freq_x": self.freq_x.tolist(),
            "freq_y": self.freq_y.tolist(),
            "phases": self.phases.tolist(),
            "mid": self.mid,
            "span": self.span,
            "period": self.period,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeightField":
        return cls(amplitudes=d["amplitudes"], freq_x=d["freq_x"],
                   freq_y=d["freq_y"], phases=d["phases"], mid=d["mid"],
                   span=d["span"], period=d["period"])


def build_heightfield_volume(bone_height, dims=(128, 128, 64),
                             spacing=(0.78125, 0.78125, 0.5),
                             origin=(0.0, 0.0, 0.0)) -> TissueVolume:
    """Voxelize a bone heightfield: voxel is bone iff its center lies below it."""
    nx, ny, nz = dims
    spacing = np.asarray(spacing, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    cx = origin[0] + (np.arange(nx) + 0.5) * spacing[0]
    cy = origin[1] + (np.arange(ny) + 0.5) * spacing[1]
    cz = origin[2] + (np.arange(nz) + 0.5) * spacing[2]
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    if callable(bone_height):
        h = np.asarray(bone_height(gx.reshape(-1), gy.reshape(-1)))
        h = h.reshape(nx, ny)
    else:
        h = np.full((nx, ny), float(bone_height))
    occ = (cz[None, None, :] < h[:, :, None]).astype(np.uint8)
    return TissueVolume(occupancy=occ, spacing=spacing, origin=origin)


def _check_footprint(volume: TissueVolume, xy: np.ndarray, what: str) -> None:
    ok = volume.contains_footprint(xy)
    if not np.all(ok):
        bad = np.atleast_2d(xy)[~ok][0]
        raise OutOfBoundsError(f"{what} at (x={bad[0]:.3f}, y={bad[1]:.3f}) "
                               f"outside volume footprint")


def tissue_profile_at(volume: TissueVolume, surface_point) -> TissueProfile:
    """128 occupancy samples from the point's z down to the volume floor."""
    p = np.asarray(surface_point, dtype=np.float64).reshape(3)
    _check_footprint(volume, p[:2], "surface point")
    z = np.linspace(p[2], volume.origin[2], PROFILE_SAMPLES)
    pts = np.column_stack([np.full(PROFILE_SAMPLES, p[0]),
                           np.full(PROFILE_SAMPLES, p[1]), z])
    return TissueProfile(binary=volume.occupancy_at(pts).astype(np.float64),
                         z_positions=z)


def condition_features(volume: TissueVolume, c_s, c_e) -> np.ndarray:
    """128 equally spaced samples on [C_s, C_e]: occupancy + coordinates.

    Returns the flattened [binary(128); x(128); y(128); z(128)] vector.
    """
    c_s = np.asarray(c_s, dtype=np.float64).reshape(3)
    c_e = np.asarray(c_e, dtype=np.float64).reshape(3)
    if not np.linalg.norm(c_e - c_s) > 0:
        raise DegenerateProbeError("probe segment has zero length")
    _check_footprint(volume, np.stack([c_s[:2], c_e[:2]]), "probe endpoint")
    t = np.linspace(0.0, 1.0, PROFILE_SAMPLES)[:, None]
    pts = c_s[None, :] + t * (c_e - c_s)[None, :]
    binary = volume.occupancy_at(pts).astype(np.float64)
    return np.concatenate([binary, pts[:, 0], pts[:, 1], pts[:, 2]])


def point_features(volume: TissueVolume, positions: np.ndarray) -> np.ndarray:
    """Per-point flattened tissue profiles: [N, 256] in [binary; z] order."""
    positions = np.asarray(positions, dtype=np.float64)
    _check_footprint(volume, positions[:, :2], "surface point")
    n = positions.shape[0]
    # vectorized version of tissue_profile_at over all points
    z = np.linspace(positions[:, 2], np.full(n, volume.origin[2]),
                    PROFILE_SAMPLES, axis=1)
    flat = np.empty((n, 2 * PROFILE_SAMPLES))
    pts = np.empty((n * PROFILE_SAMPLES, 3))
    pts[:, 0] = np.repeat(positions[:, 0], PROFILE_SAMPLES)
    pts[:, 1] = np.repeat(positions[:, 1], PROFILE_SAMPLES)
    pts[:, 2] = z.reshape(-1)
    occ = volume.occupancy_at(pts).reshape(n, PROFILE_SAMPLES)
    flat[:, :PROFILE_SAMPLES] = occ
    flat[:, PROFILE_SAMPLES:] = z
    return flat


def rotate_volume_quarter_turns(volume: TissueVolume, turns: int) -> TissueVolume:
    """Rotate occupancy by 90-degree increments about the footprint center.

    Requires a square footprint (nx == ny, equal xy spacing) so voxel centers
    map exactly onto voxel centers. Positive turns are counterclockwise,
    matching rotate_z's positive angles.
    """
    turns = turns % 4
    nx, ny, _ = volume.dims
    if nx != ny or volume.spacing[0] != volume.spacing[1]:
        raise ConfigError("quarter-turn rotation needs a square xy footprint")
    # rot90 over axes (0, 1) realizes new[a, b] = old[b, n-1-a], the +90 CCW
    # map on voxel centers about the footprint middle
    occ = np.rot90(volume.occupancy, k=turns, axes=(0, 1))
    return TissueVolume(occupancy=np.ascontiguousarray(occ),
                        spacing=volume.spacing.copy(),
                        origin=volume.origin.copy())


# --------------------------------------------------------------------- #
# TVOL1 file format


def write_tvol(volume: TissueVolume, path) -> None:
    """Write the TVOL1 format: magic, version, dims u32, spacing+origin f32,
    occupancy bytes in x-fastest order."""
    buf = io.BytesIO()
    buf.write(TVOL_MAGIC)
    buf.write(struct.pack("<B", TVOL_VERSION))
    buf.write(struct.pack("<3I", *volume.dims))
    buf.write(struct.pack("<6f", *volume.spacing, *volume.origin))
    buf.write(volume.occupancy.ravel(order="F").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_tvol(path) -> TissueVolume:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != TVOL_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {TVOL_MAGIC!r}")
    (version,) = struct.unpack_from("<B", raw, 4)
    if version != TVOL_VERSION:
        raise VersionError(f"unsupported TVOL version {version}")
    nx, ny, nz = struct.unpack_from("<3I", raw, 5)
    vals = struct.unpack_from("<6f", raw, 17)
    payload = raw[17 + 24:]
    expected = nx * ny * nz
    if len(payload) != expected:
        raise FormatError(f"occupancy payload {len(payload)} bytes, "
                          f"expected {expected}")
    occ = np.frombuffer(payload, dtype=np.uint8).reshape((nx, ny, nz), order="F")
    return TissueVolume(occupancy=occ.copy(), spacing=np.array(vals[:3]),
                        origin=np.array(vals[3:]))
