"""Procedural indentation oracle and dataset generation/serialization.

The oracle is deliberately not a solver: it produces smooth, heterogeneity
aware ground truth that is cheap enough to regenerate deterministically.
A probe pressed to depth delta displaces each surface point along the probe
direction by a Gaussian falloff of its distance to the probe axis, clamped
so no point sinks below the local bone surface plus a safety margin. The
scalar contact force grows linearly with depth and inversely with the
remaining soft-tissue gap under the probe tip.

Trajectories of increasing depth are thinned with the force-increment
retention rule before becoming dataset samples.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    GenerationError,
    MonotonicityError,
    SchemaError,
    VersionError,
)
from .geometry import PointCloud, grid_surface, mean_nn_distance, subsample_named
from .phantom import (
    COND_WIDTH,
    HeightField,
    ProbeCondition,
    TissueVolume,
    build_heightfield_volume,
    condition_features,
    point_features,
)

__all__ = [
    "GeneratorConfig",
    "DeformationSample",
    "Dataset",
    "sample_probe",
    "oracle_deform",
    "retain_states",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "write_dataset_text",
    "dataset_stats",
]

DATASET_MAGIC = b"PCDS"
DATASET_VERSION = 1


@dataclass
class GeneratorConfig:
    """Knobs of the procedural oracle; all lengths mm, forces N."""

    max_depth: float = 30.0
    max_inclination: float = 41.0          # degrees from the inward normal
    force_increment: float = 0.1           # retention threshold
    kernel_sigma: float = 8.0              # Gaussian falloff of the poke
    soft_stiffness: float = 0.08           # N per mm of depth, far from bone
    stiffen_scale: float = 5.0             # mm; gap-dependent force boost
    min_gap: float = 0.5                   # mm; gap floor in the force law
    bone_margin: float = 0.5               # mm; clearance kept above bone
    boundary_margin: float = 12.0          # mm; probe sites keep off the rim
    depth_steps: int = 18                  # trajectory resolution to max_depth
    force_cap: float = 4.5                 # N; stop a trajectory beyond this
    sites: int = 64                        # probe locations per dataset
    grid_rows: int = 16
    grid_cols: int = 16
    subsample_count: int = 0               # 0 = probe the full grid
    surface_z: float = 32.0
    extent: tuple = (100.0, 100.0)
    volume_dims: tuple = (128, 128, 64)
    heightfield_terms: int = 6
    bone_low: float = 5.0
    bone_high: float = 25.0
    seed: int = 0

    def validate(self) -> None:
        positive = ["max_depth", "force_increment", "kernel_sigma",
                    "soft_stiffness", "stiffen_scale", "min_gap",
                    "bone_margin", "depth_steps", "force_cap", "sites",
                    "surface_z"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"generator.{name} must be positive")
        if not 0 <= self.max_inclination < 90:
            raise ConfigError("max_inclination must be in [0, 90) degrees")
        if self.boundary_margin < 0:
            raise ConfigError("boundary_margin must be >= 0")
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ConfigError("grid must be at least 2x2")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["extent"] = list(self.extent)
        d["volume_dims"] = list(self.volume_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "extent" in kwargs:
            kwargs["extent"] = tuple(kwargs["extent"])
        if "volume_dims" in kwargs:
            kwargs["volume_dims"] = tuple(kwargs["volume_dims"])
        return cls(**kwargs)


@dataclass
class DeformationSample:
    """One static configuration: rest cloud, probe, ground truth."""

    cloud: PointCloud
    probe: ProbeCondition
    displacement: np.ndarray   # [N, 3] mm
    force: float               # N
    location_id: int

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=np.float64)
        if self.displacement.shape != (len(self.cloud), 3):
            raise ConfigError(
                f"displacement shape {self.displacement.shape} != "
                f"({len(self.cloud)}, 3)"
            )
        if not np.all(np.isfinite(self.displacement)):
            raise ConfigError("displacement must be finite")
        if self.force < 0:
            raise ConfigError("force must be >= 0")

    @property
    def deformed(self) -> np.ndarray:
        return self.cloud.positions + self.displacement


@dataclass
class Dataset:
    """Samples plus the generator echo needed to rebuild the phantom."""

    samples: list
    generator: dict = field(default_factory=dict)
    dtype: str = "f4"

    def __len__(self):
        return len(self.samples)

    @property
    def n_points(self) -> int:
        return len(self.samples[0].cloud) if self.samples else 0

    def heightfield(self) -> HeightField:
        if "heightfield" not in self.generator:
            raise ConfigError("dataset carries no heightfield echo")
        return HeightField.from_dict(self.generator["heightfield"])

    def volume(self) -> TissueVolume:
        cfg = GeneratorConfig.from_dict(self.generator["config"])
        return _volume_for(cfg, self.heightfield())


def _volume_for(cfg: GeneratorConfig, hf: HeightField) -> TissueVolume:
    nx, ny, nz = cfg.volume_dims
    spacing = (cfg.extent[0] / nx, cfg.extent[1] / ny, cfg.surface_z / nz)
    return build_heightfield_volume(hf, dims=cfg.volume_dims, spacing=spacing)


# --------------------------------------------------------------------- #
# probe sampling


def _candidate_sites(surface: PointCloud, cfg: GeneratorConfig) -> np.ndarray:
    pos = surface.positions
    lo = np.array([cfg.boundary_margin, cfg.boundary_margin])
    hi = np.array(cfg.extent) - cfg.boundary_margin
    ok = np.all((pos[:, :2] >= lo) & (pos[:, :2] <= hi), axis=1)
    return np.flatnonzero(ok)


def _sample_direction(c_s: np.ndarray, cfg: GeneratorConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Inward direction within max_inclination of -z whose full-depth tip
    stays inside the footprint; rejection-sampled."""
    lo = np.zeros(2)
    hi = np.asarray(cfg.extent)
    for _ in range(256):
        theta = np.deg2rad(rng.uniform(0.0, cfg.max_inclination))
        azimuth = rng.uniform(0.0, 2.0 * np.pi)
        d = np.array([np.sin(theta) * np.cos(azimuth),
                      np.sin(theta) * np.sin(azimuth),
                      -np.cos(theta)])
        tip = c_s + cfg.max_depth * d
        if np.all(tip[:2] >= lo) and np.all(tip[:2] <= hi):
            return d
    raise GenerationError("no admissible probe direction found for site "
                          f"({c_s[0]:.1f}, {c_s[1]:.1f})")


def sample_probe(surface: PointCloud, volume: TissueVolume,
                 cfg: GeneratorConfig, rng: np.random.Generator):
    """Draw one probe: contact point among interior surface points, direction
    within max_inclination of the inward normal, azimuth uniform."""
    idx, c_s, d = _sample_probe_site(surface, cfg, rng)
    return c_s, d


def _sample_probe_site(surface: PointCloud, cfg: GeneratorConfig,
                       rng: np.random.Generator):
    sites = _candidate_sites(surface, cfg)
    if sites.size == 0:
        raise ConfigError("no probe sites inside the boundary margin")
    idx = int(sites[rng.integers(0, sites.size)])
    c_s = surface.positions[idx].copy()
    return idx, c_s, _sample_direction(c_s, cfg, rng)


# --------------------------------------------------------------------- #
# oracle


def _ray_hit_distance(origin: np.ndarray, direction: np.ndarray,
                      bone_height, floor_z: float,
                      steps: int = 256, refine: int = 60) -> float:
    """Distance along the ray to the bone surface (or the floor)."""
    dz = direction[2]
    if dz >= 0:
        raise GenerationError("probe direction must point into the tissue")
    t_floor = (origin[2] - floor_z) / (-dz)
    t = np.linspace(0.0, t_floor, steps)
    pts = origin[None, :] + t[:, None] * direction[None, :]
    clear = pts[:, 2] - bone_height(pts[:, 0], pts[:, 1])
    below = np.flatnonzero(clear <= 0.0)
    if below.size == 0:
        return float(t_floor)
    first = below[0]
    if first == 0:
        return 0.0
    lo, hi = t[first - 1], t[first]
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        p = origin + mid * direction
        if p[2] - float(np.asarray(bone_height(p[0], p[1])).reshape(-1)[0]) <= 0.0:
            hi = mid
        else:
            lo = mid
    return float(0.5 * (lo + hi))


def _clamp_travel(points: np.ndarray, direction: np.ndarray,
                  travel: np.ndarray, bone_height, margin: float,
                  steps: int = 24, refine: int = 48) -> np.ndarray:
    """Largest per-point travel <= requested that keeps the moved point at
    least `margin` above the bone surface along the whole path."""
    n = points.shape[0]
    frac = np.linspace(0.0, 1.0, steps)
    t = travel[:, None] * frac[None, :]                       # [N, steps]
    px = points[:, 0, None] + t * direction[0]
    py = points[:, 1, None] + t * direction[1]
    pz = points[:, 2, None] + t * direction[2]
    clear = pz - bone_height(px.reshape(-1), py.reshape(-1)).reshape(n, steps)
    clear -= margin
    bad = clear < 0.0
    first_bad = np.where(bad.any(axis=1), bad.argmax(axis=1), steps)
    out = travel.copy()
    needs = first_bad < steps
    if not needs.any():
        return out
    rows = np.flatnonzero(needs)
    lo = t[rows, np.maximum(first_bad[rows] - 1, 0)]
    hi = t[rows, first_bad[rows]]
    p_rows = points[rows]
    for _ in range(refine):
        mid = 0.5 * (lo + hi)
        q = p_rows + mid[:, None] * direction[None, :]
        c = q[:, 2] - bone_height(q[:, 0], q[:, 1]) - margin
        shrink = c < 0.0
        hi = np.where(shrink, mid, hi)
        lo = np.where(shrink, lo, mid)
    out[rows] = lo
    return out


def oracle_deform(surface: PointCloud, volume: TissueVolume,
                  c_s: np.ndarray, direction: np.ndarray, depth: float,
                  cfg: GeneratorConfig, bone_height=None):
    """Ground-truth displacement field, contact force, and probe tip.

    Gaussian falloff of the axis distance sets each point's travel along the
    probe direction; travel is clamped against the bone surface plus margin.
    Force: k_s * depth * (1 + c / max(gap, gap_min)) with `gap` the remaining
    soft tissue between the tip and the bone along the probe line.
    """
    if not 0.0 <= depth <= cfg.max_depth:
        raise GenerationError(f"depth {depth} outside [0, {cfg.max_depth}]")
    c_s = np.asarray(c_s, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    if bone_height is None:
        def bone_height(x, y, _vol=volume):
            heights = _vol.bone_height_at(np.column_stack([np.atleast_1d(x),
                                                           np.atleast_1d(y)]))
            return heights if np.ndim(x) else float(heights[0])
    c_e = c_s + depth * direction
    lo = np.zeros(2)
    hi = np.asarray(cfg.extent)
    if not (np.all(c_e[:2] >= lo) and np.all(c_e[:2] <= hi)):
        raise GenerationError("probe tip exits the volume footprint")
    pts = surface.positions
    if depth == 0.0:
        return np.zeros_like(pts), 0.0, c_e
    rel = pts - c_s
    along = rel @ direction
    radial = rel - along[:, None] * direction[None, :]
    r2 = np.sum(radial * radial, axis=1)
    travel = depth * np.exp(-r2 / (2.0 * cfg.kernel_sigma ** 2))
    travel = _clamp_travel(pts, direction, travel, bone_height, cfg.bone_margin)
    displacement = travel[:, None] * direction[None, :]
    t_hit = _ray_hit_distance(c_s, direction, bone_height,
                              floor_z=float(volume.origin[2]))
    gap = max(t_hit - depth, 0.0)
    force = cfg.soft_stiffness * depth * (
        1.0 + cfg.stiffen_scale / max(gap, cfg.min_gap))
    return displacement, float(force), c_e


def retain_states(trajectory, increment: float):
    """Greedy force-increment thinning of a quasi-static trajectory.

    `trajectory` is a sequence of (depth, force, payload) sorted by depth
    with non-decreasing force. A state is kept iff its force exceeds the
    last kept force by at least `increment`, scanning from zero.
    """
    forces = [s[1] for s in trajectory]
    for a, b in zip(forces, forces[1:]):
        if b < a - 1e-12:
            raise MonotonicityError(f"force decreased along trajectory: "
                                    f"{a:.6f} -> {b:.6f}")
    kept = []
    last = 0.0
    for state in trajectory:
        if state[1] - last >= increment:
            kept.append(state)
            last = state[1]
    return kept


# --------------------------------------------------------------------- #
# dataset generation


def generate_dataset(cfg: GeneratorConfig, heightfield: HeightField | None = None):
    """Generate paired-resolution datasets from one probe program.

    Returns {"primary": Dataset} and, when subsample_count is set, also
    {"dense": Dataset} holding the full-grid view of the same probe states.
    Probe sites are drawn without replacement from the primary cloud.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    if heightfield is None:
        heightfield = HeightField.random(rng, terms=cfg.heightfield_terms,
                                         low=cfg.bone_low, high=cfg.bone_high)
    volume = _volume_for(cfg, heightfield)
    dense_pos = grid_surface(cfg.grid_rows, cfg.grid_cols, extent=cfg.extent,
                             z=cfg.surface_z)
    dense = PointCloud(positions=dense_pos,
                       features=point_features(volume, dense_pos),
                       grid_shape=(cfg.grid_rows, cfg.grid_cols))
    named_indices = None
    if cfg.subsample_count:
        named_indices = np.sort(rng.choice(len(dense), size=cfg.subsample_count,
                                           replace=False))
        primary = subsample_named(dense, named_indices)
    else:
        primary = dense

    sites = _candidate_sites(primary, cfg)
    if sites.size < cfg.sites:
        raise ConfigError(f"only {sites.size} interior sites for "
                          f"{cfg.sites} requested probes")
    chosen = rng.choice(sites, size=cfg.sites, replace=False)

    clouds = {"primary": primary}
    if cfg.subsample_count:
        clouds["dense"] = dense
    out = {name: [] for name in clouds}
    deltas = np.linspace(cfg.max_depth / cfg.depth_steps, cfg.max_depth,
                         cfg.depth_steps)
    for site in chosen:
        c_s = primary.positions[int(site)].copy()
        direction = _sample_direction(c_s, cfg, rng)
        t_hit = _ray_hit_distance(c_s, direction, heightfield,
                                  floor_z=float(volume.origin[2]))
        trajectory = []
        for delta in deltas:
            gap = max(t_hit - delta, 0.0)
            force = cfg.soft_stiffness * delta * (
                1.0 + cfg.stiffen_scale / max(gap, cfg.min_gap))
            if force > cfg.force_cap:
                break
            trajectory.append((float(delta), float(force), None))
        for delta, force, _ in retain_states(trajectory, cfg.force_increment):
            c_e = c_s + delta * direction
            c_h = condition_features(volume, c_s, c_e)
            probe = ProbeCondition(c_s=c_s, c_e=c_e, c_h=c_h)
            for name, cloud in clouds.items():
                disp, f, _ = oracle_deform(cloud, volume, c_s, direction,
                                           delta, cfg, bone_height=heightfield)
                assert abs(f - force) < 1e-9
                out[name].append(DeformationSample(
                    cloud=cloud, probe=probe, displacement=disp,
                    force=force, location_id=int(site)))
    echo = {"config": cfg.to_dict(), "heightfield": heightfield.to_dict()}
    if named_indices is not None:
        echo["named_indices"] = named_indices.tolist()
    return {name: Dataset(samples=samples, generator=echo)
            for name, samples in out.items()}


# --------------------------------------------------------------------- #
# serialization


_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


def write_dataset(dataset: Dataset, path) -> None:
    """Binary container: header JSON + fixed-layout per-sample records."""
    dtype = _DTYPES.get(dataset.dtype)
    if dtype is None:
        raise ConfigError(f"unsupported dataset dtype {dataset.dtype!r}")
    n = dataset.n_points
    header = {
        "format_version": DATASET_VERSION,
        "count": len(dataset.samples),
        "n_points": n,
        "feature_width": 256,
        "cond_width": COND_WIDTH,
        "units": {"length": "mm", "force": "N"},
        "dtype": dataset.dtype,
        "generator": dataset.generator,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<BI", DATASET_VERSION, len(blob)))
    buf.write(blob)
    for s in dataset.samples:
        if len(s.cloud) != n:
            raise SchemaError("all samples in a dataset file must share N")
        for arr in (s.cloud.positions, s.cloud.features, s.probe.c_s,
                    s.probe.c_e, s.probe.c_h, s.displacement):
            buf.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        buf.write(np.asarray([s.force], dtype=dtype).tobytes())
        buf.write(struct.pack("<I", s.location_id))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}")
    version, blob_len = struct.unpack_from("<BI", raw, 4)
    if version != DATASET_VERSION:
        raise VersionError(f"unsupported dataset version {version}")
    try:
        header = json.loads(raw[9:9 + blob_len])
    except ValueError as e:
        raise SchemaError(f"unreadable dataset header: {e}") from None
    for key in ("count", "n_points", "feature_width", "cond_width", "dtype"):
        if key not in header:
            raise SchemaError(f"dataset header missing {key!r}")
    if header["feature_width"] != 256 or header["cond_width"] != COND_WIDTH:
        raise SchemaError("unexpected feature/condition widths in header")
    dtype = _DTYPES.get(header["dtype"])
    if dtype is None:
        raise SchemaError(f"unknown dtype {header['dtype']!r}")
    n = header["n_points"]
    count = header["count"]
    itemsize = dtype.itemsize
    rec = itemsize * (n * 3 + n * 256 + 3 + 3 + COND_WIDTH + n * 3 + 1) + 4
    body = raw[9 + blob_len:]
    if len(body) != rec * count:
        raise SchemaError(f"dataset body is {len(body)} bytes, expected "
                          f"{rec * count} for {count} samples")
    samples = []
    clouds = {}
    off = 0

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) * itemsize
        arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(shape)),
                            offset=off).reshape(shape)
        off += size
        return np.asarray(arr, dtype=np.float64)

    for _ in range(count):
        positions = take((n, 3))
        features = take((n, 256))
        c_s = take((3,))
        c_e = take((3,))
        c_h = take((COND_WIDTH,))
        displacement = take((n, 3))
        force = float(take((1,))[0])
        (loc,) = struct.unpack_from("<I", body, off)
        off += 4
        key = (positions.tobytes(), features.tobytes())
        cloud = clouds.get(key)
        if cloud is None:
            cloud = PointCloud(positions=positions, features=features)
            clouds[key] = cloud
        samples.append(DeformationSample(
            cloud=cloud, probe=ProbeCondition(c_s=c_s, c_e=c_e, c_h=c_h),
            displacement=displacement, force=force, location_id=int(loc)))
    return Dataset(samples=samples, generator=header.get("generator", {}),
                   dtype=header["dtype"])


def write_dataset_text(dataset: Dataset, path) -> None:
    """One JSON record per line; the human-readable debugging export."""
    with open(path, "w") as f:
        f.write(json.dumps({"header": {
            "count": len(dataset.samples), "n_points": dataset.n_points,
            "units": {"length": "mm", "force": "N"}}}) + "\n")
        for s in dataset.samples:
            f.write(json.dumps({
                "location_id": s.location_id,
                "force": s.force,
                "c_s": s.probe.c_s.tolist(),
                "c_e": s.probe.c_e.tolist(),
                "c_h": s.probe.c_h.tolist(),
                "positions": s.cloud.positions.tolist(),
                "features": s.cloud.features.tolist(),
                "displacement": s.displacement.tolist(),
            }) + "\n")


# --------------------------------------------------------------------- #
# statistics (the dataset-features table schema)


def dataset_stats(dataset: Dataset) -> dict:
    """F_max per location, pooled nearest-neighbor distances, tip distances."""
    samples = dataset.samples
    if not samples:
        return {"count": 0}
    by_loc = {}
    for s in samples:
        by_loc.setdefault(s.location_id, []).append(s.force)
    f_max = np.array([max(v) for v in by_loc.values()])
    nn = np.concatenate([mean_nn_distance(c.positions) for c in
                         {id(s.cloud): s.cloud for s in samples}.values()])
    tips = []
    for s in samples:
        tip = int(np.argmin(np.linalg.norm(
            s.cloud.positions - s.probe.c_s[None, :], axis=1)))
        tips.append(float(np.linalg.norm(s.displacement[tip])))
    tips = np.asarray(tips)
    return {
        "count": len(samples),
        "locations": len(by_loc),
        "n_points": dataset.n_points,
        "f_max_mean": float(f_max.mean()), "f_max_std": float(f_max.std()),
        "d_mean_mean": float(nn.mean()), "d_mean_std": float(nn.std()),
        "tip_mean_mean": float(tips.mean()), "tip_mean_std": float(tips.std()),
    }
