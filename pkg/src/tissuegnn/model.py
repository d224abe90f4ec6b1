"""Conditioned equivariant graph network for deformation and force.

Each message-passing layer updates coordinates with three condition-aware
terms (probe contact point, probe tip, neighbor differences gated by edge
messages) and updates features from summed messages. Two condition modes
exist:

  paper_literal      -- the contact/tip terms are two-layer MLPs applied to
                        the raw difference vectors; cheap, but the learned
                        maps are not rotation equivariant.
  strict_equivariant -- the terms are scalar gates of the squared distance
                        times the difference vector, and all head inputs are
                        expressed in a probe-aligned canonical frame, making
                        the whole forward exactly equivariant to rotations
                        about the vertical axis.

The displacement head consumes the concatenated per-point coordinates of
all layers plus the probe conditions; the force head pools per-point
features relative to the probe tip into a single scalar.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ArchitectureMismatchError,
    ConfigError,
    FormatError,
    ShapeError,
    VersionError,
)
from .geometry import (EdgeList, PointCloud, _knn_kernel, knn_graph,
                       select_knn_rows)
from .phantom import PROFILE_SAMPLES, ProbeCondition
from .tensor import Tape, Tensor

__all__ = [
    "ModelConfig",
    "init_params",
    "make_batch",
    "forward_batch",
    "model_forward",
    "cegcl_forward",
    "graph_policy_edges",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_id",
]

CHECKPOINT_MAGIC = b"CEGK"
CHECKPOINT_VERSION = 1

MODES = ("paper_literal", "strict_equivariant")
POLICIES = ("per_layer", "static")


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    k: int = 5
    mode: str = "paper_literal"
    graph_policy: str = "per_layer"
    feat_width: int = 256
    cond_width: int = 512
    cond_hidden: int = 0          # 0 = use `hidden`
    disp_widths: tuple = (512, 256, 128)
    force_feat_width: int = 128
    force_reg_widths: tuple = (512, 256, 128)
    dropout_disp: float = 0.3
    dropout_force: float = 0.2
    dtype: str = "f8"
    # characteristic length (mm): every coordinate-like network input is
    # divided by this, keeping activations O(1) regardless of the physical
    # scale of the cloud
    length_scale: float = 100.0
    # displacement head output gain (mm per unit activation); sets how fast
    # predictions can travel per optimizer step without orbit blow-up
    disp_out_scale: float = 10.0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.graph_policy not in POLICIES:
            raise ConfigError(f"graph_policy must be one of {POLICIES}")
        if self.layers < 1 or self.hidden < 1 or self.k < 2:
            raise ConfigError("layers, hidden must be >= 1 and k >= 2")
        if self.dtype not in ("f4", "f8"):
            raise ConfigError(f"dtype must be f4 or f8, got {self.dtype!r}")

    @property
    def cond_h(self) -> int:
        return self.cond_hidden or self.hidden

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f4" else np.float64

    @property
    def disp_in_width(self) -> int:
        return 3 * self.layers + 3 + 3 + self.cond_width

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["disp_widths"] = list(self.disp_widths)
        d["force_reg_widths"] = list(self.force_reg_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("disp_widths", "force_reg_widths"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    def arch_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------- #
# parameters


def _kaiming(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict:
    """Fan-in uniform init; final affine layers of every vector/scalar output
    (coordinate gates, condition maps, displacement, force) start at zero so
    a fresh model is the identity on coordinates and predicts zero force."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params: dict[str, Tensor] = {}

    def add(name, fan_in, fan_out, zero=False):
        w = np.zeros((fan_in, fan_out), dtype=dt) if zero else \
            _kaiming(rng, fan_in, fan_out, dt)
        params[f"{name}.w"] = Tensor(w, requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype=dt),
                                     requires_grad=True)

    h = cfg.hidden
    for l in range(cfg.layers):
        h_in = cfg.feat_width if l == 0 else h
        # the edge MLP's first layer is stored as blocks over [h_i, h_j, d2]
        # so the h blocks can run on nodes before gathering to edges
        w0 = _kaiming(rng, 2 * h_in + 1, h, dt)
        params[f"layer{l}.edge.hi.w"] = Tensor(w0[:h_in].copy(),
                                               requires_grad=True)
        params[f"layer{l}.edge.hj.w"] = Tensor(w0[h_in:2 * h_in].copy(),
                                               requires_grad=True)
        params[f"layer{l}.edge.d2.w"] = Tensor(w0[2 * h_in:].copy(),
                                               requires_grad=True)
        params[f"layer{l}.edge.0.b"] = Tensor(np.zeros(h, dtype=dt),
                                              requires_grad=True)
        add(f"layer{l}.edge.1", h, h)
        add(f"layer{l}.gate.0", h, h)
        add(f"layer{l}.gate.1", h, 1, zero=True)
        cond_in = 1 if cfg.mode == "strict_equivariant" else 3
        cond_out = 1 if cfg.mode == "strict_equivariant" else 3
        for tag in ("cond_s", "cond_e"):
            add(f"layer{l}.{tag}.0", cond_in, cfg.cond_h)
            add(f"layer{l}.{tag}.1", cfg.cond_h, cond_out, zero=True)
        add(f"layer{l}.feat.0", h_in + h, h)
        add(f"layer{l}.feat.1", h, h)
    # first displacement layer is stored as a per-point block (the layer
    # coordinates) and a per-sample block (conditions), since the condition
    # slice is constant across a sample's points
    w0 = _kaiming(rng, cfg.disp_in_width, cfg.disp_widths[0], dt)
    pts_w = 3 * cfg.layers
    params["disp.0.wp"] = Tensor(w0[:pts_w].copy(), requires_grad=True)
    params["disp.0.wc"] = Tensor(w0[pts_w:].copy(), requires_grad=True)
    params["disp.0.b"] = Tensor(np.zeros(cfg.disp_widths[0], dtype=dt),
                                requires_grad=True)
    widths = tuple(cfg.disp_widths) + (3,)
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        add(f"disp.{i + 1}", a, b, zero=(i == len(widths) - 2))
    # force encoder first layer in blocks over [y_rel(3); bin; x; y; z(128s)]
    # so the tissue blocks can run per node / per sample
    m = PROFILE_SAMPLES
    w0 = _kaiming(rng, 3 + cfg.cond_width, cfg.force_feat_width, dt)
    for tag, lo, hi in (("yrel", 0, 3), ("bin", 3, 3 + m),
                        ("x", 3 + m, 3 + 2 * m), ("y", 3 + 2 * m, 3 + 3 * m),
                        ("z", 3 + 3 * m, 3 + 4 * m)):
        params[f"force_feat.{tag}.w"] = Tensor(w0[lo:hi].copy(),
                                               requires_grad=True)
    params["force_feat.0.b"] = Tensor(
        np.zeros(cfg.force_feat_width, dtype=dt), requires_grad=True)
    add("force_feat.1", cfg.force_feat_width, cfg.force_feat_width)
    fwidths = (2 * cfg.force_feat_width,) + tuple(cfg.force_reg_widths) + (1,)
    for i, (a, b) in enumerate(zip(fwidths[:-1], fwidths[1:])):
        add(f"force_reg.{i}", a, b, zero=(i == len(fwidths) - 2))
    return params


def params_to_dtype(params: dict, dtype) -> dict:
    return {name: Tensor(np.asarray(p.data, dtype=dtype), requires_grad=True)
            for name, p in params.items()}


# --------------------------------------------------------------------- #
# batching


@dataclass
class Batch:
    """Flattened batch of same-N samples plus precomputed condition arrays."""

    x0: np.ndarray          # [B*N, 3]
    h0: np.ndarray          # [B*N, feat]
    c_s: np.ndarray         # [B, 3]
    c_e: np.ndarray         # [B, 3]
    c_h: np.ndarray         # [B, cond]
    n_points: int
    batch_size: int
    shared_cloud: bool = False

    @property
    def rows(self) -> int:
        return self.n_points * self.batch_size

    def per_row(self, per_sample: np.ndarray) -> np.ndarray:
        """Repeat a [B, D] array to [B*N, D]."""
        return np.repeat(per_sample, self.n_points, axis=0)


def make_batch(pairs, dtype=np.float64) -> Batch:
    """pairs: sequence of (PointCloud, ProbeCondition)."""
    clouds = [p[0] for p in pairs]
    probes = [p[1] for p in pairs]
    n = len(clouds[0])
    if any(len(c) != n for c in clouds):
        raise ShapeError("all samples in a batch must share N")
    if any(c.features is None for c in clouds):
        raise ConfigError("batch clouds need features")
    x0 = np.concatenate([c.positions for c in clouds]).astype(dtype)
    h0 = np.concatenate([c.features for c in clouds]).astype(dtype)
    return Batch(
        x0=x0, h0=h0,
        c_s=np.stack([p.c_s for p in probes]).astype(dtype),
        c_e=np.stack([p.c_e for p in probes]).astype(dtype),
        c_h=np.stack([p.c_h for p in probes]).astype(dtype),
        n_points=n, batch_size=len(pairs),
        shared_cloud=all(c is clouds[0] for c in clouds),
    )


def batch_edges(positions: np.ndarray, batch_size: int, n: int, k: int):
    """Per-sample kNN edges on row blocks, offset into the flat layout.

    Uses the same pairwise arithmetic and stable tie ordering as knn_graph,
    so the edges are identical to per-sample exhaustive search.
    """
    deg = k - 1
    pos = np.asarray(positions, dtype=np.float64).reshape(batch_size, n, 3)
    kernel = _knn_kernel()
    order = np.empty((batch_size, n, deg), dtype=np.int64)
    if kernel is not None:
        for b in range(batch_size):
            kernel(np.ascontiguousarray(pos[b]), deg, order[b])
    else:
        d2 = np.zeros((batch_size, n, n))
        for c in range(3):
            t = pos[:, :, None, c] - pos[:, None, :, c]
            t *= t
            d2 += t
        idx = np.arange(n)
        d2[:, idx, idx] = np.inf
        order = select_knn_rows(d2.reshape(batch_size * n, n),
                                deg).reshape(batch_size, n, deg)
    offsets = (np.arange(batch_size, dtype=np.int64) * n)[:, None, None]
    src = (order + offsets).reshape(-1)
    dst = np.repeat(np.arange(batch_size * n, dtype=np.int64), deg)
    return EdgeList(dst=dst, src=src, k=k)


def graph_policy_edges(cfg: ModelConfig, x0: np.ndarray, layer_inputs):
    """static: one graph from x0 for all layers; per_layer: rebuild each layer.

    `layer_inputs` yields the coordinate array entering each layer.
    """
    if cfg.graph_policy == "static":
        e = knn_graph(x0, cfg.k)
        for _ in layer_inputs:
            yield e
    else:
        for arr in layer_inputs:
            yield knn_graph(arr, cfg.k)


# --------------------------------------------------------------------- #
# canonical probe frame (strict mode)


def _canonical_angles(batch: Batch):
    """Per-sample canonical azimuth from the probe's horizontal direction.

    Falls back to the contact-point-to-centroid direction for vertical
    probes; identity for the doubly degenerate case. Returns (cos, sin) of
    the frame rotation (world -> canonical), shape [B, 1] each.
    """
    d = batch.c_e - batch.c_s
    ref = d[:, :2].copy()
    weak = np.linalg.norm(ref, axis=1) < 1e-9
    if weak.any():
        centroids = batch.x0.reshape(batch.batch_size, batch.n_points, 3)
        alt = batch.c_s[:, :2] - centroids[:, :, :2].mean(axis=1)
        ref[weak] = alt[weak]
    norms = np.linalg.norm(ref, axis=1, keepdims=True)
    safe = np.where(norms < 1e-9, 1.0, norms)
    unit = np.where(norms < 1e-9, np.array([[1.0, 0.0]]), ref / safe)
    # rotating by -theta maps the reference azimuth onto +x
    cos = unit[:, :1]
    sin = -unit[:, 1:2]
    return cos, sin


def _rot_const(arr: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """z-rotate constant [M, 3] rows by per-row (cos, sin)."""
    out = np.empty_like(arr)
    out[:, 0] = arr[:, 0] * cos[:, 0] - arr[:, 1] * sin[:, 0]
    out[:, 1] = arr[:, 0] * sin[:, 0] + arr[:, 1] * cos[:, 0]
    out[:, 2] = arr[:, 2]
    return out


def _canonical_cond(batch: Batch, cos, sin):
    """Canonicalized per-sample condition constants for the heads.

    Returns (c_s', c_e', c_h') where positions are expressed relative to the
    contact point in the probe-aligned frame. c_s' is identically zero.
    """
    ce_rel = _rot_const(batch.c_e - batch.c_s, cos, sin)
    m = PROFILE_SAMPLES
    ch = batch.c_h
    coords = np.stack([ch[:, m:2 * m], ch[:, 2 * m:3 * m], ch[:, 3 * m:]],
                      axis=2)                      # [B, 128, 3]
    rel = coords - batch.c_s[:, None, :]
    flat = rel.reshape(-1, 3)
    rot = _rot_const(flat, np.repeat(cos, m, axis=0), np.repeat(sin, m, axis=0))
    rot = rot.reshape(batch.batch_size, m, 3)
    ch_canon = np.concatenate([ch[:, :m], rot[:, :, 0], rot[:, :, 1],
                               rot[:, :, 2]], axis=1)
    return np.zeros_like(batch.c_s), ce_rel, ch_canon


def point_condition_features(batch: Batch) -> np.ndarray:
    """Per-point analog of the probe condition vector: [binary; x*1; y*1; z].

    The point's x and y are broadcast across the depth samples so the layout
    matches the condition vector for elementwise differencing.
    """
    m = PROFILE_SAMPLES
    binary = batch.h0[:, :m]
    z = batch.h0[:, m:]
    x = np.repeat(batch.x0[:, :1], m, axis=1)
    y = np.repeat(batch.x0[:, 1:2], m, axis=1)
    return np.concatenate([binary, x, y, z], axis=1)


# --------------------------------------------------------------------- #
# forward


def _mlp2(tape, params, prefix, x, act="swish"):
    h = tape.affine(x, params[f"{prefix}.0.w"], params[f"{prefix}.0.b"])
    h = tape.activation(h, act)
    return tape.affine(h, params[f"{prefix}.1.w"], params[f"{prefix}.1.b"])


def cegcl_forward(tape: Tape, params: dict, cfg: ModelConfig, layer: int,
                  x: Tensor, h: Tensor, edges: EdgeList,
                  cs_rows: np.ndarray, ce_rows: np.ndarray):
    """One conditioned equivariant layer: returns (x', h').

    cs_rows/ce_rows are the per-row condition points, shape [rows, 3].
    """
    deg = edges.degree
    rows = x.data.shape[0]
    if len(edges) != rows * deg:
        raise ShapeError(f"edge list has {len(edges)} edges for {rows} rows")
    xi = tape.gather_rows(x, edges.dst, block=deg)
    xj = tape.gather_rows(x, edges.src)
    diff = tape.sub(xi, xj)
    d2 = tape.sqnorm_rows(diff)
    # h blocks of the edge MLP run on nodes, then gather to edges
    ei = tape.affine(h, params[f"layer{layer}.edge.hi.w"],
                     params[f"layer{layer}.edge.0.b"])
    ej = tape.affine(h, params[f"layer{layer}.edge.hj.w"])
    m0 = tape.add(tape.add(tape.gather_rows(ei, edges.dst, block=deg),
                           tape.gather_rows(ej, edges.src)),
                  tape.affine(d2, params[f"layer{layer}.edge.d2.w"]))
    m = tape.affine(tape.swish(m0), params[f"layer{layer}.edge.1.w"],
                    params[f"layer{layer}.edge.1.b"])
    # gate outputs are tanh-bounded: unbounded coordinate gates compound
    # multiplicatively across layers and blow the stream up during training
    gate = tape.tanh(_mlp2(tape, params, f"layer{layer}.gate", m))
    neighbor = tape.scale(tape.group_sum(tape.scale_rows(diff, gate), deg),
                          1.0 / deg)
    vs = tape.add_const(x, -cs_rows)
    ve = tape.add_const(x, -ce_rows)
    if cfg.mode == "strict_equivariant":
        ts = tape.scale_rows(vs, tape.tanh(
            _mlp2(tape, params, f"layer{layer}.cond_s", tape.sqnorm_rows(vs))))
        te = tape.scale_rows(ve, tape.tanh(
            _mlp2(tape, params, f"layer{layer}.cond_e", tape.sqnorm_rows(ve))))
    else:
        ts = tape.tanh(_mlp2(tape, params, f"layer{layer}.cond_s", vs))
        te = tape.tanh(_mlp2(tape, params, f"layer{layer}.cond_e", ve))
    x_new = tape.add(tape.add(tape.add(x, ts), te), neighbor)
    h_new = _mlp2(tape, params, f"layer{layer}.feat",
                  tape.concat_cols([h, tape.group_sum(m, deg)]))
    return x_new, h_new


def _dropout_seed(base: int, site: int) -> int:
    return int(np.random.SeedSequence([base & (2**63 - 1), site])
               .generate_state(1)[0])


def _scaled_batch(batch: Batch, inv: float, dt) -> Batch:
    """View of the batch with every length divided by the characteristic
    scale: positions, condition points, the coordinate channels of the
    condition vector, and the z half of the tissue features."""
    m = PROFILE_SAMPLES
    h0 = batch.h0.copy()
    h0[:, m:] *= inv
    c_h = batch.c_h.copy()
    c_h[:, m:] *= inv
    return Batch(
        x0=(batch.x0 * inv).astype(dt), h0=h0.astype(dt),
        c_s=(batch.c_s * inv).astype(dt), c_e=(batch.c_e * inv).astype(dt),
        c_h=c_h.astype(dt), n_points=batch.n_points,
        batch_size=batch.batch_size, shared_cloud=batch.shared_cloud,
    )


def forward_batch(tape: Tape, params: dict, cfg: ModelConfig, batch: Batch,
                  train: bool = False, seed: int = 0):
    """Full forward on a flattened batch; returns (u, yhat, force) tensors.

    u and yhat are [B*N, 3] in mm; force is [B, 1] in N. Internally the
    network runs on inputs divided by cfg.length_scale.
    """
    cfg.validate()
    dt = cfg.np_dtype
    strict = cfg.mode == "strict_equivariant"
    inv = 1.0 / cfg.length_scale
    sb = _scaled_batch(batch, inv, dt)
    cs_rows = sb.per_row(sb.c_s)
    ce_rows = sb.per_row(sb.c_e)
    x = tape.leaf(sb.x0)
    h = tape.leaf(sb.h0)
    xs = []
    static_edges = None
    for l in range(cfg.layers):
        if cfg.graph_policy == "static":
            if static_edges is None:
                static_edges = batch_edges(sb.x0, sb.batch_size,
                                           sb.n_points, cfg.k)
            edges = static_edges
        else:
            edges = batch_edges(x.data, sb.batch_size, sb.n_points, cfg.k)
        x, h = cegcl_forward(tape, params, cfg, l, x, h, edges,
                             cs_rows, ce_rows)
        xs.append(x)

    if strict:
        cos, sin = _canonical_angles(sb)
        cos_rows = sb.per_row(cos).astype(dt)
        sin_rows = sb.per_row(sin).astype(dt)
        cs_c, ce_c, ch_c = _canonical_cond(sb, cos, sin)
        head_parts = [tape.rotz_rows(tape.add_const(xl, -cs_rows),
                                     cos_rows, sin_rows) for xl in xs]
        cond_sample = np.concatenate([cs_c, ce_c, ch_c], axis=1).astype(dt)
    else:
        head_parts = list(xs)
        cond_sample = np.concatenate([sb.c_s, sb.c_e, sb.c_h],
                                     axis=1).astype(dt)

    # conditions are constant per sample: transform them once per sample and
    # gather the result to rows instead of repeating 518 columns per point
    sample_ids = np.repeat(np.arange(batch.batch_size, dtype=np.int64),
                           batch.n_points)
    pts_term = tape.affine(tape.concat_cols(head_parts), params["disp.0.wp"],
                           params["disp.0.b"])
    cond_term = tape.affine(tape.leaf(cond_sample), params["disp.0.wc"])
    u = tape.add(pts_term, tape.gather_rows(cond_term, sample_ids,
                                            block=batch.n_points))
    u = tape.dropout(tape.relu(u), cfg.dropout_disp, train,
                     _dropout_seed(seed, 100))
    n_disp = len(cfg.disp_widths)
    for i in range(n_disp):
        u = tape.affine(u, params[f"disp.{i + 1}.w"], params[f"disp.{i + 1}.b"])
        if i < n_disp - 1:
            u = tape.relu(u)
            u = tape.dropout(u, cfg.dropout_disp, train,
                             _dropout_seed(seed, 101 + i))
    if strict:
        # displacement is a vector: unwind the canonical frame (angle -theta)
        u = tape.rotz_rows(u, cos_rows, -sin_rows)
    u = tape.scale(u, cfg.disp_out_scale)
    yhat = tape.add_const(u, batch.x0.astype(dt))

    y_rel = tape.scale(tape.add_const(yhat, -batch.per_row(batch.c_e)
                                      .astype(dt)), inv)
    if strict:
        y_rel = tape.rotz_rows(y_rel, cos_rows, sin_rows)

    # First force layer, computed blockwise. With R the per-sample frame
    # rotation, the point-side contribution rot(h~0)@W decomposes into
    # base + cos*A + sin*B with node-level matrices
    #   base = bin@W_bin + z@W_z,  A = x@W_x + y@W_y,  B = x@W_y - y@W_x,
    # and the condition side rotates per sample before its own affine.
    m = PROFILE_SAMPLES
    n_rows = batch.n_points if batch.shared_cloud else sb.rows
    xb = np.repeat(sb.x0[:n_rows, :1], m, axis=1)
    yb = np.repeat(sb.x0[:n_rows, 1:2], m, axis=1)
    bin_a = tape.affine(tape.leaf(sb.h0[:n_rows, :m]),
                        params["force_feat.bin.w"])
    z_a = tape.affine(tape.leaf(sb.h0[:n_rows, m:]), params["force_feat.z.w"])
    base = tape.add(bin_a, z_a)
    a_mat = tape.add(tape.affine(tape.leaf(xb), params["force_feat.x.w"]),
                     tape.affine(tape.leaf(yb), params["force_feat.y.w"]))
    if strict:
        b_mat = tape.sub(tape.affine(tape.leaf(xb), params["force_feat.y.w"]),
                         tape.affine(tape.leaf(yb), params["force_feat.x.w"]))
        node_terms = [base, a_mat, b_mat]
    else:
        node_terms = [tape.add(base, a_mat)]
    if batch.shared_cloud and batch.batch_size > 1:
        tiled = np.tile(np.arange(batch.n_points, dtype=np.int64),
                        batch.batch_size)
        node_terms = [tape.gather_rows(t, tiled) for t in node_terms]
    if strict:
        h_term = tape.add(
            node_terms[0],
            tape.add(tape.scale_rows(node_terms[1], tape.leaf(cos_rows)),
                     tape.scale_rows(node_terms[2], tape.leaf(sin_rows))))
    else:
        h_term = node_terms[0]

    ch = sb.c_h
    ch_x, ch_y = ch[:, m:2 * m], ch[:, 2 * m:3 * m]
    if strict:
        ch_x, ch_y = (ch_x * cos - ch_y * sin, ch_x * sin + ch_y * cos)
    ch_term = tape.add(
        tape.add(tape.affine(tape.leaf(ch[:, :m]), params["force_feat.bin.w"]),
                 tape.affine(tape.leaf(ch[:, 3 * m:]),
                             params["force_feat.z.w"])),
        tape.add(tape.affine(tape.leaf(ch_x.astype(dt)),
                             params["force_feat.x.w"]),
                 tape.affine(tape.leaf(ch_y.astype(dt)),
                             params["force_feat.y.w"])))
    z0 = tape.sub(tape.add(tape.affine(y_rel, params["force_feat.yrel.w"],
                                       params["force_feat.0.b"]), h_term),
                  tape.gather_rows(ch_term, sample_ids,
                                   block=batch.n_points))
    z = tape.relu(z0)
    z = tape.relu(tape.affine(z, params["force_feat.1.w"],
                              params["force_feat.1.b"]))
    pooled = tape.concat_cols([tape.group_pool(z, batch.n_points, "max"),
                               tape.group_pool(z, batch.n_points, "mean")])
    f = pooled
    n_reg = len(cfg.force_reg_widths) + 1
    for i in range(n_reg):
        f = tape.affine(f, params[f"force_reg.{i}.w"], params[f"force_reg.{i}.b"])
        if i < n_reg - 1:
            f = tape.relu(f)
            if i in (1, 2):  # dropout on the two middle layers only
                f = tape.dropout(f, cfg.dropout_force, train,
                                 _dropout_seed(seed, 200 + i))
    return u, yhat, f


def model_forward(params: dict, cfg: ModelConfig, cloud: PointCloud,
                  probe: ProbeCondition, train: bool = False, seed: int = 0,
                  tape: Tape | None = None):
    """Single-sample forward; returns numpy (u, yhat, force)."""
    if cloud.features is None:
        raise ConfigError("cloud must carry tissue features")
    if cloud.features.shape[1] != cfg.feat_width:
        raise ShapeError(f"feature width {cloud.features.shape[1]} != "
                         f"{cfg.feat_width}")
    if probe.c_h.shape[0] != cfg.cond_width:
        raise ShapeError(f"condition width {probe.c_h.shape[0]} != "
                         f"{cfg.cond_width}")
    if tape is None:
        tape = Tape(recording=False)
    batch = make_batch([(cloud, probe)], dtype=cfg.np_dtype)
    u, yhat, f = forward_batch(tape, params, cfg, batch, train=train, seed=seed)
    return u.data, yhat.data, float(f.data[0, 0])


# --------------------------------------------------------------------- #
# checkpoints


def checkpoint_id(params: dict, cfg: ModelConfig) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()[:16]


def save_checkpoint(params: dict, cfg: ModelConfig, path,
                    meta: dict | None = None) -> str:
    """Versioned header (architecture descriptor + manifest) then parameter
    blobs in declaration order, little-endian."""
    dt = cfg.np_dtype
    manifest = [{"name": name, "shape": list(p.data.shape)}
                for name, p in params.items()]
    ckpt_id = checkpoint_id(params, cfg)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "arch": cfg.to_dict(),
        "arch_hash": cfg.arch_hash(),
        "checkpoint_id": ckpt_id,
        "params": manifest,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(blob)))
    buf.write(blob)
    for name, p in params.items():
        buf.write(np.ascontiguousarray(p.data, dtype=dt).tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())
    return ckpt_id


def load_checkpoint(path, expect: ModelConfig | None = None):
    """Returns (params, cfg, header). Rejects version or architecture
    mismatches; loaded predictions are bit-identical to the saved model."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {raw[:4]!r}")
    version, blob_len = struct.unpack_from("<BI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[9:9 + blob_len])
    except ValueError as e:
        raise FormatError(f"unreadable checkpoint header: {e}") from None
    cfg = ModelConfig.from_dict(header["arch"])
    if expect is not None and expect.to_dict() != cfg.to_dict():
        raise ArchitectureMismatchError(
            f"checkpoint arch {cfg.to_dict()} != runtime {expect.to_dict()}")
    dt = cfg.np_dtype
    itemsize = np.dtype(dt).itemsize
    params: dict[str, Tensor] = {}
    off = 9 + blob_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) * itemsize
        if off + size > len(raw):
            raise FormatError("checkpoint truncated")
        arr = np.frombuffer(raw, dtype=dt, count=int(np.prod(shape)),
                            offset=off).reshape(shape).copy()
        params[entry["name"]] = Tensor(arr, requires_grad=True)
        off += size
    if off != len(raw):
        raise FormatError(f"{len(raw) - off} trailing bytes in checkpoint")
    return params, cfg, header
