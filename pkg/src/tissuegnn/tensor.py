"""Dense tensors with reverse-mode automatic differentiation.

A `Tape` records every differentiable operation in execution order; calling
`Tape.backward(loss)` replays the records in reverse, accumulating adjoints
additively at fan-out points. Tensors hold numpy arrays (float64 by default,
float32 permitted) and are confined to the tape that produced them.

The op surface is deliberately small: affine maps, elementwise arithmetic,
Swish/ReLU/sigmoid, inverted dropout, column concatenation, row gather,
fixed-size group reductions (the message-passing aggregations), max/mean
pooling, row norms and scalar reductions. No general broadcasting beyond
bias-add and scalar/constant operands.
"""

from __future__ import annotations

import numpy as np

from . import _kernels
from .errors import (
    ContractError,
    EmptyInputError,
    NonFiniteError,
    ShapeError,
)

__all__ = ["Tensor", "Tape", "AdamState", "adam_step"]


class Tensor:
    """Array value tracked on a tape.

    `grad` stays None until a backward pass touches this tensor; repeated
    backward passes without `Tape.zero_grads` accumulate into it.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of operations sufficient to replay adjoints.

    With `recording=False` the same op methods run forward-only (inference
    mode). With `check_finite=True` every op output is validated and a
    non-finite value raises `NonFiniteError` instead of propagating silently.
    """

    def __init__(self, recording: bool = True, check_finite: bool = False):
        self.recording = recording
        self.check_finite = check_finite
        self._nodes = []     # (out, backward_fn), execution order
        self._tensors = []   # every tensor seen, for zero_grads

    # ------------------------------------------------------------------ #
    # bookkeeping

    def leaf(self, data, requires_grad: bool = False) -> Tensor:
        t = Tensor(np.asarray(data), requires_grad)
        self._tensors.append(t)
        return t

    def _finish(self, out: Tensor, inputs, backward) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise NonFiniteError("non-finite value produced by a tape operation")
        needs = self.recording and any(t.requires_grad for t in inputs)
        out.requires_grad = needs
        if needs:
            self._nodes.append((out, backward))
            self._tensors.append(out)
        return out

    def backward(self, loss: Tensor) -> None:
        """Populate d(loss)/d(leaf) for every requires_grad leaf.

        Adjoints of intermediate tensors live only for the duration of the
        pass; leaf tensors accumulate into `.grad`, so repeated backward
        calls without `zero_grads` add up.
        """
        if loss.data.shape != ():
            raise ContractError(
                f"backward expects a scalar loss, got shape {loss.data.shape}"
            )
        if not loss.requires_grad:
            return  # constant loss: no leaves, nothing to do
        produced = {id(out) for out, _ in self._nodes}
        # adjoints borrow the first incoming array (closures hand over fresh
        # arrays or views of finalized grads, and nothing mutates them);
        # fan-in allocates once on the second contribution
        adjoint = {id(loss): (loss, np.ones_like(loss.data))}

        def acc(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            prev = adjoint.get(key)
            if prev is None:
                adjoint[key] = (t, g)
            else:
                adjoint[key] = (t, prev[1] + g)

        for out, fn in reversed(self._nodes):
            entry = adjoint.get(id(out))
            if entry is not None:
                fn(entry[1], acc)
        for key, (t, g) in adjoint.items():
            if key not in produced and t.requires_grad:
                t.accumulate(g)

    def zero_grads(self) -> None:
        for t in self._tensors:
            t.grad = None

    # ------------------------------------------------------------------ #
    # shape checks

    @staticmethod
    def _need_2d(name, t):
        if t.data.ndim != 2:
            raise ShapeError(f"{name} must be 2-D, got shape {t.data.shape}")

    # ------------------------------------------------------------------ #
    # core ops

    def affine(self, x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
        """out[i,j] = sum_k x[i,k] w[k,j] (+ b[j])."""
        self._need_2d("affine input", x)
        self._need_2d("affine weight", w)
        if x.data.shape[1] != w.data.shape[0]:
            raise ShapeError(
                f"affine shape mismatch: x {x.data.shape} @ w {w.data.shape}"
            )
        if b is not None and b.data.shape != (w.data.shape[1],):
            raise ShapeError(
                f"affine bias shape {b.data.shape} != ({w.data.shape[1]},)"
            )
        y = np.matmul(x.data, w.data)
        if b is not None:
            y += b.data
        out = Tensor(y)
        xd, wd = x.data, w.data

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g @ wd.T)
            if w.requires_grad:
                acc(w, xd.T @ g)
            if b is not None and b.requires_grad:
                acc(b, g.sum(axis=0))
        inputs = (x, w) if b is None else (x, w, b)
        return self._finish(out, inputs, backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data + b.data)

        def backward(g, acc):
            if a.requires_grad:
                acc(a, g)
            if b.requires_grad:
                acc(b, g)
        return self._finish(out, (a, b), backward)

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"sub shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data - b.data)

        def backward(g, acc):
            if a.requires_grad:
                acc(a, g)
            if b.requires_grad:
                acc(b, -g)
        return self._finish(out, (a, b), backward)

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        """Elementwise product; also covers squaring via mul(x, x)."""
        if a.data.shape != b.data.shape:
            raise ShapeError(f"mul shape mismatch: {a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data * b.data)
        ad, bd = a.data, b.data

        def backward(g, acc):
            if a.requires_grad:
                acc(a, g * bd)
            if b.requires_grad:
                acc(b, g * ad)
        return self._finish(out, (a, b), backward)

    def scale(self, x: Tensor, c: float) -> Tensor:
        out = Tensor(x.data * c)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * c)
        return self._finish(out, (x,), backward)

    def add_const(self, x: Tensor, arr) -> Tensor:
        """x + constant (broadcastable); no gradient flows to the constant."""
        arr = np.asarray(arr)
        y = x.data + arr
        if y.shape != x.data.shape:
            raise ShapeError(
                f"add_const broadcast changed shape {x.data.shape} -> {y.shape}"
            )
        out = Tensor(y)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g)
        return self._finish(out, (x,), backward)

    def mul_const(self, x: Tensor, arr) -> Tensor:
        """x * constant (broadcastable); no gradient flows to the constant."""
        arr = np.asarray(arr)
        y = x.data * arr
        if y.shape != x.data.shape:
            raise ShapeError(
                f"mul_const broadcast changed shape {x.data.shape} -> {y.shape}"
            )
        out = Tensor(y)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * arr)
        return self._finish(out, (x,), backward)

    def matmul_const(self, x: Tensor, m) -> Tensor:
        """x @ constant matrix (rotation frames etc.); constant gets no grad."""
        m = np.asarray(m)
        self._need_2d("matmul_const input", x)
        if x.data.shape[1] != m.shape[0]:
            raise ShapeError(f"matmul_const mismatch: {x.data.shape} @ {m.shape}")
        out = Tensor(x.data @ m)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g @ m.T)
        return self._finish(out, (x,), backward)

    # ------------------------------------------------------------------ #
    # activations

    @staticmethod
    def _sigmoid(v: np.ndarray) -> np.ndarray:
        # exp overflow saturates cleanly: 1/(1+inf) = 0
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-v))

    def sigmoid(self, x: Tensor) -> Tensor:
        s = self._sigmoid(x.data)
        out = Tensor(s)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * s * (1.0 - s))
        return self._finish(out, (x,), backward)

    def swish(self, x: Tensor) -> Tensor:
        """swish(v) = v * sigmoid(v)."""
        s, y = _kernels.swish_forward(x.data)
        out = Tensor(y)

        def backward(g, acc):
            if x.requires_grad:
                # d/dv v*s(v) = s + v*s*(1-s)
                acc(x, _kernels.swish_backward(g, x.data, s))
        return self._finish(out, (x,), backward)

    def relu(self, x: Tensor) -> Tensor:
        out = Tensor(_kernels.relu_forward(x.data))

        def backward(g, acc):
            if x.requires_grad:
                acc(x, _kernels.relu_backward(g, x.data))
        return self._finish(out, (x,), backward)

    def tanh(self, x: Tensor) -> Tensor:
        t = np.tanh(x.data)
        out = Tensor(t)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * (1.0 - t * t))
        return self._finish(out, (x,), backward)

    def activation(self, x: Tensor, kind: str) -> Tensor:
        if kind == "swish":
            return self.swish(x)
        if kind == "relu":
            return self.relu(x)
        raise ContractError(f"unknown activation kind {kind!r}")

    def dropout(self, x: Tensor, p: float, training: bool, seed: int) -> Tensor:
        """Inverted dropout: survivors scaled by 1/(1-p); identity in eval mode."""
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout requires 0 <= p < 1, got {p}")
        if not training or p == 0.0:
            out = Tensor(x.data.copy())

            def backward(g, acc):
                if x.requires_grad:
                    acc(x, g)
            return self._finish(out, (x,), backward)
        rng = np.random.Generator(np.random.SFC64(seed))  # fast, seed-stable
        draw_dtype = x.data.dtype if x.data.dtype in (np.float32, np.float64) \
            else np.float64
        keep = rng.random(x.data.shape, dtype=draw_dtype) >= p
        scale = np.asarray(1.0 / (1.0 - p), dtype=x.data.dtype)
        mask = keep * scale
        out = Tensor(x.data * mask)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * mask)
        return self._finish(out, (x,), backward)

    # ------------------------------------------------------------------ #
    # structure ops

    def concat_cols(self, parts) -> Tensor:
        parts = list(parts)
        rows = {p.data.shape[0] for p in parts}
        if len(rows) != 1:
            raise ShapeError(f"concat_cols row mismatch: {sorted(rows)}")
        for p in parts:
            self._need_2d("concat_cols part", p)
        out = Tensor(np.concatenate([p.data for p in parts], axis=1))
        widths = [p.data.shape[1] for p in parts]
        offsets = np.cumsum([0] + widths)

        def backward(g, acc):
            for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
                if p.requires_grad:
                    acc(p, g[:, lo:hi])
        return self._finish(out, tuple(parts), backward)

    def gather_rows(self, x: Tensor, idx: np.ndarray,
                    block: int | None = None) -> Tensor:
        """out[e] = x[idx[e]]; backward scatter-adds into the source rows.

        `block=g` asserts idx == repeat(arange(rows), g) so the scatter-add
        can run as a contiguous reshape-sum (the fixed-degree edge pattern).
        """
        self._need_2d("gather_rows input", x)
        idx = np.asarray(idx, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= x.data.shape[0]):
            raise ShapeError(
                f"gather_rows index out of range for {x.data.shape[0]} rows"
            )
        out = Tensor(x.data[idx])
        if block is not None:
            groups = idx.size // block

            def backward(g, acc):
                if x.requires_grad:
                    summed = g.reshape(groups, block, g.shape[1]).sum(axis=1)
                    if groups == x.data.shape[0]:
                        acc(x, summed)
                    else:
                        scattered = np.zeros_like(x.data)
                        scattered[idx[::block]] = summed
                        acc(x, scattered)
            return self._finish(out, (x,), backward)
        if idx.size and x.data.shape[0] and idx.size % x.data.shape[0] == 0:
            reps = idx.size // x.data.shape[0]
            if reps > 1 and idx[0] == 0 and idx[x.data.shape[0] - 1] == \
                    x.data.shape[0] - 1 and idx[x.data.shape[0]] == 0:
                # tiled identity pattern: scatter-add is a stacked sum
                n_rows = x.data.shape[0]
                if np.array_equal(idx, np.tile(np.arange(n_rows), reps)):
                    def backward(g, acc):
                        if x.requires_grad:
                            acc(x, g.reshape(reps, n_rows,
                                             g.shape[1]).sum(axis=0))
                    return self._finish(out, (x,), backward)
        # sort-then-segment plan built lazily: the scatter-add then runs as
        # contiguous reduceat sums instead of per-row accumulation
        plan = []

        def backward(g, acc):
            if x.requires_grad:
                if not plan:
                    order = np.argsort(idx, kind="stable")
                    sorted_idx = idx[order]
                    starts = np.concatenate(
                        ([0], np.flatnonzero(np.diff(sorted_idx)) + 1))
                    plan.append((order, starts, sorted_idx[starts]))
                order, starts, unique_rows = plan[0]
                scattered = np.zeros_like(x.data)
                if idx.size:
                    scattered[unique_rows] = np.add.reduceat(g[order], starts,
                                                             axis=0)
                acc(x, scattered)
        return self._finish(out, (x,), backward)

    def group_sum(self, x: Tensor, group_size: int) -> Tensor:
        """Sum consecutive blocks of `group_size` rows: [G*g, D] -> [G, D]."""
        self._need_2d("group_sum input", x)
        n, d = x.data.shape
        if group_size <= 0 or n % group_size:
            raise ShapeError(f"group_sum: {n} rows not divisible by {group_size}")
        groups = n // group_size
        out = Tensor(x.data.reshape(groups, group_size, d).sum(axis=1))

        def backward(g, acc):
            if x.requires_grad:
                acc(x, np.repeat(g, group_size, axis=0))
        return self._finish(out, (x,), backward)

    def group_pool(self, x: Tensor, group_size: int, kind: str) -> Tensor:
        """Columnwise max/mean over consecutive row blocks: [G*g, D] -> [G, D].

        Max routes gradient to the first argmax element of each block.
        """
        self._need_2d("group_pool input", x)
        n, d = x.data.shape
        if n == 0:
            raise EmptyInputError("group_pool on empty input")
        if group_size <= 0 or n % group_size:
            raise ShapeError(f"group_pool: {n} rows not divisible by {group_size}")
        groups = n // group_size
        blocks = x.data.reshape(groups, group_size, d)
        if kind == "mean":
            out = Tensor(blocks.mean(axis=1))

            def backward(g, acc):
                if x.requires_grad:
                    acc(x, np.repeat(g / group_size, group_size, axis=0))
        elif kind == "max":
            arg = blocks.argmax(axis=1)  # first max per (group, col)
            out = Tensor(np.take_along_axis(blocks, arg[:, None, :], axis=1)[:, 0, :])

            def backward(g, acc):
                if x.requires_grad:
                    routed = np.zeros((groups, group_size, d), dtype=x.data.dtype)
                    np.put_along_axis(routed, arg[:, None, :], g[:, None, :], axis=1)
                    acc(x, routed.reshape(n, d))
        else:
            raise ContractError(f"unknown pool kind {kind!r}")
        return self._finish(out, (x,), backward)

    def pool(self, x: Tensor, kind: str) -> Tensor:
        """Columnwise max or mean over all rows: [N, D] -> [D]."""
        self._need_2d("pool input", x)
        if x.data.shape[0] == 0:
            raise EmptyInputError("pool on empty input")
        pooled = self.group_pool(x, x.data.shape[0], kind)
        return self.reshape(pooled, (x.data.shape[1],))

    def reshape(self, x: Tensor, shape) -> Tensor:
        out = Tensor(x.data.reshape(shape))
        orig = x.data.shape

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g.reshape(orig))
        return self._finish(out, (x,), backward)

    def scale_rows(self, x: Tensor, s: Tensor) -> Tensor:
        """Multiply each row of x [N, D] by the scalar in s [N, 1]."""
        self._need_2d("scale_rows input", x)
        if s.data.shape != (x.data.shape[0], 1):
            raise ShapeError(
                f"scale_rows scales must be [{x.data.shape[0]}, 1], "
                f"got {s.data.shape}"
            )
        out = Tensor(x.data * s.data)

        def backward(g, acc):
            if x.requires_grad:
                acc(x, g * s.data)
            if s.requires_grad:
                acc(s, np.sum(g * x.data, axis=1, keepdims=True))
        return self._finish(out, (x, s), backward)

    def rotz_rows(self, x: Tensor, cos_col: np.ndarray,
                  sin_col: np.ndarray) -> Tensor:
        """Rotate each xyz row about z by a per-row constant angle.

        out = [x c - y s, x s + y c, z]; cos_col/sin_col are [N, 1] constants.
        """
        self._need_2d("rotz_rows input", x)
        if x.data.shape[1] != 3:
            raise ShapeError(f"rotz_rows needs [N, 3], got {x.data.shape}")
        c = np.asarray(cos_col).reshape(-1, 1)
        s = np.asarray(sin_col).reshape(-1, 1)
        if c.shape[0] != x.data.shape[0] or s.shape[0] != x.data.shape[0]:
            raise ShapeError("rotz_rows angle columns must match row count")
        xd = x.data
        out = Tensor(np.column_stack([
            xd[:, 0] * c[:, 0] - xd[:, 1] * s[:, 0],
            xd[:, 0] * s[:, 0] + xd[:, 1] * c[:, 0],
            xd[:, 2],
        ]))

        def backward(g, acc):
            if x.requires_grad:
                # transpose rotation applied to the incoming gradient
                acc(x, np.column_stack([
                    g[:, 0] * c[:, 0] + g[:, 1] * s[:, 0],
                    -g[:, 0] * s[:, 0] + g[:, 1] * c[:, 0],
                    g[:, 2],
                ]))
        return self._finish(out, (x,), backward)

    # ------------------------------------------------------------------ #
    # reductions / norms

    def sqnorm_rows(self, x: Tensor) -> Tensor:
        """Row-wise squared Euclidean norm: [N, D] -> [N, 1]."""
        self._need_2d("sqnorm_rows input", x)
        out = Tensor(np.sum(x.data * x.data, axis=1, keepdims=True))

        def backward(g, acc):
            if x.requires_grad:
                acc(x, 2.0 * x.data * g)
        return self._finish(out, (x,), backward)

    def l2norm_rows(self, x: Tensor, eps: float = 0.0) -> Tensor:
        """Row-wise Euclidean norm: [N, D] -> [N].

        Rows with norm below 1e-300 get a zero subgradient instead of NaN.
        """
        self._need_2d("l2norm_rows input", x)
        norms = np.sqrt(np.sum(x.data * x.data, axis=1) + eps)
        out = Tensor(norms)
        safe = np.where(norms > 1e-300, norms, 1.0)

        def backward(g, acc):
            if x.requires_grad:
                coef = np.where(norms > 1e-300, g / safe, 0.0)
                acc(x, coef[:, None] * x.data)
        return self._finish(out, (x,), backward)

    def sum_all(self, x: Tensor) -> Tensor:
        out = Tensor(np.asarray(x.data.sum()))

        def backward(g, acc):
            if x.requires_grad:
                acc(x, np.full_like(x.data, g))
        return self._finish(out, (x,), backward)

    def mean_all(self, x: Tensor) -> Tensor:
        if x.data.size == 0:
            raise EmptyInputError("mean_all on empty input")
        n = x.data.size
        out = Tensor(np.asarray(x.data.mean()))

        def backward(g, acc):
            if x.requires_grad:
                acc(x, np.full_like(x.data, g / n))
        return self._finish(out, (x,), backward)


# ---------------------------------------------------------------------- #
# Adam


class AdamState:
    """Per-parameter first/second moments plus step counter.

    Defaults follow the standard Adam constants (beta1=0.9, beta2=0.999,
    eps=1e-8); moments are allocated lazily to match each parameter.
    """

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(params: dict, grads: dict, state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place on `params` data arrays.

    `params` maps name -> Tensor, `grads` maps name -> ndarray (missing or
    None entries are treated as zero gradient: moments decay, no step for
    fresh parameters).
    """
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step grad shape {g.shape} != param shape {p.data.shape} ({name})"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return state
