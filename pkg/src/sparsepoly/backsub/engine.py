"""Backsubstitution passes over a network DAG.

A pass rewrites the polyhedral bound of every query neuron backwards, one
layer at a time, and keeps the best concrete candidate seen so far.  Rows of
a :class:`BoundMatrix` are independent, so every step is row-parallel.

Concretization happens after a step whenever the bound is supported on a
single layer that is not *relu fed* (an affine layer consumed only by ReLU
layers).  In practice that means at the input, at ReLU outputs and at
affine layers feeding other affine layers, never inside a residual branch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from ..arith import MPQ_ZERO
from ..depsets import conv_frame, fit_window, window_indices
from ..network import LayerKind, Network, residual_block
from .matrix import BoundMatrix, PassStats, Polarity

_CELL_FOOTPRINT = 128   # bytes per coefficient cell including temporaries


@dataclass(frozen=True)
class BacksubOptions:
    """Engine knobs.  None of them changes the resulting bounds.

    ``cadence`` is the number of concretizations between early-termination
    checks; 0 disables mid-pass checks while keeping the up-front filter.
    ``materialize_conv`` replaces GBC with a dense product against the fully
    materialized convolution matrix (the baseline used for op counting).
    """
    early_term: bool = True
    chunk_rows: int | None = None
    memory_budget: int = 1 << 30
    cadence: int = 1
    materialize_conv: bool = False
    workers: int | None = None

    def __post_init__(self):
        if self.chunk_rows is not None and self.chunk_rows < 1:
            raise ValueError("chunk_rows must be positive")
        if self.memory_budget < 1:
            raise ValueError("memory_budget must be positive")
        if self.cadence < 0:
            raise ValueError("cadence must be non-negative")
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be positive")


@dataclass
class BoundsContext:
    """Everything a pass reads: current bounds, biases and relaxations.

    ``lower``/``upper`` hold flat per-layer bound arrays; ``bias`` maps an
    affine layer to its (possibly error-widened) per-neuron bias interval;
    ``relax`` maps a ReLU layer to the interval relaxation constants of its
    input neurons.
    """
    net: Network
    arith: object
    lower: list
    upper: list
    bias: dict
    relax: dict = field(default_factory=dict)
    _blocks: dict = field(default_factory=dict)

    def block(self, exit_id: int):
        if exit_id not in self._blocks:
            self._blocks[exit_id] = residual_block(self.net, exit_id)
        return self._blocks[exit_id]


# ---------------------------------------------------------------------------
# helpers


def _zero(arith):
    return 0.0 if arith.dtype is np.float64 else MPQ_ZERO


def _map(iv, fn):
    """Apply ``fn`` to both endpoints, keeping ``lo is hi`` sharing."""
    lo = fn(iv[0])
    return (lo, lo) if iv[1] is iv[0] else (lo, fn(iv[1]))


def _gather(iv, idx):
    return _map(iv, lambda a: a[idx])


def _reshape(iv, shape):
    return _map(iv, lambda a: a.reshape(shape))


def _regrid(arith, coef, src_origins, dst_origins, dst_width):
    """Move per-row windows to new origins and a new shared width.

    Cells of the destination outside the source window get zero; source
    cells outside the destination are dropped (callers guarantee those are
    padding cells).
    """
    src_w, src_h = coef[0].shape[1], coef[0].shape[2]
    if (dst_width == (src_w, src_h)) and np.array_equal(src_origins, dst_origins):
        return coef
    zero = _zero(arith)
    out = coef
    for axis, src_len in ((1, src_w), (2, src_h)):
        off = dst_origins[:, axis - 1] - src_origins[:, axis - 1]
        idx = off[:, None] + np.arange(dst_width[axis - 1])[None, :]
        valid = (idx >= 0) & (idx < src_len)
        idx = np.clip(idx, 0, src_len - 1)
        shape = [idx.shape[0], 1, 1, 1]
        shape[axis] = idx.shape[1]
        idx = idx.reshape(shape)
        valid = valid.reshape(shape)

        def take(a, idx=idx, valid=valid, axis=axis):
            g = np.take_along_axis(a, idx, axis=axis)
            return np.where(valid, g, zero) if not valid.all() else g
        out = _map(out, take)
    if arith.dtype is object:
        out = _map(out, lambda a: a.astype(object, copy=False))
    return out


def _window(M: BoundMatrix, layer) -> np.ndarray:
    return window_indices(M.origins, M.width, layer.shape)


def dense_conv_matrix(net: Network, layer_id: int, mode):
    """Fully materialized (zero-filled) interval matrix of a conv layer, shape (N_out, N_in)."""
    key = ("dense_conv", layer_id, mode)
    if key not in net._cache:
        layer = net.layers[layer_id]
        pred = net.layers[layer.predecessors[0]]
        csr = net.csr(layer_id)
        wlo, whi = net.prepared(layer_id, mode)["csr_weight"]
        rows = np.repeat(np.arange(layer.size), np.diff(csr.indptr))

        def fill(w):
            z = np.zeros((layer.size, pred.size), dtype=w.dtype)
            if w.dtype == object:
                z[:] = MPQ_ZERO
            z[rows, csr.indices] = w
            return z
        lo = fill(wlo)
        net._cache[key] = (lo, lo) if whi is wlo else (lo, fill(whi))
    return net._cache[key]


# ---------------------------------------------------------------------------
# matrix construction and single steps


def identity_matrix(ctx: BoundsContext, layer_id: int, polarity: Polarity, rows) -> BoundMatrix:
    """One-hot rows over the query layer itself; a step turns them into first dependence sets."""
    arith = ctx.arith
    layer = ctx.net.layers[layer_id]
    W, H, C = layer.shape
    rows = np.asarray(rows, dtype=np.int64)
    R = rows.shape[0]
    origins = np.stack([rows // (H * C), (rows // C) % H], axis=1).astype(np.int64)
    lo, hi = arith.zeros((R, 1, 1, C))
    one = arith.scalar(1)
    lo[np.arange(R), 0, 0, rows % C] = one
    if hi is not lo:
        hi[np.arange(R), 0, 0, rows % C] = one
    return BoundMatrix(layer_id, layer_id, polarity, (lo, hi), arith.zeros(R), origins, rows)


def init_bound_matrix(ctx: BoundsContext, layer_id: int, polarity: Polarity, rows) -> BoundMatrix:
    """Affine coefficients and bias of each query neuron over its first dependence set.

    For a residual exit the matrix stays at the exit; the join step itself
    splits it into the two branches.
    """
    layer = ctx.net.layers[layer_id]
    if not layer.is_affine:
        raise ValueError(f"layer {layer_id} ({layer.kind.value}) is not affine")
    M = identity_matrix(ctx, layer_id, polarity, rows)
    if layer.kind is LayerKind.RESIDUAL:
        return M
    return step(ctx, M, PassStats(), BacksubOptions())


def _bias_const(ctx, M, layer):
    """Constant term plus coefficient-weighted bias of ``layer`` over each row's window."""
    b = _gather(ctx.bias[layer.id], _window(M, layer))
    return ctx.arith.rowdot(M.flat_coef(), b, M.const)


def backsub_dense_step(ctx: BoundsContext, M: BoundMatrix, stats: PassStats) -> BoundMatrix:
    arith, net = ctx.arith, ctx.net
    layer = net.layers[M.layer]
    pred = net.layers[layer.predecessors[0]]
    const = _bias_const(ctx, M, layer)
    flat = arith.matmul(M.flat_coef(), net.prepared(layer.id, arith.mode)["weight"])
    stats.count("dense", M.rows * layer.size * pred.size)
    return M.with_(layer=pred.id, coef=_reshape(flat, (M.rows,) + pred.shape), const=const,
                   origins=np.zeros((M.rows, 2), dtype=np.int64))


def gbc_step(ctx: BoundsContext, M: BoundMatrix, stats: PassStats) -> BoundMatrix:
    """Convolution step on per-row windows (one transpose convolution per row)."""
    arith, net = ctx.arith, ctx.net
    layer = net.layers[M.layer]
    pred = net.layers[layer.predecessors[0]]
    const = _bias_const(ctx, M, layer)
    filt = net.prepared(layer.id, arith.mode)["weight"]
    raw = arith.gbc(M.coef, filt, layer.stride)
    raw_origins, raw_width = conv_frame(M.origins, M.width, layer)
    origins, width = fit_window(raw_origins, raw_width, pred.shape[:2])
    coef = _regrid(arith, raw, raw_origins, origins, width)
    fw, fh, cin, cout = filt[0].shape
    stats.count("conv", M.rows * M.width[0] * M.width[1] * fw * fh * cin * cout)
    return M.with_(layer=pred.id, coef=coef, const=const, origins=origins)


def materialized_conv_step(ctx: BoundsContext, M: BoundMatrix, stats: PassStats) -> BoundMatrix:
    """Baseline: expand rows to the whole layer and multiply by the dense conv matrix."""
    arith, net = ctx.arith, ctx.net
    layer = net.layers[M.layer]
    pred = net.layers[layer.predecessors[0]]
    const = _bias_const(ctx, M, layer)
    full = np.zeros((M.rows, 2), dtype=np.int64)
    coef = _regrid(arith, M.coef, M.origins, full, layer.shape[:2])
    flat = _reshape(coef, (M.rows, -1))
    out = arith.matmul(flat, dense_conv_matrix(net, layer.id, arith.mode))
    stats.count("conv", M.rows * layer.size * pred.size)
    return M.with_(layer=pred.id, coef=_reshape(out, (M.rows,) + pred.shape), const=const,
                   origins=full)


def backsub_relu_step(ctx: BoundsContext, M: BoundMatrix, stats: PassStats) -> BoundMatrix:
    """Sign-directed substitution of the relaxation of each ReLU input."""
    arith = ctx.arith
    layer = ctx.net.layers[M.layer]
    if layer.id not in ctx.relax:
        raise KeyError(f"no relaxation constants for ReLU layer {layer.id}")
    idx = _window(M, layer)
    relax = tuple(_gather(r, idx) for r in ctx.relax[layer.id])
    flat, const = arith.relu_subst(M.flat_coef(), relax, M.polarity.upper, M.const)
    stats.count("relu", idx.size)
    return M.with_(layer=layer.predecessors[0], coef=_reshape(flat, M.coef[0].shape), const=const)


def backsub_residual(ctx: BoundsContext, M: BoundMatrix, stats: PassStats,
                     options: BacksubOptions) -> BoundMatrix:
    """Walk both branches of a residual block on copies of ``M`` and join them at the head."""
    arith, net = ctx.arith, ctx.net
    layer = net.layers[M.layer]
    block = ctx.block(layer.id)
    head = net.layers[block.head]
    pa, pb = layer.predecessors
    # the join's own rounding allowance travels with branch a
    ma = M.with_(layer=pa, const=_bias_const(ctx, M, layer))
    mb = M.with_(layer=pb, const=arith.zeros(M.rows))
    branches = []
    for m in (ma, mb):
        while m.layer != head.id:
            m = step(ctx, m, stats, options)
        branches.append(m)
    ma, mb = branches
    (wa, ha), (wb, hb) = ma.width, mb.width
    lo = np.minimum(ma.origins, mb.origins)
    end = np.maximum(ma.origins + np.array([wa, ha]), mb.origins + np.array([wb, hb]))
    width = tuple(int(v) for v in (end - lo).max(axis=0)) if M.rows else (1, 1)
    origins, width = fit_window(lo, width, head.shape[:2])
    ca = _regrid(arith, ma.coef, ma.origins, origins, width)
    cb = _regrid(arith, mb.coef, mb.origins, origins, width)
    stats.count("residual", M.rows * width[0] * width[1] * head.shape[2])
    return M.with_(layer=head.id, coef=arith.add(ca, cb), const=arith.add(ma.const, mb.const),
                   origins=origins)


def step(ctx: BoundsContext, M: BoundMatrix, stats: PassStats, options: BacksubOptions) -> BoundMatrix:
    kind = ctx.net.layers[M.layer].kind
    stats.steps += 1
    if kind is LayerKind.DENSE:
        return backsub_dense_step(ctx, M, stats)
    if kind is LayerKind.CONV:
        if options.materialize_conv:
            return materialized_conv_step(ctx, M, stats)
        return gbc_step(ctx, M, stats)
    if kind is LayerKind.RELU:
        return backsub_relu_step(ctx, M, stats)
    if kind is LayerKind.RESIDUAL:
        return backsub_residual(ctx, M, stats, options)
    raise ValueError("cannot backsubstitute through the input layer")


def concretize(ctx: BoundsContext, M: BoundMatrix) -> np.ndarray:
    """Candidate bound of every row from the concrete bounds of the current layer."""
    idx = _window(M, ctx.net.layers[M.layer])
    xl = ctx.lower[M.layer][idx]
    xu = ctx.upper[M.layer][idx]
    return ctx.arith.concretize(M.flat_coef(), xl, xu, M.const, M.polarity.upper)


def compact_rows(M: BoundMatrix, keep: np.ndarray) -> tuple[BoundMatrix, np.ndarray]:
    """Drop terminated rows, keeping the survivors in their original order.

    The destination of each surviving row is its exclusive prefix sum over
    the keep flags.
    """
    keep = np.asarray(keep, dtype=bool)
    if keep.all():
        return M, M.row_index
    dest = np.cumsum(keep) - 1
    sel = np.empty(int(keep.sum()), dtype=np.int64)
    sel[dest[keep]] = np.flatnonzero(keep)
    M2 = M.with_(coef=_gather(M.coef, sel), const=_gather(M.const, sel),
                 origins=M.origins[sel], row_index=M.row_index[sel])
    return M2, M2.row_index


# ---------------------------------------------------------------------------
# full pass


def chunk_size(net: Network, options: BacksubOptions) -> int:
    if options.chunk_rows is not None:
        return options.chunk_rows
    widest = max(layer.size for layer in net.layers)
    return max(1, options.memory_budget // (_CELL_FOOTPRINT * widest))


def _set_workers(workers: int | None) -> None:
    if workers is not None:
        numba.set_num_threads(min(workers, numba.config.NUMBA_NUM_THREADS))


def _terminated(arith, values) -> np.ndarray:
    return np.asarray(values <= (0.0 if arith.dtype is np.float64 else MPQ_ZERO), dtype=bool)


def run_backsubstitution(ctx: BoundsContext, layer_id: int, polarity: Polarity,
                         options: BacksubOptions = BacksubOptions(), rows=None,
                         best=None, stats: PassStats | None = None):
    """Refine one polarity of the bounds of ``layer_id``.

    ``best`` starts from the current bound of the layer (or the given array)
    and only improves.  With early termination on, an upper pass over a
    relu-fed layer drops every row whose best upper bound is already <= 0:
    its ReLU output is exactly zero, so further refinement cannot change
    anything downstream.  Returns ``(best, stats)``.
    """
    net, arith = ctx.net, ctx.arith
    upper = polarity.upper
    stats = stats if stats is not None else PassStats()
    if best is None:
        best = (ctx.upper if upper else ctx.lower)[layer_id]
    best = best.copy()
    rows = np.arange(net.layers[layer_id].size) if rows is None else np.asarray(rows, dtype=np.int64)
    et = options.early_term and upper and net.relu_fed(layer_id)
    if et:
        done = _terminated(arith, best[rows])
        stats.rows_terminated += int(done.sum())
        stats.rows_processed += int(done.sum())
        rows = rows[~done]
    _set_workers(options.workers)
    better = arith.minimum if upper else arith.maximum
    size = chunk_size(net, options)
    for start in range(0, rows.shape[0], size):
        chunk = rows[start:start + size]
        stats.rows_processed += chunk.shape[0]
        M = identity_matrix(ctx, layer_id, polarity, chunk)
        n_conc = 0
        while M.layer != 0 and M.rows:
            M = step(ctx, M, stats, options)
            if net.relu_fed(M.layer):
                continue
            cand = concretize(ctx, M)
            stats.count("concretize", M.rows * M.flat_coef()[0].shape[1])
            best[M.row_index] = better(best[M.row_index], cand)
            n_conc += 1
            if et and options.cadence and n_conc % options.cadence == 0 and M.layer != 0:
                done = _terminated(arith, best[M.row_index])
                if done.any():
                    stats.rows_terminated += int(done.sum())
                    M, _ = compact_rows(M, ~done)
    return best, stats
