"""Dependence-set geometry for convolutional and residual networks.

The m-th dependence set of a neuron is the set of neurons m steps back in the
network DAG that can influence it.  Along a chain of convolutions it is an
axis-aligned cuboid spanning all channels, whose width and origin follow
O(1) recurrences:

    width:   W_0 = 1,  W_{m+1} = (W_m - 1) * s + f
    stride:  S_0 = 1,  S_{m+1} = S_m * s
    origin:  o_0 = q,  o_{m+1} = o_m * s - p        (o_m = S_m * q when p = 0)

All functions work per spatial axis; filters and strides may differ between
the w and h directions.
"""
from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Iterable, Sequence

import numpy as np

from .network import LayerKind, Network, residual_block


@dataclass(frozen=True)
class ConvStep:
    """Geometry of one convolution along one axis."""
    f: int
    s: int = 1
    p: int = 0

    @classmethod
    def from_layer(cls, layer, axis: int) -> "ConvStep":
        return cls(layer.weight.shape[axis], layer.stride[axis], layer.padding[axis])


def _steps(chain) -> list[ConvStep]:
    out = []
    for item in chain:
        if isinstance(item, ConvStep):
            out.append(item)
        else:
            out.append(ConvStep(*item))
    return out


def dep_width(chain: Iterable) -> int:
    """Width of the dependence cuboid after backsubstituting through ``chain``.

    ``chain`` lists (f, s[, p]) from the query layer downwards.
    """
    w = 1
    for step in _steps(chain):
        w = (w - 1) * step.s + step.f
    return w


def dep_size(width, channels: int) -> int:
    """Number of neurons in a cuboid of the given width (int or (w, h) pair)."""
    if isinstance(width, int):
        return width * width * channels
    return width[0] * width[1] * channels


def accumulated_stride(strides: Iterable[int]) -> int:
    return prod(strides, start=1)


def dep_position(query: int | Sequence[int], chain: Iterable) -> int | tuple[int, ...]:
    """Smallest coordinate of the dependence cuboid, per axis.

    With zero padding this is ``accumulated_stride * query``; each padded
    step shifts the origin by ``-p`` before later strides scale it, so the
    origin can be negative.
    """
    steps = _steps(chain)

    def one(q):
        o = q
        for st in steps:
            o = o * st.s - st.p
        return o

    if isinstance(query, (int, np.integer)):
        return one(int(query))
    return tuple(one(int(q)) for q in query)


@dataclass(frozen=True)
class DepCuboid:
    layer: int
    origin_w: int
    origin_h: int
    width_w: int
    width_h: int
    channels: int

    @property
    def width(self) -> tuple[int, int]:
        return self.width_w, self.width_h

    @property
    def origin(self) -> tuple[int, int]:
        return self.origin_w, self.origin_h

    @property
    def size(self) -> int:
        return self.width_w * self.width_h * self.channels

    def clip(self, grid_w: int, grid_h: int) -> "DepCuboid":
        """Intersection with the layer grid."""
        w0, h0 = max(self.origin_w, 0), max(self.origin_h, 0)
        w1 = min(self.origin_w + self.width_w, grid_w)
        h1 = min(self.origin_h + self.width_h, grid_h)
        if w1 <= w0 or h1 <= h0:
            raise ValueError("cuboid does not intersect the layer grid")
        return DepCuboid(self.layer, w0, h0, w1 - w0, h1 - h0, self.channels)

    def cells(self) -> set[tuple[int, int, int, int]]:
        return {(self.layer, w, h, d)
                for w in range(self.origin_w, self.origin_w + self.width_w)
                for h in range(self.origin_h, self.origin_h + self.width_h)
                for d in range(self.channels)}


def full_cuboid(net: Network, layer_id: int) -> DepCuboid:
    w, h, c = net.layers[layer_id].shape
    return DepCuboid(layer_id, 0, 0, w, h, c)


def step_down(net: Network, cub: DepCuboid) -> DepCuboid:
    """First dependence set of a (grid-clipped) cuboid in a single-predecessor layer."""
    layer = net.layers[cub.layer]
    if layer.kind is LayerKind.RESIDUAL:
        raise ValueError(f"layer {layer.id} is a residual exit; use dep_split_residual")
    if layer.kind is LayerKind.INPUT:
        raise ValueError("the input layer has no predecessors")
    pred = net.layers[layer.predecessors[0]]
    pw, ph, pc = pred.shape
    if layer.kind is LayerKind.DENSE:
        return full_cuboid(net, pred.id)
    if layer.kind is LayerKind.RELU:
        return DepCuboid(pred.id, cub.origin_w, cub.origin_h, cub.width_w, cub.width_h, pc)
    sw_, sh_ = ConvStep.from_layer(layer, 0), ConvStep.from_layer(layer, 1)
    raw = DepCuboid(pred.id,
                    dep_position(cub.origin_w, [sw_]), dep_position(cub.origin_h, [sh_]),
                    dep_width([sw_]) + (cub.width_w - 1) * sw_.s,
                    dep_width([sh_]) + (cub.width_h - 1) * sh_.s, pc)
    return raw.clip(pw, ph)


def neuron_cuboid(net: Network, layer_id: int, neuron: Sequence[int]) -> DepCuboid:
    """The zeroth dependence set of a neuron as a one-column cuboid over all channels."""
    w, h = int(neuron[0]), int(neuron[1])
    return DepCuboid(layer_id, w, h, 1, 1, net.layers[layer_id].shape[2])


def dependence_chain(net: Network, layer_id: int, neuron: Sequence[int], steps: int) -> list[DepCuboid]:
    """Cuboids D^1..D^steps of a neuron along a single-predecessor chain.

    Each step is clipped to the grid before the next one, so the result is
    the exact bounding box of the DAG reachability set.
    """
    cub = neuron_cuboid(net, layer_id, neuron)
    out = []
    for _ in range(steps):
        cub = step_down(net, cub)
        out.append(cub)
    return out


def dep_set_first(net: Network, layer_id: int, neurons: Iterable[Sequence[int]]):
    """First dependence set of a set of neurons of one layer.

    Convolution and dense layers return a :class:`DepCuboid` (the bounding
    cuboid of the union, which is exact for contiguous neuron sets); ReLU and
    residual layers are index preserving and return the explicit neuron set
    ``{(layer, w, h, d)}`` in each predecessor.
    """
    layer = net.layers[layer_id]
    neurons = [tuple(int(v) for v in n) for n in neurons]
    if not neurons:
        raise ValueError("empty neuron set")
    if layer.kind is LayerKind.INPUT:
        raise ValueError("the input layer has no predecessors")
    if layer.kind in (LayerKind.RELU, LayerKind.RESIDUAL):
        return {(p, w, h, d) for p in layer.predecessors for (w, h, d) in neurons}
    if layer.kind is LayerKind.DENSE:
        return full_cuboid(net, layer.predecessors[0])
    boxes = [step_down(net, neuron_cuboid(net, layer_id, n)) for n in neurons]
    w0 = min(b.origin_w for b in boxes)
    h0 = min(b.origin_h for b in boxes)
    w1 = max(b.origin_w + b.width_w for b in boxes)
    h1 = max(b.origin_h + b.width_h for b in boxes)
    return DepCuboid(boxes[0].layer, w0, h0, w1 - w0, h1 - h0, boxes[0].channels)


def dep_split_residual(net: Network, exit_id: int, neuron: Sequence[int]) -> tuple[DepCuboid, DepCuboid]:
    """Dependence cuboids of a residual-exit neuron through branch a and branch b.

    Each branch is followed down to the block head; the two cuboids both live
    in the head layer but generally differ in size and origin.  An identity
    skip branch yields the neuron's own column (width 1).
    """
    block = residual_block(net, exit_id)
    out = []
    for branch in (block.branch_a, block.branch_b):
        if branch:
            cub = neuron_cuboid(net, branch[0], neuron)
            for _ in branch:
                cub = step_down(net, cub)
        else:
            cub = neuron_cuboid(net, block.head, neuron)
        out.append(cub)
    return out[0], out[1]


# ---------------------------------------------------------------------------
# Vectorised frame geometry used by the engine.  A frame is a per-row origin
# array of shape (R, 2) and one shared (width_w, width_h).


def conv_frame(origins: np.ndarray, width: tuple[int, int], layer) -> tuple[np.ndarray, tuple[int, int]]:
    """Unclipped frame in the predecessor of conv ``layer``."""
    (fw, fh), (sw, sh), (pw, ph) = layer.weight.shape[:2], layer.stride, layer.padding
    new = np.empty_like(origins)
    new[:, 0] = origins[:, 0] * sw - pw
    new[:, 1] = origins[:, 1] * sh - ph
    return new, ((width[0] - 1) * sw + fw, (width[1] - 1) * sh + fh)


def fit_window(origins: np.ndarray, width: tuple[int, int], grid: tuple[int, int]):
    """Shift each row's window inside the grid, keeping a common width.

    Returns the new origins and width.  The fitted window contains every
    in-grid cell of the original one.
    """
    ww, wh = min(width[0], grid[0]), min(width[1], grid[1])
    new = np.empty_like(origins)
    new[:, 0] = np.clip(origins[:, 0], 0, grid[0] - ww)
    new[:, 1] = np.clip(origins[:, 1], 0, grid[1] - wh)
    return new, (ww, wh)


def window_indices(origins: np.ndarray, width: tuple[int, int], shape: tuple[int, int, int]) -> np.ndarray:
    """Flat neuron indices (R, Ww*Wh*C) of each row's window in a layer."""
    _, H, C = shape
    ww, wh = width
    w = origins[:, 0, None, None, None] + np.arange(ww)[None, :, None, None]
    h = origins[:, 1, None, None, None] + np.arange(wh)[None, None, :, None]
    c = np.arange(C)[None, None, None, :]
    return ((w * H + h) * C + c).reshape(origins.shape[0], -1)
