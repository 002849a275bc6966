"""Polyhedral analysis driver and L-infinity robustness certification."""
from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .arith import arith_for
from .backsub import BacksubOptions, BoundsContext, PassStats, Polarity, run_backsubstitution
from .interval import Interval, SoundnessMode, outward
from .network import (InputBox, LayerKind, LayerSpec, Network, ModelError,
                      forward_interval_state, propagate_layer)


class Status(enum.Enum):
    STABLE_POS = "stable_pos"
    STABLE_NEG = "stable_neg"
    UNSTABLE = "unstable"


class VerdictKind(str, enum.Enum):
    VERIFIED = "verified"
    UNKNOWN = "unknown"


@dataclass
class NeuronBounds:
    """Concrete bounds of one layer; ``relax`` is set on ReLU layers and
    describes their input neurons as ``(alpha, beta, gamma, delta)``, each an
    interval array ``(lo, hi)``."""
    layer: int
    lower: np.ndarray
    upper: np.ndarray
    relax: tuple | None = None

    def status(self) -> list[Status]:
        out = []
        for l, u in zip(self.lower, self.upper):
            if l >= 0:
                out.append(Status.STABLE_POS)
            elif u <= 0:
                out.append(Status.STABLE_NEG)
            else:
                out.append(Status.UNSTABLE)
        return out

    def as_fractions(self) -> tuple[list[Fraction], list[Fraction]]:
        return [_frac(v) for v in self.lower], [_frac(v) for v in self.upper]


def _frac(v) -> Fraction:
    if isinstance(v, float):
        return Fraction(v)
    return Fraction(int(v.numerator), int(v.denominator))


@dataclass
class AnalysisResult:
    mode: SoundnessMode
    bounds: list[NeuronBounds]
    stats: PassStats

    def lower(self, layer: int) -> np.ndarray:
        return self.bounds[layer].lower

    def upper(self, layer: int) -> np.ndarray:
        return self.bounds[layer].upper


@dataclass
class Verdict:
    result: VerdictKind
    label: int
    margins: list            # lower bound of o_label - o_j per class; None at the label
    runtime_ns: int
    rows_processed: int
    rows_terminated: int
    stats: PassStats = field(repr=False, default_factory=PassStats)

    @property
    def verified(self) -> bool:
        return self.result is VerdictKind.VERIFIED


def relu_relaxation(l, u, mode=SoundnessMode.WIDENED_FLOAT64) -> tuple[Interval, Interval, Interval, Interval]:
    """Linear bounds ``alpha*x + beta <= relu(x) <= gamma*x + delta`` on ``[l, u]``.

    The upper bound is the chord through (l, 0) and (u, u); the lower slope
    is 1 when ``u > -l`` and 0 otherwise.
    """
    mode = SoundnessMode.parse(mode)
    if l > u:
        raise ValueError(f"empty interval [{l}, {u}]")
    arith = arith_for(mode)
    lo = arith.from_exact(np.array([Fraction(l)], dtype=object))[0]
    hi = arith.from_exact(np.array([Fraction(u)], dtype=object))[1]
    if mode is SoundnessMode.WIDENED_FLOAT64:
        lo, hi = lo.astype(np.float64), hi.astype(np.float64)
    consts = arith.relaxation(lo, hi)
    out = []
    for a, b in consts:
        x, y = a[0], b[0]
        if mode is SoundnessMode.EXACT_RATIONAL:
            x = y = _frac(x)
        out.append(Interval(x, y, mode))
    return tuple(out)


def _refresh(ctx: BoundsContext, layer: LayerSpec):
    """Forward interval of ``layer`` from the current (refined) predecessor bounds."""
    arith = ctx.arith
    if layer.kind is LayerKind.RESIDUAL:
        l, u = propagate_layer(ctx.net, layer, ctx.lower, ctx.upper, arith, None)
        return arith.add_bounds((l, u), ctx.bias[layer.id])
    return propagate_layer(ctx.net, layer, ctx.lower, ctx.upper, arith, ctx.bias.get(layer.id))


def analyze(net: Network, box: InputBox, mode=SoundnessMode.WIDENED_FLOAT64,
            options: BacksubOptions = BacksubOptions(), extra_queries=()) -> AnalysisResult:
    """Bounds for every layer.

    Layers are visited in topological order.  Each layer first gets a forward
    interval from its refined predecessors (never looser than the preliminary
    interval pass); query layers are then refined by an upper and a lower
    backsubstitution pass.  ReLU relaxations are computed as soon as their
    input layer is final.
    """
    arith = arith_for(mode)
    prelim = forward_interval_state(net, box, arith.mode)
    ctx = BoundsContext(net, arith, [prelim.lower[0]], [prelim.upper[0]], prelim.bias)
    queries = set(net.query_layers()) | {int(q) for q in extra_queries}
    stats = PassStats()
    for layer in net.layers[1:]:
        l, u = _refresh(ctx, layer)
        ctx.lower.append(arith.maximum(l, prelim.lower[layer.id]))
        ctx.upper.append(arith.minimum(u, prelim.upper[layer.id]))
        if layer.id in queries:
            _refine(ctx, layer.id, options, stats)
        if layer.kind is LayerKind.RELU:
            p = layer.predecessors[0]
            ctx.relax[layer.id] = arith.relaxation(ctx.lower[p], ctx.upper[p])
    bounds = [NeuronBounds(i, ctx.lower[i], ctx.upper[i], ctx.relax.get(i))
              for i in range(len(net.layers))]
    return AnalysisResult(arith.mode, bounds, stats)


def _refine(ctx: BoundsContext, layer_id: int, options: BacksubOptions, stats: PassStats) -> None:
    arith, net = ctx.arith, ctx.net
    u, _ = run_backsubstitution(ctx, layer_id, Polarity.UPPER, options, stats=stats)
    ctx.upper[layer_id] = u
    rows = np.arange(net.layers[layer_id].size)
    if options.early_term and net.relu_fed(layer_id):
        # the lower bound of a neuron known to be <= 0 is never read again
        zero = 0.0 if arith.dtype is np.float64 else arith.scalar(0)
        dead = np.asarray(u <= zero, dtype=bool)
        rows = rows[~dead]
    l, _ = run_backsubstitution(ctx, layer_id, Polarity.LOWER, options, rows=rows, stats=stats)
    ctx.lower[layer_id] = l


def margin_network(net: Network, label: int) -> Network:
    """``net`` with an extra dense layer computing ``o_label - o_j`` for every j != label."""
    k = net.output_size
    if not 0 <= label < k:
        raise ModelError(f"label {label} out of range for {k} classes")
    w = np.full((k - 1, k), Fraction(0), dtype=object)
    for r, j in enumerate(j for j in range(k) if j != label):
        w[r, label] = Fraction(1)
        w[r, j] = Fraction(-1)
    b = np.full(k - 1, Fraction(0), dtype=object)
    spec = LayerSpec(len(net.layers), LayerKind.DENSE, (net.output.id,), (1, 1, k - 1), w, b)
    return Network(net.layers + (spec,), _cache=dict(net._cache))


def _report_value(v) -> float:
    """Largest binary64 not above the bound (so a reported margin stays a lower bound)."""
    return v if isinstance(v, float) else outward(_frac(v))[0]


def verify_robustness(net: Network, image, epsilon, label: int,
                      mode=SoundnessMode.WIDENED_FLOAT64,
                      options: BacksubOptions = BacksubOptions(), clamp: bool = True) -> Verdict:
    """Try to prove every input within ``epsilon`` of ``image`` is classified as ``label``."""
    start = time.perf_counter_ns()
    aug = margin_network(net, label)
    res = analyze(aug, InputBox(image, epsilon, clamp), mode, options,
                  extra_queries=(net.output.id,))
    lows = res.lower(aug.output.id)
    margins, it = [], iter(lows)
    for j in range(net.output_size):
        margins.append(None if j == label else next(it))
    ok = all(m > 0 for m in lows)
    return Verdict(VerdictKind.VERIFIED if ok else VerdictKind.UNKNOWN, label,
                   [None if m is None else _report_value(m) for m in margins],
                   time.perf_counter_ns() - start, res.stats.rows_processed,
                   res.stats.rows_terminated, res.stats)
