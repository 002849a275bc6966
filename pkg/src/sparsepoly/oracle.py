"""Slow, independent reference implementations for testing.

Nothing here reuses the engine's kernels or arithmetic backends: layers are
rebuilt as explicit sparse row maps from the raw weights with plain loops,
and the reference analyzer computes in :class:`fractions.Fraction`.
"""
from __future__ import annotations

from fractions import Fraction

import numpy as np

from .network import InputBox, LayerKind, Network

MAX_REFERENCE_NEURONS = 2000
_ZERO = Fraction(0)


# ---------------------------------------------------------------------------
# naive layer maps


def _flat(shape, w, h, c) -> int:
    return (w * shape[1] + h) * shape[2] + c


def affine_rows(net: Network, layer_id: int) -> tuple[list[dict], list[Fraction]]:
    """Row ``i`` of an affine layer as ``{input index: weight}`` plus its bias.

    Convolutions are expanded with nested loops; out-of-grid taps (zero
    padding) are dropped.  Residual joins have no rows of their own.
    """
    key = ("oracle_rows", layer_id)
    if key in net._cache:
        return net._cache[key]
    layer = net.layers[layer_id]
    if layer.kind is LayerKind.DENSE:
        rows = [{j: Fraction(v) for j, v in enumerate(r) if v != 0} for r in layer.weight]
        bias = [Fraction(b) for b in layer.bias]
    elif layer.kind is LayerKind.CONV:
        pshape = net.layers[layer.predecessors[0]].shape
        wo, ho, co = layer.shape
        fw, fh, ci, _ = layer.weight.shape
        (sw, sh), (pw, ph) = layer.stride, layer.padding
        rows, bias = [], []
        for w in range(wo):
            for h in range(ho):
                for d in range(co):
                    row = {}
                    for f in range(fw):
                        for g in range(fh):
                            a, b = w * sw - pw + f, h * sh - ph + g
                            if 0 <= a < pshape[0] and 0 <= b < pshape[1]:
                                for c in range(ci):
                                    v = Fraction(layer.weight[f, g, c, d])
                                    if v:
                                        j = _flat(pshape, a, b, c)
                                        row[j] = row.get(j, _ZERO) + v
                    rows.append(row)
                    bias.append(Fraction(layer.bias[d]))
    else:
        raise ValueError(f"layer {layer_id} has no affine rows")
    net._cache[key] = (rows, bias)
    return rows, bias


def naive_forward(net: Network, x) -> list[list[Fraction]]:
    """Exact activations of every layer using the naive row maps."""
    acts = [[Fraction(v) for v in x]]
    for layer in net.layers[1:]:
        if layer.kind is LayerKind.RELU:
            acts.append([max(v, _ZERO) for v in acts[layer.predecessors[0]]])
        elif layer.kind is LayerKind.RESIDUAL:
            a, b = layer.predecessors
            acts.append([p + q for p, q in zip(acts[a], acts[b])])
        else:
            rows, bias = affine_rows(net, layer.id)
            src = acts[layer.predecessors[0]]
            acts.append([bi + sum((w * src[j] for j, w in r.items()), _ZERO)
                         for r, bi in zip(rows, bias)])
    return acts


def _float_matrices(net: Network):
    """Dense binary64 matrices (round to nearest) of every affine layer."""
    key = ("oracle_float",)
    if key not in net._cache:
        mats = {}
        for layer in net.layers[1:]:
            if layer.kind in (LayerKind.DENSE, LayerKind.CONV):
                rows, bias = affine_rows(net, layer.id)
                n_in = net.layers[layer.predecessors[0]].size
                m = np.zeros((len(rows), n_in))
                for i, r in enumerate(rows):
                    for j, v in r.items():
                        m[i, j] = float(v)
                mats[layer.id] = (m, np.array([float(b) for b in bias]))
        net._cache[key] = mats
    return net._cache[key]


def batch_eval(net: Network, xs: np.ndarray) -> np.ndarray:
    """Binary64 outputs for a batch of inputs of shape (B, n_in)."""
    mats = _float_matrices(net)
    acts = [np.asarray(xs, dtype=np.float64)]
    for layer in net.layers[1:]:
        if layer.kind is LayerKind.RELU:
            acts.append(np.maximum(acts[layer.predecessors[0]], 0.0))
        elif layer.kind is LayerKind.RESIDUAL:
            a, b = layer.predecessors
            acts.append(acts[a] + acts[b])
        else:
            m, bias = mats[layer.id]
            acts.append(acts[layer.predecessors[0]] @ m.T + bias)
    return acts[-1]


# ---------------------------------------------------------------------------
# reference analyzer


def _relu_fed(net: Network, lid: int) -> bool:
    layer = net.layers[lid]
    cons = [l for l in net.layers if lid in l.predecessors]
    return (layer.kind in (LayerKind.DENSE, LayerKind.CONV, LayerKind.RESIDUAL) and bool(cons)
            and all(c.kind is LayerKind.RELU for c in cons))


def _query_layers(net: Network, extra) -> set[int]:
    q = {l.id for l in net.layers
         if l.kind is not LayerKind.RELU and l.kind is not LayerKind.INPUT
         and any(c.kind is LayerKind.RELU and l.id in c.predecessors for c in net.layers)}
    if net.layers[-1].kind is not LayerKind.RELU:
        q.add(len(net.layers) - 1)
    return q | set(extra)


def _relax(l: Fraction, u: Fraction):
    if l >= 0:
        return (Fraction(1), _ZERO, Fraction(1), _ZERO)
    if u <= 0:
        return (_ZERO, _ZERO, _ZERO, _ZERO)
    g = u / (u - l)
    return (Fraction(1) if u > -l else _ZERO, _ZERO, g, -l * g)


def _backsub(net, lid, i, upper, L, U, relax) -> Fraction:
    """Greedy backsubstitution of one neuron with best-candidate tracking."""
    expr = {lid: {i: Fraction(1)}}
    const = _ZERO
    best = U[lid][i] if upper else L[lid][i]
    while True:
        k = max(expr)
        if k == 0:
            break
        coeffs = expr.pop(k)
        layer = net.layers[k]
        if layer.kind is LayerKind.RELU:
            p = layer.predecessors[0]
            tgt = expr.setdefault(p, {})
            for j, c in coeffs.items():
                a, b, g, d = relax[k][j]
                slope, off = ((g, d) if c >= 0 else (a, b)) if upper else ((a, b) if c >= 0 else (g, d))
                const += c * off
                tgt[j] = tgt.get(j, _ZERO) + c * slope
        elif layer.kind is LayerKind.RESIDUAL:
            for p in layer.predecessors:
                tgt = expr.setdefault(p, {})
                for j, c in coeffs.items():
                    tgt[j] = tgt.get(j, _ZERO) + c
        else:
            rows, bias = affine_rows(net, k)
            tgt = expr.setdefault(layer.predecessors[0], {})
            for j, c in coeffs.items():
                if not c:
                    continue
                const += c * bias[j]
                for t, w in rows[j].items():
                    tgt[t] = tgt.get(t, _ZERO) + c * w
        if len(expr) == 1:
            (only,) = expr
            if not _relu_fed(net, only):
                cand = const
                for j, c in expr[only].items():
                    if c > 0:
                        cand += c * (U[only][j] if upper else L[only][j])
                    elif c < 0:
                        cand += c * (L[only][j] if upper else U[only][j])
                best = min(best, cand) if upper else max(best, cand)
    return best


def _interval_layer(net, layer, L, U):
    if layer.kind is LayerKind.RELU:
        p = layer.predecessors[0]
        return [max(v, _ZERO) for v in L[p]], [max(v, _ZERO) for v in U[p]]
    if layer.kind is LayerKind.RESIDUAL:
        a, b = layer.predecessors
        return ([x + y for x, y in zip(L[a], L[b])], [x + y for x, y in zip(U[a], U[b])])
    rows, bias = affine_rows(net, layer.id)
    p = layer.predecessors[0]
    lo, hi = [], []
    for r, b in zip(rows, bias):
        sl = sh = b
        for j, w in r.items():
            if w > 0:
                sl += w * L[p][j]
                sh += w * U[p][j]
            else:
                sl += w * U[p][j]
                sh += w * L[p][j]
        lo.append(sl)
        hi.append(sh)
    return lo, hi


def reference_analyze(net: Network, box: InputBox, extra_queries=(),
                      max_neurons: int = MAX_REFERENCE_NEURONS) -> list[tuple[list[Fraction], list[Fraction]]]:
    """Exact bounds ``[(lower, upper)]`` per layer: dense, rational, no shortcuts."""
    if net.neuron_count > max_neurons:
        raise ValueError(f"reference analyzer refuses {net.neuron_count} neurons (limit {max_neurons})")
    lo, hi = box.exact_bounds()
    L, U = [lo], [hi]
    relax = {}
    queries = _query_layers(net, extra_queries)
    for layer in net.layers[1:]:
        l, u = _interval_layer(net, layer, L, U)
        L.append(l)
        U.append(u)
        if layer.id in queries:
            U[layer.id] = [_backsub(net, layer.id, i, True, L, U, relax) for i in range(len(u))]
            L[layer.id] = [_backsub(net, layer.id, i, False, L, U, relax) for i in range(len(l))]
        if layer.kind is LayerKind.RELU:
            p = layer.predecessors[0]
            relax[layer.id] = [_relax(a, b) for a, b in zip(L[p], U[p])]
    return list(zip(L, U))


def bound_mismatches(net: Network, a, b) -> list[tuple[int, int]]:
    """Neurons whose bounds differ between two runs, as ``(layer, index)``.

    ``a`` and ``b`` are per-layer ``(lower, upper)`` sequences.  Inputs of a
    ReLU that both runs prove non-positive are exempt: early termination stops
    refining them once their upper bound reaches zero, and nothing downstream
    reads their exact value.
    """
    out = []
    for lid, ((la, ua), (lb, ub)) in enumerate(zip(a, b)):
        fed = _relu_fed(net, lid)
        for i, (p, q, r, s) in enumerate(zip(la, ua, lb, ub)):
            if fed and q <= 0 and s <= 0:
                continue
            if p != r or q != s:
                out.append((lid, i))
    return out


# ---------------------------------------------------------------------------
# dependence ground truth


def _preds_of(net: Network, lid: int, idx: int) -> list[tuple[int, int]]:
    layer = net.layers[lid]
    if layer.kind is LayerKind.INPUT:
        return []
    if layer.kind is LayerKind.RELU:
        return [(layer.predecessors[0], idx)]
    if layer.kind is LayerKind.RESIDUAL:
        return [(p, idx) for p in layer.predecessors]
    if layer.kind is LayerKind.DENSE:
        p = layer.predecessors[0]
        return [(p, j) for j in range(net.layers[p].size)]
    p = layer.predecessors[0]
    pshape = net.layers[p].shape
    W, H, C = layer.shape
    w, h = idx // (H * C), (idx // C) % H
    fw, fh = layer.weight.shape[:2]
    (sw, sh), (pw, ph) = layer.stride, layer.padding
    out = []
    for f in range(fw):
        for g in range(fh):
            a, b = w * sw - pw + f, h * sh - ph + g
            if 0 <= a < pshape[0] and 0 <= b < pshape[1]:
                out.extend((p, _flat(pshape, a, b, c)) for c in range(pshape[2]))
    return out


def reach(net: Network, layer_id: int, neuron, m: int) -> set[tuple[int, int, int, int]]:
    """Neurons exactly ``m`` predecessor steps from ``neuron`` as ``(layer, w, h, d)``.

    ``neuron`` is a ``(w, h, d)`` triple or a flat index.
    """
    shape = net.layers[layer_id].shape
    idx = neuron if isinstance(neuron, (int, np.integer)) else _flat(shape, *neuron)
    frontier = {(layer_id, int(idx))}
    for _ in range(m):
        nxt = set()
        for lid, i in frontier:
            nxt.update(_preds_of(net, lid, i))
        frontier = nxt
    out = set()
    for lid, i in frontier:
        W, H, C = net.layers[lid].shape
        out.add((lid, i // (H * C), (i // C) % H, i % C))
    return out


def chain_reach(chain, grid: int, query: int, channels: int = 1) -> list[tuple[int, int]]:
    """1-D reachability along a conv chain ``[(f, s, p), ...]`` without a network.

    Returns the ``(min, max)`` reached coordinate per step, or None when
    nothing in the grid is reached.  Grid sizes follow the chain forwards
    from an input of extent ``grid``.
    """
    sizes = [grid]
    for f, s, p in reversed(chain):
        sizes.append((sizes[-1] + 2 * p - f) // s + 1)
    sizes = sizes[::-1]   # sizes[0] is the query layer
    frontier = {query}
    out = []
    for k, (f, s, p) in enumerate(chain):
        prev = sizes[k + 1]
        frontier = {q * s - p + t for q in frontier for t in range(f) if 0 <= q * s - p + t < prev}
        out.append((min(frontier), max(frontier)) if frontier else None)
    return out


# ---------------------------------------------------------------------------
# execution-order perturbation


def permuted_eval_batch(net: Network, x, seeds) -> list[np.ndarray]:
    """Binary64 activations for each seed, every neuron summed in a random order.

    Returns per layer an array of shape (len(seeds), layer size).  The bias
    takes part in the permutation like any other term.
    """
    S = len(seeds)
    rngs = [np.random.default_rng(s) for s in seeds]
    acts = [np.tile(np.array([float(v) for v in x]), (S, 1))]
    for layer in net.layers[1:]:
        if layer.kind is LayerKind.RELU:
            acts.append(np.maximum(acts[layer.predecessors[0]], 0.0))
            continue
        if layer.kind is LayerKind.RESIDUAL:
            a, b = layer.predecessors
            acts.append(acts[a] + acts[b])
            continue
        rows, bias = affine_rows(net, layer.id)
        n = len(rows)
        K = max(len(r) for r in rows) + 1
        idx = np.zeros((n, K), dtype=np.int64)
        wts = np.zeros((n, K))
        for i, r in enumerate(rows):
            for t, (j, w) in enumerate(r.items()):
                idx[i, t] = j
                wts[i, t] = float(w)
        src = acts[layer.predecessors[0]]
        terms = wts[None, :, :] * src[:, idx]                   # (S, n, K)
        terms[:, np.arange(n), K - 1] = np.array([float(b) for b in bias])
        keys = np.stack([rg.random((n, K)) for rg in rngs])
        order = np.argsort(keys, axis=2)
        terms = np.take_along_axis(terms, order, axis=2)
        total = np.zeros((S, n))
        for t in range(K):
            total = total + terms[:, :, t]
        acts.append(total)
    return acts


def permuted_eval(net: Network, x, seed: int) -> list[np.ndarray]:
    """Activations of one evaluation with per-neuron random summation order."""
    return [a[0] for a in permuted_eval_batch(net, x, [seed])]


# ---------------------------------------------------------------------------
# falsification


def attack(net: Network, image, epsilon, label: int, budget: int = 11000, seed: int = 0,
           clamp: bool = True):
    """Search the box for an input not classified as ``label``.

    Mixes random box corners, uniform samples and a greedy per-coordinate
    sign search from the centre.  Returns a counterexample (list of floats)
    or None.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    box = InputBox(image, epsilon, clamp)
    lo, hi = box.exact_bounds()
    lo = np.array([float(v) for v in lo])
    hi = np.array([float(v) for v in hi])
    n = lo.size
    rng = np.random.default_rng(seed)

    def bad(xs):
        out = batch_eval(net, xs)
        others = np.delete(out, label, axis=1)
        if others.shape[1] == 0:
            return np.zeros(len(xs), dtype=bool)
        return others.max(axis=1) >= out[:, label]

    used = 0
    centre = np.array([float(v) for v in image])
    centre = np.clip(centre, lo, hi)
    x = centre.copy()
    if bad(x[None])[0]:
        return x.tolist()
    used += 1
    # greedy sign search: push each coordinate to whichever end lowers the margin
    out = batch_eval(net, x[None])[0]
    others = [j for j in range(out.size) if j != label]
    for j in others[:4]:
        if used + 2 * n > budget // 4:
            break
        y = centre.copy()
        for i in range(n):
            cand = np.stack([y, y, y])
            cand[1, i], cand[2, i] = lo[i], hi[i]
            res = batch_eval(net, cand)
            used += 2
            marg = res[:, label] - res[:, j]
            y = cand[int(np.argmin(marg))]
        if bad(y[None])[0]:
            return y.tolist()
    remaining = budget - used
    n_corner = remaining // 2
    for start in range(0, remaining, 2048):
        size = min(2048, remaining - start)
        u = rng.random((size, n))
        corner = start + np.arange(size) < n_corner
        u[corner] = (u[corner] < 0.5).astype(np.float64)
        xs = lo + (hi - lo) * u
        hit = bad(xs)
        if hit.any():
            return xs[int(np.flatnonzero(hit)[0])].tolist()
    return None
