import itertools
from fractions import Fraction

import numpy as np
import pytest
from corpus import corpus

from sparsepoly.analyzer import _frac, analyze
from sparsepoly.arith import arith_for
from sparsepoly.backsub import (BacksubOptions, BoundMatrix, BoundsContext, PassStats, Polarity,
                                backsub_dense_step, backsub_relu_step, backsub_residual,
                                compact_rows, concretize, gbc_step, identity_matrix,
                                init_bound_matrix, materialized_conv_step, run_backsubstitution, step)
from sparsepoly.depsets import window_indices
from sparsepoly.gen import generate_model_dict, generate_network, random_inputs
from sparsepoly.interval import SoundnessMode
from sparsepoly.network import (InputBox, LayerKind, build_network, forward_interval,
                                forward_interval_state)
from sparsepoly.oracle import affine_rows, reach

EXACT = SoundnessMode.EXACT_RATIONAL
FLOAT = SoundnessMode.WIDENED_FLOAT64
UP, LOW = Polarity.UPPER, Polarity.LOWER


def context(net, box, mode=EXACT):
    arith = arith_for(mode)
    st = forward_interval_state(net, box, mode)
    ctx = BoundsContext(net, arith, list(st.lower), list(st.upper), st.bias)
    for layer in net.layers:
        if layer.kind is LayerKind.RELU:
            p = layer.predecessors[0]
            ctx.relax[layer.id] = arith.relaxation(st.lower[p], st.upper[p])
    return ctx


def random_box(net, seed, eps=Fraction(1, 16)):
    return InputBox(random_inputs(seed, 1, net.input_size)[0], eps)


def dense_coef(ctx, M):
    """Rows of ``M`` scattered over the whole current layer, as Fractions."""
    layer = ctx.net.layers[M.layer]
    idx = window_indices(M.origins, M.width, layer.shape)
    lo = M.flat_coef()[0]
    out = [[Fraction(0)] * layer.size for _ in range(M.rows)]
    for r in range(M.rows):
        for k, j in enumerate(idx[r]):
            out[r][j] += _frac(lo[r, k])
    return out


def fr(values):
    return [_frac(v) for v in values]


def dense_net(*layers, shape=(1, 1, 2)):
    entries = []
    for i, (w, b) in enumerate(layers, 1):
        entries.append({"id": i, "kind": "dense", "predecessors": [i - 1], "weights": w, "bias": b})
    return build_network(shape, entries)


def affine_matrix(net, lid):
    rows, bias = affine_rows(net, lid)
    n = net.layers[net.layers[lid].predecessors[0]].size
    return [[r.get(j, Fraction(0)) for j in range(n)] for r in rows], bias


# initial matrices


def test_init_dense():
    net = dense_net(([["2", "-1"]], ["0.5"]))
    ctx = context(net, InputBox([Fraction(1, 2)] * 2, Fraction(1, 2)))
    M = init_bound_matrix(ctx, 1, UP, [0])
    assert M.layer == 0
    assert dense_coef(ctx, M) == [[2, -1]]
    assert fr(M.const[0]) == [Fraction(1, 2)]


def test_init_conv_copies_filter():
    net = generate_network(4, "conv 2x2x1", (3, 3, 1))
    ctx = context(net, random_box(net, 4))
    M = init_bound_matrix(ctx, 1, LOW, [3])       # neuron (1, 1, 0)
    assert M.origins.tolist() == [[1, 1]] and M.width == (2, 2)
    filt = net.layers[1].weight[:, :, 0, 0]
    assert [[_frac(v) for v in row] for row in M.coef[0][0, :, :, 0]] == filt.tolist()


def test_init_rejects_relu():
    net = generate_network(0, "dense 3; relu", (1, 1, 2))
    with pytest.raises(ValueError):
        init_bound_matrix(context(net, random_box(net, 0)), 2, UP, [0])


@pytest.mark.parametrize("seed", range(4))
def test_init_concretizes_to_interval(seed):
    net = generate_network(seed, "conv 3x3x2 s2 p1; relu; conv 3x3x3 s1 p1", (6, 6, 2))
    ctx = context(net, random_box(net, seed))
    for pol, ref in ((UP, ctx.upper[3]), (LOW, ctx.lower[3])):
        M = init_bound_matrix(ctx, 3, pol, np.arange(net.layers[3].size))
        assert M.layer == 2
        assert fr(concretize(ctx, M)) == fr(ref)


# dense steps


def test_dense_identity_substitution():
    net = dense_net(([["1", "0"], ["0", "1"]], ["0", "0"]), ([["1", "2"], ["3", "4"]], ["0", "0"]))
    ctx = context(net, InputBox([Fraction(0)] * 2, Fraction(1)))
    M = identity_matrix(ctx, 2, UP, [0])
    M = backsub_dense_step(ctx, M, PassStats())
    assert M.layer == 1 and dense_coef(ctx, M) == [[1, 2]]


def test_dense_cancellation():
    net = dense_net(([["1", "3"], ["1", "3"]], ["0", "0"]), ([["1", "-1"]], ["0"]))
    ctx = context(net, InputBox([Fraction(0)] * 2, Fraction(1)))
    M = init_bound_matrix(ctx, 2, UP, [0])
    M = backsub_dense_step(ctx, M, PassStats())
    assert dense_coef(ctx, M) == [[0, 0]]


@pytest.mark.parametrize("seed", range(5))
def test_dense_pair_equals_triple_loop(seed):
    net = generate_network(seed, "dense 5; dense 4", (2, 2, 1))
    ctx = context(net, random_box(net, seed))
    M = init_bound_matrix(ctx, 2, LOW, np.arange(4))
    M = backsub_dense_step(ctx, M, PassStats())
    w2, b2 = affine_matrix(net, 2)
    w1, b1 = affine_matrix(net, 1)
    prod = [[sum(w2[i][k] * w1[k][j] for k in range(5)) for j in range(4)] for i in range(4)]
    const = [b2[i] + sum(w2[i][k] * b1[k] for k in range(5)) for i in range(4)]
    assert dense_coef(ctx, M) == prod
    assert fr(M.const[0]) == const


# convolution steps


def test_gbc_degenerate_filter():
    net = generate_network(2, "conv 1x1x1; conv 1x1x1", (3, 3, 1))
    ctx = context(net, random_box(net, 2))
    M = identity_matrix(ctx, 2, UP, [4])
    M = gbc_step(ctx, M, PassStats())
    M = gbc_step(ctx, M, PassStats())
    assert M.width == (1, 1)
    assert _frac(M.coef[0][0, 0, 0, 0]) == net.layers[1].weight[0, 0, 0, 0] * net.layers[2].weight[0, 0, 0, 0]


def test_gbc_two_conv_width():
    net = generate_network(3, "conv 2x2x2; conv 3x3x2", (6, 6, 2))
    ctx = context(net, random_box(net, 3))
    M = init_bound_matrix(ctx, 2, UP, [8])        # neuron (1, 1, 0)
    assert M.width == (3, 3)
    M = gbc_step(ctx, M, PassStats())
    assert M.width == (4, 4) and M.layer == 0


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("mode", [EXACT, FLOAT])
def test_gbc_equals_materialized(seed, mode):
    net = generate_network(seed, "conv 3x3x2 s2 p1; conv 2x2x3 s1 p0; conv 3x3x2 s1 p1", (7, 7, 2))
    ctx = context(net, random_box(net, seed), mode)
    rows = np.arange(net.layers[3].size)
    a = b = identity_matrix(ctx, 3, UP, rows)
    for _ in range(3):
        a = gbc_step(ctx, a, PassStats())
        b = materialized_conv_step(ctx, b, PassStats())
        assert dense_coef(ctx, a) == dense_coef(ctx, b)
        if mode is FLOAT:
            full_a = np.zeros((a.rows, net.layers[a.layer].size))
            idx = window_indices(a.origins, a.width, net.layers[a.layer].shape)
            np.put_along_axis(full_a, idx, a.flat_coef()[1], axis=1)
            assert np.array_equal(full_a, b.flat_coef()[1])
        assert fr(a.const[0]) == fr(b.const[0])
        assert fr(a.const[1]) == fr(b.const[1])


def test_materialized_pass_is_bitwise_identical():
    net = generate_network(9, "conv 3x3x3 s1 p1; relu; conv 3x3x3 s2 p1; relu; dense 4", (6, 6, 1))
    box = random_box(net, 9)
    a = analyze(net, box, FLOAT)
    b = analyze(net, box, FLOAT, BacksubOptions(materialize_conv=True))
    for x, y in zip(a.bounds, b.bounds):
        assert np.array_equal(x.lower, y.lower) and np.array_equal(x.upper, y.upper)


# ReLU steps


def relu_ctx(lo, hi):
    net = build_network((1, 1, 1), [{"id": 1, "kind": "relu", "predecessors": [0]},
                                    {"id": 2, "kind": "dense", "predecessors": [1],
                                     "weights": [["-2"]], "bias": ["0"]}])
    box = InputBox([Fraction(lo + hi, 2)], Fraction(hi - lo, 2), clamp=False)
    return context(net, box)


@pytest.mark.parametrize("lo, hi, coef", [(1, 3, -2), (-3, -1, 0), (-1, 1, 0)])
def test_relu_step(lo, hi, coef):
    ctx = relu_ctx(lo, hi)
    M = init_bound_matrix(ctx, 2, UP, [0])
    M = backsub_relu_step(ctx, M, PassStats())
    assert M.layer == 0
    assert dense_coef(ctx, M) == [[coef]]
    assert fr(M.const[0]) == [0]


def test_relu_step_lower_uses_chord():
    ctx = relu_ctx(-1, 1)
    M = init_bound_matrix(ctx, 2, LOW, [0])
    M = backsub_relu_step(ctx, M, PassStats())
    # -2 * relu(x) >= -2 * (x/2 + 1/2)
    assert dense_coef(ctx, M) == [[-1]] and fr(M.const[0]) == [-1]


def test_relu_step_needs_relaxation():
    ctx = relu_ctx(-1, 1)
    ctx.relax.clear()
    M = init_bound_matrix(ctx, 2, UP, [0])
    with pytest.raises(KeyError):
        backsub_relu_step(ctx, M, PassStats())


# residual joins


def flatten_block(net, lid, head):
    """Layer ``lid`` as one dense affine map of the head layer (oracle loops)."""
    if lid == head:
        n = net.layers[head].size
        return [[Fraction(int(i == j)) for j in range(n)] for i in range(n)], [Fraction(0)] * n
    layer = net.layers[lid]
    if layer.kind is LayerKind.RESIDUAL:
        (wa, ba), (wb, bb) = (flatten_block(net, p, head) for p in layer.predecessors)
        return ([[x + y for x, y in zip(r, s)] for r, s in zip(wa, wb)],
                [x + y for x, y in zip(ba, bb)])
    w, b = affine_matrix(net, lid)
    wp, bp = flatten_block(net, layer.predecessors[0], head)
    n, k = len(wp[0]), len(wp)
    return ([[sum(w[i][t] * wp[t][j] for t in range(k)) for j in range(n)] for i in range(len(w))],
            [b[i] + sum(w[i][t] * bp[t] for t in range(k)) for i in range(len(w))])


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("arch", ["conv 1x1x2; res[conv 3x3x2 s1 p1 | ]",
                                  "conv 1x1x2; res[conv 3x3x2 s1 p1 | conv 1x1x2]",
                                  "conv 1x1x2; res[conv 3x3x3 s1 p1; conv 3x3x2 s1 p1 | conv 3x3x2 s1 p1]"])
def test_residual_equals_flattened_block(seed, arch):
    net = generate_network(seed, arch, (5, 5, 1))
    ctx = context(net, random_box(net, seed))
    exit_id = net.output.id
    M = identity_matrix(ctx, exit_id, UP, np.arange(net.output.size))
    M = backsub_residual(ctx, M, PassStats(), BacksubOptions())
    assert M.layer == 1
    w, b = flatten_block(net, exit_id, 1)
    assert dense_coef(ctx, M) == w
    assert fr(M.const[0]) == b


def test_residual_identity_skip_adds_own_coefficient():
    net = generate_network(1, "conv 1x1x2; res[conv 3x3x2 s1 p1 | ]", (5, 5, 1))
    ctx = context(net, random_box(net, 1))
    q = 12 * 2 + 1                                  # neuron (2, 2, 1)
    M = identity_matrix(ctx, 3, UP, [q])
    joined = dense_coef(ctx, backsub_residual(ctx, M, PassStats(), BacksubOptions()))[0]
    conv_only = dense_coef(ctx, gbc_step(ctx, M.with_(layer=2), PassStats()))[0]
    diff = [a - b for a, b in zip(joined, conv_only)]
    assert diff == [Fraction(int(j == q)) for j in range(len(diff))]


def test_residual_symmetric_branches_double():
    d = generate_model_dict(6, "conv 1x1x2; res[conv 3x3x2 s1 p1 | conv 3x3x2 s1 p1]", (5, 5, 1))
    a, b = (l for l in d["layers"] if l["kind"] == "conv" and l["id"] != 1)
    b["filter"], b["bias"] = a["filter"], a["bias"]
    net = build_network(d["input_shape"], d["layers"])
    ctx = context(net, random_box(net, 6))
    rows = np.arange(net.output.size)
    M = identity_matrix(ctx, net.output.id, UP, rows)
    joined = dense_coef(ctx, backsub_residual(ctx, M, PassStats(), BacksubOptions()))
    single = dense_coef(ctx, gbc_step(ctx, M.with_(layer=a["id"] if a["id"] < b["id"] else b["id"]),
                                      PassStats()))
    assert joined == [[2 * v for v in r] for r in single]


# concretization and compaction


def test_concretize_examples():
    net = dense_net(([["1", "-1"]], ["0"]))
    ctx = context(net, InputBox([Fraction(1, 2)] * 2, Fraction(1, 2)))
    assert fr(concretize(ctx, init_bound_matrix(ctx, 1, UP, [0]))) == [1]
    zero = dense_net(([["0", "0"]], ["0.5"]))
    ctx = context(zero, InputBox([Fraction(1, 2)] * 2, Fraction(1, 2)))
    assert fr(concretize(ctx, init_bound_matrix(ctx, 1, UP, [0]))) == [Fraction(1, 2)]


@pytest.mark.parametrize("seed", range(5))
def test_concretize_equals_corner_enumeration(seed):
    net = generate_network(seed, "dense 6", (2, 5, 1))
    box = InputBox(random_inputs(seed, 1, 10)[0], Fraction(1, 8), clamp=False)
    ctx = context(net, box)
    lo, hi = box.exact_bounds()
    w, b = affine_matrix(net, 1)
    for pol in (UP, LOW):
        got = fr(concretize(ctx, init_bound_matrix(ctx, 1, pol, np.arange(6))))
        for i in range(6):
            vals = [b[i] + sum(c * x for c, x in zip(w[i], corner))
                    for corner in itertools.product(*zip(lo, hi))]
            assert got[i] == (max(vals) if pol is UP else min(vals))


def small_matrix(rows):
    arith = arith_for(EXACT)
    coef = np.arange(rows * 2, dtype=object).reshape(rows, 1, 1, 2)
    const = np.arange(rows, dtype=object)
    return BoundMatrix(1, 0, UP, (coef, coef), (const, const),
                       np.zeros((rows, 2), dtype=np.int64), np.arange(rows) * 3), arith


def test_compact_all_and_none():
    M, _ = small_matrix(5)
    same, idx = compact_rows(M, np.ones(5, bool))
    assert same is M and idx.tolist() == [0, 3, 6, 9, 12]
    empty, idx = compact_rows(M, np.zeros(5, bool))
    assert empty.rows == 0 and idx.tolist() == []


def test_compact_matches_sequential_filter():
    M, _ = small_matrix(64)
    keep = np.random.default_rng(0).random(64) < 0.4
    M2, idx = compact_rows(M, keep)
    expect = [r for r, k in zip(range(64), keep) if k]
    assert idx.tolist() == [3 * r for r in expect]
    assert M2.const[0].tolist() == expect
    assert M2.coef[0][:, 0, 0, 1].tolist() == [2 * r + 1 for r in expect]


# full passes


def test_single_dense_layer_equals_interval():
    net = generate_network(3, "dense 4", (2, 2, 1))
    box = random_box(net, 3)
    res = analyze(net, box, EXACT)
    l, u = forward_interval(net, box, EXACT)[1]
    assert fr(res.lower(1)) == fr(l) and fr(res.upper(1)) == fr(u)


def bounds_of(res):
    return [(fr(b.lower), fr(b.upper)) for b in res.bounds]


@pytest.mark.parametrize("case", corpus()[:12], ids=lambda c: f"seed{c.seed}")
def test_options_do_not_change_bounds(case):
    ref = bounds_of(analyze(case.net, case.box, EXACT, BacksubOptions(early_term=False)))
    for opts in (BacksubOptions(chunk_rows=1), BacksubOptions(chunk_rows=7), BacksubOptions(),
                 BacksubOptions(cadence=2), BacksubOptions(cadence=0)):
        got = bounds_of(analyze(case.net, case.box, EXACT, opts))
        for lid, ((a, b), (c, d)) in enumerate(zip(ref, got)):
            fed = case.net.relu_fed(lid)
            for i in range(len(a)):
                if fed and b[i] <= 0 and d[i] <= 0:
                    continue
                assert (a[i], b[i]) == (c[i], d[i])


def test_workers_bitwise_identical():
    net = generate_network(11, "conv 3x3x4 s1 p1; relu; conv 3x3x4 s2 p1; relu; dense 5", (8, 8, 1))
    box = random_box(net, 11)
    a = analyze(net, box, FLOAT, BacksubOptions(workers=1))
    b = analyze(net, box, FLOAT, BacksubOptions(workers=4))
    for x, y in zip(a.bounds, b.bounds):
        assert np.array_equal(x.lower, y.lower) and np.array_equal(x.upper, y.upper)


def test_support_inside_dependence_sets():
    net = generate_network(5, "conv 3x3x2 s2 p1; relu; conv 2x2x2 s1 p0; relu; conv 3x3x2 s1 p1", (9, 9, 1))
    ctx = context(net, random_box(net, 5))
    top = net.output.id
    rows = np.arange(net.output.size)
    M = identity_matrix(ctx, top, UP, rows)
    for m in range(1, top + 1):
        M = step(ctx, M, PassStats(), BacksubOptions())
        layer = net.layers[M.layer]
        dense = dense_coef(ctx, M)
        W, H, C = layer.shape
        for r, q in enumerate(rows):
            allowed = {(w * H + h) * C + d for _, w, h, d in reach(net, top, int(q), m)}
            support = {j for j, v in enumerate(dense[r]) if v != 0}
            assert support <= allowed


def test_candidates_never_worse_than_first_step():
    for case in corpus()[:10]:
        ctx = context(case.net, case.box)
        res = analyze(case.net, case.box, EXACT)
        for lid in case.net.query_layers():
            rows = np.arange(case.net.layers[lid].size)
            first_u = fr(concretize(ctx, init_bound_matrix(ctx, lid, UP, rows)))
            first_l = fr(concretize(ctx, init_bound_matrix(ctx, lid, LOW, rows)))
            # analyze starts from refined predecessors, which are at least as tight as ctx's
            assert all(a <= b for a, b in zip(fr(res.upper(lid)), first_u))
            assert all(a >= b for a, b in zip(fr(res.lower(lid)), first_l))


def test_best_is_monotone_across_steps():
    case = corpus()[3]
    res = analyze(case.net, case.box, EXACT)
    ctx = context(case.net, case.box)
    ctx.lower, ctx.upper = [b.lower for b in res.bounds], [b.upper for b in res.bounds]
    ctx.relax.update({b.layer: b.relax for b in res.bounds if b.relax is not None})
    lid = case.net.output.id
    trail = []
    best = ctx.upper[lid].copy()
    M = identity_matrix(ctx, lid, UP, np.arange(case.net.layers[lid].size))
    while M.layer != 0:
        M = step(ctx, M, PassStats(), BacksubOptions())
        if not case.net.relu_fed(M.layer):
            best = ctx.arith.minimum(best, concretize(ctx, M))
            trail.append(fr(best))
    for a, b in zip(trail, trail[1:]):
        assert all(y <= x for x, y in zip(a, b))


def test_gbc_op_count_ratio_on_16x16x4():
    arch = "; ".join(["conv 3x3x4 s1 p1; relu"] * 5 + ["conv 3x3x4 s1 p1"])
    net = generate_network(0, arch, (16, 16, 4))
    box = random_box(net, 0, Fraction(1, 100))
    ctx = context(net, box, FLOAT)
    rows = np.arange(0, net.output.size, 97)
    counts = []
    for materialize in (False, True):
        _, st = run_backsubstitution(ctx, net.output.id, UP,
                                     BacksubOptions(early_term=False, materialize_conv=materialize),
                                     rows=rows)
        counts.append(st.ops["conv"])
    assert counts[1] > 5 * counts[0]


def test_option_validation():
    for kw in ({"chunk_rows": 0}, {"memory_budget": 0}, {"cadence": -1}, {"workers": 0}):
        with pytest.raises(ValueError):
            BacksubOptions(**kw)
