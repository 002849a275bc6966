"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed even when output capture is on.
"""
import itertools
import time
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from corpus import corpus

from sparsepoly import BacksubOptions, analyze, verify_robustness
from sparsepoly.arith import arith_for
from sparsepoly.backsub import BoundsContext, Polarity, run_backsubstitution
from sparsepoly.depsets import dep_size, dep_width, dependence_chain, neuron_cuboid, step_down
from sparsepoly.gen import generate_network
from sparsepoly.interval import SoundnessMode
from sparsepoly.network import (InputBox, LayerKind, ModelError, forward_interval, forward_interval_state,
                                load_inputs, load_model)
from sparsepoly.oracle import attack, batch_eval, bound_mismatches, permuted_eval_batch, reach, reference_analyze

EXACT = SoundnessMode.EXACT_RATIONAL
FLOAT = SoundnessMode.WIDENED_FLOAT64
MODELS = Path(__file__).resolve().parent.parent / "models"
CHUNKS = (1, 7, None)


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


@lru_cache(maxsize=None)
def bounds(seed, mode, early_term=True, chunk=None):
    case = corpus()[seed]
    res = analyze(case.net, case.box, mode, BacksubOptions(early_term=early_term, chunk_rows=chunk))
    return [b.as_fractions() for b in res.bounds]


@lru_cache(maxsize=None)
def label_of(seed):
    case = corpus()[seed]
    return int(np.argmax(batch_eval(case.net, np.array([[float(v) for v in case.center]]))[0]))


@lru_cache(maxsize=None)
def verdict(seed, mode):
    case = corpus()[seed]
    return verify_robustness(case.net, case.center, case.epsilon, label_of(seed), mode)


def test_1_oracle_equivalence(capsys):
    start = time.perf_counter()
    bad = []
    for case in corpus():
        ref = reference_analyze(case.net, case.box)
        for chunk in CHUNKS:
            if bound_mismatches(case.net, bounds(case.seed, EXACT, True, chunk), ref):
                bad.append((case.seed, chunk))
    elapsed = time.perf_counter() - start
    report(capsys, 1, not bad and elapsed <= 600,
           f"{len(corpus())} nets x chunks {{1, 7, all}}, {len(bad)} mismatching runs {bad[:5]}, "
           f"{elapsed:.0f} s")


def test_2_early_termination_equivalence(capsys):
    bad = []
    for case in corpus():
        for mode in (EXACT, FLOAT):
            if bound_mismatches(case.net, bounds(case.seed, mode, True), bounds(case.seed, mode, False)):
                bad.append((case.seed, mode.name))
    report(capsys, 2, not bad, f"{len(corpus())} nets x 2 modes, {len(bad)} differing {bad[:5]}")


def test_3_permuted_order_soundness(capsys):
    rng = np.random.default_rng(3)
    violations, values = 0, 0
    for case in corpus()[:50]:
        res = analyze(case.net, case.box, FLOAT)
        lo, hi = case.box.bounds(FLOAT)
        for _ in range(20):
            x = np.clip(lo + rng.random(lo.size) * (hi - lo), lo, hi)
            for b, acts in zip(res.bounds, permuted_eval_batch(case.net, x, range(100))):
                violations += int(((acts < b.lower) | (acts > b.upper)).sum())
                values += acts.size
    report(capsys, 3, violations == 0, f"50 nets x 20 inputs x 100 orders, {values} values, "
                                       f"{violations} outside the float bounds")


def _golden_verified():
    net = load_model(MODELS / "conv4.json")
    out = []
    for x, label in load_inputs(MODELS / "conv4_inputs.csv"):
        if verify_robustness(net, x, Fraction(1, 100), label).verified:
            out.append((net, x, Fraction(1, 100), label))
    return out


def test_4_no_counterexample_to_verified(capsys):
    targets = []
    for case in corpus():
        if verdict(case.seed, EXACT).verified or verdict(case.seed, FLOAT).verified:
            targets.append((case.net, case.center, case.epsilon, label_of(case.seed)))
    targets += _golden_verified()
    found = sum(attack(*t, budget=11000) is not None for t in targets)
    report(capsys, 4, found == 0 and targets,
           f"{len(targets)} verified instances, {found} counterexamples with 11000 samples each")


# dependence sets

STEPS = [(f, s, p) for f in range(1, 5) for s in range(1, 4) for p in (0, 1)]


def chain_net(chain, grid):
    arch = "; ".join(f"conv {f}x{f}x1 s{s} p{p}" for f, s, p in reversed(chain))
    try:
        return generate_network(0, arch, (grid, grid, 1))
    except (ModelError, ValueError):
        return None


def cuboid_cells(net, top, q, depth):
    cub, out = neuron_cuboid(net, top, q), []
    for _ in range(depth):
        try:
            cub = step_down(net, cub)
        except ValueError:
            return out + [set()] * (depth - len(out))
        out.append(cub.cells())
    return out


def compare_chain(chain, grid):
    """(queries checked, mismatching steps) for one chain on one input grid."""
    net = chain_net(chain, grid)
    if net is None:
        return 0, 0
    top, depth = len(chain), len(chain)
    n = bad = 0
    for q in range(net.layers[top].shape[0]):
        neuron = (q, q, 0)   # both axes share the geometry, the diagonal covers every 1-D query
        got = cuboid_cells(net, top, neuron, depth)
        want = [reach(net, top, neuron, m) for m in range(1, depth + 1)]
        n += 1
        bad += sum(a != b for a, b in zip(got, want))
    return n, bad


def test_5_cuboids_equal_reach(capsys):
    two_conv = generate_network(3, "conv 2x2x2; conv 3x3x2", (6, 6, 2))
    d1, d2 = dependence_chain(two_conv, 2, (1, 1, 0), 2)
    anchors = (dep_width([(3, 1)]) == 3 and dep_width([(3, 1), (2, 1)]) == 4
               and (d1.size, d2.size) == (dep_size(3, 2), dep_size(4, 2)) == (18, 32)
               and (len(reach(two_conv, 2, (1, 1, 0), 1)), len(reach(two_conv, 2, (1, 1, 0), 2))) == (18, 32))

    chains = [c for d in (1, 2, 3) for c in itertools.product(STEPS, repeat=d)]
    rng = np.random.default_rng(5)
    for d in (4, 5):
        chains += [tuple(STEPS[i] for i in rng.integers(len(STEPS), size=d)) for _ in range(400)]
    queries = bad_dense = bad_gappy = 0
    for chain in chains:
        gappy = any(f < s for f, s, _ in chain)
        for grid in range(1, 11):
            n, b = compare_chain(chain, grid)
            queries += n
            if gappy:
                bad_gappy += b
            else:
                bad_dense += b
    ok = anchors and bad_dense == 0 and bad_gappy == 0
    report(capsys, 5, ok,
           f"anchors {'ok' if anchors else 'WRONG'}; {len(chains)} chains, {queries} queries; "
           f"mismatching steps: {bad_dense} on chains with f >= s everywhere, "
           f"{bad_gappy} on chains with some f < s (reach has gaps a cuboid cannot express)")


def test_6_sparsity_payoff(capsys):
    arch = "; ".join(["conv 3x3x4 s1 p1; relu"] * 5 + ["conv 3x3x4 s1 p1"])
    net = generate_network(0, arch, (16, 16, 4))
    rng = np.random.default_rng(6)
    center = [Fraction(int(v), 256) for v in rng.integers(0, 257, net.input_size)]
    box = InputBox(center, Fraction(1, 100))
    arith = arith_for(FLOAT)
    prelim = forward_interval_state(net, box, FLOAT)
    ctx = BoundsContext(net, arith, list(prelim.lower), list(prelim.upper), prelim.bias)
    for layer in net.layers:
        if layer.kind is LayerKind.RELU:
            p = layer.predecessors[0]
            ctx.relax[layer.id] = arith.relaxation(ctx.lower[p], ctx.upper[p])
    rows = np.arange(0, net.output.size, 16)
    ops, secs = [], []
    for materialize in (False, True):
        opts = BacksubOptions(early_term=False, materialize_conv=materialize, workers=4)
        run_backsubstitution(ctx, net.output.id, Polarity.UPPER, opts, rows=rows[:2])   # warm-up
        t = time.perf_counter()
        best, st = run_backsubstitution(ctx, net.output.id, Polarity.UPPER, opts, rows=rows)
        secs.append(time.perf_counter() - t)
        ops.append(st.ops["conv"])
    ratio, speedup = ops[1] / ops[0], secs[1] / secs[0]
    report(capsys, 6, ratio >= 5 and speedup >= 2,
           f"{rows.size} rows: conv multiply-adds GBC {ops[0]} vs dense {ops[1]} ({ratio:.1f}x); "
           f"wall clock with 4 workers {secs[0]:.2f} s vs {secs[1]:.2f} s ({speedup:.1f}x)")


def test_7_precision_dominance(capsys):
    bad = []
    for case in corpus():
        for mode in (EXACT, FLOAT):
            fi = forward_interval(case.net, case.box, mode)
            for lid, ((l, u), (al, au)) in enumerate(zip(fi, bounds(case.seed, mode))):
                if any(Fraction(x) > y for x, y in zip(l, al)) or any(Fraction(x) < y for x, y in zip(u, au)):
                    bad.append((case.seed, mode.name, lid))
    report(capsys, 7, not bad, f"{len(corpus())} nets x 2 modes, {len(bad)} layers looser than intervals {bad[:5]}")


def _float_misses(net, wide, exact, exempt_dead):
    out = []
    for lid, ((fl, fu), (el, eu)) in enumerate(zip(wide, exact)):
        dead_ok = exempt_dead and net.relu_fed(lid)
        for i, (a, b, c, d) in enumerate(zip(fl, fu, el, eu)):
            if dead_ok and d <= 0:
                continue
            if a > c or b < d:
                out.append((lid, i))
    return out


def test_8_float_contains_rational(capsys):
    # With early termination on, a row the rational run proves dead skips its
    # lower pass, so only its sign is comparable; the off runs are compared in full.
    loose, flips = [], []
    for case in corpus():
        for et in (False, True):
            if _float_misses(case.net, bounds(case.seed, FLOAT, et), bounds(case.seed, EXACT, et), et):
                loose.append((case.seed, et))
        if verdict(case.seed, FLOAT).verified and not verdict(case.seed, EXACT).verified:
            flips.append(case.seed)
    n_ver = sum(verdict(c.seed, EXACT).verified for c in corpus())
    report(capsys, 8, not loose and not flips,
           f"{len(corpus())} nets x early termination on/off: {len(loose)} runs where float misses "
           f"rational {loose[:5]}, {len(flips)} float-only verdicts ({n_ver} rational Verified)")
