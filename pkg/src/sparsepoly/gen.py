"""Seeded random networks from a small architecture grammar.

Grammar (items separated by ``;``)::

    conv FWxFHxCOUT [sS] [pP]     e.g. conv 3x3x8 s2 p1
    dense N
    relu
    res[ ITEMS | ITEMS ]          two branches joined by addition; a branch may be empty

All weights are multiples of 1/64, so they are exact in binary64 and the
float and rational analyses see the same network.
"""
from __future__ import annotations

import math
import re
from fractions import Fraction

import numpy as np

from .network import ModelError, Network, build_network

WEIGHT_DENOMINATOR = 64

_CONV = re.compile(r"^conv\s+(\d+)x(\d+)x(\d+)((?:\s+[sp]\d+)*)$")
_DENSE = re.compile(r"^dense\s+(\d+)$")


class ArchError(ModelError):
    """Invalid architecture string."""


def _split_top(text: str, sep: str) -> list[str]:
    """Split on ``sep`` outside of brackets."""
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth < 0:
                raise ArchError(f"unbalanced ']' in {text!r}")
        if ch == sep and depth == 0:
            parts.append("".join(cur))
            cur = []
        else:
            cur.append(ch)
    if depth:
        raise ArchError(f"unbalanced '[' in {text!r}")
    parts.append("".join(cur))
    return parts


def parse_arch(text: str) -> list:
    """Parse into nested tuples: ("conv", fw, fh, cout, s, p), ("dense", n), ("relu",), ("res", a, b)."""
    items = []
    for raw in _split_top(text, ";"):
        item = raw.strip()
        if not item:
            continue
        if item.startswith("res"):
            inner = item[3:].strip()
            if not (inner.startswith("[") and inner.endswith("]")):
                raise ArchError(f"residual block must look like res[...|...]: {item!r}")
            branches = _split_top(inner[1:-1], "|")
            if len(branches) != 2:
                raise ArchError(f"residual block needs exactly two branches: {item!r}")
            items.append(("res", parse_arch(branches[0]), parse_arch(branches[1])))
            continue
        m = _CONV.match(item)
        if m:
            fw, fh, cout = (int(g) for g in m.groups()[:3])
            s = p = None
            for opt in m.group(4).split():
                if opt[0] == "s":
                    s = int(opt[1:])
                else:
                    p = int(opt[1:])
            if min(fw, fh, cout) < 1 or (s is not None and s < 1):
                raise ArchError(f"bad conv parameters: {item!r}")
            items.append(("conv", fw, fh, cout, s or 1, p or 0))
            continue
        m = _DENSE.match(item)
        if m:
            if int(m.group(1)) < 1:
                raise ArchError(f"dense layer needs at least one unit: {item!r}")
            items.append(("dense", int(m.group(1))))
            continue
        if item == "relu":
            items.append(("relu",))
            continue
        raise ArchError(f"cannot parse architecture item {item!r}")
    return items


def _dyadic(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    k = max(1, int(round(scale * WEIGHT_DENOMINATOR)))
    ints = rng.integers(-k, k + 1, size=shape)
    out = np.empty(ints.shape, dtype=object)
    flat = out.reshape(-1)
    for i, v in enumerate(ints.reshape(-1)):
        flat[i] = Fraction(int(v), WEIGHT_DENOMINATOR)
    return out


def _strs(arr: np.ndarray):
    return np.vectorize(str, otypes=[object])(arr).tolist()


class _Builder:
    def __init__(self, rng, input_shape, bias_scale):
        self.rng = rng
        self.layers: list[dict] = []
        self.shapes = {0: tuple(input_shape)}
        self.bias_scale = bias_scale

    def add(self, entry: dict, shape) -> int:
        lid = len(self.layers) + 1
        entry["id"] = lid
        self.layers.append(entry)
        self.shapes[lid] = shape
        return lid

    def items(self, items, cur: int) -> int:
        for item in items:
            cur = self.item(item, cur)
        return cur

    def item(self, item, cur: int) -> int:
        w, h, c = self.shapes[cur]
        kind = item[0]
        if kind == "relu":
            return self.add({"kind": "relu", "predecessors": [cur]}, (w, h, c))
        if kind == "dense":
            n = item[1]
            fan_in = w * h * c
            weights = _dyadic(self.rng, (n, fan_in), math.sqrt(2.0 / fan_in))
            bias = _dyadic(self.rng, (n,), self.bias_scale)
            return self.add({"kind": "dense", "predecessors": [cur], "weights": _strs(weights),
                             "bias": _strs(bias)}, (1, 1, n))
        if kind == "conv":
            _, fw, fh, cout, s, p = item
            wo, ho = (w + 2 * p - fw) // s + 1, (h + 2 * p - fh) // s + 1
            if wo < 1 or ho < 1:
                raise ArchError(f"conv {fw}x{fh} s{s} p{p} does not fit a {w}x{h} input")
            fan_in = fw * fh * c
            filt = _dyadic(self.rng, (fw, fh, c, cout), math.sqrt(2.0 / fan_in))
            bias = _dyadic(self.rng, (cout,), self.bias_scale)
            return self.add({"kind": "conv", "predecessors": [cur], "filter": _strs(filt),
                             "bias": _strs(bias), "stride": [s, s], "padding": [p, p]},
                            (wo, ho, cout))
        if kind == "res":
            a = self.items(item[1], cur)
            b = self.items(item[2], cur)
            if a == b:
                raise ArchError("a residual block needs at least one non-empty branch")
            if self.shapes[a] != self.shapes[b]:
                raise ArchError(f"residual branches end in shapes {self.shapes[a]} and {self.shapes[b]}")
            return self.add({"kind": "residual", "predecessors": [a, b]}, self.shapes[a])
        raise ArchError(f"unknown item {item!r}")


def generate_model_dict(seed: int, arch: str, input_shape=(8, 8, 1), bias_scale: float = 0.125) -> dict:
    """Model-file dictionary for ``arch`` with weights drawn from ``seed``."""
    items = parse_arch(arch)
    if not items:
        raise ArchError("empty architecture")
    b = _Builder(np.random.default_rng(seed), input_shape, bias_scale)
    b.items(items, 0)
    return {"format": "sparsepoly-model", "version": 1,
            "input_shape": list(input_shape), "layers": b.layers}


def generate_network(seed: int, arch: str, input_shape=(8, 8, 1), bias_scale: float = 0.125) -> Network:
    d = generate_model_dict(seed, arch, input_shape, bias_scale)
    return build_network(d["input_shape"], d["layers"])


def random_inputs(seed: int, count: int, size: int, denominator: int = 256) -> list[list[Fraction]]:
    """Pixel vectors with values k/denominator in [0, 1]."""
    rng = np.random.default_rng(seed)
    ints = rng.integers(0, denominator + 1, size=(count, size))
    return [[Fraction(int(v), denominator) for v in row] for row in ints]


_POOL = ("conv 3x3x{c} s1 p1", "conv 2x2x{c} s1 p0", "conv 3x3x{c} s2 p1", "conv 1x1x{c}",
         "conv 3x3x{c} s1 p0", "conv 4x4x{c} s2 p1")


def random_arch(rng: np.random.Generator, max_layers: int = 5) -> tuple[str, tuple[int, int, int]]:
    """A random small architecture string and input shape for property tests.

    ``max_layers`` bounds the number of affine layers.
    """
    side = int(rng.integers(3, 8))
    chans = int(rng.integers(1, 3))
    shape = (side, side, chans)
    items, affine = [], 0
    cur = side
    style = int(rng.integers(0, 3))      # 0 dense only, 1 conv, 2 conv + residual
    while affine < max_layers - 1:
        c = int(rng.integers(1, 4))
        if style == 0:
            items.append(f"dense {int(rng.integers(2, 12))}")
            affine += 1
        elif style == 2 and affine <= max_layers - 3 and rng.random() < 0.5:
            body = f"conv 3x3x{chans} s1 p1" if rng.random() < 0.5 else f"conv 1x1x{chans}"
            if rng.random() < 0.5:
                items.append(f"res[{body}; relu; conv 3x3x{chans} s1 p1 | ]")
                affine += 2
            else:
                items.append(f"res[{body} | conv 1x1x{chans}]")
                affine += 2
        else:
            cands = []
            for pat in _POOL:
                conv = parse_arch(pat.format(c=c))[0]
                _, fw, _, _, s, p = conv
                if (cur + 2 * p - fw) // s + 1 >= 1:
                    cands.append((pat.format(c=c), (cur + 2 * p - fw) // s + 1))
            pat, nxt = cands[int(rng.integers(len(cands)))]
            items.append(pat)
            cur, chans = nxt, c
            affine += 1
        if rng.random() < 0.8:
            items.append("relu")
    items.append(f"dense {int(rng.integers(2, 5))}")
    return "; ".join(items), shape
