"""Network model, JSON model format and forward evaluators.

Layers form a DAG stored in topological order; layer 0 is always the input.
Every layer has an output grid ``(W, H, C)`` and neurons are flattened in
C order over ``(w, h, c)``.  Dense layers have grid ``(1, 1, N)`` and read
their predecessor flattened the same way.

Weights are kept as exact :class:`~fractions.Fraction` object arrays; the
evaluators and the analysis convert them to the active arithmetic.
"""
from __future__ import annotations

import enum
import graphlib
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .arith import arith_for
from .interval import SoundnessMode, outward

FORMAT_NAME = "sparsepoly-model"
FORMAT_VERSION = 1


class ModelError(ValueError):
    """Invalid model file or network definition."""


class LayerKind(str, enum.Enum):
    INPUT = "input"
    DENSE = "dense"
    CONV = "conv"
    RELU = "relu"
    RESIDUAL = "residual"


AFFINE_KINDS = (LayerKind.DENSE, LayerKind.CONV, LayerKind.RESIDUAL)


@dataclass(frozen=True, eq=False)
class LayerSpec:
    id: int
    kind: LayerKind
    predecessors: tuple[int, ...]
    shape: tuple[int, int, int]
    weight: np.ndarray | None = None     # dense (out, in); conv (fw, fh, cin, cout)
    bias: np.ndarray | None = None
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    @property
    def size(self) -> int:
        w, h, c = self.shape
        return w * h * c

    @property
    def filter_size(self) -> tuple[int, int]:
        return self.weight.shape[0], self.weight.shape[1]

    @property
    def is_affine(self) -> bool:
        return self.kind in AFFINE_KINDS


@dataclass(frozen=True)
class CSR:
    """Sparse rows of an affine layer; ``widx``/``bidx`` point into the flat weights/bias."""
    indptr: np.ndarray
    indices: np.ndarray
    widx: np.ndarray
    bidx: np.ndarray


@dataclass(eq=False)
class Network:
    layers: tuple[LayerSpec, ...]
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.layers = tuple(self.layers)
        succ: dict[int, list[int]] = {l.id: [] for l in self.layers}
        for layer in self.layers:
            for p in layer.predecessors:
                succ[p].append(layer.id)
        self.successors = {k: tuple(v) for k, v in succ.items()}

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return self.layers[0].shape

    @property
    def input_size(self) -> int:
        return self.layers[0].size

    @property
    def output(self) -> LayerSpec:
        return self.layers[-1]

    @property
    def output_size(self) -> int:
        return self.output.size

    @property
    def neuron_count(self) -> int:
        return sum(l.size for l in self.layers)

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> LayerSpec:
        return self.layers[i]

    def relu_fed(self, layer_id: int) -> bool:
        """True for an affine layer whose consumers are all ReLU layers.

        Only such layers take part in early termination, and their bounds are
        never used to concretize other bound expressions.
        """
        layer = self.layers[layer_id]
        consumers = self.successors[layer_id]
        return (layer.is_affine and bool(consumers)
                and all(self.layers[c].kind is LayerKind.RELU for c in consumers))

    def query_layers(self) -> list[int]:
        """Affine layers whose bounds are refined by backsubstitution."""
        out = [l.id for l in self.layers if l.is_affine and any(
            self.layers[c].kind is LayerKind.RELU for c in self.successors[l.id])]
        if self.output.is_affine and self.output.id not in out:
            out.append(self.output.id)
        return out

    def csr(self, layer_id: int) -> CSR:
        key = ("csr", layer_id)
        if key not in self._cache:
            self._cache[key] = _build_csr(self, self.layers[layer_id])
        return self._cache[key]

    def prepared(self, layer_id: int, mode: SoundnessMode):
        """Layer weights and bias as interval arrays of the given mode (cached)."""
        mode = SoundnessMode.parse(mode)
        key = ("prep", layer_id, mode)
        if key not in self._cache:
            arith = arith_for(mode)
            layer = self.layers[layer_id]
            w = arith.from_exact(layer.weight)
            b = arith.from_exact(layer.bias)
            csr = self.csr(layer_id)
            wflat = (w[0].ravel(), w[1].ravel())
            bflat = (b[0].ravel(), b[1].ravel())
            self._cache[key] = {
                "weight": w,
                "bias": b,
                "csr_weight": (wflat[0][csr.widx], wflat[1][csr.widx]),
                "csr_bias": (bflat[0][csr.bidx], bflat[1][csr.bidx]),
            }
        return self._cache[key]


@dataclass(frozen=True)
class InputBox:
    """L-infinity ball around ``center``, optionally intersected with [0, 1]."""
    center: tuple
    epsilon: Fraction | float | str
    clamp: bool = True

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(self.center))
        if Fraction(self.epsilon) < 0:
            raise ValueError("epsilon must be non-negative")

    def exact_bounds(self) -> tuple[list[Fraction], list[Fraction]]:
        eps = Fraction(self.epsilon)
        lo, hi = [], []
        for c in self.center:
            c = Fraction(c)
            a, b = c - eps, c + eps
            if self.clamp:
                a, b = max(a, Fraction(0)), min(b, Fraction(1))
                if a > b:
                    raise ValueError("pixel centre outside [0, 1] with clamping on")
            lo.append(a)
            hi.append(b)
        return lo, hi

    def bounds(self, mode: SoundnessMode):
        """Input interval as arrays of the given mode (float endpoints rounded outward)."""
        mode = SoundnessMode.parse(mode)
        lo, hi = self.exact_bounds()
        if mode is SoundnessMode.EXACT_RATIONAL:
            arith = arith_for(mode)
            return arith.point(np.array(lo, dtype=object))[0], arith.point(np.array(hi, dtype=object))[0]
        return (np.array([outward(v)[0] for v in lo]),
                np.array([outward(v)[1] for v in hi]))


def conv_output_extent(size: int, f: int, s: int, p: int) -> int:
    return (size + 2 * p - f) // s + 1


def _build_csr(net: Network, layer: LayerSpec) -> CSR:
    if layer.kind is LayerKind.DENSE:
        n_out, n_in = layer.weight.shape
        indptr = np.arange(n_out + 1, dtype=np.int64) * n_in
        indices = np.tile(np.arange(n_in, dtype=np.int64), n_out)
        widx = np.arange(n_out * n_in, dtype=np.int64)
        bidx = np.arange(n_out, dtype=np.int64)
        return CSR(indptr, indices, widx, bidx)
    if layer.kind is LayerKind.CONV:
        win, hin, cin = net.layers[layer.predecessors[0]].shape
        wout, hout, cout = layer.shape
        fw, fh = layer.filter_size
        (sw, sh), (pw, ph) = layer.stride, layer.padding
        rows_idx, rows_w, counts = [], [], []
        fidx = np.arange(fw * fh * cin * cout).reshape(fw, fh, cin, cout)
        for w in range(wout):
            for h in range(hout):
                for d in range(cout):
                    idx, wi = [], []
                    for f in range(fw):
                        a = w * sw - pw + f
                        if not 0 <= a < win:
                            continue
                        for g in range(fh):
                            b = h * sh - ph + g
                            if not 0 <= b < hin:
                                continue
                            base = (a * hin + b) * cin
                            idx.extend(range(base, base + cin))
                            wi.extend(fidx[f, g, :, d].tolist())
                    rows_idx.append(idx)
                    rows_w.append(wi)
                    counts.append(len(idx))
        indptr = np.zeros(len(counts) + 1, dtype=np.int64)
        indptr[1:] = np.cumsum(counts)
        indices = np.array([i for r in rows_idx for i in r], dtype=np.int64)
        widx = np.array([i for r in rows_w for i in r], dtype=np.int64)
        bidx = np.tile(np.arange(cout, dtype=np.int64), wout * hout)
        return CSR(indptr, indices, widx, bidx)
    raise ModelError(f"layer {layer.id}: no affine rows for kind {layer.kind.value}")


# ---------------------------------------------------------------------------
# Construction and validation


def _as_fraction_array(values, shape_hint: str, layer_ref) -> np.ndarray:
    try:
        arr = np.array(values, dtype=object)
        flat = np.empty(arr.size, dtype=object)
        for i, v in enumerate(arr.ravel()):
            if isinstance(v, bool) or v is None:
                raise ValueError(v)
            flat[i] = Fraction(v)
        return flat.reshape(arr.shape)
    except (ValueError, TypeError, ZeroDivisionError) as exc:
        raise ModelError(f"layer {layer_ref}: cannot parse {shape_hint}: {exc}") from None


def build_network(input_shape: Sequence[int], layers: Iterable[dict]) -> Network:
    """Validate layer dictionaries (model-file schema) and infer shapes.

    Layer ids may be arbitrary integers; the input is id 0.  The result is
    renumbered 0..n-1 in a topological order.
    """
    input_shape = tuple(int(x) for x in input_shape)
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ModelError(f"input_shape must be three positive integers, got {input_shape}")
    raw = {}
    for entry in layers:
        if "id" not in entry or "kind" not in entry:
            raise ModelError(f"layer entry missing id/kind: {entry!r}")
        lid = int(entry["id"])
        if lid == 0 or lid in raw:
            raise ModelError(f"layer {lid}: duplicate or reserved id")
        try:
            LayerKind(entry["kind"])
        except ValueError:
            raise ModelError(f"layer {lid}: unsupported layer kind {entry['kind']!r}") from None
        if entry["kind"] == LayerKind.INPUT.value:
            raise ModelError(f"layer {lid}: the input layer is implicit (id 0)")
        raw[lid] = entry
    if not raw:
        raise ModelError("model has no layers")

    sorter = graphlib.TopologicalSorter()
    sorter.add(0)
    for lid, entry in raw.items():
        preds = [int(p) for p in entry.get("predecessors", [])]
        for p in preds:
            if p != 0 and p not in raw:
                raise ModelError(f"layer {lid}: unknown predecessor {p}")
        sorter.add(lid, *preds)
    try:
        order = list(sorter.static_order())
    except graphlib.CycleError as exc:
        raise ModelError(f"cyclic network DAG through layers {exc.args[1]}") from None

    remap = {old: new for new, old in enumerate(order)}
    specs: list[LayerSpec] = [LayerSpec(0, LayerKind.INPUT, (), input_shape)]
    for old in order[1:]:
        entry = raw[old]
        kind = LayerKind(entry["kind"])
        preds = tuple(remap[int(p)] for p in entry.get("predecessors", []))
        nid = remap[old]
        expected = 2 if kind is LayerKind.RESIDUAL else 1
        if len(preds) != expected:
            raise ModelError(f"layer {old}: {kind.value} needs {expected} predecessor(s), got {len(preds)}")
        pshapes = [specs[p].shape for p in preds]
        if kind is LayerKind.DENSE:
            w = _as_fraction_array(entry.get("weights"), "weights", old)
            b = _as_fraction_array(entry.get("bias"), "bias", old)
            in_size = int(np.prod(pshapes[0]))
            if w.ndim != 2 or w.shape[1] != in_size:
                raise ModelError(f"layer {old}: dense weights shape {w.shape} does not match "
                                 f"predecessor size {in_size}")
            if b.shape != (w.shape[0],):
                raise ModelError(f"layer {old}: bias length {b.shape} != {w.shape[0]}")
            specs.append(LayerSpec(nid, kind, preds, (1, 1, w.shape[0]), w, b))
        elif kind is LayerKind.CONV:
            f = _as_fraction_array(entry.get("filter"), "filter", old)
            b = _as_fraction_array(entry.get("bias"), "bias", old)
            stride = _pair(entry.get("stride", 1), "stride", old)
            padding = _pair(entry.get("padding", 0), "padding", old)
            if f.ndim != 4:
                raise ModelError(f"layer {old}: filter must be 4-D (fw, fh, cin, cout)")
            fw, fh, cin, cout = f.shape
            win, hin, cp = pshapes[0]
            if cin != cp:
                raise ModelError(f"layer {old}: filter expects {cin} input channels, predecessor has {cp}")
            if b.shape != (cout,):
                raise ModelError(f"layer {old}: bias length {b.shape} != {cout}")
            if min(stride) < 1 or min(padding) < 0:
                raise ModelError(f"layer {old}: stride must be >= 1 and padding >= 0")
            wout = conv_output_extent(win, fw, stride[0], padding[0])
            hout = conv_output_extent(hin, fh, stride[1], padding[1])
            if wout < 1 or hout < 1:
                raise ModelError(f"layer {old}: convolution output would be empty")
            specs.append(LayerSpec(nid, kind, preds, (wout, hout, cout), f, b, stride, padding))
        elif kind is LayerKind.RELU:
            specs.append(LayerSpec(nid, kind, preds, pshapes[0]))
        else:
            if pshapes[0] != pshapes[1]:
                raise ModelError(f"layer {old}: residual branches end in layers {order[preds[0]]} "
                                 f"{pshapes[0]} and {order[preds[1]]} {pshapes[1]} with different shapes")
            specs.append(LayerSpec(nid, kind, preds, pshapes[0]))

    net = Network(tuple(specs))
    sinks = [l.id for l in net.layers if not net.successors[l.id]]
    if sinks != [len(specs) - 1]:
        raise ModelError(f"network must have exactly one output layer, found sinks "
                         f"{[order[s] for s in sinks]}")
    for layer in net.layers:
        if layer.kind is LayerKind.RESIDUAL:
            residual_block(net, layer.id)
    return net


def _pair(value, name, layer_ref) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    try:
        a, b = value
        return int(a), int(b)
    except (TypeError, ValueError):
        raise ModelError(f"layer {layer_ref}: {name} must be an int or a pair") from None


@dataclass(frozen=True)
class ResidualBlock:
    exit: int
    head: int
    branch_a: tuple[int, ...]   # layers from the exit's first predecessor down to (excluding) head
    branch_b: tuple[int, ...]


def residual_block(net: Network, exit_id: int) -> ResidualBlock:
    """Locate the head and the two branch chains of a residual join."""
    layer = net.layers[exit_id]
    if layer.kind is not LayerKind.RESIDUAL:
        raise ModelError(f"layer {exit_id} is not a residual exit")

    def ancestors(start):
        chain, cur = [], start
        while True:
            chain.append(cur)
            preds = net.layers[cur].predecessors
            if len(preds) != 1:
                break
            cur = preds[0]
        return chain

    pa, pb = layer.predecessors
    ca, cb = ancestors(pa), ancestors(pb)
    common = set(ca) & set(cb)
    if not common:
        raise ModelError(f"layer {exit_id}: residual branches do not share a single-path head "
                         "(nested residual blocks are not supported)")
    head = max(common)
    branch_a = tuple(ca[:ca.index(head)])
    branch_b = tuple(cb[:cb.index(head)])
    return ResidualBlock(exit_id, head, branch_a, branch_b)


# ---------------------------------------------------------------------------
# Model file format


def fraction_to_str(x: Fraction) -> str:
    """Decimal string when the value terminates in base 10, else ``p/q``."""
    x = Fraction(x)
    d = x.denominator
    twos = fives = 0
    while d % 2 == 0:
        d //= 2
        twos += 1
    while d % 5 == 0:
        d //= 5
        fives += 1
    if d != 1:
        return f"{x.numerator}/{x.denominator}"
    digits = max(twos, fives)
    if digits == 0:
        return str(x.numerator)
    scaled = x * 10 ** digits
    sign = "-" if scaled < 0 else ""
    n = str(abs(scaled.numerator))
    n = n.rjust(digits + 1, "0")
    return f"{sign}{n[:-digits]}.{n[-digits:]}"


def _strings(arr: np.ndarray):
    if arr.ndim == 0:
        return fraction_to_str(arr.item())
    return [_strings(a) for a in arr] if arr.ndim > 1 else [fraction_to_str(v) for v in arr]


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers[1:]:
        entry = {"id": layer.id, "kind": layer.kind.value, "predecessors": list(layer.predecessors)}
        if layer.kind is LayerKind.DENSE:
            entry["weights"] = _strings(layer.weight)
            entry["bias"] = _strings(layer.bias)
        elif layer.kind is LayerKind.CONV:
            entry["filter"] = _strings(layer.weight)
            entry["bias"] = _strings(layer.bias)
            entry["stride"] = list(layer.stride)
            entry["padding"] = list(layer.padding)
        layers.append(entry)
    return {"format": FORMAT_NAME, "version": FORMAT_VERSION,
            "input_shape": list(net.input_shape), "layers": layers}


def dumps_model(net: Network) -> str:
    return json.dumps(network_to_dict(net), indent=1) + "\n"


def save_model(net: Network, path: str | Path) -> None:
    Path(path).write_text(dumps_model(net))


def loads_model(text: str) -> Network:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or "input_shape" not in doc or "layers" not in doc:
        raise ModelError("model file needs 'input_shape' and 'layers'")
    if doc.get("format", FORMAT_NAME) != FORMAT_NAME:
        raise ModelError(f"unknown model format {doc.get('format')!r}")
    return build_network(doc["input_shape"], doc["layers"])


def load_model(path: str | Path) -> Network:
    return loads_model(Path(path).read_text())


def load_inputs(path: str | Path) -> list[tuple[list[Fraction], int | None]]:
    """Read the CSV input format: ``label,p0,p1,...`` per line (label may be empty)."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split(",")]
        try:
            label = int(fields[0]) if fields[0] else None
            pixels = [Fraction(f) for f in fields[1:]]
        except (ValueError, ZeroDivisionError):
            raise ModelError(f"{path}:{lineno}: cannot parse input row") from None
        rows.append((pixels, label))
    return rows


# ---------------------------------------------------------------------------
# Evaluators


def forward_eval(net: Network, x: Sequence, exact: bool = False) -> list[np.ndarray]:
    """Concrete activations of every layer (flattened).

    With ``exact=True`` the evaluation is carried out in rationals; otherwise
    in binary64 with weights rounded to nearest.
    """
    if len(x) != net.input_size:
        raise ModelError(f"input has {len(x)} values, network expects {net.input_size}")
    if exact:
        acts = [np.array([Fraction(v) for v in x], dtype=object)]
    else:
        acts = [np.array([float(v) for v in x], dtype=np.float64)]
    for layer in net.layers[1:]:
        acts.append(_eval_layer(net, layer, acts, exact))
    return acts


def _float_weights(net: Network, layer: LayerSpec):
    key = ("rn", layer.id)
    if key not in net._cache:
        csr = net.csr(layer.id)
        w = np.array([float(v) for v in layer.weight.ravel()])[csr.widx]
        b = np.array([float(v) for v in layer.bias.ravel()])[csr.bidx]
        net._cache[key] = (w, b)
    return net._cache[key]


def _eval_layer(net: Network, layer: LayerSpec, acts, exact: bool) -> np.ndarray:
    if layer.kind is LayerKind.RELU:
        x = acts[layer.predecessors[0]]
        if exact:
            return np.array([v if v > 0 else Fraction(0) for v in x], dtype=object)
        return np.maximum(x, 0.0)
    if layer.kind is LayerKind.RESIDUAL:
        a, b = layer.predecessors
        return acts[a] + acts[b]
    csr = net.csr(layer.id)
    x = acts[layer.predecessors[0]]
    if exact:
        w = layer.weight.ravel()[csr.widx]
        b = layer.bias.ravel()[csr.bidx]
        terms = w * x[csr.indices]
        out = np.empty(len(b), dtype=object)
        for i in range(len(b)):
            out[i] = b[i] + sum(terms[csr.indptr[i]:csr.indptr[i + 1]], Fraction(0))
        return out
    w, b = _float_weights(net, layer)
    terms = w * x[csr.indices]
    sums = np.add.reduceat(terms, csr.indptr[:-1]) if len(terms) else np.zeros(len(b))
    sums[np.diff(csr.indptr) == 0] = 0.0
    return b + sums


@dataclass
class ForwardState:
    """Result of interval propagation; keeps the per-layer bias enclosures."""
    lower: list
    upper: list
    bias: dict     # layer id -> bias interval array including rounding allowance


def propagate_layer(net: Network, layer: LayerSpec, lower, upper, arith, bias) -> tuple:
    if layer.kind is LayerKind.RELU:
        p = layer.predecessors[0]
        return arith.relu_bounds(lower[p], upper[p])
    if layer.kind is LayerKind.RESIDUAL:
        a, b = layer.predecessors
        return arith.add_bounds((lower[a], upper[a]), (lower[b], upper[b]))
    p = layer.predecessors[0]
    prep = net.prepared(layer.id, arith.mode)
    return arith.csr_interval(net.csr(layer.id), prep["csr_weight"], bias, lower[p], upper[p])


def residual_error(arith, lower, upper, a, b):
    """Rounding allowance for the element-wise add of a residual join."""
    if arith.mode is SoundnessMode.EXACT_RATIONAL:
        return None
    mag = np.maximum(np.abs(lower[a]), np.abs(upper[a])) + np.maximum(np.abs(lower[b]), np.abs(upper[b]))
    return np.nextafter(mag * 2.0 ** -52, np.inf)


def forward_interval_state(net: Network, box: InputBox, mode=SoundnessMode.WIDENED_FLOAT64) -> ForwardState:
    arith = arith_for(mode)
    if len(box.center) != net.input_size:
        raise ModelError(f"box has {len(box.center)} pixels, network expects {net.input_size}")
    lo, hi = box.bounds(arith.mode)
    lower, upper = [lo], [hi]
    biases = {}
    for layer in net.layers[1:]:
        if layer.kind in (LayerKind.DENSE, LayerKind.CONV):
            prep = net.prepared(layer.id, arith.mode)
            p = layer.predecessors[0]
            err = arith.rounding_error(net.csr(layer.id), prep["csr_weight"], prep["csr_bias"],
                                       lower[p], upper[p])
            biases[layer.id] = arith.widen(prep["csr_bias"], err)
            l, u = propagate_layer(net, layer, lower, upper, arith, biases[layer.id])
        elif layer.kind is LayerKind.RESIDUAL:
            a, b = layer.predecessors
            err = residual_error(arith, lower, upper, a, b)
            biases[layer.id] = arith.widen(arith.zeros(layer.size), err)
            l, u = propagate_layer(net, layer, lower, upper, arith, None)
            l, u = arith.add_bounds((l, u), biases[layer.id])
        else:
            l, u = propagate_layer(net, layer, lower, upper, arith, None)
        lower.append(l)
        upper.append(u)
    return ForwardState(lower, upper, biases)


def forward_interval(net: Network, box: InputBox, mode=SoundnessMode.WIDENED_FLOAT64):
    """Per-layer interval bounds ``[(lower, upper), ...]`` by interval propagation.

    In float mode the affine enclosures include an allowance for the rounding
    error of a binary64 evaluation in any order and rounding mode.
    """
    st = forward_interval_state(net, box, mode)
    return list(zip(st.lower, st.upper))
