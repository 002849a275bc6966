"""Command-line front end.

    sparsepoly verify --model M --inputs I --epsilon E [--out report.jsonl]
    sparsepoly bench  --model M --inputs I --epsilon E [--out runtimes.csv]
    sparsepoly gen    --seed S --arch "conv 3x3x8 s1 p1; relu; dense 10" [--out model.json]
    sparsepoly oracle-check --model M --inputs I --epsilon E
"""
from __future__ import annotations

import argparse
import multiprocessing
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path


from .analyzer import analyze, verify_robustness
from .backsub import BacksubOptions
from .gen import ArchError, generate_model_dict
from .interval import SoundnessMode
from .network import InputBox, ModelError, forward_eval, load_inputs, load_model
from .report import bench_row, dumps_record, verdict_record, write_bench_csv


@dataclass(frozen=True)
class RunConfig:
    model: Path
    inputs: Path
    epsilon: Fraction
    mode: SoundnessMode
    options: BacksubOptions
    jobs: int
    clamp: bool
    out: Path | None


def _parse_shape(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 8x8x1, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"shape must be three positive integers, got {text!r}")
    return parts


def _parse_eps(text: str) -> Fraction:
    try:
        eps = Fraction(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"epsilon must be a number, got {text!r}") from None
    if eps < 0:
        raise argparse.ArgumentTypeError("epsilon must be non-negative")
    return eps


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, type=Path, help="model JSON file")
    p.add_argument("--inputs", required=True, type=Path, help="CSV file, one 'label,p0,p1,...' per line")
    p.add_argument("--epsilon", required=True, type=_parse_eps, help="L-infinity radius")
    p.add_argument("--mode", choices=["widened", "rational"], default="widened",
                   help="arithmetic: sound widened float64 (default) or exact rationals")
    p.add_argument("--no-early-term", action="store_true", help="disable early termination")
    p.add_argument("--chunk-rows", type=_positive, help="rows per backsubstitution chunk")
    p.add_argument("--memory-budget", type=_positive, default=1 << 30,
                   help="bytes per chunk when --chunk-rows is not given (default 1 GiB)")
    p.add_argument("--workers", type=_positive, help="threads for row-parallel kernels")
    p.add_argument("--jobs", type=_positive, default=1, help="images analysed concurrently (processes)")
    p.add_argument("--no-clamp", action="store_true", help="do not intersect the box with [0, 1]")
    p.add_argument("--out", type=Path, help="output file (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sparsepoly", description="Sound polyhedral robustness verifier")
    sub = ap.add_subparsers(dest="command", required=True)
    _run_args(sub.add_parser("verify", help="verify every input, write a JSONL report"))
    _run_args(sub.add_parser("bench", help="verify every input, write a runtime CSV"))
    oc = sub.add_parser("oracle-check", help="compare the engine against the reference analyzer")
    _run_args(oc)
    g = sub.add_parser("gen", help="generate a seeded random model")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--arch", required=True, help='e.g. "conv 3x3x8 s1 p1; relu; dense 10"')
    g.add_argument("--input-shape", type=_parse_shape, default=(8, 8, 1))
    g.add_argument("--out", type=Path)
    return ap


def _config(a) -> RunConfig:
    options = BacksubOptions(early_term=not a.no_early_term, chunk_rows=a.chunk_rows,
                             memory_budget=a.memory_budget, workers=a.workers)
    return RunConfig(a.model, a.inputs, a.epsilon, SoundnessMode.parse(a.mode), options,
                     a.jobs, not a.no_clamp, a.out)


def _predicted(net, pixels) -> int | None:
    out = forward_eval(net, pixels, exact=True)[-1]
    best = max(out)
    winners = [i for i, v in enumerate(out) if v == best]
    return winners[0] if len(winners) == 1 else None


_WORKER_NET = {}


def _verify_one(args):
    model, index, pixels, label, cfg = args
    net = _WORKER_NET.get(model)
    if net is None:
        net = _WORKER_NET[model] = load_model(model)
    if len(pixels) != net.input_size:
        raise ModelError(f"input {index} has {len(pixels)} values, model expects {net.input_size}")
    pred = _predicted(net, pixels)
    if label is None:
        label = pred
    candidate = pred is not None and pred == label
    if not candidate:
        return verdict_record(index, label, False)
    v = verify_robustness(net, pixels, cfg.epsilon, label, cfg.mode, cfg.options, cfg.clamp)
    return verdict_record(index, label, True, v)


def run_verify(cfg: RunConfig) -> list[dict]:
    net = load_model(cfg.model)
    _WORKER_NET[str(cfg.model)] = net
    rows = load_inputs(cfg.inputs)
    for label, k in ((r[1], i) for i, r in enumerate(rows)):
        if label is not None and not 0 <= label < net.output_size:
            raise ModelError(f"input {k}: label {label} out of range for {net.output_size} classes")
    jobs = [(str(cfg.model), i, px, label, cfg) for i, (px, label) in enumerate(rows)]
    if cfg.jobs > 1 and len(jobs) > 1:
        # the OpenMP runtime behind the kernels does not survive fork()
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=cfg.jobs, mp_context=ctx) as pool:
            return list(pool.map(_verify_one, jobs))
    return [_verify_one(j) for j in jobs]


def _open_out(path):
    return open(path, "w", newline="") if path else sys.stdout


def cmd_verify(cfg: RunConfig) -> int:
    records = run_verify(cfg)
    fh = _open_out(cfg.out)
    try:
        for r in records:
            fh.write(dumps_record(r) + "\n")
    finally:
        if cfg.out:
            fh.close()
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    records = [r for r in run_verify(cfg) if r["candidate"]]
    fh = _open_out(cfg.out)
    try:
        write_bench_csv(fh, [bench_row(r) for r in records])
    finally:
        if cfg.out:
            fh.close()
    return 0


def cmd_oracle_check(cfg: RunConfig) -> int:
    from .oracle import bound_mismatches, reference_analyze

    net = load_model(cfg.model)
    failures = 0
    for i, (pixels, _) in enumerate(load_inputs(cfg.inputs)):
        box = InputBox(pixels, cfg.epsilon, cfg.clamp)
        ref = reference_analyze(net, box)
        exact = analyze(net, box, SoundnessMode.EXACT_RATIONAL, cfg.options)
        mism = bound_mismatches(net, [b.as_fractions() for b in exact.bounds], ref)
        wide = analyze(net, box, SoundnessMode.WIDENED_FLOAT64, cfg.options)
        loose = sum(1 for (rl, ru), b in zip(ref, wide.bounds)
                    for a, c, x, y in zip(rl, ru, *b.as_fractions()) if not (x <= a and c <= y))
        status = "ok" if not mism and not loose else "MISMATCH"
        failures += status != "ok"
        print(f"input {i}: {status} rational_mismatches={len(mism)} float_not_containing={loose}")
    return 1 if failures else 0


def cmd_gen(a) -> int:
    d = generate_model_dict(a.seed, a.arch, a.input_shape)
    from .network import build_network, dumps_model

    text = dumps_model(build_network(d["input_shape"], d["layers"]))
    if a.out:
        a.out.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    ap = build_parser()
    a = ap.parse_args(argv)
    try:
        if a.command == "gen":
            return cmd_gen(a)
        cfg = _config(a)
        for p in (cfg.model, cfg.inputs):
            if not p.is_file():
                ap.error(f"no such file: {p}")
        return {"verify": cmd_verify, "bench": cmd_bench, "oracle-check": cmd_oracle_check}[a.command](cfg)
    except (ModelError, ArchError, ValueError) as exc:
        print(f"sparsepoly: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
