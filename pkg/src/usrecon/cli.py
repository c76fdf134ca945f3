"""Command line front end: ``usrecon {phantom,sense,recover,bench,psnr}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import bench
from .core import read_frame, ratio_to_measurements, write_frame
from .sensing import (
    DOMAINS,
    inverse_dct_frame,
    make_gaussian_operator,
    read_measurements,
    reconstruct_frame,
    sense_frame,
    write_measurements,
)
from .transforms import dct_line, read_image, write_pgm

log = logging.getLogger("usrecon")


def _ratio(text: str) -> Fraction:
    try:
        return Fraction(text)
    except (ValueError, ZeroDivisionError) as exc:
        raise argparse.ArgumentTypeError(f"not a ratio: {text!r}") from exc


def cmd_phantom(args) -> int:
    frame = bench.gen_phantom_rf(args.M, args.L, args.n_scatterers, args.pulse_cycles,
                                 args.center_freq, args.seed)
    write_frame(args.out, frame)
    log.info("wrote %s (%d x %d)", args.out, frame.n_samples, frame.n_lines)
    return 0


def cmd_sense(args) -> int:
    frame = read_frame(args.frame)
    M = frame.n_samples
    N = ratio_to_measurements(M, args.ratio)
    A = make_gaussian_operator(N, M, args.seed)
    meas = sense_frame(frame, A, domain=args.domain, noise_std=args.noise_std,
                       noise_seed=args.seed)
    write_measurements(args.out, meas)
    log.info("wrote %s (N=%d, M=%d, L=%d)", args.out, N, M, frame.n_lines)
    return 0


def solver_params(args) -> dict:
    params = {}
    for key, val in (("block_size", args.block_size), ("col_block", args.col_block),
                     ("prune", args.prune), ("p", args.p), ("support_size", args.support_size),
                     ("max_iters", args.max_iters), ("k", args.k), ("k_blocks", args.k_blocks)):
        if val is not None:
            params[key] = val
    return params


def write_trace(path, traces) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["first_column", "iteration", "block", "gamma", "active"])
        for col, trace in traces:
            for it, step in enumerate(trace):
                for b, (g, a) in enumerate(zip(step["gamma"], step["active"])):
                    w.writerow([col, it, b, repr(float(g)), int(a)])


def cmd_recover(args) -> int:
    meas = read_measurements(args.measurements)
    A = meas.operator()
    params = solver_params(args)
    if args.trace:
        params["trace"] = True
    truth = None
    if args.truth:
        truth = dct_line(read_frame(args.truth).samples)
    elif args.solver in ("irls-dual", "ksparse"):
        log.error("solver %s needs --truth for its oracle support", args.solver)
        return 2
    X, info = bench.recover_coefficients(meas.Y, A, args.solver, params, truth, args.threads)
    for err in info["errors"]:
        log.warning("%s", err)
    if args.out_frame:
        write_frame(args.out_frame, inverse_dct_frame(X))
    if args.out_image:
        write_pgm(args.out_image, reconstruct_frame(X, meas.domain))
    if args.trace:
        write_trace(args.trace, info["traces"])
    log.info("%s: %.3f s, %d iterations, converged=%s%s", args.solver, info["runtime"],
             info["iterations"], info["converged"], " FAILED" if info["failed"] else "")
    return 1 if info["failed"] else 0


def cmd_bench(args) -> int:
    spec = bench.load_spec(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    if args.psnr_domain:
        spec.psnr_domain = args.psnr_domain
    if args.no_timing:
        spec.timing = False
    report = bench.run_benchmark(spec, threads=args.threads, log=log.info)
    out = args.out or spec.report
    if out:
        report.write(out)
        log.info("wrote %s (%d rows)", out, len(report.rows))
    else:
        sys.stdout.write(report.to_csv())
    summary = args.summary or spec.summary
    if summary:
        rows = list(csv.DictReader(report.to_csv().splitlines()))
        summ = bench.summarize(rows)
        with open(summary, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(summ[0]) if summ else ["solver"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(summ)
    return 0


def cmd_psnr(args) -> int:
    score = bench.psnr(read_image(args.estimate), read_image(args.reference))
    print(score)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="usrecon", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic RF frame")
    p.add_argument("out", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--M", type=int, default=512, help="samples per line")
    p.add_argument("--L", type=int, default=64, help="number of lines")
    p.add_argument("--n-scatterers", type=int, default=40)
    p.add_argument("--pulse-cycles", type=float, default=2.0)
    p.add_argument("--center-freq", type=float, default=0.15,
                   help="pulse centre frequency as a fraction of the sampling rate")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("sense", help="compressively sense a frame")
    p.add_argument("frame", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--ratio", type=_ratio, default=Fraction(1, 3))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", choices=sorted(DOMAINS), default="dct-of-rf")
    p.add_argument("--noise-std", type=float, default=0.0)
    p.set_defaults(func=cmd_sense)

    p = sub.add_parser("recover", help="recover a frame from a measurements file")
    p.add_argument("measurements", type=Path)
    p.add_argument("--solver", choices=sorted(bench.SOLVERS), default="st-sbl")
    p.add_argument("--block-size", type=int)
    p.add_argument("--col-block", type=int)
    p.add_argument("--prune", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--support-size", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--k", type=int, help="terms kept by the k-sparse oracle")
    p.add_argument("--k-blocks", type=int, help="blocks selected by BOMP")
    p.add_argument("--truth", type=Path, help="reference frame for oracle solvers")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-frame", type=Path)
    p.add_argument("--out-image", type=Path, help=".pgm or .csv")
    p.add_argument("--trace", type=Path, help="write per-iteration gamma values as CSV")
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("bench", help="run an experiment spec file")
    p.add_argument("spec", type=Path)
    p.add_argument("--out", type=Path, help="report CSV (default: spec's report)")
    p.add_argument("--summary", type=Path)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--psnr-domain", choices=["bmode", "raw-rescaled"])
    p.add_argument("--no-timing", action="store_true",
                   help="leave runtime_s empty so reports are byte-reproducible")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("psnr", help="PSNR between two images (PGM or CSV)")
    p.add_argument("estimate", type=Path)
    p.add_argument("reference", type=Path)
    p.set_defaults(func=cmd_psnr)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        log.error("error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
