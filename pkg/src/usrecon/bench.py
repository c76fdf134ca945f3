"""Synthetic data, PSNR evaluation and the sweep runner behind ``usrecon bench``."""

from __future__ import annotations

import configparser
import csv
import io
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .core import (
    BModeImage,
    DimensionError,
    MmvProblem,
    RangeError,
    RecoveryResult,
    RfFrame,
    SmvProblem,
    SolverConfig,
    as_ratio,
    check_divides,
    make_block_partition,
    ratio_to_measurements,
    read_frame,
)
from .irls import birls, bomp, irls_lp, ksparse_approx, l0_bruteforce, mfocuss
from .sbl import bsbl_bo, bsbl_em, st_sbl, t_msbl
from .sensing import make_gaussian_operator, reconstruct_frame, sense_frame
from .transforms import dct_line

SPEC_VERSION = 1
DEFAULT_NOISE_VAR = 1e-8
PRUNE_PAIR = (1e-8, 2.22e-16)


# --- quality metric ---------------------------------------------------------

@dataclass(frozen=True)
class Psnr:
    db: float
    exact: bool

    def __str__(self):
        return "inf" if self.exact else f"{self.db:.6f}"


EXACT_MSE = 1e-24


def psnr(estimate, reference, max_value: float = 1.0, exact_mse: float = EXACT_MSE) -> Psnr:
    """Peak signal-to-noise ratio in dB.

    ``exact`` is set when the MSE is at most ``exact_mse`` (default: an RMS
    difference of 1e-12, i.e. agreement to floating-point roundoff).
    """
    est = estimate.pixels if isinstance(estimate, BModeImage) else np.asarray(estimate, float)
    ref = reference.pixels if isinstance(reference, BModeImage) else np.asarray(reference, float)
    if est.shape != ref.shape:
        raise DimensionError(f"image shapes differ: {est.shape} vs {ref.shape}")
    mse = float(np.mean((est - ref) ** 2))
    if mse <= exact_mse:
        return Psnr(math.inf, True)
    return Psnr(20.0 * math.log10(max_value) - 10.0 * math.log10(mse), False)


# --- synthetic signals ------------------------------------------------------

def gen_block_sparse(M: int, d: int, n_active: int, intra_r: float, seed: int) -> np.ndarray:
    """Block-sparse vector whose active blocks are AR(1)-correlated Gaussians."""
    if d < 1 or M % d:
        raise RangeError(f"block length {d} must divide M={M}")
    g = M // d
    if not 0 <= n_active <= g:
        raise RangeError(f"n_active must lie in [0, {g}]")
    if not abs(intra_r) < 1:
        raise RangeError("|intra_r| must be < 1")
    rng = np.random.default_rng(seed)
    x = np.zeros(M)
    if n_active == 0:
        return x
    blocks = np.sort(rng.choice(g, n_active, replace=False))
    chol = np.linalg.cholesky(sla.toeplitz(intra_r ** np.arange(d)))
    for b in blocks:
        x[b * d:(b + 1) * d] = chol @ rng.standard_normal(d)
    return x


def gen_correlated_mmv(M: int, L: int, row_support_size: int, inter_r: float, seed: int) -> np.ndarray:
    """Row-sparse ``M x L`` matrix; each active row is a stationary AR(1) sequence."""
    if not 0 <= row_support_size <= M:
        raise RangeError(f"row support must lie in [0, {M}]")
    if not abs(inter_r) < 1:
        raise RangeError("|inter_r| must be < 1")
    if L < 1:
        raise RangeError("L must be positive")
    rng = np.random.default_rng(seed)
    X = np.zeros((M, L))
    if row_support_size == 0:
        return X
    rows = np.sort(rng.choice(M, row_support_size, replace=False))
    innov = np.sqrt(1.0 - inter_r ** 2)
    for i in rows:
        e = rng.standard_normal(L)
        X[i, 0] = e[0]
        for t in range(1, L):
            X[i, t] = inter_r * X[i, t - 1] + innov * e[t]
    return X


def pulse_template(pulse_cycles: float, center_freq_fraction: float) -> np.ndarray:
    """Gaussian-windowed cosine, ``pulse_cycles`` cycles across the envelope FWHM.

    Centre sample is the middle of the returned array (odd length).
    """
    sigma = pulse_cycles / (center_freq_fraction * 2.0 * math.sqrt(2.0 * math.log(2.0)))
    half = int(math.ceil(4.0 * sigma))
    t = np.arange(-half, half + 1)
    return np.exp(-0.5 * (t / sigma) ** 2) * np.cos(2.0 * np.pi * center_freq_fraction * t)


PHANTOM_DEFAULTS = dict(M=512, L=64, n_scatterers=40, pulse_cycles=2.0,
                        center_freq_fraction=0.15, seed=0)


def gen_phantom_rf(M: int = 512, L: int = 64, n_scatterers: int = 40, pulse_cycles: float = 2.0,
                   center_freq_fraction: float = 0.15, seed: int = 0,
                   lateral_r: float = 0.95, max_slope: float = 0.25) -> RfFrame:
    """Synthetic RF frame: point scatterers convolved with a pulse, line by line.

    Scatterer depths drift linearly across lines and amplitudes follow an AR(1)
    sequence with coefficient ``lateral_r``, so neighbouring lines are similar.
    """
    if M < 1 or L < 1 or n_scatterers < 0 or pulse_cycles <= 0:
        raise RangeError("phantom sizes must be positive")
    if not 0 < center_freq_fraction < 0.5:
        raise RangeError("center_freq_fraction must lie in (0, 0.5)")
    rng = np.random.default_rng(seed)
    frame = np.zeros((M, L))
    if n_scatterers == 0:
        return RfFrame(frame, meta=f"phantom seed={seed}")
    depth0 = rng.integers(0, M, n_scatterers)
    slope = rng.uniform(-max_slope, max_slope, n_scatterers)
    amp = np.empty((n_scatterers, L))
    amp[:, 0] = rng.standard_normal(n_scatterers)
    innov = math.sqrt(1.0 - lateral_r ** 2)
    for l in range(1, L):
        amp[:, l] = lateral_r * amp[:, l - 1] + innov * rng.standard_normal(n_scatterers)
    pulse = pulse_template(pulse_cycles, center_freq_fraction)
    half = pulse.shape[0] // 2
    for l in range(L):
        depth = depth0 + np.round(slope * l).astype(int)
        for z, a in zip(depth, amp[:, l]):
            if not 0 <= z < M:
                continue
            lo, hi = max(0, z - half), min(M, z + half + 1)
            frame[lo:hi, l] += a * pulse[lo - (z - half):hi - (z - half)]
    return RfFrame(frame, meta=f"phantom seed={seed}")


# --- solver registry --------------------------------------------------------

@dataclass
class LineTask:
    """Unit of recovery work: a group of columns sharing one solver call."""

    cols: slice
    Y: np.ndarray
    truth: np.ndarray


SolverFn = Callable[[np.ndarray, LineTask, dict, int], RecoveryResult]


def _cfg(params, **kw):
    return SolverConfig(
        max_iters=int(params.get("max_iters", 400)),
        prune_threshold=float(params.get("prune", 1e-8)),
        p=float(params.get("p", 0.99)),
        column_block_size=int(params.get("col_block", 1)),
        record_trace=bool(params.get("trace", False)),
        **kw,
    )


def _smv(task, A):
    return SmvProblem(task.Y[:, 0], A, DEFAULT_NOISE_VAR)


def _solve_st_sbl(A, task, params, N):
    part = make_block_partition(A.shape[1], int(params.get("block_size", 32)))
    return st_sbl(MmvProblem(task.Y, A, DEFAULT_NOISE_VAR), part, _cfg(params))


def _solve_bsbl(fn):
    def run(A, task, params, N):
        part = make_block_partition(A.shape[1], int(params.get("block_size", 32)))
        r = fn(_smv(task, A), part, _cfg(params))
        r.estimate = r.estimate[:, None]
        return r
    return run


def _solve_t_msbl(A, task, params, N):
    return t_msbl(MmvProblem(task.Y, A, DEFAULT_NOISE_VAR), _cfg(params))


def _solve_irls(p_default, dual=False):
    def run(A, task, params, N):
        p = float(params.get("p", p_default))
        support = None
        if dual:
            size = int(params.get("support_size", N // 4))
            support = np.sort(np.argsort(-np.abs(task.truth[:, 0]), kind="stable")[:size])
        r = irls_lp(_smv(task, A), p, support, _cfg(params))
        r.estimate = r.estimate[:, None]
        return r
    return run


def _solve_birls(A, task, params, N):
    part = make_block_partition(A.shape[1], int(params.get("block_size", 32)))
    r = birls(_smv(task, A), float(params.get("p", 0.99)), part, _cfg(params))
    r.estimate = r.estimate[:, None]
    return r


def _solve_mfocuss(A, task, params, N):
    return mfocuss(MmvProblem(task.Y, A, DEFAULT_NOISE_VAR), float(params.get("p", 0.8)),
                   _cfg(params))


def _solve_bomp(A, task, params, N):
    d = int(params.get("block_size", 32))
    part = make_block_partition(A.shape[1], d)
    k = int(params.get("k_blocks", max(1, N // (2 * d))))
    r = bomp(_smv(task, A), part, min(k, part.num_blocks))
    r.estimate = r.estimate[:, None]
    return r


def _solve_ksparse(A, task, params, N):
    t0 = time.perf_counter()
    est = ksparse_approx(task.truth[:, 0], int(params.get("k", N // 2)))
    return RecoveryResult(est[:, None], 1, True, time.perf_counter() - t0)


def _solve_l0(A, task, params, N):
    r = l0_bruteforce(_smv(task, A), int(params.get("k_max", 2)))
    r.estimate = r.estimate[:, None]
    return r


@dataclass(frozen=True)
class SolverSpec:
    fn: SolverFn
    grouped: bool = False
    label: str = ""


SOLVERS: Dict[str, SolverSpec] = {
    "st-sbl": SolverSpec(_solve_st_sbl, True, "ST-SBL"),
    "bsbl-bo": SolverSpec(_solve_bsbl(bsbl_bo), False, "BSBL-BO"),
    "bsbl-em": SolverSpec(_solve_bsbl(bsbl_em), False, "BSBL-EM"),
    "t-msbl": SolverSpec(_solve_t_msbl, True, "T-MSBL"),
    "irls": SolverSpec(_solve_irls(0.99), False, "IRLS"),
    "irls-dual": SolverSpec(_solve_irls(0.99, dual=True), False, "IRLS dual prior"),
    "l1": SolverSpec(_solve_irls(1.0), False, "l1"),
    "birls": SolverSpec(_solve_birls, False, "BIRLS"),
    "mfocuss": SolverSpec(_solve_mfocuss, True, "MFOCUSS"),
    "bomp": SolverSpec(_solve_bomp, False, "BOMP"),
    "ksparse": SolverSpec(_solve_ksparse, False, "k-sparse"),
    "l0": SolverSpec(_solve_l0, False, "l0 oracle"),
}


def recover_coefficients(Y: np.ndarray, A, solver: str, params: dict,
                         truth: Optional[np.ndarray] = None, threads: int = 1):
    """Recover all DCT columns of ``Y``; returns ``(X, summary dict)``.

    Work is split into independent column groups and merged in order, so the
    result does not depend on ``threads``.
    """
    if solver not in SOLVERS:
        raise KeyError(f"unknown solver {solver!r}; known: {', '.join(sorted(SOLVERS))}")
    spec = SOLVERS[solver]
    Amat = A.matrix if hasattr(A, "matrix") else np.asarray(A)
    N, M = Amat.shape
    L = Y.shape[1]
    if truth is None:
        truth = np.zeros((M, L))
    width = int(params.get("col_block", 1)) if spec.grouped else 1
    if solver == "t-msbl" and "col_block" not in params:
        width = L
    check_divides(L, width)
    tasks = [LineTask(slice(j, j + width), Y[:, j:j + width], truth[:, j:j + width])
             for j in range(0, L, width)]

    def work(task):
        try:
            return spec.fn(A, task, params, N), None
        except Exception as exc:  # a failing line must not abort the sweep
            return None, exc

    t0 = time.perf_counter()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, tasks))
    else:
        results = [work(t) for t in tasks]
    elapsed = time.perf_counter() - t0

    X = np.zeros((M, L))
    iters, conv, errors, traces = 0, True, [], []
    for task, (res, exc) in zip(tasks, results):
        if res is None:
            errors.append(f"cols {task.cols.start}-{task.cols.stop - 1}: {exc}")
            conv = False
            continue
        X[:, task.cols] = res.estimate
        iters = max(iters, res.iterations)
        conv = conv and res.converged
        if res.diagnostics.get("trace"):
            traces.append((task.cols.start, res.diagnostics["trace"]))
        for g in res.diagnostics.get("groups", []):
            if g.get("trace"):
                traces.append((task.cols.start, g["trace"]))
    failed = bool(errors) or not np.any(X)
    return X, {"runtime": elapsed, "iterations": iters, "converged": conv,
               "failed": failed, "errors": errors, "traces": traces}


# --- experiment specification -------------------------------------------------

@dataclass
class SolverRun:
    solver: str
    params: dict = field(default_factory=dict)

    def param_text(self) -> str:
        return ";".join(f"{k}={self.params[k]}" for k in sorted(self.params))


@dataclass
class ExperimentSpec:
    inputs: List[str]
    subsampling: List[Fraction]
    solvers: List[SolverRun]
    seed: int = 0
    psnr_domain: str = "bmode"
    domain: str = "dct-of-rf"
    phantom: dict = field(default_factory=lambda: dict(PHANTOM_DEFAULTS))
    report: Optional[str] = None
    summary: Optional[str] = None
    timing: bool = True

    def __post_init__(self):
        for s in self.solvers:
            if s.solver not in SOLVERS:
                raise KeyError(f"unknown solver {s.solver!r}")
        self.subsampling = [as_ratio(r) for r in self.subsampling]
        for r in self.subsampling:
            if not 0 < r <= 1:
                raise RangeError(f"subsampling ratio {r} outside (0, 1]")
        if self.psnr_domain not in ("bmode", "raw-rescaled"):
            raise RangeError(f"unknown psnr domain {self.psnr_domain!r}")


def _split(text):
    return [t.strip() for t in text.replace("\n", ",").split(",") if t.strip()]


def _coerce(v: str):
    for conv in (int, float):
        try:
            return conv(v)
        except ValueError:
            pass
    return v


def load_spec(path) -> ExperimentSpec:
    """Read an experiment spec (INI syntax).

    ``[experiment]`` holds ``spec_version``, ``inputs`` (``phantom`` or frame
    paths), ``subsampling`` (rationals), ``seed``, ``psnr_domain``,
    ``domain``, ``report`` and optional ``summary``/``timing``.  ``[phantom]``
    overrides phantom parameters.  Every ``[solver ...]`` section has a
    ``solver`` id plus parameters; comma-separated values expand into a grid.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(Path(path).read_text())
    return spec_from_config(cp, base=Path(path).parent)


def spec_from_config(cp: configparser.ConfigParser, base: Path = Path(".")) -> ExperimentSpec:
    ex = cp["experiment"]
    version = int(ex.get("spec_version", "0"))
    if version != SPEC_VERSION:
        raise ValueError(f"unsupported spec_version {version} (expected {SPEC_VERSION})")
    inputs = []
    for item in _split(ex.get("inputs", "phantom")):
        inputs.append(item if item == "phantom" else str((base / item)))
    phantom = dict(PHANTOM_DEFAULTS)
    if cp.has_section("phantom"):
        phantom.update({k: _coerce(v) for k, v in cp["phantom"].items()})
    solvers = []
    for name in cp.sections():
        if not name.startswith("solver"):
            continue
        sec = dict(cp[name])
        solver = sec.pop("solver")
        grid = [{}]
        for key, raw in sorted(sec.items()):
            values = [_coerce(v) for v in _split(raw)]
            grid = [dict(g, **{key: v}) for g in grid for v in values]
        solvers.extend(SolverRun(solver, g) for g in grid)
    report = ex.get("report")
    summary = ex.get("summary")
    return ExperimentSpec(
        inputs=inputs,
        subsampling=[Fraction(r) for r in _split(ex.get("subsampling", "1/3, 1/2"))],
        solvers=solvers,
        seed=ex.getint("seed", 0),
        psnr_domain=ex.get("psnr_domain", "bmode"),
        domain=ex.get("domain", "dct-of-rf"),
        phantom=phantom,
        report=str(base / report) if report else None,
        summary=str(base / summary) if summary else None,
        timing=ex.getboolean("timing", True),
    )


# --- report -------------------------------------------------------------------

REPORT_COLUMNS = ["image", "solver", "params", "psnr_db", "exact", "runtime_s",
                  "iterations", "converged"]


@dataclass
class BenchRow:
    image: str
    solver: str
    params: str
    psnr: Optional[Psnr]
    runtime_s: float
    iterations: int
    converged: bool
    failed: bool = False

    def key(self):
        return (self.image, self.solver, self.params)

    def cells(self, timing=True):
        if self.failed:
            p, exact = "FAIL", "false"
        else:
            p, exact = str(self.psnr), str(self.psnr.exact).lower()
        rt = f"{self.runtime_s:.6f}" if timing else ""
        return [self.image, self.solver, self.params, p, exact, rt,
                str(self.iterations), str(self.converged).lower()]


@dataclass
class BenchReport:
    rows: List[BenchRow]
    timing: bool = True

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in self.rows:
            w.writerow(row.cells(self.timing))
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.to_csv())

    def find(self, solver: str, **params) -> List[BenchRow]:
        out = []
        for r in self.rows:
            if r.solver != solver:
                continue
            kv = dict(item.split("=", 1) for item in r.params.split(";") if item)
            if all(kv.get(k) == str(v) for k, v in params.items()):
                out.append(r)
        return out


def read_report(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Average PSNR per (solver, params) with failed and exact rows excluded.

    ``rows`` are CSV dictionaries (see :func:`read_report`), so the summary is
    reproducible from the report alone.
    """
    groups: Dict[tuple, list] = {}
    for r in rows:
        groups.setdefault((r["solver"], r["params"]), []).append(r)
    out = []
    for (solver, params), rs in sorted(groups.items()):
        vals = [float(r["psnr_db"]) for r in rs if r["psnr_db"] not in ("FAIL", "inf")]
        out.append({
            "solver": solver,
            "params": params,
            "rows": len(rs),
            "failed": sum(r["psnr_db"] == "FAIL" for r in rs),
            "exact": sum(r["exact"] == "true" for r in rs),
            "mean_psnr_db_excluding_failed_and_exact": (
                f"{np.mean(vals):.6f}" if vals else ""),
        })
    return out


def best_method_counts(rows: Sequence[dict], group_key=lambda params: params.split(";")[0]):
    """How often each (solver, params) has the top PSNR for an image and ratio.

    ``group_key`` extracts the comparison group from the params text; by
    default the leading ``ratio=...`` entry.
    """
    best: Dict[tuple, tuple] = {}
    for r in rows:
        if r["psnr_db"] == "FAIL":
            continue
        val = math.inf if r["psnr_db"] == "inf" else float(r["psnr_db"])
        g = (r["image"], group_key(r["params"]))
        if g not in best or val > best[g][0]:
            best[g] = (val, (r["solver"], r["params"]))
    counts: Dict[tuple, int] = {}
    for _, who in best.values():
        counts[who] = counts.get(who, 0) + 1
    return counts


# --- runner -------------------------------------------------------------------

def _load_input(item: str, spec: ExperimentSpec):
    if item == "phantom":
        ph = spec.phantom
        frame = gen_phantom_rf(int(ph["M"]), int(ph["L"]), int(ph["n_scatterers"]),
                               float(ph["pulse_cycles"]), float(ph["center_freq_fraction"]),
                               int(ph["seed"]))
        return f"phantom-s{int(ph['seed'])}", frame
    return Path(item).stem, read_frame(item)


def _reference_image(frame: RfFrame, spec: ExperimentSpec):
    coeffs = dct_line(frame.samples)
    domain = "dct-of-rf" if spec.psnr_domain == "bmode" else "dct-of-display"
    return reconstruct_frame(coeffs, domain), coeffs, domain


def run_benchmark(spec: ExperimentSpec, threads: int = 1, log=None) -> BenchReport:
    """Sense every input at every ratio, run every solver, score PSNR.

    Timing covers the recovery stage only.  A solver error on a column group
    zeroes that group and marks the row failed; the sweep carries on.
    """
    rows = []
    for item in spec.inputs:
        image_id, frame = _load_input(item, spec)
        ref_img, coeffs, eval_domain = _reference_image(frame, spec)
        M = frame.n_samples
        for ratio in spec.subsampling:
            N = ratio_to_measurements(M, ratio)
            A = make_gaussian_operator(N, M, spec.seed)
            meas = sense_frame(frame, A, domain=spec.domain)
            for run in spec.solvers:
                params = dict(run.params)
                X, info = recover_coefficients(meas.Y, A, run.solver, params, coeffs, threads)
                img = reconstruct_frame(X, eval_domain)
                score = psnr(img, ref_img)
                text = ";".join([f"ratio={ratio}"] + ([run.param_text()] if run.params else []))
                row = BenchRow(image_id, run.solver, text, score, info["runtime"],
                               info["iterations"], info["converged"], info["failed"])
                if log is not None:
                    log(f"{image_id} {run.solver} {text} psnr={score} t={info['runtime']:.2f}s")
                rows.append(row)
    rows.sort(key=BenchRow.key)
    return BenchReport(rows, timing=spec.timing)
