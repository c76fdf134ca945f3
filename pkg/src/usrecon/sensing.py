"""Seeded Gaussian sensing operators and line-wise compressive acquisition."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .core import BModeImage, DimensionError, InputError, RfFrame, _as_finite
from .transforms import EnvelopeParams, dct_line, idct_line, rescale_unit, to_bmode

# Generator version: numpy PCG64 seeded via SeedSequence(seed), standard normal
# draws (ziggurat) in C order, divided by sqrt(N).
GENERATOR = "pcg64-ziggurat-v1"
SCHEMES = {"gaussian-inv-n": 1}
DOMAINS = {"dct-of-rf": 1, "dct-of-display": 2}


@dataclass(frozen=True, eq=False)
class SensingOperator:
    matrix: np.ndarray
    seed: int
    scheme: str = "gaussian-inv-n"

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise DimensionError("sensing matrix must be 2-D")
        N, M = m.shape
        if not 1 <= N <= M:
            raise DimensionError(f"need 1 <= N <= M, got N={N}, M={M}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self):
        return self.matrix.shape

    @property
    def ref(self):
        N, M = self.shape
        return (N, M, self.seed, self.scheme)

    def __eq__(self, other):
        if not isinstance(other, SensingOperator):
            return NotImplemented
        return self.ref == other.ref and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.ref)


def make_gaussian_operator(N: int, M: int, seed: int) -> SensingOperator:
    """``N x M`` matrix of i.i.d. ``N(0, 1/N)`` entries, reproducible from ``seed``."""
    if N < 1 or M < 1:
        raise DimensionError(f"N and M must be positive (N={N}, M={M})")
    if N > M:
        raise DimensionError(f"N={N} exceeds M={M}")
    if seed < 0:
        raise ValueError("seed must be unsigned")
    rng = np.random.Generator(np.random.PCG64(seed))
    A = rng.standard_normal((N, M)) / np.sqrt(N)
    return SensingOperator(A, seed=seed)


def identity_operator(M: int) -> SensingOperator:
    return SensingOperator(np.eye(M), seed=0, scheme="gaussian-inv-n")


@dataclass(frozen=True, eq=False)
class Measurements:
    Y: np.ndarray
    operator_ref: tuple
    domain: str = "dct-of-rf"

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise InputError(f"unknown domain {self.domain!r}")
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != self.operator_ref[0]:
            raise DimensionError(f"Y shape {Y.shape} inconsistent with operator {self.operator_ref}")
        object.__setattr__(self, "Y", Y)

    def operator(self) -> SensingOperator:
        N, M, seed, scheme = self.operator_ref
        if scheme != "gaussian-inv-n":
            raise InputError(f"cannot regenerate scheme {scheme!r}")
        return make_gaussian_operator(N, M, seed)


def sense_frame(
    frame: RfFrame,
    A: SensingOperator,
    domain: str = "dct-of-rf",
    noise_std: float = 0.0,
    noise_seed: Optional[int] = None,
) -> Measurements:
    """Apply ``A`` to the DCT of every line of ``frame``.

    Noise is off by default; ``noise_std > 0`` adds seeded white Gaussian noise.
    """
    N, M = A.shape
    if frame.n_samples != M:
        raise DimensionError(f"operator expects M={M}, frame has {frame.n_samples} samples")
    Y = A.matrix @ dct_line(frame.samples)
    if noise_std > 0:
        rng = np.random.default_rng(noise_seed)
        Y = Y + noise_std * rng.standard_normal(Y.shape)
    return Measurements(Y, A.ref, domain)


def inverse_dct_frame(estimates) -> RfFrame:
    est = _as_finite(estimates, "coefficient estimates")
    if est.ndim == 1:
        est = est[:, None]
    return RfFrame(idct_line(est))


def reconstruct_frame(estimates, domain: str, params: EnvelopeParams = EnvelopeParams()) -> BModeImage:
    """Map recovered DCT coefficients to the image PSNR is evaluated on."""
    frame = inverse_dct_frame(estimates)
    if domain == "dct-of-rf":
        return to_bmode(frame, params)
    if domain == "dct-of-display":
        return BModeImage(rescale_unit(frame.samples))
    raise InputError(f"unknown domain {domain!r}")


# --- Measurements file ----------------------------------------------------

CSM_MAGIC = b"CSM1"
_CSM_HEADER = struct.Struct("<4sIIIIII")


def write_measurements(path, meas: Measurements) -> None:
    N, M, seed, scheme = meas.operator_ref
    L = meas.Y.shape[1]
    with open(Path(path), "wb") as fh:
        fh.write(_CSM_HEADER.pack(CSM_MAGIC, N, M, L, seed, SCHEMES[scheme], DOMAINS[meas.domain]))
        fh.write(np.asarray(meas.Y, dtype="<f8").tobytes(order="F"))


def read_measurements(path) -> Measurements:
    raw = Path(path).read_bytes()
    if len(raw) < _CSM_HEADER.size:
        raise InputError(f"{path}: truncated header")
    magic, N, M, L, seed, scheme_id, domain_id = _CSM_HEADER.unpack_from(raw)
    if magic != CSM_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    scheme = {v: k for k, v in SCHEMES.items()}.get(scheme_id)
    domain = {v: k for k, v in DOMAINS.items()}.get(domain_id)
    if scheme is None or domain is None:
        raise InputError(f"{path}: unknown scheme/domain id ({scheme_id}, {domain_id})")
    body = raw[_CSM_HEADER.size:]
    if len(body) != 8 * N * L:
        raise InputError(f"{path}: expected {N * L} values, found {len(body) // 8}")
    Y = np.frombuffer(body, dtype="<f8").reshape((N, L), order="F")
    return Measurements(Y.copy(), (N, M, seed, scheme), domain)
