"""Domain types, problem containers and dimension arithmetic.

Element order convention: every frame and coefficient matrix is stored as an
``(M, L)`` array whose column ``j`` is scan line ``j``. File formats serialise
line-major (line 0's ``M`` samples first), i.e. Fortran order of the array.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

UINT64_MAX = 2**64 - 1

RatioLike = Union[Fraction, int, str, float]


class DimensionError(ValueError):
    """Raised when array or partition dimensions are inconsistent."""


class InputError(ValueError):
    """Raised for malformed numerical input (non-finite values, too short, ...)."""


class RangeError(ValueError):
    """Raised when a scalar parameter lies outside its admissible range."""


class ConditioningError(np.linalg.LinAlgError):
    """Raised when a linear system is numerically singular.

    ``index`` carries the position at which the factorisation broke down
    (leading minor order, or the offending block), when known.
    """

    def __init__(self, message: str, index: Optional[int] = None):
        super().__init__(message)
        self.index = index


class ScaleError(ValueError):
    """Raised when a brute-force routine is asked to run beyond its guard."""


def _as_finite(a, name="array"):
    arr = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True, eq=False)
class RfFrame:
    """Real ``M x L`` RF sample matrix, one scan line per column."""

    samples: np.ndarray
    meta: str = ""

    def __post_init__(self):
        s = _as_finite(self.samples, "RfFrame samples")
        if s.ndim == 1:
            s = s[:, None]
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise DimensionError(f"RfFrame needs a non-empty 2-D array, got shape {s.shape}")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def shape(self):
        return self.samples.shape

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_lines(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True, eq=False)
class BModeImage:
    """Display image with pixel values in ``[0, 1]``."""

    pixels: np.ndarray

    def __post_init__(self):
        p = _as_finite(self.pixels, "BModeImage pixels")
        if p.ndim != 2:
            raise DimensionError(f"BModeImage needs a 2-D array, got shape {p.shape}")
        if p.size and (p.min() < 0.0 or p.max() > 1.0):
            raise RangeError("BModeImage pixels must lie in [0, 1]")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def shape(self):
        return self.pixels.shape


@dataclass(frozen=True)
class BlockPartition:
    block_len: int
    num_blocks: int

    @property
    def size(self) -> int:
        return self.block_len * self.num_blocks

    def block(self, i: int) -> slice:
        return slice(i * self.block_len, (i + 1) * self.block_len)

    def indices(self, blocks) -> np.ndarray:
        """Coefficient indices covered by the given block numbers, ascending."""
        blocks = np.asarray(sorted(blocks), dtype=int)
        d = self.block_len
        return (blocks[:, None] * d + np.arange(d)[None, :]).ravel()


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 400
    tol: float = 1e-8
    prune_threshold: float = 1e-8
    p: float = 0.99
    column_block_size: int = 1
    support_prior: Optional[tuple] = None
    learn_intra_corr: bool = True
    learn_inter_corr: bool = True
    record_trace: bool = False

    def __post_init__(self):
        if self.max_iters < 1:
            raise RangeError(f"max_iters must be positive, got {self.max_iters}")
        if not self.tol > 0:
            raise RangeError(f"tol must be positive, got {self.tol}")
        if not self.prune_threshold >= 0:
            raise RangeError(f"prune_threshold must be >= 0, got {self.prune_threshold}")
        if not 0 < self.p <= 1:
            raise RangeError(f"p must lie in (0, 1], got {self.p}")
        if self.column_block_size < 1:
            raise RangeError(f"column_block_size must be positive, got {self.column_block_size}")
        if self.support_prior is not None:
            object.__setattr__(self, "support_prior", tuple(int(i) for i in self.support_prior))


@dataclass(frozen=True, eq=False)
class SmvProblem:
    """Single measurement vector problem ``y = A x + v``."""

    y: np.ndarray
    A: "object"
    noise_var: float = 1e-8

    def __post_init__(self):
        y = _as_finite(self.y, "y").ravel()
        if y.shape[0] != _matrix_of(self.A).shape[0]:
            raise DimensionError(
                f"length(y)={y.shape[0]} does not match N={_matrix_of(self.A).shape[0]}"
            )
        if self.noise_var < 0:
            raise RangeError(f"noise variance must be >= 0, got {self.noise_var}")
        object.__setattr__(self, "y", y)

    @property
    def matrix(self) -> np.ndarray:
        return _matrix_of(self.A)


@dataclass(frozen=True, eq=False)
class MmvProblem:
    """Multiple measurement vector problem ``Y = A X + V``."""

    Y: np.ndarray
    A: "object"
    noise_var: float = 1e-8

    def __post_init__(self):
        Y = _as_finite(self.Y, "Y")
        if Y.ndim == 1:
            Y = Y[:, None]
        if Y.ndim != 2 or Y.shape[0] != _matrix_of(self.A).shape[0]:
            raise DimensionError(
                f"Y of shape {Y.shape} does not match N={_matrix_of(self.A).shape[0]}"
            )
        if self.noise_var < 0:
            raise RangeError(f"noise variance must be >= 0, got {self.noise_var}")
        object.__setattr__(self, "Y", Y)

    @property
    def matrix(self) -> np.ndarray:
        return _matrix_of(self.A)

    def column(self, j: int) -> SmvProblem:
        return SmvProblem(self.Y[:, j], self.A, self.noise_var)


def _matrix_of(A) -> np.ndarray:
    return A.matrix if hasattr(A, "matrix") else np.asarray(A, dtype=float)


@dataclass
class RecoveryResult:
    estimate: np.ndarray
    iterations: int
    converged: bool
    runtime_seconds: float = 0.0
    active_blocks: Optional[np.ndarray] = None
    diagnostics: dict = field(default_factory=dict)


def make_block_partition(M: int, d: int) -> BlockPartition:
    """Split ``M`` coefficients into ``M // d`` contiguous blocks of length ``d``."""
    if M < 1 or d < 1:
        raise DimensionError(f"M and d must be positive (M={M}, d={d})")
    if M % d:
        raise DimensionError(f"block length d={d} does not divide M={M}")
    return BlockPartition(block_len=d, num_blocks=M // d)


def as_ratio(ratio: RatioLike) -> Fraction:
    """Parse ``ratio`` as an exact rational; floats go through their repr."""
    if isinstance(ratio, float):
        return Fraction(repr(ratio))
    return Fraction(ratio)


def ratio_to_measurements(M: int, ratio: RatioLike) -> int:
    """Number of measurements for a subsampling ratio, rounded half up.

    >>> ratio_to_measurements(512, Fraction(1, 3))
    171
    """
    r = as_ratio(ratio)
    if not 0 < r <= 1:
        raise RangeError(f"subsampling ratio must lie in (0, 1], got {r}")
    n = math.floor(r * M + Fraction(1, 2))
    return min(max(n, 1), M)


def search_space_size(M: int, k: int) -> int:
    """Count of supports of size at most ``k`` among ``M`` indices."""
    if k < 0 or k > M:
        raise RangeError(f"need 0 <= k <= M, got k={k}, M={M}")
    total = sum(math.comb(M, j) for j in range(k + 1))
    if total > UINT64_MAX:
        raise OverflowError(f"search space for M={M}, k={k} exceeds 64 bits")
    return total


# --- RfFrame file formats -------------------------------------------------

RFF_MAGIC = b"RFF1"
_RFF_HEADER = struct.Struct("<4sIII")


def write_frame(path, frame: RfFrame) -> None:
    """Write ``frame`` as binary RFF1 or, for a ``.csv`` suffix, plain CSV."""
    path = Path(path)
    s = frame.samples
    if path.suffix.lower() == ".csv":
        np.savetxt(path, s, delimiter=",", fmt="%.17g")
        return
    M, L = s.shape
    with open(path, "wb") as fh:
        fh.write(_RFF_HEADER.pack(RFF_MAGIC, M, L, 0))
        fh.write(np.asarray(s, dtype="<f8").tobytes(order="F"))


def read_frame(path) -> RfFrame:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        data = np.loadtxt(path, delimiter=",", ndmin=2)
        return RfFrame(data, meta=str(path))
    raw = path.read_bytes()
    if len(raw) < _RFF_HEADER.size:
        raise InputError(f"{path}: truncated RFF header")
    magic, M, L, reserved = _RFF_HEADER.unpack_from(raw)
    if magic != RFF_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if reserved != 0:
        raise InputError(f"{path}: reserved header bytes are not zero")
    body = raw[_RFF_HEADER.size:]
    if len(body) != 8 * M * L:
        raise InputError(f"{path}: expected {M * L} samples, found {len(body) // 8}")
    data = np.frombuffer(body, dtype="<f8").reshape((M, L), order="F")
    return RfFrame(data, meta=str(path))


def check_divides(L: int, Lp: int) -> None:
    if Lp < 1 or L % Lp:
        raise DimensionError(f"column block size {Lp} does not divide L={L}")


def support_indices(support: Optional[Sequence[int]], M: int) -> np.ndarray:
    if support is None:
        return np.zeros(0, dtype=int)
    s = np.unique(np.asarray(support, dtype=int))
    if s.size and (s[0] < 0 or s[-1] >= M):
        raise RangeError(f"support indices must lie in [0, {M})")
    return s
