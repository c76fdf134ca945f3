"""Per-line DCT, analytic-signal envelope and B-mode image formation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.fft
import scipy.signal

from .core import BModeImage, InputError, RangeError, RfFrame, _as_finite

LOG_FLOOR_REL = 1e-12


@dataclass(frozen=True)
class EnvelopeParams:
    """B-mode formation settings.

    ``log_floor_rel`` is the floor added before the logarithm, relative to the
    largest envelope value of the image, so the result is scale invariant.
    """

    log_floor_rel: float = LOG_FLOOR_REL
    dynamic_range: str = "minmax-rescale"

    def __post_init__(self):
        if not self.log_floor_rel > 0:
            raise RangeError("log floor must be positive")
        if self.dynamic_range != "minmax-rescale":
            raise RangeError(f"unknown dynamic range handling {self.dynamic_range!r}")


def dct_line(x) -> np.ndarray:
    """Orthonormal DCT-II of a real vector (or of every column of a matrix)."""
    x = _as_finite(x, "dct input")
    if x.shape[0] < 1:
        raise InputError("empty input")
    return scipy.fft.dct(x, type=2, norm="ortho", axis=0)


def idct_line(c) -> np.ndarray:
    """Inverse of :func:`dct_line`."""
    c = _as_finite(c, "idct input")
    if c.shape[0] < 1:
        raise InputError("empty input")
    return scipy.fft.idct(c, type=2, norm="ortho", axis=0)


def hilbert_envelope(x) -> np.ndarray:
    """Magnitude of the analytic signal, column-wise for 2-D input."""
    x = _as_finite(x, "envelope input")
    if x.shape[0] < 2:
        raise InputError("envelope detection needs at least 2 samples")
    return np.abs(scipy.signal.hilbert(x, axis=0))


CONSTANT_RTOL = 1e-10


def rescale_unit(img: np.ndarray) -> np.ndarray:
    """Global min-max rescale to [0, 1]; constant images map to zeros.

    A spread below ``CONSTANT_RTOL`` of the magnitude is roundoff and counts
    as constant.
    """
    lo, hi = img.min(), img.max()
    if not hi - lo > CONSTANT_RTOL * max(1.0, abs(lo), abs(hi)):
        return np.zeros_like(img, dtype=float)
    out = (img - lo) / (hi - lo)
    return np.clip(out, 0.0, 1.0)


def log_compress(envelope: np.ndarray, params: EnvelopeParams = EnvelopeParams()) -> np.ndarray:
    peak = envelope.max()
    if not peak > 0:
        return np.zeros_like(envelope)
    return 20.0 * np.log10(envelope + params.log_floor_rel * peak)


def to_bmode(frame: RfFrame, params: EnvelopeParams = EnvelopeParams()) -> BModeImage:
    """Envelope-detect, log-compress and rescale an RF frame for display."""
    env = hilbert_envelope(frame.samples)
    return BModeImage(rescale_unit(log_compress(env, params)))


def write_pgm(path, image: BModeImage) -> None:
    """8-bit binary PGM (P5); ``.csv`` suffix writes raw [0,1] values instead."""
    path = Path(path)
    px = image.pixels
    if path.suffix.lower() == ".csv":
        np.savetxt(path, px, delimiter=",", fmt="%.17g")
        return
    h, w = px.shape
    data = np.floor(255.0 * px + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes(order="C"))


def read_image(path) -> BModeImage:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return BModeImage(np.loadtxt(path, delimiter=",", ndmin=2))
    raw = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise InputError(f"{path}: 16-bit PGM is not supported")
    body = raw[pos + 1:pos + 1 + w * h]
    if len(body) != w * h:
        raise InputError(f"{path}: truncated pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w) / float(maxval)
    return BModeImage(pixels)
