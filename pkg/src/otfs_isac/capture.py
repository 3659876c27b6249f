"""Offline IQ captures: file I/O, preamble correlation and frame segmentation.

Frames in a capture are each preceded by a known constant-modulus
preamble. Detection correlates the capture against the preamble and keeps
peaks above a constant false-alarm-rate threshold derived from the
Rayleigh distribution of the correlation magnitude under noise.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from os import PathLike
from typing import Sequence

import numpy as np

from .modem import TimeSignal

__all__ = [
    "Capture",
    "FrameIndex",
    "CaptureWarning",
    "read_capture",
    "write_capture",
    "generate_preamble",
    "correlate",
    "rayleigh_scale",
    "cfar_threshold",
    "detect_frames",
    "segment_frames",
    "synthesize_capture",
]

FORMATS = ("f32iq", "csv")


class CaptureWarning(UserWarning):
    pass


@dataclass
class Capture:
    samples: np.ndarray
    sample_rate: float = 1.0
    format: str = "f32iq"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("capture contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.size


@dataclass
class FrameIndex:
    start_indices: list[int] = field(default_factory=list)
    correlation_peaks: list[float] = field(default_factory=list)
    threshold: float = 0.0

    def __len__(self) -> int:
        return len(self.start_indices)


def read_capture(path: str | PathLike, format: str = "f32iq", sample_rate: float = 1.0) -> Capture:
    """Load a capture.

    ``"f32iq"`` is interleaved little-endian float32 ``I, Q`` pairs;
    ``"csv"`` has one ``re,im`` pair per line (an optional non-numeric
    header line and ``#`` comments are skipped).
    """
    if format == "f32iq":
        raw = np.fromfile(path, dtype="<f4")
        if raw.size % 2:
            raise ValueError(f"{path}: truncated IQ file ({raw.size} floats, expected pairs)")
        samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    elif format == "csv":
        rows = []
        with open(path, newline="") as fh:
            for i, rec in enumerate(csv.reader(fh)):
                if not rec or rec[0].lstrip().startswith("#"):
                    continue
                try:
                    re_, im_ = float(rec[0]), float(rec[1])
                except (ValueError, IndexError):
                    if i == 0:
                        continue
                    raise ValueError(f"{path}: bad IQ row {i + 1}: {rec}") from None
                rows.append(complex(re_, im_))
        samples = np.array(rows, dtype=complex)
    else:
        raise ValueError(f"unknown capture format {format!r}; expected one of {FORMATS}")
    return Capture(samples=samples, sample_rate=sample_rate, format=format)


def write_capture(path: str | PathLike, cap: Capture | np.ndarray, format: str = "f32iq") -> None:
    samples = cap.samples if isinstance(cap, Capture) else np.asarray(cap, dtype=complex)
    if format == "f32iq":
        inter = np.empty(2 * samples.size, dtype="<f4")
        inter[0::2] = samples.real
        inter[1::2] = samples.imag
        inter.tofile(path)
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            for z in samples:
                w.writerow([repr(float(z.real)), repr(float(z.imag))])
    else:
        raise ValueError(f"unknown capture format {format!r}; expected one of {FORMATS}")


def generate_preamble(length: int, seed: int = 0) -> np.ndarray:
    """Unit-modulus sequence with independent uniform phases."""
    if length < 1:
        raise ValueError("preamble length must be positive")
    rng = np.random.default_rng(seed)
    return np.exp(2j * np.pi * rng.random(length))


def correlate(x: np.ndarray, preamble: np.ndarray, chunk: int = 1 << 18) -> np.ndarray:
    """Normalised correlation magnitude ``|sum_k x[n+k] conj(p[k])| / |p|`` for every full lag.

    Computed by overlap-save FFT blocks of ``chunk`` output lags.
    """
    x = np.asarray(x, dtype=complex)
    p = np.asarray(preamble, dtype=complex)
    L = p.size
    n_lags = x.size - L + 1
    if n_lags <= 0:
        return np.zeros(0)
    chunk = max(int(chunk), 1)
    nfft = 1 << int(math.ceil(math.log2(chunk + L - 1)))
    P = np.conj(np.fft.fft(p, nfft))
    out = np.empty(n_lags)
    norm = np.linalg.norm(p)
    for start in range(0, n_lags, chunk):
        stop = min(start + chunk, n_lags)
        seg = x[start:stop + L - 1]
        c = np.fft.ifft(np.fft.fft(seg, nfft) * P)[:stop - start]
        out[start:stop] = np.abs(c) / norm
    return out


def rayleigh_scale(corr: np.ndarray) -> float:
    """Robust Rayleigh scale from the median: ``median / sqrt(2 ln 2)``."""
    corr = np.asarray(corr, dtype=float)
    if corr.size == 0:
        return 0.0
    return float(np.median(corr) / math.sqrt(2 * math.log(2)))


def cfar_threshold(corr: np.ndarray, p_fa: float) -> float:
    """Level exceeded by Rayleigh noise with probability ``p_fa``."""
    if not 0 < p_fa < 1:
        raise ValueError("p_fa must lie in (0, 1)")
    return rayleigh_scale(corr) * math.sqrt(-2 * math.log(p_fa))


def detect_frames(cap: Capture, preamble: np.ndarray, p_fa: float = 1e-5,
                  min_separation: int | None = None) -> FrameIndex:
    """Preamble start offsets whose correlation clears the CFAR threshold.

    Peaks are taken greedily from the strongest down; any peak within
    ``min_separation`` lags (default: the preamble length) of an accepted
    one is suppressed.
    """
    if not 0 < p_fa < 1:
        raise ValueError("p_fa must lie in (0, 1)")
    preamble = np.asarray(preamble)
    if len(cap) == 0:
        return FrameIndex(threshold=0.0)
    if preamble.size > len(cap):
        raise ValueError(f"preamble ({preamble.size}) longer than capture ({len(cap)})")
    corr = correlate(cap.samples, preamble)
    threshold = cfar_threshold(corr, p_fa)
    sep = preamble.size if min_separation is None else int(min_separation)
    cand = np.flatnonzero(corr > threshold)
    order = cand[np.argsort(-corr[cand], kind="stable")]
    taken: list[int] = []
    for n in order:
        if all(abs(int(n) - t) >= sep for t in taken):
            taken.append(int(n))
    taken.sort()
    return FrameIndex(start_indices=taken, correlation_peaks=[float(corr[n]) for n in taken],
                      threshold=threshold)


def segment_frames(cap: Capture, idx: FrameIndex, frame_len: int, preamble_len: int,
                   cp_len: int = 0) -> list[TimeSignal]:
    """Cut ``frame_len`` samples following each detected preamble.

    Frames that run past the end of the capture are dropped with a
    :class:`CaptureWarning`.
    """
    out = []
    for start in idx.start_indices:
        a = start + preamble_len
        b = a + frame_len
        if b > len(cap):
            warnings.warn(f"dropping truncated frame at offset {start} "
                          f"({len(cap) - a} of {frame_len} samples)", CaptureWarning, stacklevel=2)
            continue
        out.append(TimeSignal(samples=cap.samples[a:b].copy(), sample_rate=cap.sample_rate,
                              cp_len=cp_len, meta={"preamble_start": start}))
    return out


def synthesize_capture(frames: Sequence[np.ndarray], preamble: np.ndarray, snr_db: float,
                       seed=None, gap: tuple[int, int] = (100, 1000), lead: int | None = None,
                       phase: float | None = None, sample_rate: float = 1.0):
    """Embed ``preamble + frame`` blocks in noise.

    Gaps between blocks are drawn uniformly from ``gap``. Noise power is
    ``10**(-snr_db/10)`` relative to the unit-modulus preamble. Returns the
    capture and the true preamble start offsets.
    """
    rng = np.random.default_rng(seed)
    preamble = np.asarray(preamble, dtype=complex)
    pieces, starts, pos = [], [], 0
    first = int(rng.integers(*gap)) if lead is None else int(lead)
    pieces.append(np.zeros(first, dtype=complex))
    pos = first
    for f in frames:
        starts.append(pos)
        block = np.concatenate([preamble, np.asarray(f, dtype=complex)])
        pieces.append(block)
        pos += block.size
        g = int(rng.integers(*gap))
        pieces.append(np.zeros(g, dtype=complex))
        pos += g
    x = np.concatenate(pieces)
    rot = np.exp(2j * np.pi * rng.random()) if phase is None else np.exp(1j * phase)
    sigma = math.sqrt(10 ** (-snr_db / 10) / 2)
    x = rot * x + sigma * (rng.standard_normal(x.size) + 1j * rng.standard_normal(x.size))
    return Capture(samples=x, sample_rate=sample_rate), starts
